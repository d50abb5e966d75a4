"""Tensor core: invariants, graph semantics, and the binary file format."""

import io

import numpy as np
import pytest

from hsadapt.tensor import NonFiniteError, Tensor, load_tensor, read_array, save_tensor, write_array


class TestTensorBasics:
    def test_row_major_contiguous(self):
        t = Tensor(np.asfortranarray(np.arange(6.0).reshape(2, 3)))
        assert t.data.flags["C_CONTIGUOUS"]

    def test_value_count_matches_shape(self):
        t = Tensor(np.zeros((2, 3, 4), dtype=np.float32))
        assert t.size == 24
        assert t.shape == (2, 3, 4)

    def test_non_float_input_becomes_float32(self):
        t = Tensor([1, 2, 3])
        assert t.dtype == np.float32

    def test_grad_matches_shape_and_dtype(self):
        t = Tensor(np.ones((3, 2), dtype=np.float64), requires_grad=True)
        (t * 2.0).sum().backward()
        assert t.grad.shape == t.data.shape
        assert t.grad.dtype == t.data.dtype

    def test_mixed_dtype_op_rejected(self):
        a = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        b = Tensor(np.ones(3, dtype=np.float64), requires_grad=True)
        with pytest.raises(ValueError, match="mixed dtypes"):
            a + b

    def test_non_finite_result_raises(self):
        big = Tensor(np.array([1e308], dtype=np.float64), requires_grad=True)
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            big + big

    def test_item_requires_scalar(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros(2)).item()


class TestBackwardGraph:
    def test_simple_chain(self):
        x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
        y = (x * x).sum()
        y.backward()
        np.testing.assert_allclose(x.grad, [4.0, -6.0])

    def test_shared_node_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * 2.0
        z = (y + y).sum()
        z.backward()
        np.testing.assert_allclose(x.grad, [4.0])

    def test_backward_twice_is_an_error(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = (x * 2.0).sum()
        y.backward()
        with pytest.raises(RuntimeError, match="already ran"):
            y.backward()

    def test_backward_without_grad_is_an_error(self):
        x = Tensor(np.array([1.0]))
        with pytest.raises(RuntimeError):
            ((x * 2.0).sum()).backward()

    def test_rerunning_forward_resets_the_graph(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * 3.0).sum().backward()
        x.zero_grad()
        (x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, [3.0, 3.0])

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 5))
        x1 = Tensor(a.copy()) * 1.7 + Tensor(a.copy())
        x2 = Tensor(a.copy()) * 1.7 + Tensor(a.copy())
        assert (x1.data == x2.data).all()


class TestTensorFileFormat:
    """magic SPAT, u8 version/dtype/rank, u64 extents, raw row-major values."""

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_bit_exact_roundtrip(self, tmp_path, dtype):
        rng = np.random.default_rng(7)
        arr = rng.standard_normal((3, 4, 5)).astype(dtype)
        path = tmp_path / "t.spat"
        save_tensor(path, arr)
        back = load_tensor(path)
        assert back.dtype == arr.dtype
        assert back.shape == arr.shape
        assert (back.view(np.uint8) == arr.view(np.uint8)).all()

    def test_header_layout(self):
        buf = io.BytesIO()
        write_array(buf, np.zeros((2, 3), dtype=np.float32))
        raw = buf.getvalue()
        assert raw[:4] == b"SPAT"
        assert raw[4] == 1  # version
        assert raw[5] == 1  # float32 code
        assert raw[6] == 2  # rank
        assert int.from_bytes(raw[7:15], "little") == 2
        assert int.from_bytes(raw[15:23], "little") == 3

    def test_float64_dtype_code(self):
        buf = io.BytesIO()
        write_array(buf, np.zeros(1, dtype=np.float64))
        assert buf.getvalue()[5] == 2

    def test_scalar_rank_zero(self):
        buf = io.BytesIO()
        write_array(buf, np.asarray(2.5, dtype=np.float64))
        buf.seek(0)
        back = read_array(buf)
        assert back.shape == ()
        assert back == 2.5

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError, match="magic"):
            read_array(io.BytesIO(b"NOPE" + b"\0" * 16))

    def test_truncated_payload_rejected(self):
        buf = io.BytesIO()
        write_array(buf, np.ones(8, dtype=np.float32))
        raw = buf.getvalue()[:-4]
        with pytest.raises(ValueError, match="truncated"):
            read_array(io.BytesIO(raw))
