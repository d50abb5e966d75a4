"""Multi-view composition, view pooling, and the diversity penalty."""

import numpy as np
import pytest

from hsadapt import adaptors as ad
from hsadapt import multiview as mv
from hsadapt import ops
from hsadapt.backbone import Backbone
from hsadapt.gradcheck import finite_diff_check
from hsadapt.tensor import Tensor


def small_backbone(**kw):
    kw.setdefault("widths", (4, 6))
    kw.setdefault("num_classes", 5)
    kw.setdefault("dtype", np.float64)
    return Backbone(**kw)


def rand_input(seed, k=5, n=2, hw=16):
    return Tensor(np.random.default_rng(seed).random((n, k, hw, hw)))


class TestMultiViewForward:
    def test_one_view_is_bit_identical_to_plain_forward(self):
        net = small_backbone()
        adaptor = ad.SubsetAdaptor(5, indices=(4, 1, 2))
        model = mv.MultiViewModel([adaptor], net)
        x = rand_input(0)
        ours = mv.multiview_forward(model, x, "eval").data
        plain = net.forward(adaptor.apply(Tensor(x.data.copy())), "eval").data
        np.testing.assert_array_equal(ours, plain)

    def test_identical_views_collapse_to_one(self):
        net = small_backbone()
        adaptors = [ad.SubsetAdaptor(5, indices=(0, 1, 2)) for _ in range(3)]
        model = mv.MultiViewModel(adaptors, net)
        single = mv.MultiViewModel(adaptors[:1], net)
        x = rand_input(1)
        np.testing.assert_array_equal(
            mv.multiview_forward(model, x, "eval").data,
            mv.multiview_forward(single, Tensor(x.data.copy()), "eval").data,
        )

    def test_two_views_match_hand_composed_pipeline(self):
        """Oracle: gather channels and pool with raw numpy outside the model."""
        net = small_backbone()
        idx_a, idx_b = (0, 2, 4), (3, 1, 0)
        model = mv.MultiViewModel(
            [ad.SubsetAdaptor(5, indices=idx_a), ad.SubsetAdaptor(5, indices=idx_b)], net
        )
        x = rand_input(2)
        ours = mv.multiview_forward(model, x, "eval").data

        fa = net.forward_front(Tensor(x.data[:, idx_a].copy()), "eval").data
        fb = net.forward_front(Tensor(x.data[:, idx_b].copy()), "eval").data
        pooled = np.maximum(fa, fb)
        oracle = net.forward_back(Tensor(pooled), "eval").data
        assert np.abs(ours - oracle).max() <= 1e-12

    def test_view_permutation_invariance_bit_exact(self):
        net = small_backbone()
        adaptors = [ad.SubsetAdaptor(5, indices=i)
                    for i in [(0, 1, 2), (2, 3, 4), (4, 0, 3)]]
        x = rand_input(3)
        base = mv.multiview_forward(mv.MultiViewModel(adaptors, net), x, "eval").data
        for perm in [(1, 0, 2), (2, 1, 0), (1, 2, 0)]:
            shuffled = mv.MultiViewModel([adaptors[i] for i in perm], net)
            out = mv.multiview_forward(shuffled, Tensor(x.data.copy()), "eval").data
            np.testing.assert_array_equal(out, base)

    def test_permuted_views_give_permuted_gradients(self):
        net = small_backbone()
        adaptors = [ad.LinearAdaptor(5, seed=s, dtype=np.float64) for s in (1, 2)]
        x = rand_input(4)

        def grads(order):
            for a in adaptors:
                for _, t in a.named_parameters():
                    t.zero_grad()
            net.zero_grad()
            model = mv.MultiViewModel([adaptors[i] for i in order], net)
            mv.multiview_forward(model, Tensor(x.data.copy()), "eval").sum().backward()
            return [np.concatenate([t.grad.ravel() for _, t in a.named_parameters()])
                    for a in adaptors]

        fwd = grads((0, 1))
        rev = grads((1, 0))
        np.testing.assert_array_equal(fwd[0], rev[0])
        np.testing.assert_array_equal(fwd[1], rev[1])

    def test_empty_view_list_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            mv.MultiViewModel([], small_backbone())

    def test_dominant_view_wins_everywhere(self):
        """Non-negative weights make CNN1 monotone, forcing full dominance."""
        net = small_backbone(widths=(4,))
        for _, t in net.named_parameters():
            t.data = np.abs(t.data)
        strong = ad.LinearAdaptor(5, dtype=np.float64)
        weak = ad.LinearAdaptor(5, dtype=np.float64)
        eye = np.zeros((3, 5, 1, 1))
        eye[0, 0], eye[1, 1], eye[2, 2] = 1.0, 1.0, 1.0
        strong.weight.data = eye.copy()
        strong.bias.data = np.zeros(3)
        weak.weight.data = 0.5 * eye
        weak.bias.data = np.zeros(3)
        x = rand_input(5)

        fa = net.forward_front(strong.apply(Tensor(x.data.copy())), "eval").data
        fb = net.forward_front(weak.apply(Tensor(x.data.copy())), "eval").data
        assert (fa >= fb).all()

        model = mv.MultiViewModel([strong, weak], net)
        single = mv.MultiViewModel([strong], net)
        np.testing.assert_array_equal(
            mv.multiview_forward(model, Tensor(x.data.copy()), "eval").data,
            mv.multiview_forward(single, Tensor(x.data.copy()), "eval").data,
        )

    def test_adaptor_only_parameter_growth(self):
        net = small_backbone()
        one = mv.MultiViewModel([ad.LinearAdaptor(5, seed=0)], net)
        four = mv.MultiViewModel([ad.LinearAdaptor(5, seed=s) for s in range(4)], net)
        per_adaptor = sum(t.data.size for _, t in ad.LinearAdaptor(5).named_parameters())
        count = lambda m: sum(t.data.size for _, t in m.named_parameters())
        assert count(four) - count(one) == 3 * per_adaptor

    def test_mean_pooling_option(self):
        net = small_backbone()
        adaptors = [ad.SubsetAdaptor(5, indices=(0, 1, 2)),
                    ad.SubsetAdaptor(5, indices=(2, 3, 4))]
        model = mv.MultiViewModel(adaptors, net, pool_fn="mean")
        x = rand_input(6)
        fa = net.forward_front(Tensor(x.data[:, (0, 1, 2)].copy()), "eval").data
        fb = net.forward_front(Tensor(x.data[:, (2, 3, 4)].copy()), "eval").data
        oracle = net.forward_back(Tensor((fa + fb) / 2.0), "eval").data
        np.testing.assert_allclose(
            mv.multiview_forward(model, x, "eval").data, oracle, rtol=1e-12
        )

    def test_unknown_pool_rejected(self):
        with pytest.raises(ValueError, match="pool_fn"):
            mv.MultiViewModel([ad.SubsetAdaptor(5, indices=(0, 1, 2))],
                              small_backbone(), pool_fn="median")


class TestDiversityReg:
    def test_zero_views_give_zero(self):
        stacked = Tensor(np.zeros((2, 6, 4, 5)))
        r = mv.diversity_reg(stacked, mv.DiversityRegConfig())
        assert r.item() == 0.0

    def test_orthonormal_rows_return_exactly_alpha(self):
        v = np.zeros((1, 6, 4, 5))
        for i in range(6):
            v[0, i, i % 4, i % 5] = 1.0
        g = v.reshape(6, 20) @ v.reshape(6, 20).T
        np.testing.assert_array_equal(g, np.eye(6))  # construction check
        r = mv.diversity_reg(Tensor(v), mv.DiversityRegConfig(alpha=1e-2))
        assert r.item() == 0.01

    def test_matches_dense_eigensolver(self):
        rng = np.random.default_rng(7)
        stacked = Tensor(rng.standard_normal((4, 6, 4, 5)))
        cfg = mv.DiversityRegConfig(alpha=1e-2)
        r = mv.diversity_reg(stacked, cfg).item()
        expected = 0.0
        for i in range(4):
            vhat = stacked.data[i].reshape(6, 20)
            expected += np.linalg.eigvalsh(vhat @ vhat.T)[-1]
        expected *= cfg.alpha
        assert abs(r - expected) / expected < 1e-8

    def test_correlated_views_penalized_more(self):
        """A copy scaled by 2 costs more than an equal-spectrum orthogonal view.

        The orthogonal replacement is the same signal rotated into a row
        space orthogonal to the original's, so both alternatives carry
        identical singular values and the only difference is correlation.
        """
        rng = np.random.default_rng(8)
        v0 = rng.standard_normal((3, 20))
        corr = np.concatenate([v0, 2.0 * v0]).reshape(1, 6, 4, 5)

        a, s, bt = np.linalg.svd(v0, full_matrices=False)
        raw = rng.standard_normal((20, 6))
        basis = np.linalg.qr(raw - bt.T @ (bt @ raw))[0][:, :3]
        rotated = 2.0 * a @ np.diag(s) @ basis.T
        assert np.abs(rotated @ v0.T).max() < 1e-10  # row spaces orthogonal
        orth = np.concatenate([v0, rotated]).reshape(1, 6, 4, 5)

        cfg = mv.DiversityRegConfig()
        r_corr = mv.diversity_reg(Tensor(corr), cfg).item()
        r_orth = mv.diversity_reg(Tensor(orth), cfg).item()
        assert r_corr > r_orth

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(9)
        stacked = Tensor(rng.standard_normal((2, 4, 3, 3)),
                         requires_grad=True, dtype=np.float64)
        cfg = mv.DiversityRegConfig(alpha=0.5)
        report = finite_diff_check(
            lambda: mv.diversity_reg(stacked, cfg), [("stacked", stacked)], h=1e-6
        )
        assert report.max_rel_err < 1e-5, str(report)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError, match="alpha"):
            mv.DiversityRegConfig(alpha=-1.0)
        with pytest.raises(ValueError, match="p=2"):
            mv.DiversityRegConfig(p=1)

    def test_stack_views_layout(self):
        a = Tensor(np.full((2, 3, 4, 4), 1.0))
        b = Tensor(np.full((2, 3, 4, 4), 2.0))
        stacked = mv.stack_views([a, b])
        assert stacked.shape == (2, 6, 4, 4)
        np.testing.assert_array_equal(stacked.data[:, :3], 1.0)
        np.testing.assert_array_equal(stacked.data[:, 3:], 2.0)


class TestScheduleScaling:
    def test_single_view_unchanged(self):
        s = mv.Schedule(lr=1e-4, epochs=30, milestones=(7, 15))
        assert mv.scale_schedule(s, 1) == s

    def test_two_view_halves_lr_doubles_epochs(self):
        s = mv.scale_schedule(mv.Schedule(lr=1e-4, epochs=30), 2)
        assert s.lr == 5e-5
        assert s.epochs == 60

    def test_milestones_scale_proportionally(self):
        s = mv.scale_schedule(mv.Schedule(lr=1e-3, epochs=20, milestones=(7, 15)), 5)
        assert s.milestones == (35, 75)

    def test_invalid_view_count_rejected(self):
        with pytest.raises(ValueError, match="num_views"):
            mv.scale_schedule(mv.Schedule(lr=1e-3, epochs=10), 0)
