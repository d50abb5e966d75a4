"""Experiment harness: configs, training modes, benchmarks, reports."""

import dataclasses
import json

import numpy as np
import pytest

from hsadapt import dataproc as dp
from hsadapt import harness as hn
from hsadapt.adaptors import AdaptorSpec
from hsadapt.backbone import restore

TINY = {"type": "toy", "seed": 31, "classes": 4, "per_class": 8, "test_per_class": 4}
TINY_K4 = {"type": "expanded", "base": TINY, "k": 4, "centers_seed": 0}
TINY_K5 = {"type": "expanded", "base": TINY, "k": 5, "centers_seed": 0}


def tiny_pretrain_cfg(**over):
    base = dict(dataset=TINY, mode="pretrain", epochs=2, seed=0)
    base.update(over)
    return hn.ExperimentConfig(**base)


@pytest.fixture(scope="module")
def tiny_ckpt():
    return hn.pretrain(tiny_pretrain_cfg())


class TestExperimentConfig:
    def test_round_trips_through_record(self):
        cfg = hn.ExperimentConfig(
            dataset=TINY_K5, mode="finetune",
            adaptors=(AdaptorSpec("subset", 5, seed=3),
                      AdaptorSpec("linear", 5, seed=4)),
            milestones=(5, 8), epochs=10, seed=2, label="pair")
        back = hn.ExperimentConfig.from_record(json.loads(json.dumps(cfg.to_record())))
        assert back == cfg
        assert hn.config_hash(back) == hn.config_hash(cfg)

    def test_hash_changes_with_any_field(self):
        cfg = tiny_pretrain_cfg()
        assert hn.config_hash(cfg) != hn.config_hash(dataclasses.replace(cfg, seed=1))
        assert hn.config_hash(cfg) != hn.config_hash(dataclasses.replace(cfg, lr=2e-4))

    def test_scratch_forbids_adaptors(self):
        with pytest.raises(ValueError, match="forbids adaptors"):
            hn.ExperimentConfig(dataset=TINY_K5, mode="scratch",
                                adaptors=(AdaptorSpec("subset", 5),))

    def test_pretrain_forbids_adaptors(self):
        with pytest.raises(ValueError, match="forbids adaptors"):
            hn.ExperimentConfig(dataset=TINY, mode="pretrain",
                                adaptors=(AdaptorSpec("linear", 5),))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            hn.ExperimentConfig(dataset=TINY, mode="transfer")

    def test_inflate_is_single_view(self):
        with pytest.raises(ValueError, match="one view"):
            hn.ExperimentConfig(dataset=TINY_K5, mode="finetune",
                                adaptors=(AdaptorSpec("inflate", 5),
                                          AdaptorSpec("inflate", 5)))

    def test_scratch_schedule_multiplies_epochs_17x(self):
        cfg = hn.ExperimentConfig(dataset=TINY_K5, mode="scratch", epochs=3)
        assert cfg.resolved_schedule().epochs == 51

    def test_view_count_scales_schedule(self):
        cfg = hn.ExperimentConfig(
            dataset=TINY_K5, mode="finetune", epochs=4, lr=1e-3, milestones=(2,),
            adaptors=(AdaptorSpec("subset", 5, seed=0),
                      AdaptorSpec("subset", 5, seed=1)))
        sched = cfg.resolved_schedule()
        assert sched.lr == pytest.approx(5e-4)
        assert sched.epochs == 8
        assert sched.milestones == (4,)

    def test_adaptor_records_survive(self):
        rec = hn.ExperimentConfig(
            dataset=TINY_K5, mode="finetune",
            adaptors=(AdaptorSpec("subset", 5, indices=(4, 0, 2)),)).to_record()
        cfg = hn.ExperimentConfig.from_record(rec)
        assert cfg.adaptors[0].indices == (4, 0, 2)


class TestMetricsRecord:
    def test_accuracy_range_enforced(self):
        with pytest.raises(ValueError, match="outside"):
            hn.MetricsRecord(config_hash="x", mode="finetune", label="", seed=0,
                             train_loss=(1.0,), test_acc=(105.0,), final_acc=105.0,
                             epochs_run=1)

    def test_wall_time_not_part_of_identity(self):
        a = hn.MetricsRecord(config_hash="x", mode="scratch", label="", seed=0,
                             train_loss=(1.0,), test_acc=(50.0,), final_acc=50.0,
                             epochs_run=1, wall_time=1.0)
        b = dataclasses.replace(a, wall_time=99.0)
        assert a == b

    def test_round_trip(self):
        a = hn.MetricsRecord(config_hash="y", mode="finetune", label="lin", seed=1,
                             train_loss=(2.0, 1.5), test_acc=(40.0, 60.0),
                             final_acc=60.0, epochs_run=2, wall_time=3.0)
        assert hn.MetricsRecord.from_record(json.loads(json.dumps(a.to_record()))) == a


class TestPretrain:
    def test_deterministic_per_seed(self):
        a = hn.MetricsRecord.from_record(hn.pretrain(tiny_pretrain_cfg()).meta["metrics"])
        b = hn.MetricsRecord.from_record(hn.pretrain(tiny_pretrain_cfg()).meta["metrics"])
        assert a == b

    def test_zero_epochs_is_chance_level(self):
        ckpt = hn.pretrain(tiny_pretrain_cfg(epochs=0))
        acc = ckpt.meta["metrics"]["final_acc"]
        assert abs(acc - 100.0 / 4) <= 5.0 + 25.0  # wide: tiny test split

    def test_non_3_channel_rejected(self):
        with pytest.raises(ValueError, match="3-channel"):
            hn.pretrain(tiny_pretrain_cfg(dataset=TINY_K4))

    def test_checkpoint_meta_carries_config_and_metrics(self, tiny_ckpt):
        assert tiny_ckpt.meta["config"]["mode"] == "pretrain"
        rec = hn.MetricsRecord.from_record(tiny_ckpt.meta["metrics"])
        assert rec.config_hash == tiny_ckpt.meta["config_hash"]
        assert len(rec.train_loss) == 2

    def test_loss_decreases_on_easy_data(self):
        cfg = tiny_pretrain_cfg(epochs=4, lr=1e-3)
        m = hn.pretrain(cfg).meta["metrics"]
        assert m["train_loss"][-1] < m["train_loss"][0]


class TestFinetune:
    def make_cfg(self, **over):
        base = dict(dataset=TINY_K5, mode="finetune", epochs=1, seed=0,
                    adaptors=(AdaptorSpec("subset", 5, seed=1),))
        base.update(over)
        return hn.ExperimentConfig(**base)

    def test_runs_and_reports(self, tiny_ckpt):
        rec = hn.finetune(self.make_cfg(), tiny_ckpt)
        assert rec.epochs_run == 1
        assert len(rec.test_acc) == 1
        assert 0.0 <= rec.final_acc <= 100.0
        assert rec.config_hash == hn.config_hash(self.make_cfg())

    def test_deterministic_per_seed(self, tiny_ckpt):
        a = hn.finetune(self.make_cfg(), tiny_ckpt)
        b = hn.finetune(self.make_cfg(), tiny_ckpt)
        assert a == b

    def test_wrong_mode_rejected(self, tiny_ckpt):
        with pytest.raises(ValueError, match="finetune"):
            hn.finetune(tiny_pretrain_cfg(), tiny_ckpt)

    def test_channel_contract_enforced(self, tiny_ckpt):
        cfg = self.make_cfg(dataset=TINY_K4)  # adaptor says 5, dataset has 4
        with pytest.raises(ValueError, match="channels"):
            hn.finetune(cfg, tiny_ckpt)

    def test_adaptorless_needs_3_channels(self, tiny_ckpt):
        cfg = self.make_cfg(adaptors=())
        with pytest.raises(ValueError, match="adaptor is required"):
            hn.finetune(cfg, tiny_ckpt)

    def test_adaptorless_on_3_channels_runs(self, tiny_ckpt):
        cfg = self.make_cfg(dataset=TINY, adaptors=())
        rec = hn.finetune(cfg, tiny_ckpt)
        assert rec.epochs_run == 1

    def test_multiplier_moves_adaptor_weights_farther(self, tiny_ckpt):
        """lr x10 on the adaptor drags it farther from init than x1."""
        from hsadapt.adaptors import LinearAdaptor

        init = LinearAdaptor(5, seed=1).weight.data.copy()
        dist = {}
        for mult in (1.0, 10.0):
            cfg = self.make_cfg(adaptors=(AdaptorSpec("linear", 5, seed=1),),
                                adaptor_lr_multiplier=mult, epochs=2)
            _, model = hn.finetune(cfg, tiny_ckpt, return_model=True)
            trained = model.adaptors[0].weight.data
            dist[mult] = float(np.linalg.norm(trained - init))
        assert dist[10.0] > dist[1.0]

    def test_head_only_runs_at_chance_or_better(self, tiny_ckpt):
        cfg = self.make_cfg(head_only=True, epochs=1)
        rec = hn.finetune(cfg, tiny_ckpt)
        assert rec.final_acc >= 0.0

    def test_multiview_with_diversity_runs(self, tiny_ckpt):
        cfg = self.make_cfg(
            adaptors=(AdaptorSpec("subset", 5, seed=1),
                      AdaptorSpec("subset", 5, seed=2)),
            diversity_alpha=1e-2)
        rec = hn.finetune(cfg, tiny_ckpt)
        assert rec.epochs_run == 2  # linear scaling: 1 epoch x 2 views

    def test_inflate_mode_runs(self, tiny_ckpt):
        cfg = self.make_cfg(adaptors=(AdaptorSpec("inflate", 5),))
        rec = hn.finetune(cfg, tiny_ckpt)
        assert rec.epochs_run == 1

    def test_head_resized_to_target_classes(self, tiny_ckpt):
        """Target has a different class count than the source (4): the
        replaced head must match it or the forward pass cannot run."""
        ds = {"type": "expanded",
              "base": {"type": "toy", "seed": 37, "classes": 3, "per_class": 6,
                       "test_per_class": 3},
              "k": 5, "centers_seed": 0}
        _, model = hn.finetune(self.make_cfg(dataset=ds), tiny_ckpt,
                               return_model=True)
        assert model.backbone.head_w.shape[1] == 3

    def test_pca_and_autoencoder_inits_run(self, tiny_ckpt):
        cfg = self.make_cfg(adaptors=(AdaptorSpec("linear", 5, init="pca"),))
        assert hn.finetune(cfg, tiny_ckpt).epochs_run == 1
        cfg = self.make_cfg(adaptors=(AdaptorSpec("multilayer", 5,
                                                  init="autoencoder"),))
        assert hn.finetune(cfg, tiny_ckpt).epochs_run == 1


class TestScratch:
    def test_runs_with_17x_epochs(self):
        cfg = hn.ExperimentConfig(dataset=TINY_K4, mode="scratch", epochs=1, seed=0)
        rec = hn.train_scratch(cfg)
        assert rec.epochs_run == 17
        assert len(rec.train_loss) == 17

    def test_deterministic(self):
        cfg = hn.ExperimentConfig(dataset=TINY_K4, mode="scratch", epochs=1, seed=3)
        assert hn.train_scratch(cfg) == hn.train_scratch(cfg)


class TestParamGroups:
    def test_adaptor_group_gets_multiplied_rate(self, tiny_ckpt, monkeypatch):
        """Audit group membership: adaptor params at lr*mult, rest at lr."""
        seen = {}
        real_fit = hn._fit

        def spy(fwd_t, fwd_e, groups, sched, data, cfg):
            seen["groups"] = [(g.name, g.lr, [n for n, _ in g.named_params])
                              for g in groups]
            seen["lr"] = sched.lr
            return real_fit(fwd_t, fwd_e, groups, sched, data, cfg)

        monkeypatch.setattr(hn, "_fit", spy)
        cfg = hn.ExperimentConfig(
            dataset=TINY_K5, mode="finetune", epochs=0, seed=0,
            adaptors=(AdaptorSpec("linear", 5, seed=1),),
            adaptor_lr_multiplier=10.0)
        hn.finetune(cfg, tiny_ckpt)
        groups = dict((name, (lr, names)) for name, lr, names in seen["groups"])
        assert set(groups) == {"backbone", "adaptor"}
        assert groups["adaptor"][0] == pytest.approx(seen["lr"] * 10.0)
        assert groups["backbone"][0] == pytest.approx(seen["lr"])
        assert all(n.startswith("view0.") for n in groups["adaptor"][1])
        assert all(n.startswith("backbone.") for n in groups["backbone"][1])

    def test_inflate_trains_uniformly(self, tiny_ckpt, monkeypatch):
        """An inflated network has no adaptor module, so nothing may get the
        multiplied rate: the widened first layer trains with the backbone."""
        seen = {}
        real_fit = hn._fit

        def spy(fwd_t, fwd_e, groups, sched, data, cfg):
            seen["groups"] = {g.name: [n for n, _ in g.named_params] for g in groups}
            return real_fit(fwd_t, fwd_e, groups, sched, data, cfg)

        monkeypatch.setattr(hn, "_fit", spy)
        cfg = hn.ExperimentConfig(dataset=TINY_K5, mode="finetune", epochs=0,
                                  seed=0, adaptors=(AdaptorSpec("inflate", 5),))
        hn.finetune(cfg, tiny_ckpt)
        assert set(seen["groups"]) == {"backbone"}
        assert "backbone.block0.conv1.weight" in seen["groups"]["backbone"]


class TestBenchmark:
    def small_cells(self, seeds=(0, 1)):
        base = hn.ExperimentConfig(dataset=TINY_K4, mode="finetune", epochs=1)
        return hn.standard_cells(base, ["subset"], list(seeds),
                                 include_scratch=False)

    def test_runs_cells_and_writes_reports(self, tmp_path):
        result = hn.run_benchmark(tiny_pretrain_cfg(), self.small_cells(),
                                  tmp_path)
        assert len(result["records"]) == 2
        assert not result["failures"]
        assert result["csv"].exists() and result["markdown"].exists()
        table = result["markdown"].read_text()
        assert "subset" in table and "±" in table

    def test_resume_skips_completed_cells(self, tmp_path, monkeypatch):
        cells = self.small_cells()
        hn.run_benchmark(tiny_pretrain_cfg(), cells, tmp_path)

        def boom(*a, **k):
            raise AssertionError("completed cell was recomputed")

        monkeypatch.setattr(hn, "finetune", boom)
        result = hn.run_benchmark(tiny_pretrain_cfg(), cells, tmp_path)
        assert len(result["records"]) == 2 and not result["failures"]

    def test_rerun_reproduces_cells_exactly(self, tmp_path):
        cells = self.small_cells()
        a = hn.run_benchmark(tiny_pretrain_cfg(), cells, tmp_path / "a")
        b = hn.run_benchmark(tiny_pretrain_cfg(), cells, tmp_path / "b")
        assert a["records"] == b["records"]
        assert a["markdown"].read_text() == b["markdown"].read_text()

    def test_partial_failure_reported_not_fatal(self, tmp_path):
        cells = self.small_cells()
        # dataset/adaptor channel mismatch in one cell
        broken = dataclasses.replace(cells[0], dataset=TINY_K5, label="broken")
        result = hn.run_benchmark(tiny_pretrain_cfg(), [broken, cells[1]],
                                  tmp_path)
        assert len(result["records"]) == 1
        assert len(result["failures"]) == 1
        assert result["failures"][0]["label"] == "broken"
        assert (tmp_path / "report-failures.json").exists()

    def test_every_cell_backed_by_persisted_record(self, tmp_path):
        result = hn.run_benchmark(tiny_pretrain_cfg(), self.small_cells(),
                                  tmp_path)
        for rec in result["records"]:
            path = tmp_path / "cells" / f"{rec.config_hash}.json"
            assert path.exists()
            stored = hn.MetricsRecord.from_record(json.loads(path.read_text()))
            assert stored == rec

    def test_multiview_cells_scale_views(self):
        base = hn.ExperimentConfig(dataset=TINY_K5, mode="finetune", epochs=1)
        cells = hn.multiview_cells(base, "subset", [1, 2], [0, 1, 2])
        assert len(cells) == 6
        two_view = [c for c in cells if c.label == "subset-x2"]
        assert all(len(c.adaptors) == 2 for c in two_view)
        # per-view seeds differ so the views are distinct
        assert two_view[0].adaptors[0].seed != two_view[0].adaptors[1].seed


class TestDegradation:
    def test_rows_cover_expected_grid(self):
        rows = hn.degradation_rows(TINY)
        names = [n for n, _ in rows]
        assert len(names) == 8
        assert names[0] == "perm-RGB"
        assert sum(n.startswith("perm-") for n in names) == 6
        assert "grayscale" in names and "lowres" in names

    def test_lowres_row_actually_degrades(self):
        """The low-resolution descriptor must carry a real factor; a truthy
        placeholder would box-filter by 1 and change nothing."""
        rows = dict(hn.degradation_rows(TINY))
        factor = rows["lowres"]["transform"]["lowres"]
        assert int(factor) >= 2
        data = dp.build_dataset(rows["lowres"])
        plain = dp.build_dataset(TINY)
        assert np.abs(data.train_x - plain.train_x).max() > 0.01

    def test_study_reports_decreases(self, tiny_ckpt, tmp_path):
        base = hn.ExperimentConfig(dataset=TINY, mode="finetune", epochs=1)
        result = hn.degradation_study(base, tiny_ckpt, tmp_path, seeds=[0])
        assert len(result["records"]) == 8
        assert result["table"]["perm-RGB"]["decrease"] == pytest.approx(0.0)
        md = result["markdown"].read_text()
        assert "perm-RGB" in md and "grayscale" in md and "lowres" in md

    def test_identity_row_equals_plain_finetune(self, tiny_ckpt, tmp_path):
        base = hn.ExperimentConfig(dataset=TINY, mode="finetune", epochs=1)
        result = hn.degradation_study(base, tiny_ckpt, tmp_path, seeds=[0])
        identity = [r for r in result["records"] if r.label == "perm-RGB"][0]
        plain_cfg = dataclasses.replace(
            base, dataset={**TINY, "transform": {"permute": [0, 1, 2]}},
            seed=0, label="perm-RGB")
        plain = hn.finetune(plain_cfg, tiny_ckpt)
        assert plain == identity
