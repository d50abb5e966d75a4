"""Experiment orchestration: pretraining, fine-tuning, baselines, reports.

Each experiment is described by a serializable config and produces a
metrics record keyed by the config's hash.  Benchmarks persist one JSON
file per (config, seed) cell, so an interrupted suite resumes by skipping
hashes it already has, and a rerun with the same seeds reproduces every
cell exactly.  Reports render the persisted cells as CSV plus a markdown
table; nothing in a report exists without a backing record.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .adaptors import (AdaptorSpec, DivergenceError, IdentityAdaptor,
                       autoencoder_pretrain, build_adaptor)
from .backbone import (Backbone, Checkpoint, inflate_first_layer, load_into,
                       make_checkpoint, replace_head, restore)
from .dataproc import SplitData, build_dataset
from .multiview import (DiversityRegConfig, MultiViewModel, Schedule,
                        diversity_reg, scale_schedule, stack_views)
from .optim import Adam, ParamGroup
from .tensor import NonFiniteError, Tensor

MODES = ("pretrain", "finetune", "scratch")
SCRATCH_EPOCH_MULTIPLIER = 17


# -- configuration ---------------------------------------------------------

@dataclass
class ExperimentConfig:
    """One experiment, fully determined: dataset recipe, model, schedule.

    ``adaptors`` lists one spec per view; empty means the dataset feeds
    the network directly (pretraining, from-scratch runs, and 3-channel
    degradation rows).  Scratch and pretrain modes forbid adaptors — the
    scratch baseline widens the first layer to the channel count instead.
    """

    dataset: dict
    mode: str
    adaptors: tuple[AdaptorSpec, ...] = ()
    pool_block: int | None = None
    pool_fn: str = "max"
    diversity_alpha: float = 0.0
    lr: float = 1e-4
    batch: int = 64
    epochs: int = 15
    milestones: tuple[int, ...] = ()
    adaptor_lr_multiplier: float = 10.0
    seed: int = 0
    hflip: bool = True
    rotations: bool = False
    head_only: bool = False
    widths: tuple[int, ...] = (16, 32, 64)
    label: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        specs = []
        for a in self.adaptors:
            specs.append(a if isinstance(a, AdaptorSpec) else AdaptorSpec.from_record(a))
        self.adaptors = tuple(specs)
        if self.mode in ("pretrain", "scratch") and self.adaptors:
            raise ValueError(f"{self.mode} mode forbids adaptors")
        if self.lr <= 0 or self.batch < 1 or self.epochs < 0:
            raise ValueError("lr must be positive, batch >= 1, epochs >= 0")
        if self.diversity_alpha < 0:
            raise ValueError(f"diversity_alpha must be >= 0, got {self.diversity_alpha}")
        self.milestones = tuple(int(m) for m in self.milestones)
        self.widths = tuple(int(w) for w in self.widths)
        kinds = {a.kind for a in self.adaptors}
        if "inflate" in kinds and len(self.adaptors) > 1:
            raise ValueError("inflation modifies the shared first layer; one view only")

    @property
    def num_views(self) -> int:
        return max(1, len(self.adaptors))

    def resolved_schedule(self) -> Schedule:
        """Effective schedule: 17x epochs for scratch, then view scaling.

        Scratch milestones stretch with the epoch budget, so the decay
        hits at the same fraction of training as in the fine-tune runs.
        """
        epochs, milestones = self.epochs, self.milestones
        if self.mode == "scratch":
            epochs *= SCRATCH_EPOCH_MULTIPLIER
            milestones = tuple(m * SCRATCH_EPOCH_MULTIPLIER for m in milestones)
        base = Schedule(lr=self.lr, epochs=epochs, milestones=milestones)
        return scale_schedule(base, self.num_views)

    def to_record(self) -> dict:
        return {
            "dataset": self.dataset,
            "mode": self.mode,
            "adaptors": [a.to_record() for a in self.adaptors],
            "pool_block": self.pool_block,
            "pool_fn": self.pool_fn,
            "diversity_alpha": self.diversity_alpha,
            "lr": self.lr,
            "batch": self.batch,
            "epochs": self.epochs,
            "milestones": list(self.milestones),
            "adaptor_lr_multiplier": self.adaptor_lr_multiplier,
            "seed": self.seed,
            "hflip": self.hflip,
            "rotations": self.rotations,
            "head_only": self.head_only,
            "widths": list(self.widths),
            "label": self.label,
        }

    @staticmethod
    def from_record(rec: dict) -> "ExperimentConfig":
        rec = dict(rec)
        rec["adaptors"] = tuple(AdaptorSpec.from_record(a)
                                for a in rec.get("adaptors", []))
        rec["milestones"] = tuple(rec.get("milestones", ()))
        rec["widths"] = tuple(rec.get("widths", (16, 32, 64)))
        return ExperimentConfig(**rec)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_record(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MetricsRecord:
    """What one run measured.  Wall time is informational, not identity."""

    config_hash: str
    mode: str
    label: str
    seed: int
    train_loss: tuple[float, ...]
    test_acc: tuple[float, ...]
    final_acc: float
    epochs_run: int
    wall_time: float = field(compare=False, default=0.0)

    def __post_init__(self):
        self.train_loss = tuple(float(v) for v in self.train_loss)
        self.test_acc = tuple(float(v) for v in self.test_acc)
        for a in self.test_acc + (self.final_acc,):
            if not 0.0 <= a <= 100.0:
                raise ValueError(f"accuracy {a} outside [0, 100]")

    def to_record(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "mode": self.mode,
            "label": self.label,
            "seed": self.seed,
            "train_loss": list(self.train_loss),
            "test_acc": list(self.test_acc),
            "final_acc": self.final_acc,
            "epochs_run": self.epochs_run,
            "wall_time": self.wall_time,
        }

    @staticmethod
    def from_record(rec: dict) -> "MetricsRecord":
        return MetricsRecord(**rec)


# -- training loop ---------------------------------------------------------

def _augment(batch: np.ndarray, rng, hflip: bool, rotations: bool) -> np.ndarray:
    if hflip:
        flip = rng.random(batch.shape[0]) < 0.5
        batch[flip] = batch[flip, :, :, ::-1]
    if rotations:
        quarter = rng.integers(0, 4, batch.shape[0])
        for i, q in enumerate(quarter):
            if q:
                batch[i] = np.rot90(batch[i], q, axes=(1, 2))
    return batch


def _accuracy(forward_eval, x: np.ndarray, y: np.ndarray, batch: int) -> float:
    hits = 0
    for i in range(0, x.shape[0], batch):
        logits = forward_eval(Tensor(x[i:i + batch]))
        hits += int((logits.data.argmax(axis=1) == y[i:i + batch]).sum())
    return 100.0 * hits / x.shape[0]


def _fit(forward_train, forward_eval, groups: list[ParamGroup], sched: Schedule,
         data: SplitData, cfg: ExperimentConfig) -> tuple[list, list]:
    """Shared mini-batch loop: shuffle, augment, decay, track metrics.

    Raises DivergenceError the moment any forward, backward, or optimizer
    step produces a non-finite value.
    """
    opt = Adam(groups)
    base_lr = {g.name: g.lr for g in groups}
    rng = np.random.default_rng([cfg.seed, 101])
    n = data.train_x.shape[0]
    losses, accs = [], []
    decay = 1.0
    for epoch in range(sched.epochs):
        if epoch in sched.milestones:
            decay *= 0.1
            for g in groups:
                g.lr = base_lr[g.name] * decay
        order = rng.permutation(n)
        epoch_loss, batches = 0.0, 0
        for i in range(0, n, cfg.batch):
            idx = order[i:i + cfg.batch]
            xb = _augment(data.train_x[idx], rng, cfg.hflip, cfg.rotations)
            try:
                loss = forward_train(Tensor(xb), data.train_y[idx])
                loss.backward()
                opt.step()
            except NonFiniteError as e:
                raise DivergenceError(f"training diverged at epoch {epoch}: {e}") from e
            opt.zero_grad()
            epoch_loss += loss.data.item()
            batches += 1
        losses.append(epoch_loss / max(batches, 1))
        accs.append(_accuracy(forward_eval, data.test_x, data.test_y, cfg.batch))
    return losses, accs


def _finish(cfg: ExperimentConfig, losses, accs, epochs: int,
            start: float, data: SplitData, forward_eval) -> MetricsRecord:
    final = accs[-1] if accs else _accuracy(forward_eval, data.test_x,
                                            data.test_y, cfg.batch)
    return MetricsRecord(
        config_hash=config_hash(cfg), mode=cfg.mode, label=cfg.label,
        seed=cfg.seed, train_loss=losses, test_acc=accs, final_acc=final,
        epochs_run=epochs, wall_time=time.perf_counter() - start,
    )


# -- the three experiment modes -------------------------------------------

def pretrain(cfg: ExperimentConfig) -> Checkpoint:
    """Train a fresh backbone on a 3-channel dataset; package as checkpoint.

    The checkpoint's meta carries the producing config record, its hash,
    and the metrics record, so a pretraining run is fully reconstructable
    from the artifact alone.
    """
    if cfg.mode != "pretrain":
        raise ValueError(f"pretrain() needs mode='pretrain', got {cfg.mode!r}")
    start = time.perf_counter()
    data = build_dataset(cfg.dataset)
    if data.channels != 3:
        raise ValueError(f"pretraining expects a 3-channel dataset, got {data.channels}")
    net = Backbone(3, cfg.widths, len(data.class_names), seed=cfg.seed)
    sched = cfg.resolved_schedule()
    groups = [ParamGroup("backbone", net.named_parameters(), sched.lr)]

    def fwd_train(x, y):
        return ops.softmax_cross_entropy(net.forward(x, "train"), y)

    def fwd_eval(x):
        return net.forward(x, "eval")

    losses, accs = _fit(fwd_train, fwd_eval, groups, sched, data, cfg)
    record = _finish(cfg, losses, accs, sched.epochs, start, data, fwd_eval)
    meta = {"config": cfg.to_record(), "config_hash": record.config_hash,
            "metrics": record.to_record()}
    return make_checkpoint(net, meta=meta)


def _prepare_adaptors(cfg: ExperimentConfig, data: SplitData, net: Backbone):
    """Build per-view adaptors, running PCA / autoencoder init as asked."""
    adaptors = []
    for spec in cfg.adaptors:
        if spec.k_in != data.channels:
            raise ValueError(
                f"adaptor expects {spec.k_in} channels, dataset has {data.channels}"
            )
        pca_pixels = None
        if spec.kind == "linear" and spec.init == "pca":
            pixels = data.train_x.transpose(0, 2, 3, 1).reshape(-1, data.channels)
            sample = np.random.default_rng([cfg.seed, 103]).choice(
                pixels.shape[0], min(20000, pixels.shape[0]), replace=False)
            pca_pixels = pixels[sample]
        adaptor = build_adaptor(spec, pca_pixels=pca_pixels)
        if spec.kind == "multilayer" and spec.init == "autoencoder":
            autoencoder_pretrain(adaptor, data.train_x, seed=spec.seed)
        adaptors.append(adaptor)
    for a in adaptors:
        if a.out_channels != net.input_channels:
            raise ValueError(
                f"adaptor emits {a.out_channels} channels, "
                f"network expects {net.input_channels}"
            )
    return adaptors


def finetune(cfg: ExperimentConfig, pretrained: Checkpoint,
             return_model: bool = False):
    """Fine-tune a pretrained backbone on the target dataset.

    The head is replaced for the target label set; adaptor parameters
    train at ``lr * adaptor_lr_multiplier`` in their own optimizer group,
    while inflation fine-tunes the whole network uniformly.  With several
    views the schedule follows the linear scaling rule, and a positive
    ``diversity_alpha`` adds the view-diversity penalty.
    Returns the metrics record, plus the trained model when asked.
    """
    if cfg.mode != "finetune":
        raise ValueError(f"finetune() needs mode='finetune', got {cfg.mode!r}")
    start = time.perf_counter()
    data = build_dataset(cfg.dataset)
    net = restore(pretrained)
    net = replace_head(net, len(data.class_names), seed=cfg.seed)

    inflate = any(a.kind == "inflate" for a in cfg.adaptors)
    if inflate:
        if data.channels != cfg.adaptors[0].k_in:
            raise ValueError(
                f"inflation to {cfg.adaptors[0].k_in} channels, "
                f"dataset has {data.channels}"
            )
        net = inflate_first_layer(net, data.channels)
        adaptors = [IdentityAdaptor(data.channels)]
    else:
        if not cfg.adaptors and data.channels != net.input_channels:
            raise ValueError(
                f"dataset has {data.channels} channels, network expects "
                f"{net.input_channels}; an adaptor is required"
            )
        adaptors = (_prepare_adaptors(cfg, data, net)
                    if cfg.adaptors else [IdentityAdaptor(net.input_channels)])

    model = MultiViewModel(adaptors, net, pool_block=cfg.pool_block,
                           pool_fn=cfg.pool_fn)
    sched = cfg.resolved_schedule()

    # Group split decides who gets the multiplied rate: exactly the view
    # adaptors' own parameters.  An inflated network has no adaptor module,
    # so the whole net (widened first layer included) trains at the base
    # rate; feeding that layer the multiplied rate makes training oscillate.
    backbone_named = model.backbone_parameters()
    adaptor_named = model.adaptor_parameters()
    if cfg.head_only:
        head = ("backbone.head.weight", "backbone.head.bias")
        groups = [ParamGroup("head", [(n, p) for n, p in backbone_named if n in head],
                             sched.lr)]
    else:
        groups = [ParamGroup("backbone", backbone_named, sched.lr)]
        if adaptor_named:
            groups.append(ParamGroup("adaptor", adaptor_named,
                                     sched.lr * cfg.adaptor_lr_multiplier))

    div_cfg = (DiversityRegConfig(alpha=cfg.diversity_alpha)
               if cfg.diversity_alpha > 0 else None)

    def fwd_train(x, y):
        views = model.make_views(x, "train")
        fronts = [net.forward_front(v, "train", split=model.pool_block)
                  for v in views]
        pooled = (ops.stack_max if cfg.pool_fn == "max" else ops.stack_mean)(fronts)
        logits = net.forward_back(pooled, "train", split=model.pool_block)
        loss = ops.softmax_cross_entropy(logits, y)
        if div_cfg is not None:
            loss = ops.add_n([loss, diversity_reg(stack_views(views), div_cfg)])
        return loss

    def fwd_eval(x):
        from .multiview import multiview_forward
        return multiview_forward(model, x, "eval")

    losses, accs = _fit(fwd_train, fwd_eval, groups, sched, data, cfg)
    record = _finish(cfg, losses, accs, sched.epochs, start, data, fwd_eval)
    return (record, model) if return_model else record


def train_scratch(cfg: ExperimentConfig) -> MetricsRecord:
    """From-scratch baseline: fresh network, first layer as wide as the
    data, 17x the fine-tuning epoch budget."""
    if cfg.mode != "scratch":
        raise ValueError(f"train_scratch() needs mode='scratch', got {cfg.mode!r}")
    start = time.perf_counter()
    data = build_dataset(cfg.dataset)
    net = Backbone(data.channels, cfg.widths, len(data.class_names), seed=cfg.seed)
    sched = cfg.resolved_schedule()
    groups = [ParamGroup("network", net.named_parameters(), sched.lr)]

    def fwd_train(x, y):
        return ops.softmax_cross_entropy(net.forward(x, "train"), y)

    def fwd_eval(x):
        return net.forward(x, "eval")

    losses, accs = _fit(fwd_train, fwd_eval, groups, sched, data, cfg)
    return _finish(cfg, losses, accs, sched.epochs, start, data, fwd_eval)


# -- benchmark suites ------------------------------------------------------

def run_cell(cfg: ExperimentConfig, out_dir, pretrained: Checkpoint | None = None
             ) -> MetricsRecord:
    """Run one benchmark cell, or load it if its hash is already done."""
    out_dir = Path(out_dir)
    cells = out_dir / "cells"
    cells.mkdir(parents=True, exist_ok=True)
    path = cells / f"{config_hash(cfg)}.json"
    if path.exists():
        return MetricsRecord.from_record(json.loads(path.read_text()))
    if cfg.mode == "finetune":
        if pretrained is None:
            raise ValueError("finetune cells need a pretrained checkpoint")
        record = finetune(cfg, pretrained)
    elif cfg.mode == "scratch":
        record = train_scratch(cfg)
    else:
        raise ValueError(f"benchmark cells must be finetune or scratch, got {cfg.mode!r}")
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record.to_record(), sort_keys=True, indent=1))
    tmp.replace(path)  # atomic: concurrent writers of the same hash agree
    return record


def get_pretrained(cfg: ExperimentConfig, out_dir) -> Checkpoint:
    """Pretrain once per config hash; later calls reload the checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"pretrained-{config_hash(cfg)}.ckpt"
    if path.exists():
        return Checkpoint.read(path)
    ckpt = pretrain(cfg)
    ckpt.write(path)
    return ckpt


def summarize(records: list[MetricsRecord]) -> dict[str, dict]:
    """Aggregate cells by label: mean/std over seeds."""
    by_label: dict[str, list[MetricsRecord]] = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r)
    out = {}
    for label, rs in by_label.items():
        accs = np.array([r.final_acc for r in rs])
        out[label] = {
            "mean": float(accs.mean()),
            "std": float(accs.std()),
            "seeds": sorted(r.seed for r in rs),
            "n": len(rs),
        }
    return out


def write_reports(records: list[MetricsRecord], out_dir, name: str = "report"
                  ) -> tuple[Path, Path]:
    """Emit CSV (one row per cell) and a markdown mean±std table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "mode", "seed", "final_acc", "epochs_run",
                    "wall_time", "config_hash"])
        for r in sorted(records, key=lambda r: (r.label, r.seed)):
            w.writerow([r.label, r.mode, r.seed, f"{r.final_acc:.4f}",
                        r.epochs_run, f"{r.wall_time:.2f}", r.config_hash])

    summary = summarize(records)
    best = max(summary, key=lambda k: summary[k]["mean"]) if summary else None
    md_path = out_dir / f"{name}.md"
    lines = ["| configuration | accuracy (%) | seeds |",
             "|---|---|---|"]
    for label in sorted(summary):
        s = summary[label]
        cell = f"{s['mean']:.2f} ± {s['std']:.2f}"
        shown = f"**{label}**" if label == best else label
        lines.append(f"| {shown} | {cell} | {s['n']} |")
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path


def run_benchmark(pretrain_cfg: ExperimentConfig,
                  cells: list[ExperimentConfig], out_dir,
                  name: str = "report") -> dict:
    """Run a suite of cells against one shared pretrained checkpoint.

    Failures are collected, not fatal: the report covers every completed
    cell and lists the failed ones.  Completed hashes are skipped on
    rerun.
    """
    out_dir = Path(out_dir)
    ckpt = get_pretrained(pretrain_cfg, out_dir) if any(
        c.mode == "finetune" for c in cells) else None
    records, failures = [], []
    for cfg in cells:
        try:
            records.append(run_cell(cfg, out_dir, pretrained=ckpt))
        except Exception as e:  # keep the suite alive; report the cell
            failures.append({"label": cfg.label, "seed": cfg.seed,
                             "config_hash": config_hash(cfg), "error": str(e)})
    csv_path, md_path = write_reports(records, out_dir, name=name)
    if failures:
        (out_dir / f"{name}-failures.json").write_text(
            json.dumps(failures, indent=1))
    return {"records": records, "failures": failures,
            "summary": summarize(records), "csv": csv_path, "markdown": md_path}


def standard_cells(base: ExperimentConfig, kinds: list[str], seeds: list[int],
                   include_scratch: bool = True) -> list[ExperimentConfig]:
    """The adaptor-comparison suite: one label per kind plus from-scratch."""
    k = _dataset_channels(base.dataset)
    cells = []
    for kind in kinds:
        for seed in seeds:
            spec = _default_spec(kind, k, seed)
            cells.append(replace(base, mode="finetune", adaptors=(spec,),
                                 seed=seed, label=kind))
    if include_scratch:
        for seed in seeds:
            cells.append(replace(base, mode="scratch", adaptors=(), seed=seed,
                                 label="scratch"))
    return cells


def multiview_cells(base: ExperimentConfig, kind: str, view_counts: list[int],
                    seeds: list[int]) -> list[ExperimentConfig]:
    """Same adaptor kind at several view counts; per-view seeds differ so
    views start distinct."""
    k = _dataset_channels(base.dataset)
    cells = []
    for v in view_counts:
        for seed in seeds:
            specs = tuple(_default_spec(kind, k, seed * 100 + i) for i in range(v))
            cells.append(replace(base, mode="finetune", adaptors=specs, seed=seed,
                                 label=f"{kind}-x{v}"))
    return cells


def _default_spec(kind: str, k: int, seed: int) -> AdaptorSpec:
    if kind == "linear":
        return AdaptorSpec("linear", k, seed=seed, init="pca")
    if kind == "multilayer":
        return AdaptorSpec("multilayer", k, seed=seed, init="autoencoder")
    return AdaptorSpec(kind, k, seed=seed)


def _dataset_channels(descriptor: dict) -> int:
    return descriptor.get("k", 3) if descriptor.get("type") == "expanded" else 3


# -- degradation study -----------------------------------------------------

DEGRADATIONS = ("grayscale", "lowres")


def degradation_rows(base_dataset: dict) -> list[tuple[str, dict]]:
    """All 6 channel permutations of a 3-channel dataset, then grayscale
    and low resolution."""
    rows = []
    for perm in itertools.permutations(range(3)):
        name = "perm-" + "".join("RGB"[i] for i in perm)
        rows.append((name, {**base_dataset, "transform": {"permute": list(perm)}}))
    rows.append(("grayscale", {**base_dataset, "transform": {"grayscale": True}}))
    rows.append(("lowres", {**base_dataset, "transform": {"lowres": 4}}))
    return rows


def degradation_study(base: ExperimentConfig, pretrained: Checkpoint, out_dir,
                      seeds: list[int], name: str = "degradation") -> dict:
    """Fine-tune the pretrained net on degraded copies of a 3-channel
    dataset; report accuracy per row and the drop against identity order.
    """
    out_dir = Path(out_dir)
    records = []
    for row_name, descriptor in degradation_rows(base.dataset):
        for seed in seeds:
            cfg = replace(base, mode="finetune", adaptors=(), dataset=descriptor,
                          seed=seed, label=row_name)
            records.append(run_cell(cfg, out_dir, pretrained=pretrained))
    summary = summarize(records)
    identity = summary["perm-RGB"]["mean"]
    table = {}
    for row_name, s in summary.items():
        table[row_name] = {**s, "decrease": identity - s["mean"]}

    csv_path, _ = write_reports(records, out_dir, name=name)
    md_path = out_dir / f"{name}.md"
    lines = ["| input | accuracy (%) | decrease vs RGB |",
             "|---|---|---|"]
    for row_name in sorted(table, key=lambda r: (not r.startswith("perm"), r)):
        s = table[row_name]
        lines.append(f"| {row_name} | {s['mean']:.2f} ± {s['std']:.2f} "
                     f"| {s['decrease']:.2f} |")
    md_path.write_text("\n".join(lines) + "\n")
    return {"records": records, "table": table, "csv": csv_path,
            "markdown": md_path}
