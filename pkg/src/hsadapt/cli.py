"""Command-line front end.

Subcommands map one-to-one onto the harness operations; configs are JSON
files mirroring ExperimentConfig records.  Everything lands under
--out-dir: datasets, checkpoints, per-cell metrics, and reports.  Runs
are resumable — completed cells and checkpoints are found by config hash
and not recomputed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness as hn
from .backbone import Checkpoint
from .dataproc import build_dataset, save_split_dataset


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _load_config(args, mode: str | None = None) -> hn.ExperimentConfig:
    rec = _load_json(args.config)
    if mode is not None:
        rec["mode"] = mode
    if getattr(args, "seed", None) is not None:
        rec["seed"] = args.seed
    return hn.ExperimentConfig.from_record(rec)


def _print_record(rec: hn.MetricsRecord) -> None:
    print(f"[{rec.mode}] {rec.label or '(unlabeled)'} seed={rec.seed} "
          f"final_acc={rec.final_acc:.2f}% epochs={rec.epochs_run} "
          f"wall={rec.wall_time:.1f}s hash={rec.config_hash}")


def cmd_synth(args) -> int:
    descriptor = _load_json(args.config)
    data = build_dataset(descriptor)
    out = Path(args.out_dir)
    save_split_dataset(
        out / args.name, args.name,
        {"train": (data.train_x, data.train_y),
         "test": (data.test_x, data.test_y)},
        data.class_names, generation=descriptor,
    )
    print(f"wrote {out / args.name}: {data.train_x.shape[0]} train / "
          f"{data.test_x.shape[0]} test images, {data.channels} channels")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args, mode="pretrain")
    ckpt = hn.get_pretrained(cfg, args.out_dir)
    rec = hn.MetricsRecord.from_record(ckpt.meta["metrics"])
    _print_record(rec)
    path = Path(args.out_dir) / f"pretrained-{hn.config_hash(cfg)}.ckpt"
    print(f"checkpoint: {path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args, mode="finetune")
    ckpt = Checkpoint.read(args.checkpoint)
    rec = hn.run_cell(cfg, args.out_dir, pretrained=ckpt)
    _print_record(rec)
    return 0


def cmd_scratch(args) -> int:
    cfg = _load_config(args, mode="scratch")
    rec = hn.run_cell(cfg, args.out_dir)
    _print_record(rec)
    return 0


def _suite_cells(suite: dict) -> list[hn.ExperimentConfig]:
    cells = [hn.ExperimentConfig.from_record(rec) for rec in suite.get("cells", [])]
    if "standard" in suite:
        block = suite["standard"]
        base = hn.ExperimentConfig.from_record(block["base"])
        cells.extend(hn.standard_cells(
            base, block["kinds"], block["seeds"],
            include_scratch=block.get("scratch", True)))
    if "multiview" in suite:
        block = suite["multiview"]
        base = hn.ExperimentConfig.from_record(block["base"])
        cells.extend(hn.multiview_cells(
            base, block["kind"], block["views"], block["seeds"]))
    return cells


def cmd_bench(args) -> int:
    suite = _load_json(args.config)
    pre_cfg = hn.ExperimentConfig.from_record(suite["pretrain"])
    cells = _suite_cells(suite)
    if not cells:
        print("suite config names no cells", file=sys.stderr)
        return 1
    result = hn.run_benchmark(pre_cfg, cells, args.out_dir,
                              name=suite.get("name", "report"))
    for rec in result["records"]:
        _print_record(rec)
    print(f"report: {result['markdown']}")
    if result["failures"]:
        for f in result["failures"]:
            print(f"FAILED cell {f['label']} seed={f['seed']}: {f['error']}",
                  file=sys.stderr)
        return 1
    return 0


def cmd_degrade(args) -> int:
    cfg = _load_config(args, mode="finetune")
    ckpt = Checkpoint.read(args.checkpoint)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = hn.degradation_study(cfg, ckpt, args.out_dir, seeds=seeds)
    for name in sorted(result["table"]):
        row = result["table"][name]
        print(f"{name:12s} {row['mean']:6.2f}%  (drop {row['decrease']:+.2f})")
    print(f"report: {result['markdown']}")
    return 0


def cmd_report(args) -> int:
    cells_dir = Path(args.out_dir) / "cells"
    if not cells_dir.is_dir():
        print(f"no cells directory under {args.out_dir}", file=sys.stderr)
        return 1
    records = [hn.MetricsRecord.from_record(json.loads(p.read_text()))
               for p in sorted(cells_dir.glob("*.json"))]
    if not records:
        print("no completed cells to report", file=sys.stderr)
        return 1
    csv_path, md_path = hn.write_reports(records, args.out_dir, name=args.name)
    print(f"{len(records)} cells -> {csv_path}, {md_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsadapt",
        description="Train and evaluate channel adaptors for pretrained backbones.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a dataset from a descriptor and save it")
    p.add_argument("--config", required=True, help="dataset descriptor JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--name", default="dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train the 3-channel backbone")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint with adaptors")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("scratch", help="train the from-scratch baseline (17x epochs)")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_scratch)

    p = sub.add_parser("bench", help="run a benchmark suite and emit reports")
    p.add_argument("--config", required=True, help="suite JSON")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("degrade", help="channel permutation / degradation study")
    p.add_argument("--config", required=True, help="base finetune config (3-channel)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("report", help="rebuild reports from completed cells")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--name", default="report")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
