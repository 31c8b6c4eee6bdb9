"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .adaptive_params import (AdaptiveParamTable, ConstraintConfig, TrajectoryLog,
                              read_trajectory_csv, write_trajectory_csv, write_trajectory_rows)
from .encoder import CheckpointError, EncoderConfig, load_checkpoint, save_checkpoint
from .evaluation import EvalReport, evaluate
from .training import GradCheckConfig, TrainConfig, TrainLogWriter, grad_check, train

log = logging.getLogger("adams")

LOSS_CHOICES = {"adams": "adams", "asyp": "asyp", "proxy-ms": "proxy_ms", "proxy-bd": "proxy_bd"}

# Ablation rows: (name, adaptive_margin, adaptive_scale, range_constraints)
ABLATIONS = [
    ("adaptive margin", True, False, False),
    ("adaptive margin + range constraints", True, False, True),
    ("adaptive scale", False, True, False),
    ("adaptive scale + range constraints", False, True, True),
    ("both", True, True, False),
    ("both + range constraints", True, True, True),
]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing

TRAIN_DEFAULTS = {
    "loss": "adams",
    "epochs": 50,
    "classes_per_batch": 16,
    "samples_per_class": 4,
    "lr_encoder": 1e-4,
    "lr_adaptive": 1e-5,
    "omega": 0.01,
    "seed": 0,
    "seeds": 1,
    "adaptive_margin": True,
    "adaptive_scale": True,
    "range_constraints": True,
    "hidden_dim": 32,
    "embed_dim": 24,
    "trajectory_every_step": False,
    "max_steps": None,
}

GEN_DEFAULTS = {
    "classes": 50,
    "per_class": 20,
    "unseen": 0.2,
    "dim": 16,
    "noise_min": 0.3,
    "noise_max": 3.0,
    "seq_min": 4,
    "seq_max": 12,
    "confusable": 0.2,
    "seed": 0,
}


def _merge(defaults: dict, args: argparse.Namespace) -> dict:
    """Built-in defaults < config file < explicit command-line flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text())
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def gen_config(opts: dict) -> data_mod.GenerationConfig:
    return data_mod.GenerationConfig(
        num_classes=opts["classes"], samples_per_class=opts["per_class"], unseen_fraction=opts["unseen"],
        input_dim=opts["dim"], text_dim=opts["dim"],
        noise_scale_range=(opts["noise_min"], opts["noise_max"]),
        seq_len_range=(opts["seq_min"], opts["seq_max"]),
        confusable_fraction=opts["confusable"], seed=opts["seed"],
    )


def train_config(opts: dict, seed: int) -> TrainConfig:
    constraints = ConstraintConfig(omega=opts["omega"], constraints_enabled=opts["range_constraints"])
    return TrainConfig(
        classes_per_batch=opts["classes_per_batch"], samples_per_class=opts["samples_per_class"],
        epochs=opts["epochs"], lr_encoder=opts["lr_encoder"], lr_adaptive=opts["lr_adaptive"],
        seed=seed, loss=LOSS_CHOICES[opts["loss"]],
        adaptive_margin=opts["adaptive_margin"], adaptive_scale=opts["adaptive_scale"],
        constraints=constraints,
        encoder=EncoderConfig(hidden_dim=opts["hidden_dim"], embed_dim=opts["embed_dim"], seed=seed),
        trajectory_every_step=opts["trajectory_every_step"], max_steps=opts["max_steps"],
    )


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["constraints"] = ConstraintConfig(**d["constraints"])
    d["encoder"] = EncoderConfig(**d["encoder"])
    return TrainConfig(**d)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_dataset(path) -> data_mod.SyntheticDataset:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset not found: {p}")
    return data_mod.load(p)


# ---------------------------------------------------------------------------
# runs

def run_training(dataset_path: str, config: TrainConfig, run_dir: Path) -> dict:
    """Train one model into ``run_dir`` and evaluate it on the test split."""
    dataset = data_mod.load(dataset_path)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", {"dataset": str(dataset_path), "train": asdict(config)})
    writer = TrainLogWriter(run_dir / "train_log.csv")
    trajectory = TrajectoryLog(run_dir / "trajectory.csv") if config.adaptive else None
    try:
        result = train(dataset, config, writer, trajectory)
    finally:
        writer.close()
        if trajectory is not None:
            trajectory.close()
    table = result.table
    save_checkpoint(run_dir / "model.json", result.encoder, {
        "adaptive": {k: v.tolist() for k, v in table.raw().items()},
        "constraints": asdict(table.config),
        "train": asdict(config),
    })
    if config.adaptive:
        write_trajectory_csv(_table_rows(table, result.log[-1][0] if result.log else 0), run_dir / "adaptive.csv")
    report = evaluate(result.encoder, dataset)
    report.save(run_dir / "report.json")
    return report.to_dict()


def _table_rows(table: AdaptiveParamTable, step: int):
    lp, ln, a, b = table.constrained()
    return [(step, c, lp[c], ln[c], a[c], b[c]) for c in range(table.num_classes)]


def _run_job(job):
    return run_training(*job)


def summarize(reports: list[dict]) -> dict:
    out = {"runs": len(reports)}
    for key in ("acoustic_ap", "crossview_ap", "unseen_ap"):
        vals = [r[key]["ap"] for r in reports if key in r]
        if not vals:
            continue
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out[key] = {"mean": statistics.fmean(vals), "std": std, "values": vals}
    return out


def run_seeds(dataset_path: str, opts: dict, out_dir: Path, parallel: bool = False) -> dict:
    seeds = [opts["seed"] + k for k in range(opts["seeds"])]
    jobs = [(dataset_path, train_config(opts, s), out_dir / f"seed_{s}") for s in seeds]
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            reports = list(pool.map(_run_job, jobs))
    else:
        reports = [_run_job(j) for j in jobs]
    summary = summarize(reports)
    summary["seeds"] = seeds
    return summary


def _format_summary(summary: dict) -> str:
    parts = []
    for key in ("acoustic_ap", "crossview_ap", "unseen_ap"):
        if key in summary:
            parts.append(f"{key} {100 * summary[key]['mean']:.2f} ({100 * summary[key]['std']:.2f})")
    return ", ".join(parts)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    opts = _merge(GEN_DEFAULTS, args)
    try:
        cfg = gen_config(opts)
    except ValueError as e:
        raise UsageError(str(e))
    ds = data_mod.generate(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save(ds, out)
    if args.csv:
        data_mod.export_csv(ds, args.csv)
    counts = {split: len(ds.split(split)) for split in data_mod.SPLITS}
    unseen = sum(c.unseen for c in ds.classes)
    print(f"wrote {out}: {len(ds.classes)} classes ({unseen} unseen), "
          f"train {counts['train']}, dev {counts['dev']}, test {counts['test']} samples")
    return 0


def _check_loss_flags(args):
    if args.loss not in (None, "adams"):
        given = [f for f in ("adaptive_margin", "adaptive_scale", "range_constraints")
                 if getattr(args, f) is not None]
        if given:
            flags = ", ".join("--" + g.replace("_", "-") for g in given)
            raise UsageError(f"{flags} only apply to --loss adams")


def cmd_train(args) -> int:
    _check_loss_flags(args)
    opts = _merge(TRAIN_DEFAULTS, args)
    if opts["seeds"] < 1:
        raise UsageError("--seeds must be >= 1")
    if not Path(args.data).exists():
        raise UsageError(f"dataset not found: {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        train_config(opts, opts["seed"])
    except ValueError as e:
        raise UsageError(str(e))
    summary = run_seeds(args.data, opts, out, args.parallel)
    summary["options"] = opts
    _write_json(out / "summary.json", summary)
    print(f"{opts['loss']} x{len(summary['seeds'])}: {_format_summary(summary)}")
    return 0


def cmd_ablate(args) -> int:
    opts = _merge(TRAIN_DEFAULTS, args)
    opts["loss"] = "adams"
    if not Path(args.data).exists():
        raise UsageError(f"dataset not found: {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = {"baseline (asyp)": run_seeds(args.data, {**opts, "loss": "asyp"}, out / "asyp", args.parallel)}
    for name, margin, scale, cons in ABLATIONS:
        row_opts = {**opts, "adaptive_margin": margin, "adaptive_scale": scale, "range_constraints": cons}
        rows[name] = run_seeds(args.data, row_opts, out / name.replace(" ", "_").replace("+", "plus"),
                               args.parallel)
    _write_json(out / "ablation.json", rows)
    for name, summary in rows.items():
        print(f"{name:38s} {_format_summary(summary)}")
    return 0


def cmd_eval(args) -> int:
    for p in (args.data, args.checkpoint):
        if not Path(p).exists():
            raise UsageError(f"not found: {p}")
    dataset = data_mod.load(args.data)
    try:
        encoder, _ = load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        raise UsageError(str(e))
    report = evaluate(encoder, dataset, args.split)
    if args.out:
        report.save(args.out)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    ok = True
    for k in range(args.seeds):
        cfg = GradCheckConfig(seed=args.seed + k, loss=LOSS_CHOICES[args.loss],
                              constraints_enabled=not args.no_constraints)
        report = grad_check(cfg, args.tolerance)
        print(f"seed {cfg.seed}")
        for line in report.lines():
            print("  " + line)
        ok &= report.passed
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_dump_trajectories(args) -> int:
    src = Path(args.run)
    if src.is_dir():
        src = src / "trajectory.csv"
    if not src.exists():
        raise UsageError(f"trajectory not found: {src}")
    rows = read_trajectory_csv(src)
    if args.out:
        write_trajectory_csv(rows, args.out, args.class_id)
    else:
        write_trajectory_rows(rows, sys.stdout, args.class_id)
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_train_flags(p: argparse.ArgumentParser, with_loss: bool = True):
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with option defaults")
    if with_loss:
        p.add_argument("--loss", choices=sorted(LOSS_CHOICES))
        p.add_argument("--adaptive-margin", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--adaptive-scale", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--range-constraints", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--classes-per-batch", type=int)
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--lr-encoder", type=float)
    p.add_argument("--lr-adaptive", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, help="number of repeated runs (seed, seed+1, ...)")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--trajectory-every-step", action="store_true", default=None,
                   help="log every class after every step (default: batch classes + epoch snapshots)")
    p.add_argument("--parallel", action="store_true", help="run seeds in worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adams", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--unseen", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--noise-min", type=float)
    p.add_argument("--noise-max", type=float)
    p.add_argument("--seq-min", type=int)
    p.add_argument("--seq-max", type=int)
    p.add_argument("--confusable", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--csv", help="also export frames as CSV")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train (optionally over several seeds) and evaluate")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="AsyP baseline plus the six adaptive margin/scale/constraint rows")
    _add_train_flags(p, with_loss=False)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=data_mod.SPLITS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of all analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--loss", choices=sorted(LOSS_CHOICES), default="adams")
    p.add_argument("--no-constraints", action="store_true")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-trajectories", help="export adaptive margin/scale trajectories as CSV")
    p.add_argument("--run", required=True, help="run directory or trajectory.csv")
    p.add_argument("--class", dest="class_id", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_trajectories)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"adams: error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted; partial logs were flushed", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"adams: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
