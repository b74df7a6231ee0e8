"""Batch command-line interface.

Subcommands cover the full pipeline: synth -> split -> pretrain -> finetune
-> evaluate, plus sweep for the label-efficiency experiments. Progress is
logged to stdout as NDJSON ({"event": "epoch", ...} lines followed by one
{"event": "summary", ...}).

Exit codes: 0 success, 1 I/O or file-format failure, 2 validation failure,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import FormatError, NumericalError, ValidationError
from .experiments import (
    SweepSpec,
    emit_report,
    run_label_efficiency,
    run_pretrain_scaling,
    write_manifest,
)
from .model import ModelConfig
from .records import (
    DEFAULT_STAGE_PROPORTIONS,
    SleepStage,
    SplitSpec,
    read_esr,
    split_subjectwise,
    synthesize_corpus,
    write_esr,
)
from .trainer import (
    TrainConfig,
    evaluate_stager,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

_CONFIG_SECTIONS = ("model", "pretrain", "finetune", "sweep")
_SWEEP_KEYS = ("label_fractions", "methods", "pretrain_multipliers", "seeds")


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def load_run_config(path) -> dict:
    """Parse a run-config JSON file; unknown keys are rejected."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValidationError("run config must be a JSON object")
    unknown = set(doc) - set(_CONFIG_SECTIONS)
    if unknown:
        raise ValidationError(f"unknown run-config sections: {sorted(unknown)}")
    out = {
        "model": ModelConfig.from_dict(doc.get("model", {})),
        "pretrain": TrainConfig.from_dict(doc.get("pretrain", {})),
        "finetune": TrainConfig.from_dict(doc.get("finetune", {})),
    }
    sweep = doc.get("sweep", {})
    bad = set(sweep) - set(_SWEEP_KEYS)
    if bad:
        raise ValidationError(f"unknown sweep keys: {sorted(bad)}")
    out["sweep"] = sweep
    return out


def _config_from_flags(args) -> dict:
    if getattr(args, "config", None):
        cfg = load_run_config(args.config)
    else:
        cfg = {
            "model": ModelConfig(),
            "pretrain": TrainConfig(),
            "finetune": TrainConfig(),
            "sweep": {},
        }
    return cfg


def _parse_floats(text: str, n: int, what: str) -> list[float]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != n:
        raise ValidationError(f"{what} needs {n} comma-separated values, got {len(parts)}")
    return [float(p) for p in parts]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    props = _parse_floats(args.proportions, 5, "--proportions")
    corpus = synthesize_corpus(
        args.subjects, args.epochs_per_subject, props, args.sample_rate, args.seed
    )
    write_esr(args.out, corpus)
    counts = corpus.label_counts()
    total = int(counts.sum())
    _emit(
        {
            "event": "summary",
            "command": "synth",
            "out": str(args.out),
            "subjects": corpus.n_subjects,
            "epochs": total,
            "label_distribution": {
                s.name: counts[int(s)] / total for s in SleepStage
            },
        }
    )
    return 0


def cmd_split(args) -> int:
    corpus = read_esr(args.infile)
    fr = _parse_floats(args.fractions, 3, "--fractions")
    spec = SplitSpec(fr[0], fr[1], fr[2], args.seed)
    train, val, test = split_subjectwise(corpus, spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_esr(out_dir / f"{name}.esr", part)
    _emit(
        {
            "event": "summary",
            "command": "split",
            "out_dir": str(out_dir),
            "sizes": {"train": train.n_subjects, "val": val.n_subjects, "test": test.n_subjects},
        }
    )
    return 0


def _progress_printer(event: str):
    def cb(row: dict):
        _emit({"event": event, **row})

    return cb


def cmd_pretrain(args) -> int:
    cfg = _config_from_flags(args)
    train_cfg = cfg["pretrain"]
    if args.seed is not None:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": args.seed})
    corpus = read_esr(args.train)
    start = load_checkpoint(args.resume) if args.resume else None
    ckpt = pretrain(corpus, cfg["model"], train_cfg, start=start,
                    progress=_progress_printer("epoch"))
    save_checkpoint(args.out_ckpt, ckpt)
    _emit(
        {
            "event": "summary",
            "command": "pretrain",
            "out_ckpt": str(args.out_ckpt),
            "epochs": ckpt.epoch,
            "parameters": ckpt.params.n_parameters(),
        }
    )
    return 0


def cmd_finetune(args) -> int:
    cfg = _config_from_flags(args)
    train_cfg = cfg["finetune"]
    if args.seed is not None:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": args.seed})
    train_set = read_esr(args.train)
    val_set = read_esr(args.val)
    start = load_checkpoint(args.init_ckpt) if args.init_ckpt else None
    best, history = finetune(start, train_set, val_set, cfg["model"], train_cfg,
                             progress=_progress_printer("epoch"))
    save_checkpoint(args.out_ckpt, best)
    top = max(history, key=lambda r: r["val_bal_acc"]) if history else {}
    _emit(
        {
            "event": "summary",
            "command": "finetune",
            "out_ckpt": str(args.out_ckpt),
            "mode": "pretrained" if args.init_ckpt else "scratch",
            "best_lr": top.get("lr"),
            "best_epoch": best.epoch,
            "best_val_bal_acc": top.get("val_bal_acc"),
        }
    )
    return 0


def cmd_evaluate(args) -> int:
    test_set = read_esr(args.test)
    ckpt = load_checkpoint(args.ckpt)
    report, cm = evaluate_stager(ckpt.params, test_set)
    doc = report.to_flat_dict()
    doc["confusion"] = cm.tolist()
    with open(args.out_json, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _emit({"event": "summary", "command": "evaluate", "out_json": str(args.out_json),
           **report.to_flat_dict()})
    return 0


def cmd_sweep(args) -> int:
    cfg = _config_from_flags(args)
    data_dir = Path(args.data_dir)
    data = tuple(read_esr(data_dir / f"{n}.esr") for n in ("train", "val", "test"))
    sweep_kw = dict(cfg["sweep"])
    for key in ("label_fractions", "methods", "pretrain_multipliers", "seeds"):
        if key in sweep_kw:
            sweep_kw[key] = tuple(sweep_kw[key])
    spec = SweepSpec(
        model_cfg=cfg["model"], pretrain_cfg=cfg["pretrain"],
        finetune_cfg=cfg["finetune"], **sweep_kw,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = run_label_efficiency if args.experiment == "label_efficiency" else run_pretrain_scaling
    result = runner(spec, data, out_dir=out_dir, progress=_progress_printer("cell"))
    emit_report(result, out_dir / "report.csv", "csv")
    emit_report(result, out_dir / "report.json", "json")
    write_manifest(result, spec, out_dir / "manifest.json")
    _emit(
        {
            "event": "summary",
            "command": "sweep",
            "experiment": args.experiment,
            "out_dir": str(out_dir),
            "rows": len(result.rows),
        }
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="sleepstager",
        description="Transformer sleep staging with position-prediction pretraining.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ESR corpus", formatter_class=fmt)
    p.add_argument("--subjects", type=int, required=True, help="number of subjects")
    p.add_argument("--epochs-per-subject", type=int, default=200, help="30 s epochs per subject")
    p.add_argument(
        "--proportions",
        default=",".join(str(p) for p in DEFAULT_STAGE_PROPORTIONS),
        help="W,NR1,NR2,NR3,R stage proportions (training-split distribution)",
    )
    p.add_argument("--sample-rate", type=float, default=100.0, help="Hz, 100 or 200")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output ESR path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="subject-wise train/val/test split", formatter_class=fmt)
    p.add_argument("--in", dest="infile", required=True, help="input ESR path")
    p.add_argument("--fractions", default="0.662,0.220,0.118",
                   help="train,val,test subject fractions (full-scale split shape)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True, help="directory for train/val/test.esr")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="self-supervised pretraining", formatter_class=fmt)
    p.add_argument("--train", required=True, help="training ESR (labels ignored)")
    p.add_argument("--config", help="run-config JSON (defaults: lr 1e-3, 50 epochs, keep 0.5, mask 0)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out-ckpt", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning (scratch without --init-ckpt)",
                       formatter_class=fmt)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--config", help="run-config JSON (defaults: lr grid 1e-5..1e-3, 200 epochs)")
    p.add_argument("--init-ckpt", help="pretrained checkpoint; omit for the scratch baseline")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out-ckpt", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="stage a test set with a checkpoint", formatter_class=fmt)
    p.add_argument("--test", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-json", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a label-efficiency or pretraining-scale sweep",
                       formatter_class=fmt)
    p.add_argument("--data-dir", required=True, help="directory with train/val/test.esr")
    p.add_argument("--spec", dest="config", help="run-config JSON with a sweep section")
    p.add_argument("--experiment", choices=("label_efficiency", "pretrain_scaling"),
                   default="label_efficiency")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
