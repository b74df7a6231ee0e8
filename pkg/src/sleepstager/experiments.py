"""Label-efficiency and pretraining-scale sweeps, with CSV/JSON reporting.

Both experiments share one fixed test split and pair their supervised subsets:
for a given (seed, fraction) the labeled subjects are identical across
methods and pretraining multipliers, so rows are directly comparable.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .metrics import MetricsReport, compute_report, confusion
from .model import ModelConfig
from .records import SubjectSet, subsample_subjects
from .trainer import (
    Checkpoint,
    TrainConfig,
    build_dataset,
    derive_seed,
    finetune,
    predict_stages,
    pretrain,
    save_checkpoint,
)

METHOD_SCRATCH = "scratch"
METHOD_PT = "pretrain_finetune"

# Full-size reference balanced accuracies, attached to emitted rows as
# annotations (never asserted): label-efficiency rows key on
# (method, fraction), pretraining-scale rows on (fraction, multiplier).
LABEL_EFFICIENCY_REFERENCE = {
    (METHOD_SCRATCH, 0.01): 0.47,
    (METHOD_SCRATCH, 0.10): 0.65,
    (METHOD_SCRATCH, 1.00): 0.71,
    (METHOD_PT, 0.01): 0.52,
    (METHOD_PT, 0.10): 0.70,
    (METHOD_PT, 1.00): 0.74,
}
PRETRAIN_SCALING_REFERENCE = {
    (0.01, 1): 0.52,
    (0.01, 10): 0.55,
    (0.01, 100): 0.63,
    (0.10, 1): 0.70,
    (0.10, 10): 0.72,
}


def reference_bal_acc(method: str, fraction: float, multiplier: int):
    """Full-size reference annotation for a sweep cell, if one exists."""
    if multiplier > 1:
        return PRETRAIN_SCALING_REFERENCE.get((round(fraction, 6), multiplier))
    return LABEL_EFFICIENCY_REFERENCE.get((method, round(fraction, 6)))

# seed stream tags for the sweep machinery
_TAG_SUB_TRAIN, _TAG_SUB_VAL, _TAG_EXTRAS, _TAG_PRETRAIN, _TAG_FINETUNE = range(0x50, 0x55)

REPORT_COLUMNS = (
    "method",
    "fraction",
    "multiplier",
    "seed",
    "bal_acc",
    "acc",
    "kappa",
    "mf1",
    "f1_W",
    "f1_NR1",
    "f1_NR2",
    "f1_NR3",
    "f1_R",
)


@dataclass
class SweepSpec:
    """What to sweep and with which model/training settings."""

    label_fractions: tuple = (0.01, 0.10, 1.00)
    methods: tuple = (METHOD_SCRATCH, METHOD_PT)
    pretrain_multipliers: tuple = (1, 10, 100)
    seeds: tuple = (0, 1, 2)
    model_cfg: ModelConfig = field(default_factory=ModelConfig)
    pretrain_cfg: TrainConfig = field(default_factory=TrainConfig)
    finetune_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(n_epochs=200))

    def validate(self) -> None:
        if not self.label_fractions:
            raise ValidationError("label_fractions must not be empty")
        for f in self.label_fractions:
            if not 0.0 < f <= 1.0:
                raise ValidationError(f"label fractions must lie in (0, 1], got {f}")
        for m in self.pretrain_multipliers:
            if int(m) != m or m < 1:
                raise ValidationError(f"pretrain multipliers must be integers >= 1, got {m}")
        bad = set(self.methods) - {METHOD_SCRATCH, METHOD_PT}
        if bad:
            raise ValidationError(f"unknown methods: {sorted(bad)}")
        if not self.seeds:
            raise ValidationError("need at least one seed")
        self.model_cfg.validate()
        self.pretrain_cfg.validate()
        self.finetune_cfg.validate()


@dataclass
class SweepRow:
    """One trained cell: its metrics on the shared test split plus provenance."""

    method: str
    fraction: float
    multiplier: int
    seed: int
    metrics: MetricsReport
    train_subjects: tuple
    val_subjects: tuple
    pretrain_subjects: tuple
    checkpoint_path: str | None
    wall_time_s: float
    best_lr: float
    best_epoch: int
    best_val_bal_acc: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    test_subjects: tuple

    def sorted_rows(self) -> list[SweepRow]:
        return sorted(
            self.rows, key=lambda r: (r.method, r.fraction, r.multiplier, r.seed)
        )


def _check_disjoint(train: SubjectSet, val: SubjectSet, test: SubjectSet) -> None:
    names = ("train", "val", "test")
    sets = (set(train.subject_ids), set(val.subject_ids), set(test.subject_ids))
    for i in range(3):
        for j in range(i + 1, 3):
            both = sets[i] & sets[j]
            if both:
                raise ValidationError(
                    f"{names[i]}/{names[j]} splits share subjects: {sorted(both)[:5]}"
                )


def _supervised_subsets(train, val, fraction, frac_idx, seed):
    sub_train = subsample_subjects(train, fraction, derive_seed(seed, frac_idx, _TAG_SUB_TRAIN))
    sub_val = subsample_subjects(val, fraction, derive_seed(seed, frac_idx, _TAG_SUB_VAL))
    return sub_train, sub_val


def _train_cell(
    spec: SweepSpec,
    method: str,
    multiplier: int,
    fraction: float,
    seed: int,
    frac_idx: int,
    sub_train: SubjectSet,
    sub_val: SubjectSet,
    pretrain_set: SubjectSet | None,
    x_test: np.ndarray,
    y_test: np.ndarray,
    out_dir,
) -> SweepRow:
    t0 = time.perf_counter()
    start: Checkpoint | None = None
    if method == METHOD_PT:
        pt_cfg = replace(
            spec.pretrain_cfg, seed=derive_seed(seed, frac_idx, multiplier, _TAG_PRETRAIN)
        )
        start = pretrain(pretrain_set, spec.model_cfg, pt_cfg)
    ft_cfg = replace(spec.finetune_cfg, seed=derive_seed(seed, frac_idx, _TAG_FINETUNE))
    best, history = finetune(start, sub_train, sub_val, spec.model_cfg, ft_cfg)
    preds = predict_stages(best.params, x_test)
    report = compute_report(confusion(preds, y_test))
    best_row = max(history, key=lambda r: r["val_bal_acc"]) if history else {}

    ckpt_path = None
    if out_dir is not None:
        name = f"{method}_f{fraction:g}_x{multiplier}_s{seed}.ckpt"
        ckpt_path = str(out_dir / name)
        save_checkpoint(ckpt_path, best)

    return SweepRow(
        method=method,
        fraction=fraction,
        multiplier=multiplier,
        seed=seed,
        metrics=report,
        train_subjects=tuple(sub_train.subject_ids),
        val_subjects=tuple(sub_val.subject_ids),
        pretrain_subjects=tuple(pretrain_set.subject_ids) if pretrain_set else (),
        checkpoint_path=ckpt_path,
        wall_time_s=time.perf_counter() - t0,
        best_lr=best_row.get("lr", float("nan")),
        best_epoch=best.epoch,
        best_val_bal_acc=best_row.get("val_bal_acc", float("nan")),
    )


def run_label_efficiency(spec: SweepSpec, data, out_dir=None, progress=None) -> SweepResult:
    """Scratch vs pretrain-then-finetune at each label fraction.

    The pretraining pool of the PT arm is the subsampled supervised training
    set itself, with labels ignored (multiplier fixed at 1).
    """
    spec.validate()
    train, val, test = data
    _check_disjoint(train, val, test)
    x_test, y_test = build_dataset(test, spec.model_cfg)
    rows = []
    for seed in spec.seeds:
        for frac_idx, fraction in enumerate(spec.label_fractions):
            sub_train, sub_val = _supervised_subsets(train, val, fraction, frac_idx, seed)
            for method in spec.methods:
                row = _train_cell(
                    spec, method, 1, fraction, seed, frac_idx,
                    sub_train, sub_val,
                    sub_train if method == METHOD_PT else None,
                    x_test, y_test, out_dir,
                )
                rows.append(row)
                if progress is not None:
                    progress(_row_dict(row))
    return SweepResult(rows, tuple(test.subject_ids))


def run_pretrain_scaling(spec: SweepSpec, data, out_dir=None, progress=None) -> SweepResult:
    """Pretrain-then-finetune with multiplier-times-larger unlabeled pools.

    The pool at multiplier m holds m times the supervised subject count, is a
    superset of the supervised subjects, and pools are nested across
    multipliers; extra subjects are drawn from the training split only.
    """
    spec.validate()
    train, val, test = data
    _check_disjoint(train, val, test)
    x_test, y_test = build_dataset(test, spec.model_cfg)
    rows = []
    for seed in spec.seeds:
        for frac_idx, fraction in enumerate(spec.label_fractions):
            sub_train, sub_val = _supervised_subsets(train, val, fraction, frac_idx, seed)
            sup_ids = list(sub_train.subject_ids)
            remaining = [s for s in train.subject_ids if s not in set(sup_ids)]
            extras_rng = np.random.default_rng(
                derive_seed(seed, frac_idx, _TAG_EXTRAS) & 0xFFFFFFFFFFFFFFFF
            )
            extras = [remaining[int(i)] for i in extras_rng.permutation(len(remaining))]
            for multiplier in spec.pretrain_multipliers:
                needed = (int(multiplier) - 1) * len(sup_ids)
                if needed > len(extras):
                    raise ValidationError(
                        f"multiplier {multiplier} needs {needed} extra subjects beyond the "
                        f"{len(sup_ids)} supervised ones; only {len(extras)} remain in the "
                        "training split"
                    )
                pool_ids = set(sup_ids) | set(extras[:needed])
                pool = train.subset(s for s in train.subject_ids if s in pool_ids)
                row = _train_cell(
                    spec, METHOD_PT, int(multiplier), fraction, seed, frac_idx,
                    sub_train, sub_val, pool, x_test, y_test, out_dir,
                )
                rows.append(row)
                if progress is not None:
                    progress(_row_dict(row))
    return SweepResult(rows, tuple(test.subject_ids))


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def _row_dict(row: SweepRow) -> dict:
    out = {
        "method": row.method,
        "fraction": row.fraction,
        "multiplier": row.multiplier,
        "seed": row.seed,
    }
    out.update(row.metrics.to_flat_dict())
    out["reference_bal_acc"] = reference_bal_acc(row.method, row.fraction, row.multiplier)
    return out


def emit_report(result: SweepResult, path, format: str = "csv") -> None:
    """Write the sweep table. CSV rounds metrics to 2 decimals (half-even,
    matching float formatting); JSON keeps full precision."""
    rows = [_row_dict(r) for r in result.sorted_rows()]
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for r in rows:
                writer.writerow(
                    [
                        r["method"],
                        f"{r['fraction']:g}",
                        r["multiplier"],
                        r["seed"],
                    ]
                    + [f"{r[c]:.2f}" for c in REPORT_COLUMNS[4:]]
                )
    elif format == "json":
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")
    else:
        raise ValidationError(f"unknown report format {format!r}")


def write_manifest(result: SweepResult, spec: SweepSpec, path) -> None:
    """Provenance record: spec, seeds, subjects and artifacts per row."""
    doc = {
        "spec": {
            "label_fractions": list(spec.label_fractions),
            "methods": list(spec.methods),
            "pretrain_multipliers": [int(m) for m in spec.pretrain_multipliers],
            "seeds": list(spec.seeds),
            "model": spec.model_cfg.to_dict(),
            "pretrain": spec.pretrain_cfg.to_dict(),
            "finetune": spec.finetune_cfg.to_dict(),
        },
        "test_subjects": list(result.test_subjects),
        "rows": [
            {
                **_row_dict(r),
                "train_subjects": list(r.train_subjects),
                "val_subjects": list(r.val_subjects),
                "pretrain_subjects": list(r.pretrain_subjects),
                "checkpoint_path": r.checkpoint_path,
                "wall_time_s": r.wall_time_s,
                "best_lr": r.best_lr,
                "best_epoch": r.best_epoch,
                "best_val_bal_acc": r.best_val_bal_acc,
            }
            for r in result.sorted_rows()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
