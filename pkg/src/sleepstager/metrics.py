"""Classification metrics over a 5x5 confusion matrix (rows true, cols predicted)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .records import N_STAGES, SleepStage


def confusion(preds, labels) -> np.ndarray:
    """Count matrix: entry (i, j) = #pairs with true stage i, predicted stage j."""
    p = np.asarray([int(x) for x in preds], dtype=np.int64)
    y = np.asarray([int(x) for x in labels], dtype=np.int64)
    if p.size != y.size:
        raise ValidationError(f"length mismatch: {p.size} preds vs {y.size} labels")
    if p.size == 0:
        raise ValidationError("empty prediction/label sequences")
    if ((p < 0) | (p >= N_STAGES) | (y < 0) | (y >= N_STAGES)).any():
        raise ValidationError("stage codes must lie in 0..4")
    cm = np.zeros((N_STAGES, N_STAGES), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.shape != (N_STAGES, N_STAGES):
        raise ValidationError(f"confusion matrix must be 5x5, got {cm.shape}")
    if (cm < 0).any():
        raise ValidationError("confusion matrix entries must be non-negative")
    if cm.sum() == 0:
        raise ValidationError("confusion matrix is empty")
    return cm.astype(np.float64)


def balanced_accuracy(cm) -> float:
    """Unweighted mean of per-class recall; classes with no true examples are
    excluded from the mean."""
    m = _check_cm(cm)
    row = m.sum(1)
    present = row > 0
    return float((np.diag(m)[present] / row[present]).mean())


def accuracy(cm) -> float:
    m = _check_cm(cm)
    return float(np.trace(m) / m.sum())


def cohens_kappa(cm) -> float:
    """Chance-corrected agreement; 0 by convention when the margins make
    chance agreement certain (single-cell matrix)."""
    m = _check_cm(cm)
    total = m.sum()
    p_o = np.trace(m) / total
    p_e = float((m.sum(1) * m.sum(0)).sum() / (total * total))
    if p_e == 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def f1_scores(cm):
    """Per-class F1 (0 when precision+recall is 0) and their unweighted mean."""
    m = _check_cm(cm)
    diag = np.diag(m)
    col = m.sum(0)
    row = m.sum(1)
    prec = np.divide(diag, col, out=np.zeros(N_STAGES), where=col > 0)
    rec = np.divide(diag, row, out=np.zeros(N_STAGES), where=row > 0)
    denom = prec + rec
    f1 = np.divide(2.0 * prec * rec, denom, out=np.zeros(N_STAGES), where=denom > 0)
    return f1, float(f1.mean())


@dataclass
class MetricsReport:
    """The scalar metrics reported for one evaluation.

    kappa is left on its natural scale (it can be negative for
    worse-than-chance predictors; no clamping is applied).
    """

    balanced_accuracy: float
    accuracy: float
    kappa: float
    macro_f1: float
    per_class_f1: tuple[float, float, float, float, float]

    def to_flat_dict(self) -> dict[str, float]:
        out = {
            "bal_acc": self.balanced_accuracy,
            "acc": self.accuracy,
            "kappa": self.kappa,
            "mf1": self.macro_f1,
        }
        for stage, f1 in zip(SleepStage, self.per_class_f1):
            out[f"f1_{stage.name}"] = f1
        return out

    @classmethod
    def from_flat_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            balanced_accuracy=d["bal_acc"],
            accuracy=d["acc"],
            kappa=d["kappa"],
            macro_f1=d["mf1"],
            per_class_f1=tuple(d[f"f1_{s.name}"] for s in SleepStage),
        )


def compute_report(cm) -> MetricsReport:
    per_class, macro = f1_scores(cm)
    return MetricsReport(
        balanced_accuracy=balanced_accuracy(cm),
        accuracy=accuracy(cm),
        kappa=cohens_kappa(cm),
        macro_f1=macro,
        per_class_f1=tuple(float(x) for x in per_class),
    )
