"""Optimization loops: position-prediction pretraining, supervised fine-tuning
with class-weighted cross-entropy and learning-rate grid search, plus the
versioned checkpoint container.

Checkpoint layout (all integers little-endian):

    magic "PFCK" (4 bytes) | version u16
    3 sections, each u32 byte-length + payload:
      [0] canonical JSON: {"adam_t", "epoch", "model", "seed"}
      [1] parameter tensors
      [2] optimizer first/second moments (names prefixed "m."/"v.")
    tensor blob: u32 count, then per tensor
      u16 name_len | name UTF-8 | u8 ndim | u32 dims... | f32 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .dsp import signal_to_patches
from .errors import (
    CheckpointVersionError,
    CorruptionError,
    FormatError,
    NumericalError,
    ValidationError,
)
from .metrics import MetricsReport, compute_report, confusion
from .model import (
    ModelConfig,
    ModelParams,
    StageBatch,
    forward_pretext,
    forward_stage,
    init_params,
    loss_and_gradients,
)
from .pretext import make_pretext_batch
from .records import N_STAGES, SubjectSet

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1

_SEED_MASK = 0xFFFFFFFFFFFFFFFF
# stream tags keep the seed streams for unrelated purposes disjoint
_TAG_INIT, _TAG_ORDER, _TAG_DROP, _TAG_TASK, _TAG_MONITOR, _TAG_HEAD = range(6)


def derive_seed(*parts: int) -> int:
    """Collapse a tuple of integers into one reproducible 64-bit seed."""
    seq = np.random.SeedSequence([int(p) & _SEED_MASK for p in parts])
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass
class TrainConfig:
    """Optimizer and loop settings.

    batch_size defaults to 64 for desk hardware; the full-scale runs used 512.
    keep_ratio/mask_ratio only apply to pretraining, lr_grid only to
    supervised fine-tuning (the grid spans the tuning interval 1e-5..1e-3).
    """

    learning_rate: float = 1e-3
    batch_size: int = 64
    n_epochs: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    keep_ratio: float = 0.5
    mask_ratio: float = 0.0
    lr_grid: tuple = (1e-5, 1e-4, 1e-3)
    selection_metric: str = "balanced_accuracy"
    track_train_accuracy: bool = False

    def validate(self) -> None:
        if not 0.0 < self.learning_rate < 1.0:
            raise ValidationError(f"learning_rate must be in (0, 1), got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.n_epochs < 0:
            raise ValidationError(f"n_epochs must be >= 0, got {self.n_epochs}")
        for name in ("keep_ratio", "mask_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if not self.lr_grid:
            raise ValidationError("lr_grid must not be empty")
        for lr in self.lr_grid:
            if not 1e-5 <= lr <= 1e-3:
                raise ValidationError(f"lr_grid entries must lie in [1e-5, 1e-3], got {lr}")
        if self.selection_metric != "balanced_accuracy":
            raise ValidationError(f"unsupported selection metric {self.selection_metric!r}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["lr_grid"] = list(self.lr_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "lr_grid" in d:
            d["lr_grid"] = tuple(d["lr_grid"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# loss pieces and the optimizer
# ---------------------------------------------------------------------------


def class_weights(label_counts) -> np.ndarray:
    """Inverse-frequency class weights w_c = N / (K * n_c)."""
    counts = np.asarray(label_counts, dtype=np.float64)
    if counts.shape != (N_STAGES,):
        raise ValidationError(f"need {N_STAGES} class counts, got shape {counts.shape}")
    if (counts <= 0).any():
        empty = [i for i, c in enumerate(counts) if c <= 0]
        raise ValidationError(
            f"classes {empty} have zero count; merge or drop them before weighting"
        )
    return counts.sum() / (N_STAGES * counts)


def weighted_ce(logits, label, weights) -> float:
    """w_label * (-log softmax(logits)[label]); batches reduce by mean."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    logp = z - np.log(np.exp(z).sum())
    return float(-weights[int(label)] * logp[int(label)])


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.tensors.items()},
            v={k: np.zeros_like(a) for k, a in params.tensors.items()},
            t=0,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            t=self.t,
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
    learning_rate: float | None = None,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; purely functional and deterministic."""
    lr = config.learning_rate if learning_rate is None else learning_rate
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    t = state.t + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    updated, new_m, new_v = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r} at step {t}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        updated[name] = p - step.astype(p.dtype, copy=False)
        new_m[name] = m
        new_v[name] = v
    return ModelParams(params.config, updated), AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# dataset assembly and evaluation
# ---------------------------------------------------------------------------


def build_dataset(subjects: SubjectSet, cfg: ModelConfig):
    """Tokenize every epoch of `subjects`: (N, n_tokens, patch_len) float32
    patches and (N,) int64 stage labels."""
    xs, ys = [], []
    for rec in subjects.iter_records():
        xs.append(signal_to_patches(rec.signal, rec.sample_rate_hz,
                                    cfg.patch_len, cfg.n_tokens))
        ys.append(int(rec.label))
    if not xs:
        raise ValidationError("SubjectSet contains no epochs")
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def predict_stages(params: ModelParams, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    for lo in range(0, len(patches), batch_size):
        logits = forward_stage(params, patches[lo : lo + batch_size])
        preds.append(logits.argmax(-1))
    return np.concatenate(preds)


def evaluate_stager(params: ModelParams, subjects: SubjectSet, batch_size: int = 256):
    """Stage the whole SubjectSet; returns (MetricsReport, confusion matrix)."""
    patches, labels = build_dataset(subjects, params.config)
    preds = predict_stages(params, patches, batch_size)
    cm = confusion(preds, labels)
    return compute_report(cm), cm


def pretext_eval(
    params: ModelParams,
    patches: np.ndarray,
    keep_ratio: float,
    mask_ratio: float,
    seed: int,
    batch_size: int = 256,
    max_sequences: int | None = None,
):
    """Posed-task loss/accuracy on (N, T, P) patches with eval-mode forward."""
    n = len(patches) if max_sequences is None else min(len(patches), max_sequences)
    total_ce = 0.0
    total_hidden = 0
    total_correct = 0
    for lo in range(0, n, batch_size):
        idx = range(lo, min(lo + batch_size, n))
        batches = [
            make_pretext_batch(patches[i], keep_ratio, mask_ratio,
                               seed=derive_seed(seed, _TAG_TASK, i))
            for i in idx
        ]
        logits = forward_pretext(params, batches)
        for j, b in enumerate(batches):
            hidden = ~b.pe_visibility
            if not hidden.any():
                continue
            z = logits[j].astype(np.float64)
            z = z - z.max(-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
            total_ce -= logp[np.arange(b.n_tokens), b.position_labels][hidden].sum()
            total_hidden += int(hidden.sum())
            pred = logits[j].argmax(-1)
            total_correct += int((pred[hidden] == b.position_labels[hidden]).sum())
    if total_hidden == 0:
        raise ValidationError("no position-hidden tokens in evaluation set")
    return float(total_ce / total_hidden), total_correct / total_hidden


def _batches(order: np.ndarray, batch_size: int):
    for lo in range(0, len(order), batch_size):
        yield order[lo : lo + batch_size]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Serializable training state: params, optimizer moments, loop position."""

    config: ModelConfig
    params: ModelParams
    adam: AdamState
    epoch: int
    seed: int
    version: int = CHECKPOINT_VERSION


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.tobytes()
    return bytes(out)


def _unpack_tensors(data: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CorruptionError("tensor section truncated", offset=pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32, copy=True)
    if pos != len(data):
        raise CorruptionError("trailing bytes in tensor section", offset=pos)
    return tensors


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "adam_t": ckpt.adam.t,
        "epoch": ckpt.epoch,
        "model": ckpt.config.to_dict(),
        "seed": ckpt.seed,
    }
    sections = [
        json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8"),
        _pack_tensors(ckpt.params.tensors),
        _pack_tensors(
            {f"m.{k}": v for k, v in ckpt.adam.m.items()}
            | {f"v.{k}": v for k, v in ckpt.adam.v.items()}
        ),
    ]
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<H", ckpt.version)
    for sec in sections:
        out += struct.pack("<I", len(sec))
        out += sec
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    pos = 6
    sections = []
    for _ in range(3):
        if pos + 4 > len(data):
            raise CorruptionError("missing section header", offset=pos)
        (ln,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        if pos + ln > len(data):
            raise CorruptionError("section truncated", offset=pos)
        sections.append(data[pos : pos + ln])
        pos += ln
    if pos != len(data):
        raise CorruptionError("trailing bytes after last section", offset=pos)

    meta = json.loads(sections[0].decode("utf-8"))
    config = ModelConfig.from_dict(meta["model"])
    params = ModelParams(config, _unpack_tensors(sections[1]))
    params.validate()
    moments = _unpack_tensors(sections[2])
    adam = AdamState(
        m={k[2:]: v for k, v in moments.items() if k.startswith("m.")},
        v={k[2:]: v for k, v in moments.items() if k.startswith("v.")},
        t=int(meta["adam_t"]),
    )
    if set(adam.m) != set(params.tensors) or set(adam.v) != set(params.tensors):
        raise CorruptionError("optimizer moments do not match parameters")
    return Checkpoint(config, params, adam, int(meta["epoch"]), int(meta["seed"]))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def pretrain(
    corpus: SubjectSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    start: Checkpoint | None = None,
    progress=None,
) -> Checkpoint:
    """Self-supervised pretraining over every epoch of `corpus` (labels unused).

    Resumable: passing a checkpoint continues from its epoch counter with the
    same derived seed streams, so an interrupted run replays identically.
    """
    model_cfg.validate()
    train_cfg.validate()
    patches, _ = build_dataset(corpus, model_cfg)
    base = train_cfg.seed

    if start is not None:
        if start.config != model_cfg:
            raise ValidationError("checkpoint architecture differs from the requested model")
        params, adam, first_epoch = start.params.copy(), start.adam.copy(), start.epoch
    else:
        params = init_params(model_cfg, derive_seed(base, _TAG_INIT))
        adam = AdamState.zeros_like(params)
        first_epoch = 0

    n = len(patches)
    for epoch in range(first_epoch, train_cfg.n_epochs):
        order = np.random.default_rng(
            [base & _SEED_MASK, _TAG_ORDER, epoch]
        ).permutation(n)
        task_rng = np.random.default_rng([base & _SEED_MASK, _TAG_TASK, epoch])
        losses = []
        for step, idx in enumerate(_batches(order, train_cfg.batch_size)):
            batch = [
                make_pretext_batch(
                    patches[i], train_cfg.keep_ratio, train_cfg.mask_ratio, seed=task_rng
                )
                for i in idx
            ]
            loss, grads = loss_and_gradients(
                params,
                batch,
                "pretext",
                train_mode=True,
                seed=derive_seed(base, _TAG_DROP, epoch, step),
            )
            params, adam = adam_step(params, grads, adam, train_cfg)
            losses.append(loss)
        if progress is not None:
            mon_loss, mon_acc = pretext_eval(
                params,
                patches,
                train_cfg.keep_ratio,
                train_cfg.mask_ratio,
                seed=derive_seed(base, _TAG_MONITOR, epoch),
                max_sequences=256,
            )
            progress(
                {
                    "phase": "pretrain",
                    "epoch": epoch + 1,
                    "loss": float(np.mean(losses)) if losses else None,
                    "pretext_loss": mon_loss,
                    "pretext_acc": mon_acc,
                }
            )
    return Checkpoint(model_cfg, params, adam, train_cfg.n_epochs, base)


def head_swap(params: ModelParams, seed: int) -> ModelParams:
    """Fresh output heads on top of bit-identical encoder weights."""
    fresh = init_params(params.config, seed, dtype=params.dtype)
    out = params.copy()
    for name in ("head.pos.W", "head.pos.b", "head.stage.W", "head.stage.b"):
        out.tensors[name] = fresh.tensors[name]
    return out


def finetune(
    start: Checkpoint | None,
    train: SubjectSet,
    val: SubjectSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    progress=None,
):
    """Supervised training over the lr grid with per-epoch validation.

    `start=None` is the scratch baseline (fresh initialization); a checkpoint
    keeps its encoder weights and gets fresh heads. Every run trains all
    layers. Returns (best checkpoint, history): best = highest validation
    balanced accuracy across every run and epoch, earliest on ties.
    """
    model_cfg.validate()
    train_cfg.validate()
    if start is not None and start.config != model_cfg:
        raise ValidationError("checkpoint architecture differs from the requested model")
    overlap = set(train.subject_ids) & set(val.subject_ids)
    if overlap:
        raise ValidationError(f"train/val share subjects: {sorted(overlap)[:5]}")
    x_tr, y_tr = build_dataset(train, model_cfg)
    x_val, y_val = build_dataset(val, model_cfg)
    counts = np.bincount(y_tr, minlength=N_STAGES)
    weights = class_weights(counts)
    base = train_cfg.seed

    best = None  # (bal_acc, run_idx, epoch, params, adam)
    history = []
    n = len(x_tr)
    for run_idx, lr in enumerate(train_cfg.lr_grid):
        if start is not None:
            params = head_swap(start.params, derive_seed(base, _TAG_HEAD, run_idx))
        else:
            params = init_params(model_cfg, derive_seed(base, _TAG_INIT, run_idx))
        adam = AdamState.zeros_like(params)
        for epoch in range(train_cfg.n_epochs):
            order = np.random.default_rng(
                [base & _SEED_MASK, _TAG_ORDER, run_idx, epoch]
            ).permutation(n)
            losses = []
            for step, idx in enumerate(_batches(order, train_cfg.batch_size)):
                loss, grads = loss_and_gradients(
                    params,
                    StageBatch(x_tr[idx], y_tr[idx]),
                    "stage",
                    class_weights=weights,
                    train_mode=True,
                    seed=derive_seed(base, _TAG_DROP, run_idx, epoch, step),
                )
                params, adam = adam_step(params, grads, adam, train_cfg, learning_rate=lr)
                losses.append(loss)
            preds = predict_stages(params, x_val)
            val_bal = compute_report(confusion(preds, y_val)).balanced_accuracy
            row = {
                "lr": lr,
                "epoch": epoch + 1,
                "train_loss": float(np.mean(losses)) if losses else None,
                "val_bal_acc": val_bal,
            }
            if train_cfg.track_train_accuracy:
                tr_preds = predict_stages(params, x_tr)
                row["train_bal_acc"] = compute_report(
                    confusion(tr_preds, y_tr)
                ).balanced_accuracy
            history.append(row)
            if progress is not None:
                progress({"phase": "finetune", **row})
            if best is None or val_bal > best[0]:
                best = (val_bal, run_idx, epoch + 1, params.copy(), adam.copy())
        if train_cfg.n_epochs == 0 and best is None:
            best = (float("-inf"), run_idx, 0, params.copy(), adam.copy())
    assert best is not None
    return Checkpoint(model_cfg, best[3], best[4], best[2], base), history
