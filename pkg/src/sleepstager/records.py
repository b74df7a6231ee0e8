"""Epoched-signal store: ESR container format, synthetic corpora, subject-wise splits.

An ESR file holds one corpus of 30-second single-channel signal epochs grouped
by subject. Layout (all integers little-endian):

    magic "ESR1" (4 bytes) | version u8 = 1 | n_subjects u32
    per subject : id_len u16 | id UTF-8 | sample_rate f32 | n_epochs u32
    per epoch   : label u8 (0..4) | n_samples u32 | samples f32 * n_samples

Signals are stored as 32-bit floats, so a read/write cycle is bit-exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError

ESR_MAGIC = b"ESR1"
ESR_VERSION = 1

EPOCH_SECONDS = 30.0
VALID_SAMPLE_RATES = (100.0, 200.0)

# Synthetic-signal recipe knobs (amplitudes are unit-free; signals get
# instance-normalized downstream anyway, so only ratios matter).
CHIRP_AMPLITUDE = 0.75
CHIRP_F0_HZ = 1.0
CHIRP_F1_HZ = 20.0
SUBJECT_AMP_RANGE = (0.6, 1.4)
SUBJECT_BAND_SHIFT_HZ = 1.0


class SleepStage(IntEnum):
    """The five scored sleep stages, with their fixed integer codes."""

    W = 0
    NR1 = 1
    NR2 = 2
    NR3 = 3
    R = 4


N_STAGES = len(SleepStage)

#: Training-split stage proportions used as the synthesis default.
DEFAULT_STAGE_PROPORTIONS = (0.18, 0.15, 0.42, 0.12, 0.13)


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves away from zero (for x >= 0)."""
    return int(math.floor(x + 0.5))


def largest_remainder(proportions, total: int) -> list[int]:
    """Apportion `total` items to buckets proportionally, remainders to the
    largest fractional parts (ties to the earlier bucket)."""
    quotas = [p * total for p in proportions]
    counts = [int(math.floor(q)) for q in quotas]
    short = total - sum(counts)
    remainders = sorted(
        range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i)
    )
    for i in remainders[:short]:
        counts[i] += 1
    return counts


@dataclass
class EpochRecord:
    """One 30 s single-channel epoch with its stage label."""

    subject_id: str
    epoch_index: int
    sample_rate_hz: float
    signal: np.ndarray  # float32, len == 30 * sample_rate_hz
    label: SleepStage

    def validate(self) -> None:
        if self.epoch_index < 0:
            raise ValidationError(f"epoch_index must be >= 0, got {self.epoch_index}")
        if self.sample_rate_hz not in VALID_SAMPLE_RATES:
            raise ValidationError(
                f"sample_rate_hz must be one of {VALID_SAMPLE_RATES}, got {self.sample_rate_hz}"
            )
        expected = round_half_up(EPOCH_SECONDS * self.sample_rate_hz)
        if len(self.signal) != expected:
            raise ValidationError(
                f"signal length {len(self.signal)} != 30 s * {self.sample_rate_hz} Hz = {expected}"
            )
        if self.signal.dtype != np.float32:
            raise ValidationError(f"signal must be float32, got {self.signal.dtype}")
        if not int(self.label) in range(N_STAGES):
            raise ValidationError(f"label code out of range: {self.label!r}")

    def equals(self, other: "EpochRecord") -> bool:
        return (
            self.subject_id == other.subject_id
            and self.epoch_index == other.epoch_index
            and self.sample_rate_hz == other.sample_rate_hz
            and self.label == other.label
            and self.signal.tobytes() == other.signal.tobytes()
        )


@dataclass
class SubjectSet:
    """An ordered collection of subjects, each with their ordered epochs."""

    subject_ids: list[str] = field(default_factory=list)
    epochs: dict[str, list[EpochRecord]] = field(default_factory=dict)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_epochs(self) -> int:
        return sum(len(self.epochs[s]) for s in self.subject_ids)

    def iter_records(self):
        for sid in self.subject_ids:
            yield from self.epochs[sid]

    def label_counts(self) -> np.ndarray:
        counts = np.zeros(N_STAGES, dtype=np.int64)
        for rec in self.iter_records():
            counts[int(rec.label)] += 1
        return counts

    def subset(self, subject_ids) -> "SubjectSet":
        ids = list(subject_ids)
        return SubjectSet(ids, {s: self.epochs[s] for s in ids})

    def validate(self) -> None:
        if len(set(self.subject_ids)) != len(self.subject_ids):
            raise ValidationError("subject_ids contain duplicates")
        if set(self.subject_ids) != set(self.epochs):
            raise ValidationError("subject_ids and epoch map disagree")
        for sid in self.subject_ids:
            recs = self.epochs[sid]
            rates = {r.sample_rate_hz for r in recs}
            if len(rates) > 1:
                raise ValidationError(f"subject {sid!r} mixes sample rates {sorted(rates)}")
            for i, rec in enumerate(recs):
                if rec.epoch_index != i:
                    raise ValidationError(
                        f"subject {sid!r}: epoch_index {rec.epoch_index} at position {i}; "
                        "epochs must be consecutively indexed from 0"
                    )
                rec.validate()

    def equals(self, other: "SubjectSet") -> bool:
        if self.subject_ids != other.subject_ids:
            return False
        for sid in self.subject_ids:
            a, b = self.epochs[sid], other.epochs[sid]
            if len(a) != len(b) or not all(x.equals(y) for x, y in zip(a, b)):
                return False
        return True


@dataclass
class SplitSpec:
    """Subject-wise train/val/test fractions plus the shuffling seed."""

    train_fraction: float
    val_fraction: float
    test_fraction: float
    seed: int

    def validate(self) -> None:
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(f < 0 or f > 1 for f in fr):
            raise ValidationError(f"fractions must lie in [0,1], got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValidationError(f"fractions must sum to 1, got sum {sum(fr)!r}")


# ---------------------------------------------------------------------------
# ESR serialization
# ---------------------------------------------------------------------------


def write_esr(path, subjects: SubjectSet) -> None:
    """Serialize a SubjectSet to `path` in the ESR format (see module docstring)."""
    subjects.validate()
    out = bytearray()
    out += ESR_MAGIC
    out += struct.pack("<B", ESR_VERSION)
    out += struct.pack("<I", subjects.n_subjects)
    for sid in subjects.subject_ids:
        recs = subjects.epochs[sid]
        sid_bytes = sid.encode("utf-8")
        if len(sid_bytes) > 0xFFFF:
            raise ValidationError(f"subject id too long: {sid!r}")
        rate = recs[0].sample_rate_hz if recs else VALID_SAMPLE_RATES[0]
        out += struct.pack("<H", len(sid_bytes))
        out += sid_bytes
        out += struct.pack("<f", rate)
        out += struct.pack("<I", len(recs))
        for rec in recs:
            sig = np.ascontiguousarray(rec.signal, dtype="<f4")
            out += struct.pack("<BI", int(rec.label), sig.size)
            out += sig.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Cursor:
    """Byte-offset tracking reader that raises CorruptionError on overrun."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(
                f"file truncated: wanted {n} bytes, {len(self.data) - self.pos} left",
                offset=self.pos,
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_esr(path) -> SubjectSet:
    """Parse an ESR file back into a SubjectSet.

    Raises FormatError on a bad magic/version and CorruptionError (with the
    byte offset) if the file is truncated or structurally inconsistent.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    cur = _Cursor(data)
    magic = cur.take(4)
    if magic != ESR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {ESR_MAGIC!r}")
    (version,) = cur.unpack("<B")
    if version != ESR_VERSION:
        raise FormatError(f"unsupported ESR version {version}, expected {ESR_VERSION}")
    (n_subjects,) = cur.unpack("<I")
    subject_ids: list[str] = []
    epochs: dict[str, list[EpochRecord]] = {}
    for _ in range(n_subjects):
        (id_len,) = cur.unpack("<H")
        sid = cur.take(id_len).decode("utf-8")
        (rate,) = cur.unpack("<f")
        (n_epochs,) = cur.unpack("<I")
        recs = []
        for i in range(n_epochs):
            label_off = cur.pos
            label, n_samples = cur.unpack("<BI")
            if label >= N_STAGES:
                raise CorruptionError(f"invalid stage code {label}", offset=label_off)
            raw = cur.take(4 * n_samples)
            sig = np.frombuffer(raw, dtype="<f4").astype(np.float32, copy=True)
            recs.append(
                EpochRecord(
                    subject_id=sid,
                    epoch_index=i,
                    sample_rate_hz=rate,
                    signal=sig,
                    label=SleepStage(label),
                )
            )
        subject_ids.append(sid)
        epochs[sid] = recs
    if cur.pos != len(data):
        raise CorruptionError(
            f"{len(data) - cur.pos} trailing bytes after last subject", offset=cur.pos
        )
    out = SubjectSet(subject_ids, epochs)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def _band_mixture(rng, t, lo_hz, hi_hz, n_components=3, band_shift=0.0):
    """Sum of `n_components` random sinusoids inside [lo_hz, hi_hz]."""
    sig = np.zeros_like(t)
    for _ in range(n_components):
        f = rng.uniform(lo_hz, hi_hz) + band_shift
        phase = rng.uniform(0.0, 2.0 * np.pi)
        sig += rng.uniform(0.6, 1.0) * np.sin(2.0 * np.pi * f * t + phase)
    return sig / n_components


def _stage_signal(rng, stage: SleepStage, t, band_shift: float) -> np.ndarray:
    """Stage-dependent oscillatory content on top of white noise.

    W   : 8-12 Hz plus strong broadband noise (high variance)
    NR1 : 4-7 Hz
    NR2 : 4-7 Hz base with 12-14 Hz spindle bursts
    NR3 : high-amplitude 0.5-2 Hz
    R   : low-amplitude 4-8 Hz mixture
    """
    n = t.size
    if stage == SleepStage.W:
        sig = 1.0 * _band_mixture(rng, t, 8.0, 12.0, band_shift=band_shift)
        sig += rng.normal(0.0, 1.3, size=n)
    elif stage == SleepStage.NR1:
        sig = 1.0 * _band_mixture(rng, t, 4.0, 7.0, band_shift=band_shift)
        sig += rng.normal(0.0, 0.8, size=n)
    elif stage == SleepStage.NR2:
        sig = 1.0 * _band_mixture(rng, t, 4.0, 7.0, band_shift=band_shift)
        fs = 1.0 / (t[1] - t[0])
        for _ in range(rng.integers(2, 6)):
            dur = int(rng.uniform(0.5, 1.5) * fs)
            start = int(rng.integers(0, max(1, n - dur)))
            f_sp = rng.uniform(12.0, 14.0) + band_shift
            phase = rng.uniform(0.0, 2.0 * np.pi)
            window = np.hanning(dur)
            sig[start : start + dur] += 1.3 * window * np.sin(
                2.0 * np.pi * f_sp * t[start : start + dur] + phase
            )
        sig += rng.normal(0.0, 0.8, size=n)
    elif stage == SleepStage.NR3:
        sig = 3.0 * _band_mixture(rng, t, 0.5, 2.0, n_components=2, band_shift=band_shift)
        sig += rng.normal(0.0, 0.9, size=n)
    else:  # R
        sig = 0.5 * _band_mixture(rng, t, 4.0, 8.0, band_shift=band_shift)
        sig += rng.normal(0.0, 0.7, size=n)
    return sig


def _position_chirp(t) -> np.ndarray:
    """Linear 1 -> 20 Hz sweep over the epoch; ties patch content to time."""
    duration = t[-1] + (t[1] - t[0])
    rate = (CHIRP_F1_HZ - CHIRP_F0_HZ) / (2.0 * duration)
    return CHIRP_AMPLITUDE * np.sin(2.0 * np.pi * (CHIRP_F0_HZ * t + rate * t * t))


def synthesize_corpus(
    n_subjects: int,
    epochs_per_subject: int,
    stage_proportions=DEFAULT_STAGE_PROPORTIONS,
    sample_rate_hz: float = 100.0,
    seed: int = 0,
) -> SubjectSet:
    """Generate a deterministic synthetic corpus with stage-coded spectra.

    Stage labels are allocated per subject by largest-remainder quota on
    `stage_proportions` (so the empirical distribution matches the request up
    to quantization) and then shuffled. Every epoch also carries a low
    amplitude 1->20 Hz chirp so that patch content weakly encodes temporal
    position within the epoch.
    """
    if n_subjects < 1:
        raise ValidationError(f"n_subjects must be >= 1, got {n_subjects}")
    if epochs_per_subject < 1:
        raise ValidationError(f"epochs_per_subject must be >= 1, got {epochs_per_subject}")
    props = [float(p) for p in stage_proportions]
    if len(props) != N_STAGES:
        raise ValidationError(f"need {N_STAGES} stage proportions, got {len(props)}")
    if any(p < 0 for p in props):
        raise ValidationError(f"stage proportions must be non-negative, got {props}")
    if abs(sum(props) - 1.0) > 1e-6:
        raise ValidationError(f"stage proportions must sum to 1, got {sum(props)!r}")
    if sample_rate_hz not in VALID_SAMPLE_RATES:
        raise ValidationError(
            f"sample_rate_hz must be one of {VALID_SAMPLE_RATES}, got {sample_rate_hz}"
        )

    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    n = round_half_up(EPOCH_SECONDS * sample_rate_hz)
    t = np.arange(n, dtype=np.float64) / sample_rate_hz
    chirp = _position_chirp(t)

    subject_ids = [f"S{i:04d}" for i in range(n_subjects)]
    epochs: dict[str, list[EpochRecord]] = {}
    for sid in subject_ids:
        amp = rng.uniform(*SUBJECT_AMP_RANGE)
        band_shift = rng.uniform(-SUBJECT_BAND_SHIFT_HZ, SUBJECT_BAND_SHIFT_HZ)
        counts = largest_remainder(props, epochs_per_subject)
        labels = np.repeat(np.arange(N_STAGES), counts)
        rng.shuffle(labels)
        recs = []
        for i, code in enumerate(labels):
            stage = SleepStage(int(code))
            sig = amp * _stage_signal(rng, stage, t, band_shift) + chirp
            recs.append(
                EpochRecord(
                    subject_id=sid,
                    epoch_index=i,
                    sample_rate_hz=float(sample_rate_hz),
                    signal=sig.astype(np.float32),
                    label=stage,
                )
            )
        epochs[sid] = recs
    return SubjectSet(subject_ids, epochs)


# ---------------------------------------------------------------------------
# Splitting and subsampling
# ---------------------------------------------------------------------------


def split_subjectwise(subjects: SubjectSet, spec: SplitSpec):
    """Partition subjects into train/val/test sets, never splitting a subject.

    Split sizes are apportioned by the largest-remainder rule on the requested
    fractions (this reproduces 993 -> 657/219/117 for fractions
    0.662/0.220/0.118); membership is a seeded uniform shuffle.
    """
    spec.validate()
    n = subjects.n_subjects
    if n < 3:
        raise ValidationError(f"need at least 3 subjects to split, got {n}")
    sizes = largest_remainder(
        [spec.train_fraction, spec.val_fraction, spec.test_fraction], n
    )
    rng = np.random.default_rng(spec.seed & 0xFFFFFFFFFFFFFFFF)
    shuffled_ids = [subjects.subject_ids[int(j)] for j in rng.permutation(n)]
    bounds = np.cumsum([0] + sizes)
    parts = []
    for k in range(3):
        chosen = set(shuffled_ids[bounds[k] : bounds[k + 1]])
        ids = [s for s in subjects.subject_ids if s in chosen]
        parts.append(subjects.subset(ids))
    return tuple(parts)


def subsample_subjects(subjects: SubjectSet, fraction: float, seed: int) -> SubjectSet:
    """Keep max(1, round-half-up(fraction * n)) subjects, drawn uniformly
    without replacement; original subject order is preserved."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    n = subjects.n_subjects
    if n == 0:
        raise ValidationError("cannot subsample an empty SubjectSet")
    k = max(1, round_half_up(fraction * n))
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return subjects.subset(subjects.subject_ids[int(i)] for i in idx)
