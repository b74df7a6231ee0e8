"""Shuffled-patch position-prediction pretext task.

A pretext batch shuffles one epoch's patches, records each shuffled token's
original position, reveals the true positional encoding for a `keep_ratio`
subset of tokens, and (optionally) excludes a `mask_ratio` subset from acting
as attention keys/values. The model is then scored on recovering the original
position of every token whose position was withheld.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import TokenSequence
from .errors import ValidationError
from .records import round_half_up


@dataclass
class PretextBatch:
    """One shuffled sequence plus everything needed to pose/score the task.

    position_labels[i] is the original index of shuffled token i, so the
    labels are always a permutation of 0..n_tokens-1 and indexing the original
    sequence by them reproduces the shuffle.
    """

    patches: np.ndarray  # (n_tokens, patch_len), shuffled row order
    position_labels: np.ndarray  # (n_tokens,) int64
    pe_visibility: np.ndarray  # (n_tokens,) bool; True -> true PE row is added
    key_mask: np.ndarray  # (n_tokens,) bool; False -> excluded as key/value

    @property
    def n_tokens(self) -> int:
        return self.patches.shape[0]

    def validate(self) -> None:
        n = self.n_tokens
        if sorted(self.position_labels.tolist()) != list(range(n)):
            raise ValidationError("position_labels is not a permutation")
        if self.pe_visibility.shape != (n,) or self.key_mask.shape != (n,):
            raise ValidationError("mask vectors must have one entry per token")
        if not self.key_mask.any():
            raise ValidationError("key mask excludes every token")

    def unshuffled(self) -> np.ndarray:
        """Restore the original temporal patch order."""
        out = np.empty_like(self.patches)
        out[self.position_labels] = self.patches
        return out


def make_pretext_batch(
    tokens,
    keep_ratio: float = 0.5,
    mask_ratio: float = 0.0,
    seed: int = 0,
) -> PretextBatch:
    """Build the pretext task for one token sequence, deterministically.

    Draws a uniform shuffle, reveals positions for round(keep_ratio * n)
    tokens and hides round(mask_ratio * n) tokens from the key/value set,
    both as uniform subsets (rounding is half-up). mask_ratio defaults to 0:
    no windows are masked.
    """
    if isinstance(tokens, TokenSequence):
        tokens = tokens.patches
    arr = np.asarray(tokens)
    if arr.ndim != 2:
        raise ValidationError(f"tokens must be (n_tokens, patch_len), got {arr.shape}")
    if not 0.0 <= keep_ratio <= 1.0:
        raise ValidationError(f"keep_ratio must be in [0, 1], got {keep_ratio}")
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValidationError(f"mask_ratio must be in [0, 1], got {mask_ratio}")
    n = arr.shape[0]
    n_masked = round_half_up(mask_ratio * n)
    if n_masked >= n:
        raise ValidationError("mask_ratio leaves no tokens to attend to")

    rng = np.random.default_rng(seed if not isinstance(seed, int) else seed & 0xFFFFFFFFFFFFFFFF)
    perm = rng.permutation(n)
    visibility = np.zeros(n, dtype=bool)
    visibility[rng.choice(n, size=round_half_up(keep_ratio * n), replace=False)] = True
    key_mask = np.ones(n, dtype=bool)
    if n_masked:
        key_mask[rng.choice(n, size=n_masked, replace=False)] = False
    return PretextBatch(
        patches=arr[perm],
        position_labels=perm.astype(np.int64),
        pe_visibility=visibility,
        key_mask=key_mask,
    )


def _hidden_mask(batch: PretextBatch) -> np.ndarray:
    return ~batch.pe_visibility


def pretext_loss(logits: np.ndarray, batch: PretextBatch) -> float:
    """Mean cross-entropy over position-hidden tokens only.

    Tokens whose true positional encoding was provided carry their answer
    in-band, so they are excluded from the objective.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = batch.n_tokens
    if logits.shape[0] != n:
        raise ValidationError(f"logits rows {logits.shape[0]} != n_tokens {n}")
    hidden = _hidden_mask(batch)
    if not hidden.any():
        raise ValidationError("no position-hidden tokens: loss undefined")
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    picked = logp[np.arange(n), batch.position_labels]
    return float(-picked[hidden].mean())


def pretext_accuracy(logits: np.ndarray, batch: PretextBatch) -> float:
    """Fraction of position-hidden tokens whose argmax matches the label."""
    logits = np.asarray(logits)
    hidden = _hidden_mask(batch)
    if not hidden.any():
        return 0.0
    pred = logits.argmax(-1)
    return float((pred[hidden] == batch.position_labels[hidden]).mean())
