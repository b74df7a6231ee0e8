"""Signal conditioning and tokenization.

Pipeline order for one epoch: Fourier-resample to the 100 Hz working rate,
instance-normalize, then cut into non-overlapping patches (right-padded with
the edge value so 3000 samples fill the 101 x 30 token grid).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

#: All model input is brought to this rate before tokenization.
TARGET_RATE_HZ = 100.0

DEFAULT_PATCH_LEN = 30
DEFAULT_N_TOKENS = 101

NORM_EPS = 1e-8


@dataclass
class TokenSequence:
    """A (n_tokens, patch_len) patch matrix in temporal order."""

    patches: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_len(self) -> int:
        return self.patches.shape[1]

    def validate(self) -> None:
        if self.patches.ndim != 2:
            raise ValidationError(f"patches must be 2-D, got shape {self.patches.shape}")
        if not np.isfinite(self.patches).all():
            raise ValidationError("patches contain NaN/Inf")


def resample_fourier(signal, from_hz: float, to_hz: float) -> np.ndarray:
    """Resample by symmetric truncation/zero-padding of the DFT spectrum.

    The output length is len(signal) * to_hz / from_hz, which must be an
    integer. Amplitudes of components below the output Nyquist are preserved;
    the output is scaled by to_len/from_len so a constant stays a constant.
    """
    if from_hz <= 0 or to_hz <= 0:
        raise ValidationError(f"rates must be positive, got {from_hz}, {to_hz}")
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValidationError(f"signal must be a non-empty 1-D sequence, got shape {x.shape}")
    n = x.size
    exact = n * to_hz / from_hz
    m = int(round(exact))
    if abs(exact - m) > 1e-9 * max(1.0, exact) or m < 1:
        raise ValidationError(
            f"output length {exact!r} is not a positive integer "
            f"(len {n} resampled {from_hz} -> {to_hz} Hz)"
        )
    if m == n:
        return x.copy()

    spec = np.fft.rfft(x)
    out_bins = m // 2 + 1
    new_spec = np.zeros(out_bins, dtype=complex)
    keep = min(spec.size, out_bins)
    new_spec[:keep] = spec[:keep]
    if m < n and m % 2 == 0:
        # the new Nyquist bin absorbs both +/- half-rate components
        new_spec[m // 2] = 2.0 * spec[m // 2].real
    elif m > n and n % 2 == 0:
        # the old Nyquist bin splits across now-distinct +/- components
        new_spec[n // 2] = 0.5 * spec[n // 2]
    return np.fft.irfft(new_spec, n=m) * (m / n)


def instance_normalize(signal, eps: float = NORM_EPS) -> np.ndarray:
    """Shift/scale one epoch to mean 0, sd 1; all zeros if sd < eps."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("cannot normalize an empty signal")
    mean = x.mean()
    sd = x.std()
    if sd < eps:
        return np.zeros_like(x)
    return (x - mean) / sd


def tokenize(signal, patch_len: int = DEFAULT_PATCH_LEN, n_tokens: int = DEFAULT_N_TOKENS) -> TokenSequence:
    """Cut a signal into `n_tokens` non-overlapping patches of `patch_len`.

    The signal is right-padded by repeating its final sample up to
    n_tokens * patch_len; at most one patch worth of padding is allowed
    (3000 samples -> pad to 3030 -> 101 x 30 under the default geometry).
    The input dtype is preserved, so flattening the patches and dropping the
    padding reproduces the signal exactly.
    """
    x = np.asarray(signal)
    if x.ndim != 1:
        raise ValidationError(f"signal must be 1-D, got shape {x.shape}")
    needed = n_tokens * patch_len
    pad = needed - x.size
    if pad < 0 or pad > patch_len:
        raise ValidationError(
            f"signal length {x.size} incompatible with {n_tokens} x {patch_len} tokens "
            f"(expected between {needed - patch_len} and {needed} samples)"
        )
    if pad:
        x = np.concatenate([x, np.full(pad, x[-1], dtype=x.dtype)])
    return TokenSequence(x.reshape(n_tokens, patch_len).copy())


def signal_to_patches(
    signal,
    sample_rate_hz: float,
    patch_len: int = DEFAULT_PATCH_LEN,
    n_tokens: int = DEFAULT_N_TOKENS,
) -> np.ndarray:
    """Full conditioning pipeline for one epoch; returns float32 (n_tokens, patch_len)."""
    x = np.asarray(signal, dtype=np.float64)
    if sample_rate_hz != TARGET_RATE_HZ:
        x = resample_fourier(x, sample_rate_hz, TARGET_RATE_HZ)
    x = instance_normalize(x)
    return tokenize(x.astype(np.float32), patch_len, n_tokens).patches
