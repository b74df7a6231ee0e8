"""From a raw epoch to model-ready tokens.

Conditioning is three steps: Fourier resampling to the 100 Hz working rate,
instance-wise normalization, and slicing into 101 non-overlapping patches of
30 samples (the last patch is edge padding, since 3000 = 100 x 30).
"""

import numpy as np

from sleepstager import instance_normalize, resample_fourier, tokenize

# a 30 s test signal recorded at 200 Hz: 10 Hz tone + drift + noise
rng = np.random.default_rng(0)
t = np.arange(6000) / 200.0
raw = 40.0 * np.sin(2 * np.pi * 10.0 * t) + 15.0 + 3.0 * rng.normal(size=6000)

# --- Fourier resampling truncates the spectrum symmetrically ---------------
x = resample_fourier(raw, from_hz=200.0, to_hz=100.0)
print(f"resampled: {len(raw)} samples @200 Hz -> {len(x)} samples @100 Hz")

# the 10 Hz component is far below the new 50 Hz Nyquist, so it survives
spec = np.abs(np.fft.rfft(x - x.mean()))
freqs = np.fft.rfftfreq(len(x), d=0.01)
print(f"dominant frequency after resampling: {freqs[spec.argmax()]:.2f} Hz")

# --- instance normalization: every epoch gets mean 0, sd 1 -----------------
x = instance_normalize(x)
print(f"normalized: mean {x.mean():+.2e}, sd {x.std():.6f}")

# --- tokenization: 3000 samples -> 101 x 30 patches -------------------------
tokens = tokenize(x.astype(np.float32))
print(f"token grid: {tokens.patches.shape}")
print(f"patch 0 holds samples 0..29, patch 99 holds 2970..2999, "
      f"patch 100 repeats the final sample: "
      f"{np.unique(tokens.patches[100]).size == 1}")

# flattening the grid and dropping the padding recovers the signal exactly
recovered = tokens.patches.ravel()[:3000]
print(f"tokenize is lossless: {np.array_equal(recovered, x.astype(np.float32))}")
