"""The position-prediction pretext task, posed on one epoch.

The self-supervised task: shuffle the patches, reveal the true positional
encoding for half of them, and ask the model to name each remaining token's
original position. No labels are needed; the supervision is free.
"""

import numpy as np

from sleepstager import (
    ModelConfig,
    forward_pretext,
    init_params,
    make_pretext_batch,
    pretext_accuracy,
    pretext_loss,
    signal_to_patches,
    synthesize_corpus,
)

corpus = synthesize_corpus(1, 1, (1, 0, 0, 0, 0), 100.0, seed=4)
record = next(corpus.iter_records())
tokens = signal_to_patches(record.signal, record.sample_rate_hz)

# --- construct the task ------------------------------------------------------
batch = make_pretext_batch(tokens, keep_ratio=0.5, mask_ratio=0.0, seed=11)
print(f"tokens shuffled: first 10 original positions = {batch.position_labels[:10]}")
print(f"positions revealed for {int(batch.pe_visibility.sum())}/101 tokens "
      f"(keep ratio 0.5), all {int(batch.key_mask.sum())} tokens act as keys "
      f"(mask ratio 0)")

# scoring only covers tokens whose position was withheld
hidden = ~batch.pe_visibility
print(f"the loss covers the {int(hidden.sum())} position-hidden tokens")

# --- an untrained model sits at chance --------------------------------------
cfg = ModelConfig(d_model=64, depth=2, n_heads=4, d_ff=128, dropout=0.0)
params = init_params(cfg, seed=0)
logits = forward_pretext(params, batch)
print(f"\nuntrained model: loss {pretext_loss(logits, batch):.3f} "
      f"(max-entropy value ln(101) = {np.log(101):.3f})")
print(f"untrained top-1 accuracy {pretext_accuracy(logits, batch):.3f} "
      f"(chance 1/101 = {1 / 101:.4f})")

# --- the task is solvable from content because of the chirp -----------------
# averaging many epochs cancels the random-phase stage content and exposes
# the phase-locked chirp, whose frequency grows with patch position; that is
# the ordering information the encoder learns to read (demos/04 trains on it)
many = synthesize_corpus(1, 200, (0.2,) * 5, 100.0, seed=4)
mean_sig = np.mean([r.signal for r in many.iter_records()], axis=0)
print("\nper-patch dominant frequency of the epoch-averaged signal:")
for k in (0, 25, 50, 75, 99):
    seg = mean_sig[k * 30 : k * 30 + 30]
    seg = seg - seg.mean()
    spec = np.abs(np.fft.rfft(seg, n=256))
    freqs = np.fft.rfftfreq(256, d=0.01)
    print(f"  patch {k:3d}: {freqs[spec.argmax()]:5.1f} Hz")
