"""Transformer encoder over signal patches, with position and stage heads.

Everything runs directly on numpy arrays: parameters live in a flat
name -> array dict, the forward pass caches its intermediates, and gradients
are hand-derived reverse-mode passes over that cache. float32 is the training
dtype; the gradient-verification tests switch the same code to float64.

Architecture (post-norm, as in the original encoder stack):

    x = patches @ W_embed + b_embed (+ positional rows where visible)
    repeat depth times:
        x = LN1(x + dropout(MultiHeadAttention(x, key_mask)))
        x = LN2(x + dropout(FeedForward(x)))       # FF = relu(x W1 + b1) W2 + b2
    h = LN_f(x)

Position head: per-token logits over original positions (pretraining).
Stage head: mean-pool tokens, then logits over the 5 sleep stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .dsp import TokenSequence
from .errors import NumericalError, ValidationError
from .pretext import PretextBatch

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the full-scale configuration."""

    patch_len: int = 30
    n_tokens: int = 101
    d_model: int = 512
    depth: int = 6
    n_heads: int = 8
    d_ff: int = 2048
    dropout: float = 0.1
    n_positions: int = 101
    n_classes: int = 5

    def validate(self) -> None:
        dims = {
            "patch_len": self.patch_len,
            "n_tokens": self.n_tokens,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "n_positions": self.n_positions,
            "n_classes": self.n_classes,
        }
        for name, v in dims.items():
            if v < 1:
                raise ValidationError(f"{name} must be >= 1, got {v}")
        if self.depth < 0:
            raise ValidationError(f"depth must be >= 0, got {self.depth}")
        if self.d_model % self.n_heads != 0:
            raise ValidationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown ModelConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    p, d, f = config.patch_len, config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embed.W": (p, d), "embed.b": (d,)}
    for i in range(config.depth):
        pre = f"enc.{i}."
        for name in ("Wq", "Wk", "Wv", "Wo"):
            shapes[pre + "attn." + name] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[pre + "attn." + name] = (d,)
        shapes[pre + "ff.W1"] = (d, f)
        shapes[pre + "ff.b1"] = (f,)
        shapes[pre + "ff.W2"] = (f, d)
        shapes[pre + "ff.b2"] = (d,)
        for name in ("ln1.g", "ln1.b", "ln2.g", "ln2.b"):
            shapes[pre + name] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.pos.W"] = (d, config.n_positions)
    shapes["head.pos.b"] = (config.n_positions,)
    shapes["head.stage.W"] = (d, config.n_classes)
    shapes["head.stage.b"] = (config.n_classes,)
    return shapes


@dataclass
class ModelParams:
    """All learnable weights, keyed by dotted names per `param_shapes`."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.tensors["embed.W"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def validate(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            raise ValidationError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValidationError(
                    f"{name}: shape {self.tensors[name].shape}, expected {shape}"
                )
            if not np.isfinite(self.tensors[name]).all():
                raise ValidationError(f"{name} contains non-finite values")


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, unit
    layer-norm gains; bit-reproducible for a given seed."""
    config.validate()
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(config, tensors)


def count_parameters(config: ModelConfig) -> int:
    """Exact learnable-scalar count for this decomposition.

    patch embedding      patch_len*d + d
    each encoder layer   4*(d*d + d)  attention projections (q, k, v, out)
                         d*ff + ff + ff*d + d  feed-forward
                         4*d  two layer norms
    final layer norm     2*d
    position head        d*n_positions + n_positions
    stage head           d*n_classes + n_classes

    Full-scale configuration: 15,872 + 6*3,152,384 + 1,024 + 51,813 + 2,565
    = 18,985,578.
    """
    config.validate()
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def sinusoidal_pe(n_positions: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal position table: pe[p, 2i] = sin(p / 10000^(2i/d)),
    pe[p, 2i+1] = cos(p / 10000^(2i/d))."""
    if d_model % 2 != 0:
        raise ValidationError(f"d_model must be even for sinusoidal encodings, got {d_model}")
    if n_positions < 1 or d_model < 1:
        raise ValidationError("n_positions and d_model must be >= 1")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    inv_freq = 10000.0 ** (-np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    angles = pos * inv_freq[None, :]
    pe = np.empty((n_positions, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe.astype(dtype)


# ---------------------------------------------------------------------------
# forward / backward core
# ---------------------------------------------------------------------------


def _grad_mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_{batch,token} outer(a, b): (..., X), (..., Y) -> (X, Y)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)

def _layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)

def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _dropout_mask(rng, shape, rate, dtype):
    return ((rng.random(shape) >= rate) / (1.0 - rate)).astype(dtype)


def _encode_forward(params: ModelParams, patches, pe, key_mask, train_mode, rng):
    """Run the encoder stack; returns (h, cache) with everything backward needs.

    patches  (B, T, patch_len)
    pe       None, (T, d) or (B, T, d); already zeroed where positions are hidden
    key_mask None or (B, T) bool; False entries never serve as keys/values
    """
    cfg = params.config
    t = params.tensors
    dtype = params.dtype
    b, n_tok, _ = patches.shape
    drop = cfg.dropout if train_mode else 0.0

    if key_mask is not None:
        if key_mask.shape != (b, n_tok):
            raise ValidationError(f"key mask shape {key_mask.shape} != {(b, n_tok)}")
        if not key_mask.any(-1).all():
            raise ValidationError("key mask excludes every token in some sequence")

    x0 = patches @ t["embed.W"] + t["embed.b"]
    x = x0 if pe is None else x0 + pe.astype(dtype)
    scale = 1.0 / math.sqrt(cfg.d_head)

    layers = []
    attn_probs = []
    for i in range(cfg.depth):
        pre = f"enc.{i}."
        x_in = x
        q = x_in @ t[pre + "attn.Wq"] + t[pre + "attn.bq"]
        k = x_in @ t[pre + "attn.Wk"] + t[pre + "attn.bk"]
        v = x_in @ t[pre + "attn.Wv"] + t[pre + "attn.bv"]
        qh, kh, vh = (_split_heads(a, cfg.n_heads) for a in (q, k, v))
        scores = (qh @ kh.swapaxes(-1, -2)) * scale
        if key_mask is not None:
            scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
        scores -= scores.max(-1, keepdims=True)
        expw = np.exp(scores)
        attn = expw / expw.sum(-1, keepdims=True)
        ctx = _merge_heads(attn @ vh)
        out = ctx @ t[pre + "attn.Wo"] + t[pre + "attn.bo"]
        mask1 = None
        if drop > 0.0:
            mask1 = _dropout_mask(rng, out.shape, drop, dtype)
            out = out * mask1
        y1, ln1c = _layer_norm(x_in + out, t[pre + "ln1.g"], t[pre + "ln1.b"])

        h1 = y1 @ t[pre + "ff.W1"] + t[pre + "ff.b1"]
        a1 = np.maximum(h1, 0.0)
        h2 = a1 @ t[pre + "ff.W2"] + t[pre + "ff.b2"]
        mask2 = None
        if drop > 0.0:
            mask2 = _dropout_mask(rng, h2.shape, drop, dtype)
            h2 = h2 * mask2
        y2, ln2c = _layer_norm(y1 + h2, t[pre + "ln2.g"], t[pre + "ln2.b"])

        layers.append(
            dict(x_in=x_in, qh=qh, kh=kh, vh=vh, attn=attn, ctx=ctx, mask1=mask1,
                 ln1c=ln1c, y1=y1, h1=h1, a1=a1, mask2=mask2, ln2c=ln2c, y2=y2)
        )
        attn_probs.append(attn)
        x = y2

    h, lnfc = _layer_norm(x, t["ln_f.g"], t["ln_f.b"])
    cache = dict(patches=patches, x0=x0, layers=layers, lnfc=lnfc, h=h,
                 key_mask=key_mask, scale=scale, attn_probs=attn_probs)
    return h, cache


def _encode_backward(params: ModelParams, cache, dh):
    """Reverse-mode pass matching `_encode_forward`; returns grads by name."""
    cfg = params.config
    t = params.tensors
    grads: dict[str, np.ndarray] = {}

    dx, grads["ln_f.g"], grads["ln_f.b"] = _layer_norm_backward(
        dh, cache["lnfc"], t["ln_f.g"]
    )

    for i in reversed(range(cfg.depth)):
        pre = f"enc.{i}."
        c = cache["layers"][i]
        # second sublayer: y2 = LN2(y1 + dropout(FF(y1)))
        dr2, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _layer_norm_backward(
            dx, c["ln2c"], t[pre + "ln2.g"]
        )
        dh2 = dr2 if c["mask2"] is None else dr2 * c["mask2"]
        grads[pre + "ff.W2"] = _grad_mm(c["a1"], dh2)
        grads[pre + "ff.b2"] = dh2.reshape(-1, dh2.shape[-1]).sum(0)
        da1 = dh2 @ t[pre + "ff.W2"].T
        dh1 = da1 * (c["h1"] > 0)
        grads[pre + "ff.W1"] = _grad_mm(c["y1"], dh1)
        grads[pre + "ff.b1"] = dh1.reshape(-1, dh1.shape[-1]).sum(0)
        dy1 = dr2 + dh1 @ t[pre + "ff.W1"].T

        # first sublayer: y1 = LN1(x_in + dropout(Attn(x_in)))
        dr1, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _layer_norm_backward(
            dy1, c["ln1c"], t[pre + "ln1.g"]
        )
        dout = dr1 if c["mask1"] is None else dr1 * c["mask1"]
        grads[pre + "attn.Wo"] = _grad_mm(c["ctx"], dout)
        grads[pre + "attn.bo"] = dout.reshape(-1, dout.shape[-1]).sum(0)
        dctx = _split_heads(dout @ t[pre + "attn.Wo"].T, cfg.n_heads)
        dattn = dctx @ c["vh"].swapaxes(-1, -2)
        dvh = c["attn"].swapaxes(-1, -2) @ dctx
        ds = c["attn"] * (dattn - (dattn * c["attn"]).sum(-1, keepdims=True))
        dqh = (ds @ c["kh"]) * cache["scale"]
        dkh = (ds.swapaxes(-1, -2) @ c["qh"]) * cache["scale"]
        dx_in = dr1
        for name, dproj in (("q", dqh), ("k", dkh), ("v", dvh)):
            dmat = _merge_heads(dproj)
            grads[pre + f"attn.W{name}"] = _grad_mm(c["x_in"], dmat)
            grads[pre + f"attn.b{name}"] = dmat.reshape(-1, dmat.shape[-1]).sum(0)
            dx_in = dx_in + dmat @ t[pre + f"attn.W{name}"].T
        dx = dx_in

    grads["embed.W"] = _grad_mm(cache["patches"], dx)
    grads["embed.b"] = dx.reshape(-1, dx.shape[-1]).sum(0)
    return grads


def _first_nonfinite_layer(cache) -> str:
    if not np.isfinite(cache["x0"]).all():
        return "patch embedding"
    for i, c in enumerate(cache["layers"]):
        if not np.isfinite(c["y2"]).all():
            return f"encoder layer {i}"
    return "output head"


# ---------------------------------------------------------------------------
# public forward passes
# ---------------------------------------------------------------------------


def _as_patch_array(patches) -> tuple[np.ndarray, bool]:
    """Accept a TokenSequence, (T, P) or (B, T, P); returns (B, T, P) + flag
    saying whether the input was a single sequence."""
    if isinstance(patches, TokenSequence):
        patches = patches.patches
    arr = np.asarray(patches)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim == 3:
        return arr, False
    raise ValidationError(f"patches must be 2-D or 3-D, got shape {arr.shape}")


def encode(
    params: ModelParams,
    patches,
    pe=None,
    key_mask=None,
    train_mode: bool = False,
    seed: int = 0,
    return_details: bool = False,
):
    """Token embeddings after the full encoder stack.

    `pe` is the additive positional matrix (callers zero the rows of hidden
    positions); `key_mask` marks tokens allowed to act as keys/values for all
    queries. Dropout runs only in train_mode, driven by `seed`.
    """
    arr, single = _as_patch_array(patches)
    b, n_tok, _ = arr.shape
    arr = arr.astype(params.dtype, copy=False)
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.ndim == 1:
            key_mask = np.broadcast_to(key_mask, (b, n_tok))
    if pe is not None:
        pe = np.asarray(pe)
        if pe.ndim == 2:
            pe = pe[None]
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0xD0])
    h, cache = _encode_forward(params, arr, pe, key_mask, train_mode, rng)
    if single:
        h = h[0]
    if return_details:
        return h, {"attention": cache["attn_probs"]}
    return h


def _pretext_inputs(params: ModelParams, batch):
    """Stack one PretextBatch or a sequence of them into batched arrays."""
    if isinstance(batch, PretextBatch):
        batches, single = [batch], True
    else:
        batches, single = list(batch), False
    patches = np.stack([b.patches for b in batches]).astype(params.dtype, copy=False)
    labels = np.stack([b.position_labels for b in batches])
    vis = np.stack([b.pe_visibility for b in batches])
    key_mask = np.stack([b.key_mask for b in batches])
    table = sinusoidal_pe(params.config.n_positions, params.config.d_model,
                          dtype=params.dtype)
    pe = table[labels] * vis[..., None].astype(params.dtype)
    return patches, labels, vis, key_mask, pe, single


def forward_pretext(params: ModelParams, batch, train_mode: bool = False, seed: int = 0):
    """Per-token logits over original positions for shuffled input.

    Accepts one PretextBatch (returns (n_tokens, n_positions)) or a sequence
    of them (returns (B, n_tokens, n_positions)).
    """
    patches, _, _, key_mask, pe, single = _pretext_inputs(params, batch)
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0xD0])
    h, _ = _encode_forward(params, patches, pe, key_mask, train_mode, rng)
    logits = h @ params.tensors["head.pos.W"] + params.tensors["head.pos.b"]
    return logits[0] if single else logits


def forward_stage(params: ModelParams, patches, train_mode: bool = False, seed: int = 0):
    """Stage logits for temporally ordered tokens: every position is provided,
    every token may serve as a key, embeddings are mean-pooled."""
    arr, single = _as_patch_array(patches)
    arr = arr.astype(params.dtype, copy=False)
    pe = sinusoidal_pe(params.config.n_positions, params.config.d_model,
                       dtype=params.dtype)[: arr.shape[1]][None]
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0xD0])
    h, _ = _encode_forward(params, arr, pe, None, train_mode, rng)
    logits = h.mean(1) @ params.tensors["head.stage.W"] + params.tensors["head.stage.b"]
    return logits[0] if single else logits


# ---------------------------------------------------------------------------
# losses and gradients
# ---------------------------------------------------------------------------


@dataclass
class StageBatch:
    """Ordered token sequences with their stage labels."""

    patches: np.ndarray  # (B, n_tokens, patch_len)
    labels: np.ndarray  # (B,) stage codes


def _softmax_rows(logits):
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _log_softmax_rows(logits):
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def loss_and_gradients(
    params: ModelParams,
    batch,
    objective: str,
    class_weights=None,
    train_mode: bool = False,
    seed: int = 0,
):
    """Batch-mean loss and its gradient for every parameter.

    objective "pretext": `batch` is a PretextBatch or sequence thereof; the
    loss is mean cross-entropy over position-hidden tokens only.
    objective "stage": `batch` is a StageBatch; the loss is mean class
    weighted cross-entropy (weights default to ones).

    Returns (loss, grads) with grads keyed identically to params.tensors.
    Gradients are taken with dropout active when train_mode is set; leave it
    off for verification against finite differences.
    """
    t = params.tensors
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0xD0])

    if objective == "pretext":
        patches, labels, vis, key_mask, pe, _ = _pretext_inputs(params, batch)
        h, cache = _encode_forward(params, patches, pe, key_mask, train_mode, rng)
        logits = h @ t["head.pos.W"] + t["head.pos.b"]
        hidden = ~vis
        n_hidden = int(hidden.sum())
        if n_hidden == 0:
            raise ValidationError("no position-hidden tokens: pretext loss undefined")
        logp = _log_softmax_rows(logits)
        b_grid = np.arange(labels.shape[0])[:, None]
        t_grid = np.arange(labels.shape[1])[None, :]
        token_ce = -logp[b_grid, t_grid, labels]
        loss = float((token_ce * hidden).sum() / n_hidden)
        if not np.isfinite(loss):
            raise NumericalError(
                f"non-finite pretext loss; first bad values in {_first_nonfinite_layer(cache)}"
            )
        dlogits = _softmax_rows(logits)
        b_idx, t_idx = np.nonzero(hidden)
        dlogits[b_idx, t_idx, labels[b_idx, t_idx]] -= 1.0
        dlogits *= hidden[..., None] / n_hidden
        dlogits = dlogits.astype(params.dtype, copy=False)
        grads = {"head.pos.W": _grad_mm(h, dlogits),
                 "head.pos.b": dlogits.reshape(-1, dlogits.shape[-1]).sum(0)}
        dh = dlogits @ t["head.pos.W"].T
        grads.update(_encode_backward(params, cache, dh))
        grads["head.stage.W"] = np.zeros_like(t["head.stage.W"])
        grads["head.stage.b"] = np.zeros_like(t["head.stage.b"])
        return loss, grads

    if objective == "stage":
        arr = np.asarray(batch.patches, dtype=params.dtype)
        labels = np.asarray(batch.labels, dtype=np.int64)
        b, n_tok, _ = arr.shape
        if class_weights is None:
            class_weights = np.ones(params.config.n_classes)
        w = np.asarray(class_weights, dtype=np.float64)
        pe = sinusoidal_pe(params.config.n_positions, params.config.d_model,
                           dtype=params.dtype)[:n_tok][None]
        h, cache = _encode_forward(params, arr, pe, None, train_mode, rng)
        pooled = h.mean(1)
        logits = pooled @ t["head.stage.W"] + t["head.stage.b"]
        logp = _log_softmax_rows(logits)
        wi = w[labels]
        loss = float(-(wi * logp[np.arange(b), labels]).mean())
        if not np.isfinite(loss):
            raise NumericalError(
                f"non-finite stage loss; first bad values in {_first_nonfinite_layer(cache)}"
            )
        dlogits = _softmax_rows(logits)
        dlogits[np.arange(b), labels] -= 1.0
        dlogits *= (wi / b)[:, None]
        dlogits = dlogits.astype(params.dtype, copy=False)
        grads = {"head.stage.W": pooled.T @ dlogits, "head.stage.b": dlogits.sum(0)}
        dpooled = dlogits @ t["head.stage.W"].T
        dh = np.broadcast_to(dpooled[:, None, :] / n_tok, h.shape).astype(params.dtype)
        grads.update(_encode_backward(params, cache, dh))
        grads["head.pos.W"] = np.zeros_like(t["head.pos.W"])
        grads["head.pos.b"] = np.zeros_like(t["head.pos.b"])
        return loss, grads

    raise ValidationError(f"unknown objective {objective!r}")
