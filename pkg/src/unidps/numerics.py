"""Dense float64 numerics with hand-written backward passes.

Everything operates on plain ``numpy.float64`` arrays in row-major layout.
Each differentiable primitive comes as a pair: ``*_fwd`` returning
``(output, cache)`` and ``*_bwd`` consuming ``(grad_output, cache)``.
The bare-named functions (``matmul``, ``softmax``, ...) are the pure
forward versions.  All functions are deterministic: identical inputs give
bit-identical outputs.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

Array = np.ndarray

LN_EPS = 1e-5


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox); same seed, same stream, any platform."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


# ---------------------------------------------------------------------------
# elementary ops


def matmul(a: Array, b: Array) -> Array:
    """Matrix product a[m,k] @ b[k,n] with an explicit shape check."""
    _require(a.ndim == 2 and b.ndim == 2, "matmul expects 2-d operands")
    _require(a.shape[1] == b.shape[0],
             f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def softmax(x: Array, axis: int = -1) -> Array:
    """Stable softmax along ``axis`` (max-subtraction); -inf entries map to 0."""
    m = np.max(x, axis=axis, keepdims=True)
    # all -inf rows would produce nan; callers guarantee at least one finite
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x: Array) -> Array:
    """Elementwise logistic function, stable for large |x|."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu_fwd(x: Array):
    return np.maximum(x, 0.0), (x > 0)


def relu_bwd(dout: Array, cache) -> Array:
    return dout * cache


def linear_fwd(x: Array, w: Array, b: Array):
    """y = x @ w + b for x[..., fan_in]."""
    _require(x.shape[-1] == w.shape[0],
             f"linear: input dim {x.shape[-1]} != weight fan-in {w.shape[0]}")
    return x @ w + b, (x, w)


def linear_bwd(dout: Array, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = x2.T @ d2
    db = d2.sum(axis=0)
    dx = dout @ w.T
    return dx, dw, db


def mlp_fwd(x: Array, layers: list[tuple[Array, Array]]):
    """Affine chain with ReLU between layers (none after the last)."""
    caches = []
    h = x
    for i, (w, b) in enumerate(layers):
        h, lc = linear_fwd(h, w, b)
        if i < len(layers) - 1:
            h, rc = relu_fwd(h)
        else:
            rc = None
        caches.append((lc, rc))
    return h, caches


def mlp_bwd(dout: Array, caches):
    dlayers = [None] * len(caches)
    dh = dout
    for i in range(len(caches) - 1, -1, -1):
        lc, rc = caches[i]
        if rc is not None:
            dh = relu_bwd(dh, rc)
        dh, dw, db = linear_bwd(dh, lc)
        dlayers[i] = (dw, db)
    return dh, dlayers


def mlp(x: Array, layers: list[tuple[Array, Array]]) -> Array:
    return mlp_fwd(x, layers)[0]


def layer_norm_fwd(x: Array, gain: Array, bias: Array):
    """Per-row normalization over the last axis (population variance, eps=1e-5)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_bwd(dout: Array, cache):
    xhat, inv, gain = cache
    dxhat = dout * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv
    red = tuple(range(dout.ndim - 1))
    dgain = (dout * xhat).sum(axis=red)
    dbias = dout.sum(axis=red)
    return dx, dgain, dbias


def layer_norm(x: Array, gain: Array, bias: Array) -> Array:
    return layer_norm_fwd(x, gain, bias)[0]


# ---------------------------------------------------------------------------
# attention


def _effective_mask(mask: Array) -> Array:
    """Rows with no allowed key fall back to attending everywhere."""
    dead = ~mask.any(axis=1)
    if dead.any():
        mask = mask.copy()
        mask[dead, :] = True
    return mask


def attention_fwd(q: Array, k: Array, v: Array, mask: Array | None = None):
    """Single-head scaled dot-product attention.

    ``mask[i, j]`` True means query i may attend to key j; a query whose
    whole row is disallowed attends everywhere instead.
    """
    _require(q.shape[1] == k.shape[1], "attention: q/k feature dims disagree")
    _require(k.shape[0] == v.shape[0], "attention: k/v key counts disagree")
    scale = 1.0 / np.sqrt(q.shape[1])
    scores = (q @ k.T) * scale
    if mask is not None:
        _require(mask.shape == scores.shape, "attention: mask shape mismatch")
        mask = _effective_mask(mask.astype(bool))
        scores = np.where(mask, scores, -np.inf)
    p = softmax(scores, axis=1)
    out = p @ v
    return out, (q, k, v, p, scale)


def attention_bwd(dout: Array, cache):
    q, k, v, p, scale = cache
    dv = p.T @ dout
    dp = dout @ v.T
    ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (ds.T @ q) * scale
    return dq, dk, dv


def attention(q: Array, k: Array, v: Array, mask: Array | None = None) -> Array:
    return attention_fwd(q, k, v, mask)[0]


# ---------------------------------------------------------------------------
# resampling

# Bilinear resizes are expressed as small dense interpolation matrices so the
# backward pass is an exact transpose.


@lru_cache(maxsize=None)
def _interp_matrix(n_src: int, n_dst: int) -> Array:
    """Row-stochastic [n_dst, n_src] bilinear weights, half-pixel centers."""
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    lo = np.clip(lo, 0, n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = np.clip(frac, 0.0, 1.0)
    w = np.zeros((n_dst, n_src))
    np.add.at(w, (np.arange(n_dst), lo), 1.0 - frac)
    np.add.at(w, (np.arange(n_dst), hi), frac)
    return w


def bilinear_resize_fwd(x: Array, out_hw: tuple[int, int]):
    """Bilinear resize of ``x[h, w]`` or ``x[h, w, C]`` to ``out_hw``."""
    h, w = x.shape[0], x.shape[1]
    wy = _interp_matrix(h, out_hw[0])
    wx = _interp_matrix(w, out_hw[1])
    y = np.tensordot(wy, x, axes=(1, 0))          # [H, w, ...]
    y = np.moveaxis(np.tensordot(wx, y, axes=(1, 1)), 0, 1)
    return y, (wy, wx)


def bilinear_resize_bwd(dout: Array, cache) -> Array:
    wy, wx = cache
    d = np.tensordot(wy.T, dout, axes=(1, 0))
    return np.moveaxis(np.tensordot(wx.T, d, axes=(1, 1)), 0, 1)


def bilinear_resize(x: Array, out_hw: tuple[int, int]) -> Array:
    return bilinear_resize_fwd(x, out_hw)[0]


def nearest_index(n_src: int, n_dst: int) -> Array:
    """Source index per destination sample, half-pixel-center convention."""
    return np.minimum(((np.arange(n_dst) + 0.5) * (n_src / n_dst)).astype(int),
                      n_src - 1)


def nearest_resize(x: Array, out_hw: tuple[int, int]) -> Array:
    """Nearest-neighbor resize of a [h, w] map (labels, masks); no gradient."""
    iy = nearest_index(x.shape[0], out_hw[0])
    ix = nearest_index(x.shape[1], out_hw[1])
    return x[np.ix_(iy, ix)]


def avgpool2_fwd(x: Array):
    """2x2 average pooling of x[h, w, ...] with even h, w."""
    h, w = x.shape[0], x.shape[1]
    _require(h % 2 == 0 and w % 2 == 0, "avgpool2 needs even spatial dims")
    r = x.reshape(h // 2, 2, w // 2, 2, *x.shape[2:])
    return r.mean(axis=(1, 3)), (h, w)


def avgpool2_bwd(dout: Array, cache) -> Array:
    h, w = cache
    d = np.repeat(np.repeat(dout, 2, axis=0), 2, axis=1)
    return d * 0.25


# ---------------------------------------------------------------------------
# fixed positional encoding


@lru_cache(maxsize=None)
def sine_posenc(h: int, w: int, channels: int) -> Array:
    """2-d sinusoidal position grid, flattened row-major to [h*w, channels].

    Half the channels encode the y coordinate, half the x coordinate,
    alternating sin/cos over a geometric frequency ladder (as in DETR-style
    decoders).  Values are O(1) and the array is cached per shape.
    """
    assert channels % 4 == 0, "posenc channels must be divisible by 4"
    half = channels // 2
    ys = (np.arange(h) + 0.5) / h * 2.0 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2.0 * np.pi
    freq = 10000.0 ** (-(np.arange(half // 2) * 2.0) / half)

    def axis_enc(coord):
        ang = coord[:, None] * freq[None, :]
        return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(len(coord), half)

    ey = axis_enc(ys)  # [h, half]
    ex = axis_enc(xs)  # [w, half]
    pe = np.concatenate(
        [np.repeat(ey, w, axis=0), np.tile(ex, (h, 1))], axis=1)
    pe.setflags(write=False)
    return pe
