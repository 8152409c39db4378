"""Dense math kernels: softmax, 2-D rotary embeddings, single-head attention,
layer norm, and a manually differentiated two-layer MLP.

All arrays are float64. Tokens are row vectors; a matrix of tokens has one
token per row. Forward functions that participate in training return a cache
consumed by the matching backward function; backward functions were written
against central finite differences (see tests).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import CounterRng

FloatArray = np.ndarray


class ShapeError(ValueError):
    """Operand shapes or dimensions do not chain."""


def as_vec(data, dim: int | None = None) -> FloatArray:
    """Validate a 1-D finite float vector."""
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"expected non-empty 1-D vector, got shape {v.shape}")
    if dim is not None and v.size != dim:
        raise ShapeError(f"expected dim {dim}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entries in vector")
    return v


def as_mat(data, rows: int | None = None, cols: int | None = None) -> FloatArray:
    """Validate a 2-D finite float matrix."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite entries in matrix")
    return m


def softmax(logits: FloatArray) -> FloatArray:
    """Max-subtracted softmax along the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("softmax of empty input")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite entries in softmax input")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sincos_code(a: float, b: float, dim: int, base: float = 10000.0) -> FloatArray:
    """Absolute two-coordinate sine-cosine code of length ``dim``.

    The first half of the channels encodes coordinate ``a``, the second half
    coordinate ``b``; within a half, channel pair ``i`` oscillates at
    ``base**(-2i/half)``.
    """
    if dim % 4 != 0:
        raise ShapeError("sincos_code dim must be divisible by 4")
    half = dim // 2
    freqs = base ** (-np.arange(0, half, 2, dtype=np.float64) / half)
    out = np.empty(dim, dtype=np.float64)
    for off, coord in ((0, a), (half, b)):
        ang = coord * freqs
        out[off:off + half:2] = np.sin(ang)
        out[off + 1:off + half:2] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# 2-D rotary position embedding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RopeParams:
    """Rotary embedding geometry: half the channels rotate with the row
    coordinate, half with the column coordinate."""
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 4 != 0:
            raise ShapeError("rope head_dim must be a positive multiple of 4")

    def angles(self, row: float, col: float) -> FloatArray:
        """Rotation angle per channel pair, rows-axis pairs first; pair ``i``
        of an axis block of ``h`` channels turns at ``base**(-2i/h)``."""
        half = self.head_dim // 2
        freqs = self.base ** (-np.arange(0, half, 2, dtype=np.float64) / half)
        return np.concatenate([row * freqs, col * freqs])


def rope_apply(token: FloatArray, grid_pos: tuple[float, float], params: RopeParams) -> FloatArray:
    """Rotate channel pairs of ``token`` by position-dependent angles.

    Norm-preserving; the identity at position (0, 0).
    """
    v = as_vec(token, params.head_dim)
    theta = params.angles(*grid_pos)
    c, s = np.cos(theta), np.sin(theta)
    x, y = v[0::2], v[1::2]
    out = np.empty_like(v)
    out[0::2] = x * c - y * s
    out[1::2] = x * s + y * c
    return out


def rope_apply_rows(tokens: FloatArray, positions, params: RopeParams) -> FloatArray:
    """Apply rope row-wise; ``positions[i]`` is ``(row, col)`` or None to skip."""
    out = np.array(tokens, dtype=np.float64, copy=True)
    for i, pos in enumerate(positions):
        if pos is not None:
            out[i] = rope_apply(out[i], pos, params)
    return out


def rope_backward_rows(grad: FloatArray, positions, params: RopeParams) -> FloatArray:
    """Adjoint of :func:`rope_apply_rows` (rotation by the negated angles)."""
    out = np.array(grad, dtype=np.float64, copy=True)
    for i, pos in enumerate(positions):
        if pos is not None:
            out[i] = rope_apply(out[i], (-pos[0], -pos[1]), params)
    return out


# ---------------------------------------------------------------------------
# Single-head attention
# ---------------------------------------------------------------------------

def attention(queries: FloatArray, keys: FloatArray, values: FloatArray,
              scale: float) -> FloatArray:
    """softmax(scale * Q K^T) V for row-token matrices."""
    out, _ = attention_forward(queries, keys, values, scale)
    return out


def attention_forward(queries, keys, values, scale: float):
    q = as_mat(queries)
    k = as_mat(keys)
    v = as_mat(values)
    if k.shape[0] != v.shape[0]:
        raise ShapeError("key/value row counts differ")
    if q.shape[1] != k.shape[1]:
        raise ShapeError("query/key dims differ")
    weights = softmax(scale * (q @ k.T))
    out = weights @ v
    cache = (q, k, v, weights, float(scale))
    return out, cache


def attention_backward(cache, d_out: FloatArray):
    """Gradients of attention w.r.t. queries, keys, values."""
    q, k, v, p, scale = cache
    d_out = as_mat(d_out, rows=q.shape[0], cols=v.shape[1])
    dv = p.T @ d_out
    dp = d_out @ v.T
    ds = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
    dq = scale * (ds @ k)
    dk = scale * (ds.T @ q)
    return dq, dk, dv


def attention_weights(queries, keys, scale: float) -> FloatArray:
    """Just the softmax weight matrix (diagnostics, property tests)."""
    q = as_mat(queries)
    k = as_mat(keys)
    return softmax(scale * (q @ k.T))


# ---------------------------------------------------------------------------
# Layer norm
# ---------------------------------------------------------------------------

LN_EPS = 1e-6


def layernorm_forward(x: FloatArray, gamma: FloatArray, beta: FloatArray):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    out = gamma * xhat + beta
    return out, (xhat, inv, gamma)


def layernorm_backward(cache, d_out: FloatArray):
    xhat, inv, gamma = cache
    d_out = np.atleast_2d(d_out)
    dgamma = np.sum(d_out * xhat, axis=0)
    dbeta = np.sum(d_out, axis=0)
    dxhat = d_out * gamma
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Two-layer MLP with manual gradients
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    """input -> hidden (ReLU) -> output, output activation identity|sigmoid."""
    w1: FloatArray
    b1: FloatArray
    w2: FloatArray
    b2: FloatArray
    out_act: str = "identity"

    def __post_init__(self):
        if self.out_act not in ("identity", "sigmoid"):
            raise ValueError(f"unknown output activation {self.out_act!r}")
        if self.w1.shape[0] != self.b1.shape[0] or self.w2.shape[0] != self.b2.shape[0]:
            raise ShapeError("bias shapes do not match weights")
        if self.w2.shape[1] != self.w1.shape[0]:
            raise ShapeError("hidden widths of w1/w2 do not chain")
        for p in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(p)):
                raise ValueError("non-finite MLP parameters")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]


@dataclass
class MlpGrads:
    dw1: FloatArray
    db1: FloatArray
    dw2: FloatArray
    db2: FloatArray
    dx: FloatArray


def mlp_forward(m: Mlp, x: FloatArray):
    """Returns (y, cache); cache feeds :func:`mlp_backward`."""
    x = as_vec(x, m.in_dim)
    z1 = m.w1 @ x + m.b1
    a1 = np.maximum(z1, 0.0)
    z2 = m.w2 @ a1 + m.b2
    y = sigmoid(z2) if m.out_act == "sigmoid" else z2
    return y, (x, z1, a1, y)


def mlp_backward(m: Mlp, cache, upstream: FloatArray) -> MlpGrads:
    """Parameter and input gradients given dLoss/dy."""
    x, z1, a1, y = cache
    dy = as_vec(upstream, m.out_dim)
    dz2 = dy * y * (1.0 - y) if m.out_act == "sigmoid" else dy
    dw2 = np.outer(dz2, a1)
    db2 = dz2.copy()
    da1 = m.w2.T @ dz2
    dz1 = da1 * (z1 > 0)
    dw1 = np.outer(dz1, x)
    db1 = dz1.copy()
    dx = m.w1.T @ dz1
    return MlpGrads(dw1, db1, dw2, db2, dx)


def init_mlp(rng: CounterRng, in_dim: int, hidden: int, out_dim: int,
             out_act: str = "identity") -> Mlp:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, zero biases."""
    return Mlp(
        w1=uniform_init(rng, (hidden, in_dim), in_dim),
        b1=np.zeros(hidden),
        w2=uniform_init(rng, (out_dim, hidden), hidden),
        b2=np.zeros(out_dim),
        out_act=out_act,
    )


def uniform_init(rng: CounterRng, shape, fan_in: int) -> FloatArray:
    bound = 1.0 / np.sqrt(fan_in)
    return (rng.uniform(shape) * 2.0 - 1.0) * bound


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """p <- p - lr * g for every array in ``params`` (out of place)."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient shape mismatch for {name!r}")
        out[name] = p - lr * np.asarray(g, dtype=np.float64)
    return out
