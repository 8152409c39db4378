"""Residual attention stack that conditions per-frame query tokens on the
assembled memory bank.

Each layer runs self-attention over the queries, cross-attention from the
queries to the memory rows, and a token-wise ReLU MLP, each behind a residual
connection with layer norm (pre-norm by default, post-norm behind a flag).
Rotary embeddings rotate only tokens that carry a grid position: queries and
keys in self-attention, grid-origin memory keys (never pointer or prototype
rows) in cross-attention. Absolute sine-cosine codes are added once at the
stack input, scaled by ``pos_scale``.

Forward functions return caches so the whole stack can be differentiated
manually; gradients w.r.t. memory rows are computed but the training loop
treats the bank as constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import KvBundle
from .linalg import (RopeParams, ShapeError, attention_backward,
                     attention_forward, layernorm_backward, layernorm_forward,
                     rope_apply_rows, rope_backward_rows, sincos_code,
                     uniform_init)
from .rng import CounterRng


@dataclass(frozen=True)
class MemAttnConfig:
    layers: int = 4
    dim: int = 32
    mlp_hidden: int = 128
    dropout: float = 0.0
    pos_scale: float = 0.1
    norm: str = "pre"
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.dim % 4 != 0:
            raise ValueError("dim must be a multiple of 4 (2-D rotary pairs)")
        if self.norm not in ("pre", "post"):
            raise ValueError("norm must be 'pre' or 'post'")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.dim)

    @property
    def rope(self) -> RopeParams:
        return RopeParams(head_dim=self.dim, base=self.rope_base)


@dataclass(frozen=True)
class QuerySet:
    """Decoder-side tokens: frame patches carry (row, col), specials carry None."""
    tokens: np.ndarray
    positions: tuple[tuple[int, int] | None, ...]

    def __post_init__(self):
        if len(self.positions) != self.tokens.shape[0]:
            raise ShapeError("one position entry per query token required")


LAYER_PARAM_SHAPES = {
    "ln1.g": ("d",), "ln1.b": ("d",),
    "self.wq": ("d", "d"), "self.wk": ("d", "d"),
    "self.wv": ("d", "d"), "self.wo": ("d", "d"),
    "ln2.g": ("d",), "ln2.b": ("d",),
    "cross.wq": ("d", "d"), "cross.wo": ("d", "d"),
    "ln3.g": ("d",), "ln3.b": ("d",),
    "mlp.w1": ("d", "h"), "mlp.b1": ("h",),
    "mlp.w2": ("h", "d"), "mlp.b2": ("d",),
}


def init_mem_attn_params(rng: CounterRng, cfg: MemAttnConfig,
                         prefix: str = "mem") -> dict[str, np.ndarray]:
    """Seeded init: norms at identity, projections uniform(+-1/sqrt(fan_in))."""
    d, h = cfg.dim, cfg.mlp_hidden
    params: dict[str, np.ndarray] = {}
    for layer in range(cfg.layers):
        for name, shape_spec in LAYER_PARAM_SHAPES.items():
            shape = tuple(d if s == "d" else h for s in shape_spec)
            key = f"{prefix}.{layer}.{name}"
            if name.startswith("ln") and name.endswith(".g"):
                params[key] = np.ones(shape)
            elif name.startswith("ln") and name.endswith(".b"):
                params[key] = np.zeros(shape)
            elif name.endswith(".b1") or name.endswith(".b2"):
                params[key] = np.zeros(shape)
            else:
                params[key] = uniform_init(rng, shape, fan_in=shape[0])
    return params


def _dropout_mask(rng: CounterRng | None, p: float, shape):
    if rng is None or p <= 0.0:
        return None
    keep = (rng.uniform(shape) >= p).astype(np.float64) / (1.0 - p)
    return keep


def _maybe_drop(x, mask):
    return x if mask is None else x * mask


def mem_attn_layer_forward(tokens: np.ndarray, positions, kv: KvBundle,
                           cfg: MemAttnConfig, lw: dict[str, np.ndarray],
                           drop_rng: CounterRng | None = None):
    """One layer; ``lw`` maps unprefixed names ('ln1.g', ...) to arrays."""
    pre = cfg.norm == "pre"
    cache: dict = {"positions": positions, "kv_rows": kv.n_rows,
                   "kv_positions": kv.positions}

    # self-attention sub-step
    x = tokens
    xn, cache["ln1"] = layernorm_forward(x, lw["ln1.g"], lw["ln1.b"]) if pre else (x, None)
    q = xn @ lw["self.wq"]
    k = xn @ lw["self.wk"]
    v = xn @ lw["self.wv"]
    qr = rope_apply_rows(q, positions, cfg.rope)
    kr = rope_apply_rows(k, positions, cfg.rope)
    a, cache["self_attn"] = attention_forward(qr, kr, v, cfg.scale)
    s = a @ lw["self.wo"]
    cache["self_drop"] = _dropout_mask(drop_rng, cfg.dropout, s.shape)
    s = _maybe_drop(s, cache["self_drop"])
    cache["self_in"] = (x, xn, a)
    if pre:
        u = x + s
    else:
        u, cache["ln1"] = layernorm_forward(x + s, lw["ln1.g"], lw["ln1.b"])

    # cross-attention sub-step (skipped entirely for an empty bank)
    if kv.n_rows > 0:
        un, cache["ln2"] = layernorm_forward(u, lw["ln2.g"], lw["ln2.b"]) if pre else (u, None)
        qc = un @ lw["cross.wq"]
        qcr = rope_apply_rows(qc, positions, cfg.rope)
        kc = rope_apply_rows(kv.keys, kv.positions, cfg.rope)
        ac, cache["cross_attn"] = attention_forward(qcr, kc, kv.values, cfg.scale)
        sc = ac @ lw["cross.wo"]
        cache["cross_drop"] = _dropout_mask(drop_rng, cfg.dropout, sc.shape)
        sc = _maybe_drop(sc, cache["cross_drop"])
        cache["cross_in"] = (u, un, ac)
        if pre:
            w = u + sc
        else:
            w, cache["ln2"] = layernorm_forward(u + sc, lw["ln2.g"], lw["ln2.b"])
    else:
        w = u
        cache["cross_in"] = None

    # MLP sub-step
    wn, cache["ln3"] = layernorm_forward(w, lw["ln3.g"], lw["ln3.b"]) if pre else (w, None)
    z1 = wn @ lw["mlp.w1"] + lw["mlp.b1"]
    h1 = np.maximum(z1, 0.0)
    m = h1 @ lw["mlp.w2"] + lw["mlp.b2"]
    cache["mlp_drop"] = _dropout_mask(drop_rng, cfg.dropout, m.shape)
    m = _maybe_drop(m, cache["mlp_drop"])
    cache["mlp_in"] = (w, wn, z1, h1)
    if pre:
        out = w + m
    else:
        out, cache["ln3"] = layernorm_forward(w + m, lw["ln3.g"], lw["ln3.b"])
    return out, cache


def mem_attn_layer_backward(d_out: np.ndarray, cache, cfg: MemAttnConfig,
                            lw: dict[str, np.ndarray]):
    """Returns (d_tokens, d_kv_keys_values_tuple_or_None, grads dict)."""
    pre = cfg.norm == "pre"
    positions = cache["positions"]
    grads: dict[str, np.ndarray] = {}

    # MLP sub-step
    w, wn, z1, h1 = cache["mlp_in"]
    if pre:
        d_w = d_out.copy()
        d_m = _maybe_drop(d_out, cache["mlp_drop"])
    else:
        d_sum, grads["ln3.g"], grads["ln3.b"] = layernorm_backward(cache["ln3"], d_out)
        d_w = d_sum.copy()
        d_m = _maybe_drop(d_sum, cache["mlp_drop"])
    grads["mlp.w2"] = h1.T @ d_m
    grads["mlp.b2"] = d_m.sum(axis=0)
    d_h1 = d_m @ lw["mlp.w2"].T
    d_z1 = d_h1 * (z1 > 0)
    grads["mlp.w1"] = wn.T @ d_z1
    grads["mlp.b1"] = d_z1.sum(axis=0)
    d_wn = d_z1 @ lw["mlp.w1"].T
    if pre:
        d_ln, grads["ln3.g"], grads["ln3.b"] = layernorm_backward(cache["ln3"], d_wn)
        d_w += d_ln
    else:
        d_w += d_wn

    # cross-attention sub-step
    d_kv = None
    if cache["cross_in"] is not None:
        u, un, ac = cache["cross_in"]
        if pre:
            d_u = d_w.copy()
            d_sc = _maybe_drop(d_w, cache["cross_drop"])
        else:
            d_sum, grads["ln2.g"], grads["ln2.b"] = layernorm_backward(cache["ln2"], d_w)
            d_u = d_sum.copy()
            d_sc = _maybe_drop(d_sum, cache["cross_drop"])
        grads["cross.wo"] = ac.T @ d_sc
        d_ac = d_sc @ lw["cross.wo"].T
        d_qcr, d_kc, d_vc = attention_backward(cache["cross_attn"], d_ac)
        kv_positions = cache["kv_positions"]
        d_kv_keys = rope_backward_rows(d_kc, kv_positions, cfg.rope)
        d_kv = (d_kv_keys, d_vc)
        d_qc = rope_backward_rows(d_qcr, positions, cfg.rope)
        grads["cross.wq"] = un.T @ d_qc
        d_un = d_qc @ lw["cross.wq"].T
        if pre:
            d_ln, grads["ln2.g"], grads["ln2.b"] = layernorm_backward(cache["ln2"], d_un)
            d_u += d_ln
        else:
            d_u += d_un
    else:
        d_u = d_w
        for name in ("cross.wq", "cross.wo", "ln2.g", "ln2.b"):
            grads[name] = np.zeros_like(lw[name])

    # self-attention sub-step
    x, xn, a = cache["self_in"]
    if pre:
        d_x = d_u.copy()
        d_s = _maybe_drop(d_u, cache["self_drop"])
    else:
        d_sum, grads["ln1.g"], grads["ln1.b"] = layernorm_backward(cache["ln1"], d_u)
        d_x = d_sum.copy()
        d_s = _maybe_drop(d_sum, cache["self_drop"])
    grads["self.wo"] = a.T @ d_s
    d_a = d_s @ lw["self.wo"].T
    d_qr, d_kr, d_v = attention_backward(cache["self_attn"], d_a)
    d_q = rope_backward_rows(d_qr, positions, cfg.rope)
    d_k = rope_backward_rows(d_kr, positions, cfg.rope)
    grads["self.wq"] = xn.T @ d_q
    grads["self.wk"] = xn.T @ d_k
    grads["self.wv"] = xn.T @ d_v
    d_xn = d_q @ lw["self.wq"].T + d_k @ lw["self.wk"].T + d_v @ lw["self.wv"].T
    if pre:
        d_ln, grads["ln1.g"], grads["ln1.b"] = layernorm_backward(cache["ln1"], d_xn)
        d_x += d_ln
    else:
        d_x += d_xn
    return d_x, d_kv, grads


def _layer_weights(params: dict[str, np.ndarray], prefix: str,
                   layer: int) -> dict[str, np.ndarray]:
    return {name: params[f"{prefix}.{layer}.{name}"] for name in LAYER_PARAM_SHAPES}


def mem_attn_layer(q: QuerySet, kv: KvBundle, cfg: MemAttnConfig,
                   layer_weights: dict[str, np.ndarray]) -> QuerySet:
    """Single layer applied to a query set (no input position codes)."""
    out, _ = mem_attn_layer_forward(q.tokens, q.positions, kv, cfg, layer_weights)
    return QuerySet(out, q.positions)


def input_position_codes(positions, cfg: MemAttnConfig) -> np.ndarray:
    """pos_scale * sincos(row, col) for positioned tokens, zero otherwise."""
    codes = np.zeros((len(positions), cfg.dim))
    if cfg.pos_scale != 0.0:
        for i, pos in enumerate(positions):
            if pos is not None:
                codes[i] = cfg.pos_scale * sincos_code(pos[0], pos[1], cfg.dim)
    return codes


def mem_attn_stack_forward(q: QuerySet, kv: KvBundle, cfg: MemAttnConfig,
                           params: dict[str, np.ndarray], prefix: str = "mem",
                           drop_rng: CounterRng | None = None):
    if q.tokens.shape[1] != cfg.dim:
        raise ShapeError("query dim does not match config dim")
    if kv.n_rows > 0 and kv.keys.shape[1] != cfg.dim:
        raise ShapeError("memory dim does not match config dim")
    tokens = q.tokens + input_position_codes(q.positions, cfg)
    caches = []
    for layer in range(cfg.layers):
        lw = _layer_weights(params, prefix, layer)
        tokens, cache = mem_attn_layer_forward(tokens, q.positions, kv, cfg, lw,
                                               drop_rng=drop_rng)
        cache["kv_positions"] = kv.positions
        caches.append(cache)
    return QuerySet(tokens, q.positions), caches


def mem_attn_stack(q: QuerySet, kv: KvBundle, cfg: MemAttnConfig,
                   params: dict[str, np.ndarray], prefix: str = "mem") -> QuerySet:
    """Inference path: position codes once, then the residual layers."""
    out, _ = mem_attn_stack_forward(q, kv, cfg, params, prefix)
    return out


def mem_attn_stack_backward(d_tokens: np.ndarray, caches, cfg: MemAttnConfig,
                            params: dict[str, np.ndarray], prefix: str = "mem"):
    """Backward through the stack. Returns (d_input_tokens, grads).

    Gradients w.r.t. the memory rows are dropped: bank contents are treated
    as constants by the streaming trainer.
    """
    grads: dict[str, np.ndarray] = {}
    d = d_tokens
    for layer in reversed(range(len(caches))):
        lw = _layer_weights(params, prefix, layer)
        d, _d_kv, layer_grads = mem_attn_layer_backward(d, caches[layer], cfg, lw)
        for name, g in layer_grads.items():
            grads[f"{prefix}.{layer}.{name}"] = g
    return d, grads
