"""End-to-end streaming segmenter built from the toy components.

Per frame: patch-encode, assemble the memory bank into keys/values, condition
the queries (patch tokens + mask/IoU/occlusion/prompt tokens) through the
memory-attention stack, decode a mask plus a pointer token and a visibility
confidence, update the prototype with that confidence, encode the frame into
a spatial memory, and push it into the bank.

Two segmenters share this state machine: the trained toy model, and a
correlation-based reference segmenter that needs no training and exists so
the memory and prototype mechanics can be exercised deterministically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention_stack import (MemAttnConfig, QuerySet, init_mem_attn_params,
                              mem_attn_stack, mem_attn_stack_forward)
from .bank import (MemoryBank, PointerEntry, SpatialMemory, assemble_kv,
                   grid_positions, new_bank, push_frame)
from .ema import EmaConfig, clamp_confidence, ema_update
from .linalg import (Mlp, ShapeError, attention_forward, mlp_forward, sigmoid,
                     sincos_code, uniform_init)
from .rng import CounterRng
from .synth import Frame

MODES = ("full", "fixed_momentum", "no_prototype")
SEGMENTERS = ("trained", "analytic")

# params under these prefixes are structural (identity-like memory encoder,
# fixed occlusion embedding); the trainer never updates them
FROZEN_PREFIXES = ("memenc.", "occl_embed")


@dataclass(frozen=True)
class PointPrompt:
    x: float
    y: float
    polarity: str = "positive"

    def __post_init__(self):
        if self.polarity not in ("positive", "negative"):
            raise ValueError(f"unknown prompt polarity {self.polarity!r}")


@dataclass(frozen=True)
class FrameEmbedding:
    tokens: np.ndarray                  # (N, d), row-major over the grid
    grid_shape: tuple[int, int]
    patch_size: int


@dataclass(frozen=True)
class DecoderOutput:
    mask_logits: np.ndarray             # (H, W)
    mask: np.ndarray                    # bool (H, W), logits > 0
    pointer: np.ndarray                 # (d,)
    iou_estimate: float
    confidence: float


@dataclass(frozen=True)
class ModelConfig:
    frame_height: int = 64
    frame_width: int = 64
    patch: int = 8
    dim: int = 32
    attn: MemAttnConfig = field(default_factory=MemAttnConfig)
    conf_hidden: int = 16
    bank_capacity: int = 4
    gamma: float = 2.0
    tau: float = 0.5
    ema: EmaConfig = field(default_factory=EmaConfig)
    confidence_source: str = "occlusion_token"
    init_seed: int = 1234

    def __post_init__(self):
        if self.frame_height % self.patch or self.frame_width % self.patch:
            raise ValueError("frame size must be divisible by the patch size")
        if self.attn.dim != self.dim:
            raise ValueError("attention dim must equal model dim")
        if self.confidence_source not in ("occlusion_token", "mask_token"):
            raise ValueError(f"bad confidence_source {self.confidence_source!r}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.frame_height // self.patch, self.frame_width // self.patch)

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw


@dataclass
class ToyModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def trainable_names(self) -> list[str]:
        return [k for k in sorted(self.params)
                if not k.startswith(FROZEN_PREFIXES)]

    def confidence_mlp(self) -> Mlp:
        return Mlp(w1=self.params["conf.w1"], b1=self.params["conf.b1"],
                   w2=self.params["conf.w2"], b2=self.params["conf.b2"],
                   out_act="sigmoid")


def init_toy_model(cfg: ModelConfig) -> ToyModel:
    """Deterministic seeded init; memory encoder starts as the identity map
    plus a random mask channel and stays frozen."""
    d, p = cfg.dim, cfg.patch
    rng = CounterRng(cfg.init_seed, stream=1)
    params: dict[str, np.ndarray] = {}
    params["patch.w"] = uniform_init(rng, (p * p, d), p * p)
    params["patch.b"] = np.zeros(d)
    for tok in ("mask", "iou", "occl"):
        params[f"tok.{tok}"] = uniform_init(rng, (d,), d)
    params["prompt.pos"] = uniform_init(rng, (d,), d)
    params["prompt.neg"] = uniform_init(rng, (d,), d)
    params.update(init_mem_attn_params(rng.substream(2), cfg.attn))
    for name in ("dec.wq", "dec.wk", "dec.wv"):
        params[name] = uniform_init(rng, (d, d), d)
    params["iou.w"] = uniform_init(rng, (d,), d)
    params["iou.b"] = np.zeros(1)
    h = cfg.conf_hidden
    params["conf.w1"] = uniform_init(rng, (h, d), d)
    params["conf.b1"] = np.zeros(h)
    params["conf.w2"] = uniform_init(rng, (1, h), h)
    params["conf.b2"] = np.zeros(1)

    frozen = CounterRng(cfg.init_seed, stream=9)
    params["memenc.align.w"] = np.eye(d)
    params["memenc.align.b"] = np.zeros(d)
    lift = frozen.normal(d)
    params["memenc.mask_lift"] = lift / np.linalg.norm(lift)
    for blk in (1, 2):
        params[f"memenc.fuse{blk}.w1"] = uniform_init(frozen, (d, d), d)
        params[f"memenc.fuse{blk}.b1"] = np.zeros(d)
        params[f"memenc.fuse{blk}.w2"] = np.zeros((d, d))
        params[f"memenc.fuse{blk}.b2"] = np.zeros(d)
    occl = frozen.normal(d)
    params["occl_embed"] = occl / np.linalg.norm(occl)
    return ToyModel(config=cfg, params=params)


def fresh_bank(model: ToyModel) -> MemoryBank:
    cfg = model.config
    return new_bank(dim=cfg.dim, capacity=cfg.bank_capacity, gain=cfg.gamma,
                    occlusion_embedding=model.params["occl_embed"])


# ---------------------------------------------------------------------------
# Bilinear resampling between patch grid and frame resolution
# ---------------------------------------------------------------------------

_interp_cache: dict[tuple[int, int], np.ndarray] = {}


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-interpolation matrix with half-pixel centers and edge clamping."""
    key = (n_out, n_in)
    if key not in _interp_cache:
        m = np.zeros((n_out, n_in))
        f = n_out // n_in
        for i in range(n_out):
            src = (i + 0.5) / f - 0.5
            lo = math.floor(src)
            w = src - lo
            lo_c = min(max(lo, 0), n_in - 1)
            hi_c = min(max(lo + 1, 0), n_in - 1)
            m[i, lo_c] += 1.0 - w
            m[i, hi_c] += w
        _interp_cache[key] = m
    return _interp_cache[key]


def upsample_bilinear(grid: np.ndarray, factor: int) -> np.ndarray:
    gh, gw = grid.shape
    wy = _interp_matrix(gh * factor, gh)
    wx = _interp_matrix(gw * factor, gw)
    return wy @ grid @ wx.T


def upsample_bilinear_adjoint(d_out: np.ndarray, factor: int,
                              grid_shape: tuple[int, int]) -> np.ndarray:
    gh, gw = grid_shape
    wy = _interp_matrix(gh * factor, gh)
    wx = _interp_matrix(gw * factor, gw)
    return wy.T @ d_out @ wx


def avg_pool(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

def encode_frame(model: ToyModel, frame: Frame) -> FrameEmbedding:
    """Flatten non-overlapping patches and project linearly to d."""
    cfg = model.config
    pixels = np.asarray(frame.pixels, dtype=np.float64)
    h, w = pixels.shape
    p = cfg.patch
    if h % p or w % p:
        raise ShapeError(f"frame {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    patches = pixels.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p)
    tokens = patches @ model.params["patch.w"] + model.params["patch.b"]
    return FrameEmbedding(tokens=tokens, grid_shape=(gh, gw), patch_size=p)


def encode_prompt(model: ToyModel, prompt: PointPrompt) -> np.ndarray:
    """Sine-cosine code of the click location plus a polarity embedding."""
    cfg = model.config
    if not (0 <= prompt.x < cfg.frame_width and 0 <= prompt.y < cfg.frame_height):
        raise ValueError(f"prompt ({prompt.x}, {prompt.y}) outside the frame")
    code = sincos_code(prompt.x, prompt.y, cfg.dim)
    emb = model.params["prompt.pos" if prompt.polarity == "positive" else "prompt.neg"]
    return code + emb


@dataclass(frozen=True)
class ConditionedQueries:
    """Query tokens in fixed slot order: patches, mask, IoU, occlusion,
    then prompt tokens."""
    tokens: np.ndarray
    positions: tuple
    n_patches: int
    n_prompts: int

    @property
    def patch_tokens(self) -> np.ndarray:
        return self.tokens[:self.n_patches]

    def special(self, name: str) -> np.ndarray:
        idx = {"mask": 0, "iou": 1, "occl": 2}[name]
        return self.tokens[self.n_patches + idx]


def build_queries(model: ToyModel, fe: FrameEmbedding,
                  prompts: tuple[PointPrompt, ...] = ()) -> ConditionedQueries:
    gh, gw = fe.grid_shape
    rows = [fe.tokens,
            model.params["tok.mask"][None, :],
            model.params["tok.iou"][None, :],
            model.params["tok.occl"][None, :]]
    for prompt in prompts:
        rows.append(encode_prompt(model, prompt)[None, :])
    tokens = np.vstack(rows)
    positions = grid_positions(gh, gw) + (None,) * (3 + len(prompts))
    return ConditionedQueries(tokens=tokens, positions=positions,
                              n_patches=gh * gw, n_prompts=len(prompts))


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

def decode(model: ToyModel, cond: ConditionedQueries,
           fe: FrameEmbedding, want_cache: bool = False):
    """Mask logits from the mask token, pointer, IoU estimate, confidence.

    The special tokens take one residual attention readout over the
    conditioned patch tokens, then: patch logits are plain dot products of
    the mask token with each patch token (upsampled bilinearly to frame
    resolution), the pointer is the final mask token, and small heads read
    the IoU and occlusion tokens.
    """
    cfg = model.config
    n = cond.n_patches
    if cond.tokens.shape[0] < n + 3:
        raise ShapeError("conditioned queries are missing the special tokens")
    e_cond = cond.tokens[:n]
    specials = cond.tokens[n:]
    q = specials @ model.params["dec.wq"]
    k = e_cond @ model.params["dec.wk"]
    v = e_cond @ model.params["dec.wv"]
    att, att_cache = attention_forward(q, k, v, 1.0 / math.sqrt(cfg.dim))
    specials_out = specials + att

    mask_tok = specials_out[0]
    iou_tok = specials_out[1]
    occl_tok = specials_out[2]

    gh, gw = fe.grid_shape
    logits_patch = (e_cond @ mask_tok).reshape(gh, gw)
    logits = upsample_bilinear(logits_patch, fe.patch_size)
    mask = logits > 0.0

    iou_raw = float(model.params["iou.w"] @ iou_tok + model.params["iou.b"][0])
    iou_est = float(sigmoid(np.array([iou_raw]))[0])

    conf_src = occl_tok if cfg.confidence_source == "occlusion_token" else mask_tok
    conf_mlp = model.confidence_mlp()
    conf_vec, conf_cache = mlp_forward(conf_mlp, conf_src)
    confidence = float(conf_vec[0])

    out = DecoderOutput(mask_logits=logits, mask=mask, pointer=mask_tok.copy(),
                        iou_estimate=iou_est, confidence=confidence)
    if not want_cache:
        return out
    cache = {"att": att_cache, "specials": specials, "e_cond": e_cond,
             "mask_tok": mask_tok, "iou_tok": iou_tok, "occl_tok": occl_tok,
             "logits_patch": logits_patch, "iou_raw": iou_raw,
             "iou_est": iou_est, "conf_cache": conf_cache,
             "confidence": confidence, "grid_shape": (gh, gw),
             "patch_size": fe.patch_size}
    return out, cache


# ---------------------------------------------------------------------------
# Memory encoder
# ---------------------------------------------------------------------------

def encode_memory(model: ToyModel, fe: FrameEmbedding,
                  mask_logits: np.ndarray) -> SpatialMemory:
    """Fuse mask evidence into the patch tokens for the bank.

    Sigmoid of the logits is average-pooled onto the patch grid, lifted to d
    along a fixed direction, added to channel-aligned patch tokens, and
    refined by two token-wise residual MLP blocks.
    """
    cfg = model.config
    gh, gw = fe.grid_shape
    probs = sigmoid(np.asarray(mask_logits, dtype=np.float64))
    pooled = avg_pool(probs, fe.patch_size).reshape(gh * gw)
    aligned = fe.tokens @ model.params["memenc.align.w"] + model.params["memenc.align.b"]
    x = aligned + pooled[:, None] * model.params["memenc.mask_lift"]
    for blk in (1, 2):
        w1 = model.params[f"memenc.fuse{blk}.w1"]
        b1 = model.params[f"memenc.fuse{blk}.b1"]
        w2 = model.params[f"memenc.fuse{blk}.w2"]
        b2 = model.params[f"memenc.fuse{blk}.b2"]
        x = x + np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
    return SpatialMemory(tokens=x, grid_shape=(gh, gw),
                         pos_grid=grid_positions(gh, gw))


# ---------------------------------------------------------------------------
# Correlation-based reference segmenter
# ---------------------------------------------------------------------------

# affine confidence calibration for the normalized cross-correlation peak:
# floor sits above the noise-only peak distribution, ceiling at a clean match
NCC_CONF_FLOOR = 0.45
NCC_CONF_CEIL = 0.85


def ncc_map(frame_pixels: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation at every valid template placement."""
    f = np.asarray(frame_pixels, dtype=np.float64)
    t = np.asarray(template, dtype=np.float64)
    th, tw = t.shape
    if th > f.shape[0] or tw > f.shape[1]:
        raise ShapeError("template larger than frame")
    tz = t - t.mean()
    t_ss = float((tz * tz).sum())
    windows = np.lib.stride_tricks.sliding_window_view(f, (th, tw))
    sums = windows.sum(axis=(2, 3))
    dots = np.einsum("ijkl,kl->ij", windows, tz)
    sq = np.einsum("ijkl,ijkl->ij", windows, windows)
    n = th * tw
    num = dots                        # tz is zero-mean, so no mean correction
    win_var = sq - sums * sums / n
    denom = np.sqrt(np.maximum(win_var * t_ss, 0.0))
    out = np.zeros_like(num)
    good = denom > 1e-12
    out[good] = num[good] / denom[good]
    return out


def analytic_segmenter(frame: Frame, template: np.ndarray,
                       fe: FrameEmbedding) -> DecoderOutput:
    """Template matcher standing in for the trained decoder.

    The template footprint is stamped at the correlation peak when the
    calibrated confidence clears 0.5; the pointer is the pooled mean of
    patch tokens under the predicted mask.
    """
    corr = ncc_map(frame.pixels, template)
    peak = float(corr.max()) if corr.size else 0.0
    py, px = np.unravel_index(int(corr.argmax()), corr.shape)
    confidence = clamp_confidence((peak - NCC_CONF_FLOOR) / (NCC_CONF_CEIL - NCC_CONF_FLOOR))

    h, w = frame.pixels.shape
    mask = np.zeros((h, w), dtype=bool)
    if confidence >= 0.5:
        footprint = template != 0.0
        mask[py:py + footprint.shape[0], px:px + footprint.shape[1]] = footprint
    logits = np.where(mask, 4.0, -4.0)

    pooled = avg_pool(mask.astype(np.float64), fe.patch_size).reshape(-1)
    total = pooled.sum()
    if total > 0:
        pointer = (pooled[:, None] * fe.tokens).sum(axis=0) / total
    else:
        pointer = np.zeros(fe.tokens.shape[1])
    return DecoderOutput(mask_logits=logits, mask=mask, pointer=pointer,
                         iou_estimate=confidence, confidence=confidence)


# ---------------------------------------------------------------------------
# The streaming step
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepTrace:
    frame_index: int
    confidence: float
    momentum_confidence: float | None   # value fed into the momentum rule
    alpha: float | None                 # momentum used, None if no update
    prototype_initialized: bool
    mode: str


@dataclass(frozen=True)
class StepResult:
    output: DecoderOutput
    bank: MemoryBank
    trace: StepTrace


def step(model: ToyModel, bank: MemoryBank, frame: Frame,
         prompt: PointPrompt | None = None, mode: str = "full",
         segmenter: str = "trained",
         template: np.ndarray | None = None) -> StepResult:
    """Advance one frame: encode, condition on memory, decode, update
    prototype and bank. Pure state transition from (bank, frame)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if segmenter not in SEGMENTERS:
        raise ValueError(f"unknown segmenter {segmenter!r}")
    cfg = model.config
    first_frame = len(bank) == 0 and not bank.prototype.initialized
    if first_frame and prompt is None and segmenter == "trained":
        raise ValueError("first frame requires a point prompt")

    fe = encode_frame(model, frame)
    if segmenter == "trained":
        prompts = (prompt,) if prompt is not None else ()
        queries = build_queries(model, fe, prompts)
        kv = assemble_kv(bank, include_prototype=(mode != "no_prototype"))
        cond_tokens = mem_attn_stack(
            QuerySet(queries.tokens, queries.positions), kv, cfg.attn, model.params)
        cond = replace(queries, tokens=cond_tokens.tokens)
        output = decode(model, cond, fe)
    else:
        if template is None:
            raise ValueError("analytic segmenter requires a template")
        output = analytic_segmenter(frame, template, fe)

    c = output.confidence
    proto = bank.prototype
    momentum_c: float | None = None
    alpha: float | None = None
    if mode != "no_prototype":
        if not proto.initialized:
            if c >= cfg.tau:
                proto = ema_update(proto, output.pointer, c, cfg.ema)
                momentum_c = c
                alpha = proto.last_alpha
        else:
            momentum_c = 0.0 if mode == "fixed_momentum" else c
            proto = ema_update(proto, output.pointer, momentum_c, cfg.ema)
            alpha = proto.last_alpha

    smem = encode_memory(model, fe, output.mask_logits)
    entry = PointerEntry(token=output.pointer, frame_index=frame.index)
    new_bank_state = push_frame(bank.with_prototype(proto), smem, entry,
                                c, cfg.tau)
    trace = StepTrace(frame_index=frame.index, confidence=c,
                      momentum_confidence=momentum_c, alpha=alpha,
                      prototype_initialized=proto.initialized, mode=mode)
    return StepResult(output=output, bank=new_bank_state, trace=trace)
