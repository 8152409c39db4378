"""Deterministic generator of speckled ultrasound-like sequences with exact
ground truth.

A scene is one moving, deforming elliptical lesion over a speckled background,
optionally accompanied by a decoy ellipse of different contrast (so that
identity, not mere saliency, decides what to segment). Occlusion events
either shadow the lesion (dark overlay that erases its contrast; the lesion
is still there, so its mask is retained) or replace the frame with a
lesion-free one (the mask empties). Visibility labels are false during both
kinds of event.

All randomness comes from the in-repo counter RNG, so a given spec generates
bit-identical sequences on any platform. Frames are quantized to 8-bit at
generation time, which makes the PGM round trip exact.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .rng import CounterRng

EVENT_KINDS = ("shadow", "replace")


@dataclass(frozen=True)
class Frame:
    """One grayscale frame, values in [0, 1] quantized to 8 bits."""
    pixels: np.ndarray
    index: int


@dataclass(frozen=True)
class OcclusionEvent:
    """Half-open frame interval [start, end) of one occlusion kind."""
    start: int
    end: int
    kind: str

    def covers(self, t: int) -> bool:
        return self.start <= t < self.end


@dataclass(frozen=True)
class EllipseTrack:
    """Ellipse whose center drifts sinusoidally from its start position."""
    center: tuple[float, float]          # (y, x) at t=0
    radii: tuple[float, float]           # (ry, rx)
    contrast: float                      # signed additive intensity
    drift_amp: tuple[float, float] = (0.0, 0.0)
    drift_period: float = 40.0
    drift_phase: tuple[float, float] = (0.0, 0.0)

    def center_at(self, t: int) -> tuple[float, float]:
        w = 2.0 * math.pi * t / self.drift_period
        return (self.center[0] + self.drift_amp[0] * math.sin(w + self.drift_phase[0]),
                self.center[1] + self.drift_amp[1] * math.sin(w + self.drift_phase[1]))


@dataclass(frozen=True)
class DeformationInterval:
    """Anisotropic radius scaling over [start, end), e.g. probe pressure."""
    start: int
    end: int
    scale_y: float
    scale_x: float


@dataclass(frozen=True)
class SpeckleParams:
    enabled: bool = True
    gamma_shape: int = 16        # multiplicative gamma-like noise, mean 1
    strength: float = 1.0        # scales deviation from 1
    smooth_width: int = 3        # odd box-filter width


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    frames: int
    lesion: EllipseTrack
    decoy: EllipseTrack | None
    background: float
    speckle: SpeckleParams
    deformations: tuple[DeformationInterval, ...]
    events: tuple[OcclusionEvent, ...]
    shadow_factor: float
    shadow_margin: float
    seed: int

    def validate(self) -> None:
        if self.frames < 1:
            raise ValueError("sequence length must be >= 1")
        if min(self.lesion.radii) <= 0:
            raise ValueError("lesion radii must be positive")
        for ev in self.events:
            if not (0 <= ev.start < ev.end <= self.frames):
                raise ValueError(
                    f"event [{ev.start}, {ev.end}) outside frame range [0, {self.frames})")
            if ev.kind not in EVENT_KINDS:
                raise ValueError(f"unknown event kind {ev.kind!r}")
        for t in range(self.frames):
            cy, cx = self.lesion.center_at(t)
            ry, rx = self.radii_at(t)
            if not (ry <= cy <= self.height - 1 - ry and rx <= cx <= self.width - 1 - rx):
                raise ValueError(f"lesion trajectory leaves the frame at t={t}")

    def radii_at(self, t: int) -> tuple[float, float]:
        ry, rx = self.lesion.radii
        for d in self.deformations:
            if d.start <= t < d.end:
                ry *= d.scale_y
                rx *= d.scale_x
        return ry, rx


@dataclass(frozen=True)
class SyntheticSequence:
    frames: tuple[Frame, ...]
    masks: tuple[np.ndarray, ...]        # bool, H x W
    visibility: tuple[bool, ...]
    events: tuple[OcclusionEvent, ...]
    spec: SceneSpec

    def __len__(self) -> int:
        return len(self.frames)


def ellipse_mask(height: int, width: int, center: tuple[float, float],
                 radii: tuple[float, float]) -> np.ndarray:
    """Exact rasterization: pixel centers with (dy/ry)^2 + (dx/rx)^2 <= 1."""
    yy, xx = np.mgrid[0:height, 0:width]
    dy = (yy - center[0]) / radii[0]
    dx = (xx - center[1]) / radii[1]
    return dy * dy + dx * dx <= 1.0


def _box_smooth(field: np.ndarray, width: int) -> np.ndarray:
    """Separable odd-width box filter with edge padding (cumsum windows)."""
    if width <= 1:
        return field
    pad = width // 2

    def smooth_axis(a: np.ndarray, axis: int) -> np.ndarray:
        pads = [(pad, pad) if ax == axis else (0, 0) for ax in range(a.ndim)]
        p = np.pad(a, pads, mode="edge")
        c = np.cumsum(p, axis=axis, dtype=np.float64)
        zero_shape = list(c.shape)
        zero_shape[axis] = 1
        c = np.concatenate([np.zeros(zero_shape), c], axis=axis)
        hi = np.take(c, range(width, c.shape[axis]), axis=axis)
        lo = np.take(c, range(0, c.shape[axis] - width), axis=axis)
        return (hi - lo) / width

    return smooth_axis(smooth_axis(field, 0), 1)


def _speckle_field(rng: CounterRng, shape, params: SpeckleParams) -> np.ndarray:
    if not params.enabled:
        return np.ones(shape)
    k = params.gamma_shape
    u = rng.uniform_open((k,) + tuple(shape))
    gamma = -np.log(u).sum(axis=0) / k        # mean 1, sd 1/sqrt(k)
    smoothed = _box_smooth(gamma, params.smooth_width)
    return 1.0 + params.strength * (smoothed - 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and snap to the 8-bit grid used on disk."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def lesion_template(spec: SceneSpec) -> np.ndarray:
    """Noise-free additive contrast patch of the nominal lesion.

    Bounding box of the undeformed radii; used by the correlation-based
    reference segmenter.
    """
    ry, rx = spec.lesion.radii
    h = 2 * int(math.ceil(ry)) + 1
    w = 2 * int(math.ceil(rx)) + 1
    inside = ellipse_mask(h, w, ((h - 1) / 2.0, (w - 1) / 2.0), (ry, rx))
    return inside.astype(np.float64) * spec.lesion.contrast


def generate(spec: SceneSpec) -> SyntheticSequence:
    """Render the scene deterministically from its seed."""
    spec.validate()
    rng_root = CounterRng(spec.seed)
    frames: list[Frame] = []
    masks: list[np.ndarray] = []
    visibility: list[bool] = []
    h, w = spec.height, spec.width

    for t in range(spec.frames):
        event = next((ev for ev in spec.events if ev.covers(t)), None)
        center = spec.lesion.center_at(t)
        radii = spec.radii_at(t)
        lesion_inside = ellipse_mask(h, w, center, radii)

        base = np.full((h, w), spec.background)
        if spec.decoy is not None:
            decoy_inside = ellipse_mask(h, w, spec.decoy.center_at(t), spec.decoy.radii)
            base += decoy_inside * spec.decoy.contrast

        if event is None:
            base += lesion_inside * spec.lesion.contrast
            noise_stream = t + 1
            mask = lesion_inside
            visible = True
        elif event.kind == "shadow":
            # lesion contrast erased and the local region darkened; the
            # lesion is still present, so ground truth keeps its mask
            ry, rx = radii
            shadow = ellipse_mask(h, w, center,
                                  (ry + spec.shadow_margin, rx + spec.shadow_margin))
            base = np.where(shadow, base * spec.shadow_factor, base)
            noise_stream = t + 1
            mask = lesion_inside
            visible = False
        else:  # replace: similar frame with no lesion, fresh speckle
            noise_stream = spec.frames + t + 1
            mask = np.zeros((h, w), dtype=bool)
            visible = False

        field = _speckle_field(rng_root.substream(noise_stream), (h, w), spec.speckle)
        pixels = quantize(base * field)
        frames.append(Frame(pixels=pixels, index=t))
        masks.append(mask)
        visibility.append(visible)

    return SyntheticSequence(frames=tuple(frames), masks=tuple(masks),
                             visibility=tuple(visibility), events=spec.events,
                             spec=spec)


# ---------------------------------------------------------------------------
# Scene families: sampled per-sequence variation around a base layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneFamily:
    """Ranges from which concrete per-sequence scenes are drawn."""
    height: int = 64
    width: int = 64
    frames: int = 56
    background: float = 0.55
    lesion_contrast: float = -0.28
    lesion_radii: tuple[float, float] = (6.5, 9.0)
    radii_jitter: float = 0.15
    drift_amp_max: float = 3.0
    drift_period: float = 45.0
    decoy_enabled: bool = True
    decoy_contrast: float = -0.18
    decoy_radii: tuple[float, float] = (5.0, 6.5)
    speckle: SpeckleParams = field(default_factory=SpeckleParams)
    deform_scale: tuple[float, float] = (0.82, 1.0)
    deform_len: int = 12
    events_kind: str = "mixed"           # none | replace | shadow | mixed
    replace_len: int = 10
    shadow_len: int = 15
    shadow_factor: float = 0.55
    shadow_margin: float = 4.0

    def sample(self, seed: int) -> SceneSpec:
        """Concrete scene for one sequence; layout varies with the seed.

        The lesion is confined to the left half and the decoy to the right
        half, drift included, so ground truth is never ambiguous.
        """
        rng = CounterRng(seed, stream=77)
        h, w, T = self.height, self.width, self.frames

        def span(lo, hi):
            lo, hi = float(lo), float(hi)
            if hi <= lo:
                return (lo + hi) / 2.0
            return lo + (hi - lo) * float(rng.uniform(1)[0])

        ry = self.lesion_radii[0] * (1.0 + self.radii_jitter * (2 * rng.uniform(1)[0] - 1))
        rx = self.lesion_radii[1] * (1.0 + self.radii_jitter * (2 * rng.uniform(1)[0] - 1))
        amp_y = self.drift_amp_max * rng.uniform(1)[0]
        amp_x = self.drift_amp_max * rng.uniform(1)[0]
        cy = span(ry + amp_y + 2.0, h - 1 - ry - amp_y - 2.0)
        cx = span(rx + amp_x + 2.0, w / 2.0 - 1.0 - rx - amp_x)
        lesion = EllipseTrack(
            center=(cy, cx), radii=(ry, rx), contrast=self.lesion_contrast,
            drift_amp=(amp_y, amp_x), drift_period=self.drift_period,
            drift_phase=(2 * math.pi * rng.uniform(1)[0], 2 * math.pi * rng.uniform(1)[0]))

        decoy = None
        if self.decoy_enabled:
            dry, drx = self.decoy_radii
            damp_y, damp_x = amp_y * 0.6, amp_x * 0.6
            dcy = span(dry + damp_y + 2.0, h - 1 - dry - damp_y - 2.0)
            dcx = span(w / 2.0 + 1.0 + drx + damp_x, w - 1 - drx - damp_x - 2.0)
            decoy = EllipseTrack(
                center=(dcy, dcx), radii=(dry, drx), contrast=self.decoy_contrast,
                drift_amp=(damp_y, damp_x), drift_period=self.drift_period,
                drift_phase=(2 * math.pi * rng.uniform(1)[0], 2 * math.pi * rng.uniform(1)[0]))

        deform_start = int(T * 0.25 + (T * 0.2) * rng.uniform(1)[0])
        deformations = (DeformationInterval(
            start=deform_start, end=min(T, deform_start + self.deform_len),
            scale_y=self.deform_scale[0], scale_x=self.deform_scale[1]),)

        events = self._sample_events(rng, T)
        return SceneSpec(height=h, width=w, frames=T, lesion=lesion, decoy=decoy,
                         background=self.background, speckle=self.speckle,
                         deformations=deformations, events=events,
                         shadow_factor=self.shadow_factor,
                         shadow_margin=self.shadow_margin, seed=seed)

    def _sample_events(self, rng: CounterRng, T: int) -> tuple[OcclusionEvent, ...]:
        kind = self.events_kind
        if kind == "none":
            return ()
        if kind == "mixed":
            kind = "replace" if rng.uniform(1)[0] < 0.5 else "shadow"
        length = self.replace_len if kind == "replace" else self.shadow_len
        lo = max(1, int(T * 0.3))
        hi = max(lo + 1, T - length - max(10, T // 5))
        start = int(lo + (hi - lo) * rng.uniform(1)[0])
        return (OcclusionEvent(start=start, end=min(T, start + length), kind=kind),)


# ---------------------------------------------------------------------------
# On-disk format: P5 PGM frames, {0,255} PGM masks, YAML manifest
# ---------------------------------------------------------------------------

class SequenceFormatError(ValueError):
    """Malformed manifest or frame file."""


def write_pgm(path: Path, img: np.ndarray) -> None:
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", blob)
    if not m:
        raise SequenceFormatError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(m.group(1)), int(m.group(2))
    raw = blob[m.end():]
    if len(raw) != w * h:
        raise SequenceFormatError(f"{path}: expected {w * h} pixels, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w) / 255.0


def _spec_to_dict(spec: SceneSpec) -> dict:
    def track(tr: EllipseTrack | None):
        if tr is None:
            return None
        return {"center": [float(v) for v in tr.center],
                "radii": [float(v) for v in tr.radii],
                "contrast": float(tr.contrast),
                "drift_amp": [float(v) for v in tr.drift_amp],
                "drift_period": float(tr.drift_period),
                "drift_phase": [float(v) for v in tr.drift_phase]}

    return {
        "height": int(spec.height), "width": int(spec.width),
        "frames": int(spec.frames),
        "background": float(spec.background),
        "lesion": track(spec.lesion), "decoy": track(spec.decoy),
        "speckle": {"enabled": bool(spec.speckle.enabled),
                     "gamma_shape": int(spec.speckle.gamma_shape),
                     "strength": float(spec.speckle.strength),
                     "smooth_width": int(spec.speckle.smooth_width)},
        "deformations": [{"start": int(d.start), "end": int(d.end),
                          "scale_y": float(d.scale_y), "scale_x": float(d.scale_x)}
                         for d in spec.deformations],
        "events": [{"start": int(e.start), "end": int(e.end), "kind": e.kind}
                   for e in spec.events],
        "shadow_factor": float(spec.shadow_factor),
        "shadow_margin": float(spec.shadow_margin),
        "seed": int(spec.seed),
    }


def _spec_from_dict(d: dict) -> SceneSpec:
    def track(td):
        if td is None:
            return None
        return EllipseTrack(center=tuple(td["center"]), radii=tuple(td["radii"]),
                            contrast=td["contrast"], drift_amp=tuple(td["drift_amp"]),
                            drift_period=td["drift_period"],
                            drift_phase=tuple(td["drift_phase"]))

    sp = d["speckle"]
    return SceneSpec(
        height=d["height"], width=d["width"], frames=d["frames"],
        lesion=track(d["lesion"]), decoy=track(d["decoy"]),
        background=d["background"],
        speckle=SpeckleParams(enabled=sp["enabled"], gamma_shape=sp["gamma_shape"],
                              strength=sp["strength"], smooth_width=sp["smooth_width"]),
        deformations=tuple(DeformationInterval(**dd) for dd in d["deformations"]),
        events=tuple(OcclusionEvent(**ee) for ee in d["events"]),
        shadow_factor=d["shadow_factor"], shadow_margin=d["shadow_margin"],
        seed=d["seed"])


def write_sequence(seq: SyntheticSequence, path: Path) -> None:
    """Frames and masks as PGM plus a YAML manifest; round trip is exact."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frame_files, mask_files = [], []
    for t, (frame, mask) in enumerate(zip(seq.frames, seq.masks)):
        ff, mf = f"frame_{t:04d}.pgm", f"mask_{t:04d}.pgm"
        write_pgm(path / ff, frame.pixels)
        write_pgm(path / mf, mask.astype(np.float64))
        frame_files.append(ff)
        mask_files.append(mf)
    manifest = {
        "format": "emaseg-sequence-v1",
        "height": seq.spec.height,
        "width": seq.spec.width,
        "length": len(seq),
        "visibility": [bool(v) for v in seq.visibility],
        "events": [{"start": e.start, "end": e.end, "kind": e.kind}
                   for e in seq.events],
        "frame_files": frame_files,
        "mask_files": mask_files,
        "scene": _spec_to_dict(seq.spec),
    }
    with open(path / "manifest.yaml", "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)


def read_sequence(path: Path) -> SyntheticSequence:
    path = Path(path)
    manifest_path = path / "manifest.yaml"
    if not manifest_path.exists():
        raise SequenceFormatError(f"{path}: missing manifest.yaml")
    with open(manifest_path) as fh:
        manifest = yaml.safe_load(fh)
    if not isinstance(manifest, dict) or manifest.get("format") != "emaseg-sequence-v1":
        raise SequenceFormatError(f"{manifest_path}: unrecognized manifest format")
    T = manifest.get("length", 0)
    if not isinstance(T, int) or T < 1:
        raise SequenceFormatError(f"{manifest_path}: invalid sequence length {T!r}")
    for key in ("visibility", "frame_files", "mask_files"):
        if len(manifest.get(key, [])) != T:
            raise SequenceFormatError(f"{manifest_path}: {key} length != {T}")
    frames, masks = [], []
    for t in range(T):
        try:
            pix = read_pgm(path / manifest["frame_files"][t])
            msk = read_pgm(path / manifest["mask_files"][t])
        except SequenceFormatError as err:
            raise SequenceFormatError(f"frame {t}: {err}") from err
        frames.append(Frame(pixels=pix, index=t))
        masks.append(msk > 0.5)
    events = tuple(OcclusionEvent(**e) for e in manifest["events"])
    return SyntheticSequence(frames=tuple(frames), masks=tuple(masks),
                             visibility=tuple(bool(v) for v in manifest["visibility"]),
                             events=events, spec=_spec_from_dict(manifest["scene"]))
