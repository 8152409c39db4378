"""Confidence-weighted exponential-moving-average prototype.

The prototype is a unit-norm latent vector tracking an object across frames.
Each frame it blends toward the new pointer observation with momentum
``alpha = alpha0 * (1 - confidence)``: full visibility snaps it onto the
observation, zero visibility nearly freezes it. The blend is renormalized to
unit length, so the state lives on the sphere and behaves like a first-order
latent-space filter with a visibility-adaptive gain.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import as_vec


@dataclass(frozen=True)
class EmaConfig:
    alpha0: float = 0.9
    norm_epsilon: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.alpha0 < 1.0:
            raise ValueError("alpha0 must lie in (0, 1)")
        if self.norm_epsilon <= 0.0:
            raise ValueError("norm_epsilon must be positive")


def clamp_confidence(c: float) -> float:
    """Visibility confidence is always used clamped to [0, 1]."""
    return float(min(1.0, max(0.0, c)))


def compute_momentum(cfg: EmaConfig, c: float) -> float:
    """alpha = alpha0 * (1 - c); 0 at full visibility, alpha0 when occluded."""
    return cfg.alpha0 * (1.0 - clamp_confidence(c))


@dataclass(frozen=True)
class EmaPrototype:
    """Unit-norm prototype plus its momentum bookkeeping.

    ``initialized`` is False until the first accepted observation;
    ``last_alpha`` records the momentum used by the most recent update and
    ``degenerate_events`` counts updates skipped due to near-zero blends.
    """
    dim: int
    vector: np.ndarray | None = None
    initialized: bool = False
    last_alpha: float = 0.0
    update_count: int = 0
    degenerate_events: int = 0

    def unit_vector(self) -> np.ndarray:
        if not self.initialized:
            raise ValueError("prototype not initialized")
        return self.vector


def ema_update(proto: EmaPrototype, p: np.ndarray, c: float,
               cfg: EmaConfig) -> EmaPrototype:
    """One streaming update of the prototype with observation ``p``.

    First observation bootstraps the prototype to ``p / ||p||``. Later frames
    blend ``alpha * m + (1 - alpha) * p`` and renormalize. A blend whose norm
    falls below ``cfg.norm_epsilon`` (near-antipodal cancellation) keeps the
    previous prototype and is counted as a degenerate event.
    """
    p = as_vec(p, proto.dim)
    c = clamp_confidence(c)
    if not proto.initialized:
        norm = float(np.linalg.norm(p))
        if norm < cfg.norm_epsilon:
            return replace(proto, degenerate_events=proto.degenerate_events + 1)
        return EmaPrototype(
            dim=proto.dim,
            vector=p / norm,
            initialized=True,
            last_alpha=0.0,
            update_count=proto.update_count + 1,
            degenerate_events=proto.degenerate_events,
        )
    alpha = compute_momentum(cfg, c)
    blend = alpha * proto.vector + (1.0 - alpha) * p
    norm = float(np.linalg.norm(blend))
    if norm < cfg.norm_epsilon:
        return replace(proto,
                       last_alpha=alpha,
                       degenerate_events=proto.degenerate_events + 1)
    return replace(proto,
                   vector=blend / norm,
                   last_alpha=alpha,
                   update_count=proto.update_count + 1)


def prototype_angle_to(proto: EmaPrototype, p: np.ndarray) -> float:
    """Angle in radians between the prototype and a (normalizable) vector."""
    return vector_angle(proto.unit_vector(), p)


def vector_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in [0, pi] via the chord length, stable near 0 and pi
    (arccos of the cosine loses ~sqrt(eps) resolution at the ends)."""
    a = as_vec(a)
    b = as_vec(b, a.size)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("angle undefined for zero vector")
    u, v = a / na, b / nb
    if float(np.dot(u, v)) >= 0.0:
        half_chord = min(1.0, float(np.linalg.norm(u - v)) / 2.0)
        return float(2.0 * np.arcsin(half_chord))
    half_chord = min(1.0, float(np.linalg.norm(u + v)) / 2.0)
    return float(np.pi - 2.0 * np.arcsin(half_chord))
