"""Central differential privacy on model updates.

Client updates are flat-clipped to an L2 bound before averaging; the server
adds Gaussian noise once, after aggregation. The clip bound is either fixed
or adapted per round toward a target quantile of the update norms via
noised geometric steps.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .net.params import ParamVector
from .seeding import rng_for


class DPError(ValueError):
    pass


class UndefinedEffectiveNoiseError(DPError):
    """The quantile-estimation noise exceeds what the total budget allows."""


@dataclass(frozen=True)
class FixedClip:
    clip_norm: float

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise DPError(f"clip norm must be > 0, got {self.clip_norm}")


@dataclass(frozen=True)
class AdaptiveClip:
    """Geometric quantile-tracking clip schedule."""

    initial_clip: float = 0.1
    eta_c: float = 0.2
    target_quantile: float = 0.5
    sigma_b: float = 0.5

    def __post_init__(self):
        if not self.initial_clip > 0:
            raise DPError("initial clip must be > 0")
        if not 0.0 < self.target_quantile < 1.0:
            raise DPError("target quantile must be in (0,1)")
        if self.sigma_b < 0:
            raise DPError("sigma_b must be >= 0")


@dataclass(frozen=True)
class DPConfig:
    """Noise scale, failure probability and the clipping strategy."""

    noise_scale: float
    delta: float = 4e-3
    clip: FixedClip | AdaptiveClip = field(default_factory=lambda: FixedClip(0.3))

    def __post_init__(self):
        if self.noise_scale < 0:
            raise DPError("noise scale must be >= 0")
        if not 0.0 < self.delta < 1.0:
            raise DPError("delta must be in (0,1)")

    @property
    def adaptive(self) -> bool:
        return isinstance(self.clip, AdaptiveClip)


@dataclass(frozen=True)
class ClipState:
    """Current clip norm plus the (round, clip, noised fraction) trajectory."""

    clip_norm: float
    history: tuple[tuple[int, float, float], ...] = ()

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise DPError("clip norm must stay > 0")


def flat_clip(update: ParamVector, clip_norm: float) -> tuple[ParamVector, bool]:
    """Project the whole update into the L2 ball of radius `clip_norm`.

    Returns the (possibly rescaled) update and whether rescaling happened.
    Inside the ball the update is returned unchanged, bit for bit.
    """
    if not clip_norm > 0:
        raise DPError(f"clip norm must be > 0, got {clip_norm}")
    if not np.isfinite(update.values).all():
        raise DPError("cannot clip a non-finite update")
    norm = update.norm()
    if norm <= clip_norm:
        return update, False
    return ParamVector(update.values * (clip_norm / norm), update.layout), True


def sensitivity(clip_norm: float, q: float, total_clients: int) -> float:
    """L2 sensitivity of the averaged update: clip / (expected participants)."""
    m = q * total_clients
    if m < 1:
        raise DPError(f"expected participants q*w = {m} must be >= 1")
    return clip_norm / m


def noise_sigma(noise_scale: float, sens: float) -> float:
    """Gaussian noise std applied server-side: sigma = z * sensitivity."""
    if noise_scale < 0 or sens < 0:
        raise DPError("noise scale and sensitivity must be >= 0")
    return noise_scale * sens


def add_server_noise(aggregate: ParamVector, sigma: float, seed: int, round_index: int = 0) -> ParamVector:
    """Add iid N(0, sigma^2) per coordinate to the averaged update.

    sigma = 0 returns the aggregate unchanged so a zero-noise DP run stays
    bit-identical to the plain run.
    """
    if sigma < 0:
        raise DPError("sigma must be >= 0")
    if sigma == 0.0:
        return aggregate
    rng = rng_for(seed, "server-noise", round_index)
    noise = rng.normal(0.0, sigma, size=aggregate.values.size)
    return ParamVector(aggregate.values + noise, aggregate.layout)


def adaptive_clip_update(
    state: ClipState,
    clipped_flags,
    sigma_b: float,
    eta_c: float,
    target_quantile: float,
    seed: int,
) -> ClipState:
    """One geometric clip-norm adaptation step.

    The unclipped fraction (update norms <= current clip) estimates how the
    clip sits in the norm distribution; Gaussian noise on the count keeps the
    query private; the clip then moves by exp(-eta_c * (fraction - target)).
    """
    flags = list(clipped_flags)
    m = len(flags)
    if m < 1:
        raise DPError("need at least one participating client")
    unclipped_fraction = sum(0 if f else 1 for f in flags) / m
    if sigma_b > 0:
        round_index = len(state.history)
        noise = rng_for(seed, "clip-estimate", round_index).normal(0.0, sigma_b)
    else:
        noise = 0.0
    noised_fraction = unclipped_fraction + noise / m
    new_clip = state.clip_norm * math.exp(-eta_c * (noised_fraction - target_quantile))
    entry = (len(state.history), new_clip, noised_fraction)
    return ClipState(clip_norm=new_clip, history=state.history + (entry,))


def effective_noise(noise_scale: float, sigma_b: float) -> float:
    """Total noise scale once part of the budget pays for quantile estimation.

    z_eff = (z^-2 - (2*sigma_b)^-2)^(-1/2); undefined when the estimation
    noise term is at least as large as the total budget allows.
    """
    if noise_scale <= 0:
        raise DPError("noise scale must be > 0")
    if sigma_b <= 0:
        raise DPError("sigma_b must be > 0")
    inv = noise_scale**-2 - (2.0 * sigma_b) ** -2
    if inv <= 0:
        raise UndefinedEffectiveNoiseError(
            f"z={noise_scale} with sigma_b={sigma_b}: z^-2 must exceed (2*sigma_b)^-2"
        )
    return inv**-0.5


def clip_trajectory_rows(state: ClipState) -> list[tuple[int, float]]:
    """(round, clip_norm) pairs for CSV export of the adaptation curve."""
    return [(r, c) for r, c, _ in state.history]
