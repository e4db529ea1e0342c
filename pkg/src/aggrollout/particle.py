"""Bootstrap particle filter with systematic resampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pomdp import PomdpModel, validate_belief

DEFAULT_PARTICLES = 50


@dataclass(frozen=True)
class ParticleSet:
    particles: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=np.int64)
        if p.ndim != 1 or len(p) < 1:
            raise ValueError("a particle set needs at least one particle")
        p.setflags(write=False)
        object.__setattr__(self, "particles", p)

    @property
    def M(self) -> int:
        return len(self.particles)

    def to_json(self) -> list[int]:
        return self.particles.tolist()


def systematic_resample(weights: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn by systematic resampling: one uniform offset, stride 1/M."""
    w = np.asarray(weights, dtype=float)
    cdf = np.cumsum(w / w.sum())
    cdf[-1] = 1.0
    positions = (rng.random() + np.arange(M)) / M
    return np.searchsorted(cdf, positions, side="right")


def pf_init(b0, M: int = DEFAULT_PARTICLES, seed=None) -> ParticleSet:
    b0 = validate_belief(b0)
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = np.random.default_rng(seed)
    return ParticleSet(rng.choice(len(b0), size=M, p=b0))


def pf_update(model: PomdpModel, ps: ParticleSet, u: int, z: int, seed=None) -> ParticleSet:
    """Propagate, weight by ``p(z | j, u)`` and resample.

    If every propagated particle has zero likelihood the propagated set is
    returned unweighted with ``degenerate=True``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    propagated = model.sample_next_states(ps.particles, u, rng)
    w = model.obs_likelihood(z, u)[propagated]
    if not np.any(w > 0):
        return ParticleSet(propagated, degenerate=True)
    idx = systematic_resample(w, ps.M, rng)
    return ParticleSet(propagated[idx])


def pf_belief(ps: ParticleSet, n: int) -> np.ndarray:
    """Empirical measure of the particles."""
    return np.bincount(ps.particles, minlength=n)[:n] / ps.M


class ParticleFilter:
    """Stateful wrapper used by closed-loop runners."""

    def __init__(self, model: PomdpModel, b0, M: int = DEFAULT_PARTICLES, seed=None):
        self.model = model
        self.rng = np.random.default_rng(seed)
        self.particles = pf_init(b0, M, self.rng)
        self.degenerate_steps = 0

    def update(self, u: int, z: int) -> np.ndarray:
        self.particles = pf_update(self.model, self.particles, u, z, self.rng)
        self.degenerate_steps += self.particles.degenerate
        return self.belief

    @property
    def belief(self) -> np.ndarray:
        return pf_belief(self.particles, self.model.n)
