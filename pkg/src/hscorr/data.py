"""Default initial one-particle data: compact C2 bump in q times a momentum profile."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .partitions import DEFAULT_CAP, FunctionSequence

BUMP_VOLUME = 64.0 * np.pi / 315.0  # integral of (1 - r^2)^3 over the unit ball


def bump(r: np.ndarray) -> np.ndarray:
    """(1 - r^2)^3 on r < 1, zero outside; twice continuously differentiable."""
    r2 = np.minimum(r * r, 1.0)
    return (1.0 - r2) ** 3


def maxwellian(p: np.ndarray, beta: float, mean=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Normalised Maxwellian density on the last axis of ``p``."""
    c = p - np.asarray(mean, dtype=float)
    return (beta / (2 * np.pi)) ** 1.5 * np.exp(-0.5 * beta * np.sum(c * c, axis=-1))


@dataclass(frozen=True)
class InitialData:
    """g1(q, p) = rho0 * bump(|q - center| / radius) * momentum density.

    The momentum density is a normalised Maxwellian with inverse temperature
    ``beta`` around ``drift``, or with ``split > 0`` an equal mixture of two
    such Maxwellians displaced by +-split along the x axis.
    """

    rho0: float = 1.0
    radius: float = 2.0
    beta: float = 1.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    drift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    split: float = 0.0

    def spatial(self, q: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(q - np.asarray(self.center), axis=-1) / self.radius
        return self.rho0 * bump(r)

    def momentum(self, p: np.ndarray) -> np.ndarray:
        if self.split == 0.0:
            return maxwellian(p, self.beta, self.drift)
        shift = np.array([self.split, 0.0, 0.0])
        u = np.asarray(self.drift)
        return 0.5 * (maxwellian(p, self.beta, u + shift) + maxwellian(p, self.beta, u - shift))

    def __call__(self, q: np.ndarray, p: np.ndarray) -> np.ndarray:
        """One-point evaluator on arrays of shape (B, 1, 3)."""
        return self.spatial(q[:, 0]) * self.momentum(p[:, 0])

    @property
    def total(self) -> float:
        """Integral of g1 over phase space (mean particle number)."""
        return self.rho0 * self.radius ** 3 * BUMP_VOLUME

    @property
    def support_radius(self) -> float:
        return self.radius

    def sequence(self, cap: int = DEFAULT_CAP) -> FunctionSequence:
        """Uncorrelated initial data (0, g1, 0, ...)."""
        return FunctionSequence({1: self}, cap=cap)

    def sample_momenta(self, n: int, rng: np.random.Generator) -> np.ndarray:
        p = rng.normal(size=(n, 3)) / np.sqrt(self.beta) + np.asarray(self.drift)
        if self.split:
            sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
            p[:, 0] += sign * self.split
        return p

    def sample_positions(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Positions distributed as the normalised bump (rejection sampling)."""
        out = np.empty((0, 3))
        while out.shape[0] < n:
            m = 2 * (n - out.shape[0]) + 16
            u = rng.uniform(-1.0, 1.0, size=(m, 3))
            keep = rng.random(m) < bump(np.linalg.norm(u, axis=1))
            out = np.vstack([out, u[keep]])
        return out[:n] * self.radius + np.asarray(self.center)
