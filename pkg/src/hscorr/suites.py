"""Invariant suites behind ``hscorr verify``.

Each suite returns a list of :class:`Check` records; a check passes when its
worst residual is within tolerance.  All randomness comes from the seed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .correlations import evolve_correlations, evolved_sequence, nonlinear_group_compose_check
from .dynamics import SystemState, flow, flow_batch, is_allowed, next_event
from .partitions import (FunctionSequence, cumulant_coefficient, exp_star, index_partitions, ln_star,
                         star_product)

SUITES = ("algebra", "dynamics", "cumulants")


@dataclass
class Check:
    check: str
    status: str
    max_residual: float
    tolerance: float

    @classmethod
    def of(cls, name: str, residual: float, tolerance: float) -> "Check":
        ok = bool(np.isfinite(residual) and residual <= tolerance)
        return cls(name, "pass" if ok else "fail", float(residual), float(tolerance))

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# smooth symmetric test sequences


def _smooth(scale: float, width: float, shift: float):
    """Symmetric n-point evaluator: Gaussian in the centred positions and in p."""

    def f(q, p):
        n = q.shape[1]
        c = q - q.mean(axis=1, keepdims=True) if n > 1 else q
        return scale * np.exp(-np.sum(c * c, axis=(1, 2)) / width
                              - 0.5 * np.sum((p - shift) ** 2, axis=(1, 2)))

    return f


def sample_sequence(cap: int, seed: int, zeroth: float = 0.0) -> FunctionSequence:
    """A correlated sequence (g_1, ..., g_cap) with seeded amplitudes."""
    rng = np.random.default_rng(seed)
    comps = {0: zeroth}
    for n in range(1, cap + 1):
        comps[n] = _smooth(float(rng.uniform(0.2, 1.0)) / n, float(rng.uniform(2.0, 4.0)),
                           float(rng.uniform(-0.5, 0.5)))
    return FunctionSequence(comps, cap=cap)


def _random_points(rng, n: int, spread: float = 1.0):
    return rng.normal(size=(n, 3)) * spread, rng.normal(size=(n, 3))


def _allowed_state(rng, n: int, sigma: float, spread: float) -> SystemState:
    while True:
        q, p = _random_points(rng, n, spread)
        x = SystemState(sigma, q, p)
        if is_allowed(x):
            return x


# ---------------------------------------------------------------------------
# suites


def algebra_suite(seed: int = 0, points: int = 100, cap: int = 5) -> list[Check]:
    rng = np.random.default_rng(seed)
    h = sample_sequence(cap, seed)
    u = exp_star(h)
    back = ln_star(u)
    worst = 0.0
    for _ in range(points):
        for n in range(1, cap + 1):
            q, p = _random_points(rng, n)
            worst = max(worst, abs(back.at(n, q, p) - h.at(n, q, p)))
    checks = [Check.of("exp_ln_inversion", worst, 1e-12)]

    moebius = 0
    for m in range(1, 9):
        total = sum(cumulant_coefficient(len(part)) for part in index_partitions(m))
        moebius = max(moebius, abs(total - (1 if m == 1 else 0)))
    checks.append(Check.of("moebius_identity", float(moebius), 0.0))

    f = sample_sequence(cap, seed + 1, 0.5)
    g = sample_sequence(cap, seed + 2, -0.3)
    k = sample_sequence(cap, seed + 3, 1.2)
    left = star_product(star_product(f, g), k)
    right = star_product(f, star_product(g, k))
    worst = 0.0
    for _ in range(points // 4):
        for n in range(cap + 1):
            q, p = _random_points(rng, n)
            worst = max(worst, abs(left.at(n, q, p) - right.at(n, q, p)))
    checks.append(Check.of("star_associativity", worst, 1e-12))
    return checks


def _contact_time(dq, dp, sigma):
    """Closed-form first contact time of two approaching spheres, or None."""
    a = dp @ dp
    b = dq @ dp
    c = dq @ dq - sigma * sigma
    disc = b * b - a * c
    if b >= 0 or disc <= 0:
        return None
    return (-b - math.sqrt(disc)) / a


def dynamics_suite(seed: int = 0, events: int = 1000, sigma: float = 1.0) -> list[Check]:
    """Conservation and reversibility over ``events`` collisions of 2-4 spheres."""
    rng = np.random.default_rng(seed)
    e_worst = m_worst = r_worst = 0.0
    seen = 0
    while seen < events:
        n = int(rng.integers(2, 5))
        x = _allowed_state(rng, n, sigma, 0.9 * sigma)
        t = float(rng.uniform(0.5, 2.0))
        y = flow(x, t)
        back = flow(y, -t)
        seen += _count_events(x, t)
        e_worst = max(e_worst, abs(y.energy() - x.energy()) / max(x.energy(), 1.0))
        m_worst = max(m_worst, float(np.max(np.abs(y.momentum() - x.momentum()))))
        r_worst = max(r_worst, float(np.max(np.abs(back.q - x.q))), float(np.max(np.abs(back.p - x.p))))
    checks = [Check.of("energy_conservation", e_worst, 1e-10),
              Check.of("momentum_conservation", m_worst, 1e-10),
              Check.of("reversibility", r_worst, 1e-10)]

    worst = 0.0
    for _ in range(200):
        dq = rng.normal(size=3) * 3.0
        dp = -dq / np.linalg.norm(dq) * rng.uniform(0.5, 2.0) + rng.normal(size=3) * 0.3
        if dq @ dq <= sigma * sigma:
            continue
        x = SystemState(sigma, [dq, [0.0, 0.0, 0.0]], [dp, [0.0, 0.0, 0.0]])
        exact = _contact_time(dq, dp, sigma)
        ev = next_event(x, 100.0)
        if exact is None:
            worst = max(worst, 0.0 if ev is None else np.inf)
            continue
        worst = max(worst, abs(ev.time - exact) / max(1.0, exact))
    checks.append(Check.of("contact_time", worst, 1e-12))
    return checks


def _count_events(x: SystemState, t: float) -> int:
    return int(flow_batch(x.q[None], x.p[None], x.sigma, t)[3][0])


def cumulants_suite(seed: int = 0, points: int = 200, compose_points: int = 100,
                    coefficient: Callable[[int], int] = cumulant_coefficient) -> list[Check]:
    """Commuting square g(t) = Ln(S(-t) Exp g0) and the nonlinear group property.

    ``coefficient`` replaces the partition-lattice coefficient of the
    correlation expansions only (a fault-injection hook).
    """
    rng = np.random.default_rng(seed)
    sigma = 1.0
    g0 = sample_sequence(3, seed)
    D = exp_star(g0)
    worst = 0.0
    for k in range(points):
        s = 1 + k % 3
        x = _allowed_state(rng, s, sigma, 1.5)
        t = float(rng.uniform(-3.0, 3.0))
        direct = evolve_correlations(t, g0, s, x, coefficient)
        via = ln_star(evolved_sequence(t, D, sigma)).at(s, x.q, x.p)
        worst = max(worst, abs(direct - via))
    checks = [Check.of("commuting_square", worst, 1e-10)]

    worst = 0.0
    for _ in range(compose_points):
        x = _allowed_state(rng, 2, sigma, 1.5)
        t1, t2 = (float(v) for v in rng.uniform(-2.0, 2.0, size=2))
        worst = max(worst, nonlinear_group_compose_check(t1, t2, g0, 2, x))
    checks.append(Check.of("nonlinear_group_property", worst, 1e-9))
    return checks


def tampered_coefficient(k: int) -> int:
    """Partition coefficient with a deliberate error at two blocks."""
    return -2 if k == 2 else cumulant_coefficient(k)


def run_suite(name: str, seed: int = 0, fault: bool = False) -> list[Check]:
    if name == "algebra":
        return algebra_suite(seed)
    if name == "dynamics":
        return dynamics_suite(seed)
    if name == "cumulants":
        return cumulants_suite(seed, coefficient=tampered_coefficient if fault else cumulant_coefficient)
    raise KeyError(name)
