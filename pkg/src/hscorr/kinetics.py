"""Kinetic layer: hard-sphere collision integrals, a homogeneous DSMC solver,
the H-functional, the Boltzmann-Enskog collision term, low-order scattering
cumulant correlation functionals and Boltzmann-Grad scaling probes.

Collision-integral quadrature samples the partner momentum from a Gaussian
proposal and ``eta`` uniformly on the unit sphere; directions outside the
admissible hemisphere ``<eta, p1 - p2> > 0`` contribute zero, which the
full-sphere weight 4 pi (twice the hemisphere area) compensates.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from itertools import permutations
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

from .correlations import CorrelationEvaluator, _BadRows, robust_evaluate
from .dynamics import (OK, PATHOLOGY, RUNAWAY, MAX_COLLISIONS, PhasePoint, SystemState, flow, flow_batch,
                       is_allowed)
from .errors import DomainError, KernelBoundError, ResolutionError
from .partitions import FunctionSequence, cumulant_coefficient, enumerate_dissections, index_partitions
from .reduction import (QuadratureSpec, ReducedEstimate, _enforce, _fixed, _series, _stream, draw_points,
                        effective_sample_size, estimate_G)

MAX_COLLISION_PROBABILITY = 0.1
MAX_EMPTY_FRACTION = 0.5


@dataclass
class MCEstimate:
    value: float
    std_error: float
    samples: int


def _mc(c: np.ndarray) -> MCEstimate:
    return MCEstimate(float(c.mean()), float(c.std(ddof=1) / math.sqrt(c.size)), int(c.size))


def _rng(seed) -> np.random.Generator:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# collision-integral quadrature


@dataclass
class CollisionKernelSample:
    """Partner momenta and sphere directions with proposal weights.

    ``admissible`` marks ``<eta, p1 - p2> > 0``; inadmissible rows carry zero
    weight.
    """

    p2: np.ndarray
    eta: np.ndarray
    weight: np.ndarray
    admissible: np.ndarray


def _gauss_density(p, beta, center):
    c = p - center
    return (beta / (2 * np.pi)) ** 1.5 * np.exp(-0.5 * beta * np.sum(c * c, axis=-1))


def _draw_gauss(rng, n, beta, center):
    return np.asarray(center, float) + rng.normal(size=(n, 3)) / math.sqrt(beta)


def sample_kernel(rng: np.random.Generator, p1: np.ndarray, n: int, beta_prop: float,
                  p_center) -> CollisionKernelSample:
    """Partner momenta from the Gaussian proposal and uniform sphere directions.

    ``p1`` has shape (3,) or (n, 3).
    """
    center = np.asarray(p_center, float)
    p2 = _draw_gauss(rng, n, beta_prop, center)
    eta = rng.normal(size=(n, 3))
    eta /= np.linalg.norm(eta, axis=1, keepdims=True)
    g = np.broadcast_to(p1, (n, 3)) - p2
    ok = np.sum(eta * g, axis=1) > 0.0
    w = np.where(ok, 4.0 * np.pi / _gauss_density(p2, beta_prop, center), 0.0)
    return CollisionKernelSample(p2, eta, w, ok)


def post_collision(p1: np.ndarray, p2: np.ndarray, eta: np.ndarray):
    """Elastic post-collision momenta for rows of (p1, p2, eta)."""
    a = np.sum(eta * (p1 - p2), axis=-1, keepdims=True)
    return p1 - a * eta, p2 + a * eta


def _checked(vals: np.ndarray) -> np.ndarray:
    vals = np.asarray(vals, dtype=float)
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise DomainError("distribution must be finite and nonnegative")
    return vals


def _collision_contrib(f: Callable, p1: np.ndarray, ks: CollisionKernelSample) -> np.ndarray:
    p1 = np.broadcast_to(p1, ks.p2.shape)
    s1, s2 = post_collision(p1, ks.p2, ks.eta)
    rate = np.sum(ks.eta * (p1 - ks.p2), axis=1)
    gain = _checked(f(s1)) * _checked(f(s2))
    loss = _checked(f(p1)) * _checked(f(ks.p2))
    return ks.weight * rate * (gain - loss)


def boltzmann_collision_integral(f: Callable, p1, quad: int, seed, beta_prop: float = 0.5,
                                 p_center=(0.0, 0.0, 0.0)) -> MCEstimate:
    """MC estimate of the hard-sphere Boltzmann collision integral at ``p1``.

    ``f`` maps momenta of shape (B, 3) to values (B,).
    """
    p1 = np.asarray(p1, dtype=float).reshape(3)
    ks = sample_kernel(_rng(seed), p1, int(quad), beta_prop, p_center)
    return _mc(_collision_contrib(f, p1, ks))


def collision_invariant_moments(f: Callable, quad: int, seed, beta_prop: float = 0.5,
                                p_center=(0.0, 0.0, 0.0)) -> list[tuple[str, MCEstimate]]:
    """Integrals of the collision integral against 1, p_x, p_y, p_z and |p|^2."""
    rng = _rng(seed)
    center = np.asarray(p_center, float)
    p1 = _draw_gauss(rng, int(quad), beta_prop, center)
    ks = sample_kernel(rng, p1, int(quad), beta_prop, center)
    c = _collision_contrib(f, p1, ks) / _gauss_density(p1, beta_prop, center)
    phis = [("1", np.ones(len(p1))), ("px", p1[:, 0]), ("py", p1[:, 1]), ("pz", p1[:, 2]),
            ("p2", np.sum(p1 * p1, axis=1))]
    return [(name, _mc(c * phi)) for name, phi in phis]


def enskog_collision_term(G1: Callable, x1: PhasePoint, sigma: float, quad: int, seed,
                          beta_prop: float = 0.5, p_center=(0.0, 0.0, 0.0)) -> MCEstimate:
    """Boltzmann-Enskog collision term with the partner at distance sigma.

    ``G1`` is a one-point evaluator on arrays of shape (B, 1, 3).
    """
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    q1, p1 = np.asarray(x1.q, float), np.asarray(x1.p, float)
    n = int(quad)
    ks = sample_kernel(_rng(seed), p1, n, beta_prop, p_center)
    P1 = np.broadcast_to(p1, (n, 3))
    Q1 = np.broadcast_to(q1, (n, 3))
    s1, s2 = post_collision(P1, ks.p2, ks.eta)
    rate = np.sum(ks.eta * (P1 - ks.p2), axis=1)

    def g(q, p):
        return _checked(np.asarray(G1(q[:, None], p[:, None])).reshape(n))

    gain = g(Q1, s1) * g(Q1 - sigma * ks.eta, s2)
    loss = g(Q1, P1) * g(Q1 + sigma * ks.eta, ks.p2)
    return _mc(sigma * sigma * ks.weight * rate * (gain - loss))


# ---------------------------------------------------------------------------
# spatially homogeneous DSMC


@dataclass(frozen=True)
class MomentumEnsemble:
    """N sample momenta representing a homogeneous f with number density ``weight``."""

    momenta: np.ndarray
    weight: float = 1.0
    time: float = 0.0

    def __post_init__(self):
        m = np.array(self.momenta, dtype=float).reshape(-1, 3)
        if m.shape[0] < 2 or not np.all(np.isfinite(m)):
            raise DomainError("ensemble needs at least two finite momenta")
        if not self.weight > 0:
            raise DomainError("density weight must be positive")
        m.flags.writeable = False
        object.__setattr__(self, "momenta", m)

    @property
    def n(self) -> int:
        return self.momenta.shape[0]

    def mean(self) -> np.ndarray:
        return self.momenta.mean(axis=0)

    def temperature(self) -> float:
        c = self.momenta - self.mean()
        return float(np.mean(np.sum(c * c, axis=1)) / 3.0)

    def axis_temperatures(self) -> np.ndarray:
        c = self.momenta - self.mean()
        return np.mean(c * c, axis=0)

    def fourth_moment_ratio(self) -> float:
        """<|c|^4> / (15 T^2); equals 1 for a Maxwellian."""
        c = self.momenta - self.mean()
        c2 = np.sum(c * c, axis=1)
        T = c2.mean() / 3.0
        return float(np.mean(c2 * c2) / (15.0 * T * T))

    def total_momentum(self) -> np.ndarray:
        return self.momenta.sum(axis=0)

    def total_energy(self) -> float:
        return 0.5 * float(np.sum(self.momenta * self.momenta))


def bimodal_ensemble(n: int, split: float, beta: float, seed, weight: float = 1.0) -> MomentumEnsemble:
    """Equal mixture of Maxwellians displaced by +-split along x."""
    rng = _rng(seed)
    p = rng.normal(size=(n, 3)) / math.sqrt(beta)
    p[:, 0] += np.where(rng.random(n) < 0.5, split, -split)
    return MomentumEnsemble(p, weight)


def maxwellian_ensemble(n: int, beta: float, seed, weight: float = 1.0) -> MomentumEnsemble:
    return MomentumEnsemble(_rng(seed).normal(size=(n, 3)) / math.sqrt(beta), weight)


@njit(cache=True)
def _collide_candidates(p, ii, jj, u_acc, u_cos, u_phi, g_max):
    """Sequential acceptance-rejection over candidate pairs; returns (status, accepted)."""
    accepted = 0
    for k in range(ii.shape[0]):
        i = ii[k]
        j = jj[k]
        g0 = p[i, 0] - p[j, 0]
        g1 = p[i, 1] - p[j, 1]
        g2 = p[i, 2] - p[j, 2]
        g = np.sqrt(g0 * g0 + g1 * g1 + g2 * g2)
        ratio = g / g_max
        if ratio > 1.0:
            return 1, accepted
        if u_acc[k] >= ratio or g == 0.0:
            continue
        # eta on the admissible hemisphere with density proportional to <eta, g>
        e0 = g0 / g
        e1 = g1 / g
        e2 = g2 / g
        if abs(e0) < 0.9:
            a0, a1, a2 = 1.0, 0.0, 0.0
        else:
            a0, a1, a2 = 0.0, 1.0, 0.0
        b0 = e1 * a2 - e2 * a1
        b1 = e2 * a0 - e0 * a2
        b2 = e0 * a1 - e1 * a0
        nb = np.sqrt(b0 * b0 + b1 * b1 + b2 * b2)
        b0 /= nb
        b1 /= nb
        b2 /= nb
        c0 = e1 * b2 - e2 * b1
        c1 = e2 * b0 - e0 * b2
        c2 = e0 * b1 - e1 * b0
        ct = np.sqrt(u_cos[k])
        st = np.sqrt(1.0 - u_cos[k])
        ph = 2.0 * np.pi * u_phi[k]
        cp = np.cos(ph)
        sp = np.sin(ph)
        n0 = ct * e0 + st * (cp * b0 + sp * c0)
        n1 = ct * e1 + st * (cp * b1 + sp * c1)
        n2 = ct * e2 + st * (cp * b2 + sp * c2)
        dot = n0 * g0 + n1 * g1 + n2 * g2
        p[i, 0] -= dot * n0
        p[i, 1] -= dot * n1
        p[i, 2] -= dot * n2
        p[j, 0] += dot * n0
        p[j, 1] += dot * n1
        p[j, 2] += dot * n2
        accepted += 1
    return 0, accepted


def majorant(momenta: np.ndarray) -> float:
    """Relative-speed bound: twice the largest peculiar speed, sqrt(2) headroom.

    Pair updates conserve the pair energy, so a speed can grow by at most
    sqrt(2) within a step.
    """
    c = momenta - momenta.mean(axis=0)
    return 2.0 * math.sqrt(2.0) * float(np.sqrt(np.max(np.sum(c * c, axis=1))))


def dsmc_step(ens: MomentumEnsemble, dt: float, sigma: float, seed) -> MomentumEnsemble:
    """One no-time-counter DSMC step for the homogeneous hard-sphere equation.

    Candidate pairs are drawn uniformly; each is accepted with probability
    ``|p_i - p_j| / g_max``.  The candidate count makes the per-particle
    collision rate ``weight * pi * sigma^2 * <|p_i - p_j|>``.
    """
    if not (dt > 0 and sigma > 0):
        raise DomainError("dt and sigma must be positive")
    rng = _rng(seed)
    N = ens.n
    p = np.array(ens.momenta)
    g_max = majorant(p)
    if g_max == 0.0:
        return MomentumEnsemble(p, ens.weight, ens.time + dt)
    cross = ens.weight * math.pi * sigma * sigma
    expected = 0.5 * N * cross * g_max * dt
    M = int(expected) + int(rng.random() < expected - int(expected))
    ii = rng.integers(0, N, size=M)
    jj = rng.integers(0, N - 1, size=M)
    jj = jj + (jj >= ii)
    if M:
        g_mean = float(np.mean(np.linalg.norm(p[ii] - p[jj], axis=1)))
        if cross * g_mean * dt >= MAX_COLLISION_PROBABILITY:
            raise DomainError(f"dt too large: per-particle collision probability "
                              f"{cross * g_mean * dt:.3f} >= {MAX_COLLISION_PROBABILITY}")
    u = rng.random((3, M))
    status, _ = _collide_candidates(p, ii, jj, u[0], u[1], u[2], g_max)
    if status != 0:
        raise KernelBoundError("relative speed exceeded the majorant")
    return MomentumEnsemble(p, ens.weight, ens.time + dt)


# ---------------------------------------------------------------------------
# H functional


@dataclass(frozen=True)
class HistogramSpec:
    """Cubic histogram of ``bins`` per axis over center +- width * scale.

    ``center`` and ``scale`` default to the ensemble mean and sqrt(T); both
    are collision invariants, so the grid is fixed along a DSMC run.
    """

    bins: int = 24
    width: float = 4.5
    center: Optional[tuple[float, float, float]] = None
    scale: Optional[float] = None
    ellipsoid: float = 3.0


@dataclass
class HEstimate:
    value: float
    std_error: float
    empty_fraction: float


def h_estimate(ens: MomentumEnsemble, bins: HistogramSpec = HistogramSpec()) -> HEstimate:
    """Histogram plug-in of the integral of f log f with Miller-Madow correction.

    f is normalised to the ensemble density ``weight``.  The std error is the
    delta-method error of the plug-in.
    """
    m = ens.momenta
    center = ens.mean() if bins.center is None else np.asarray(bins.center, float)
    scale = math.sqrt(ens.temperature()) if bins.scale is None else float(bins.scale)
    if not scale > 0:
        raise ResolutionError("degenerate ensemble")
    edges = np.linspace(-bins.width, bins.width, bins.bins + 1) * scale
    counts, _ = np.histogramdd(m - center, bins=[edges] * 3)
    N = ens.n
    h = edges[1] - edges[0]
    mids = 0.5 * (edges[1:] + edges[:-1])
    r2 = mids[:, None, None] ** 2 + mids[None, :, None] ** 2 + mids[None, None, :] ** 2
    inner = r2 <= (bins.ellipsoid * scale) ** 2
    empty = float(np.mean(counts[inner] == 0)) if inner.any() else 1.0
    if empty > MAX_EMPTY_FRACTION:
        raise ResolutionError(f"{empty:.0%} of the bins inside the bulk are empty")
    prob = counts[counts > 0] / N
    logs = np.log(prob)
    plug = float(np.sum(prob * logs))
    k = prob.size
    rho = ens.weight
    value = rho * (plug - (k - 1) / (2.0 * N) - math.log(h ** 3) + math.log(rho))
    var = (np.sum(prob * logs * logs) - plug * plug) / N
    return HEstimate(value, rho * math.sqrt(max(var, 0.0)), empty)


def h_functional(ens: MomentumEnsemble, bins: HistogramSpec = HistogramSpec()) -> float:
    return h_estimate(ens, bins).value


def gaussian_h(rho: float, temperature: float) -> float:
    """Closed-form integral of f log f for rho times a Maxwellian of temperature T."""
    return rho * (math.log(rho) - 1.5 * math.log(2.0 * math.pi * math.e * temperature))


@dataclass
class RelaxationRecord:
    t: float
    rho: float
    mean: tuple[float, float, float]
    temperature: float
    axis_temperatures: tuple[float, float, float]
    fourth_moment_ratio: float
    H: float
    H_error: float


def _record(ens: MomentumEnsemble, bins: HistogramSpec) -> RelaxationRecord:
    H = h_estimate(ens, bins)
    return RelaxationRecord(ens.time, ens.weight, tuple(float(v) for v in ens.mean()), ens.temperature(),
                            tuple(float(v) for v in ens.axis_temperatures()), ens.fourth_moment_ratio(),
                            H.value, H.std_error)


def relax(ens: MomentumEnsemble, dt: float, steps: int, sigma: float, seed: int,
          bins: HistogramSpec = HistogramSpec(), callback: Optional[Callable] = None):
    """Run ``steps`` DSMC steps; returns (final ensemble, records at every step).

    Step k uses the stream SeedSequence(seed, spawn_key=(k,)).
    """
    if bins.center is None or bins.scale is None:
        bins = replace(bins, center=tuple(float(v) for v in ens.mean()),
                       scale=math.sqrt(ens.temperature()))
    records = [_record(ens, bins)]
    for k in range(steps):
        ens = dsmc_step(ens, dt, sigma, np.random.SeedSequence(int(seed), spawn_key=(k,)))
        records.append(_record(ens, bins))
        if callback is not None:
            callback(k, ens)
    return ens, records


def h_monotone(records: Sequence[RelaxationRecord], n_sigma: float = 3.0) -> tuple[bool, float]:
    """Check H is non-increasing within ``n_sigma`` combined std errors.

    Returns (passed, worst increase in units of the envelope).
    """
    worst = -np.inf
    for a, b in zip(records[:-1], records[1:]):
        env = n_sigma * math.hypot(a.H_error, b.H_error)
        worst = max(worst, (b.H - a.H) / env if env > 0 else np.inf * (b.H > a.H))
    return bool(worst <= 1.0), float(worst)


RELAXATION_COLUMNS = ("t", "rho", "px", "py", "pz", "T", "Tx", "Ty", "Tz", "m4_ratio", "H", "H_err")


def relaxation_csv(records: Sequence[RelaxationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RELAXATION_COLUMNS)
    for r in records:
        w.writerow([repr(float(v)) for v in (r.t, r.rho, *r.mean, r.temperature, *r.axis_temperatures,
                                             r.fourth_moment_ratio, r.H, r.H_error)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# scattering cumulants and correlation functionals


class _HatCumulant:
    """Scattering cumulant over ``labels`` acting on a batch function.

    For each partition of the labels, every block is flowed backward by t as
    an isolated subsystem carrying its own allowed-configuration indicator
    (zero if the block is forbidden), then the labels are moved forward
    freely by t and ``inner`` is evaluated.
    """

    def __init__(self, labels: Sequence[int], inner: Callable, sigma: float, t: float,
                 max_collisions: int = MAX_COLLISIONS):
        self.labels = tuple(int(v) for v in labels)
        self.inner = inner
        self.sigma = sigma
        self.t = t
        self.max_collisions = max_collisions

    def __call__(self, q, p):
        L = list(self.labels)
        total = np.zeros(q.shape[0])
        for part in index_partitions(len(L)):
            q2 = q.copy()
            p2 = p.copy()
            ok = np.ones(q.shape[0], dtype=bool)
            for block in part:
                idx = [L[i] for i in block]
                qo, po, st, _ = flow_batch(q[:, idx], p[:, idx], self.sigma, -self.t, self.max_collisions)
                bad = np.nonzero((st == PATHOLOGY) | (st == RUNAWAY))[0]
                if bad.size:
                    raise _BadRows(bad)
                ok &= st == OK
                q2[:, idx] = qo
                p2[:, idx] = po
            q2[:, L] += self.t * p2[:, L]
            total += cumulant_coefficient(len(part)) * np.where(ok, self.inner(q2, p2), 0.0)
        return total


class _Sum:
    def __init__(self, terms):
        self.terms = list(terms)

    def __call__(self, q, p):
        total = np.zeros(q.shape[0])
        for c, f in self.terms:
            total += c * f(q, p)
        return total


def _product_of(g1: Callable, m: int) -> Callable:
    """prod_i g1(x_i) over m points; rejects negative values."""

    def prod(q, p):
        out = np.ones(q.shape[0])
        for i in range(m):
            v = np.asarray(g1(q[:, i:i + 1], p[:, i:i + 1]), dtype=float).reshape(-1)
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise DomainError("one-particle function must be finite and nonnegative")
            out *= v
        return out

    return prod


def displayed_generator(s: int, n: int, inner: Callable, sigma: float, t: float) -> Callable:
    """The generating operator of orders s + n for n in {0, 1} in closed form.

    n = 0: the scattering cumulant over 1..s.  n = 1: the cumulant over
    1..s+1 minus the s-point cumulant after the pair cumulants (j, s+1).
    """
    if n == 0:
        return _HatCumulant(range(s), inner, sigma, t)
    if n != 1:
        raise DomainError("closed form available for n in {0, 1}")
    pairs = _Sum([(1.0, _HatCumulant((j, s), inner, sigma, t)) for j in range(s)])
    return _Sum([(1.0, _HatCumulant(range(s + 1), inner, sigma, t)),
                 (-1.0, _HatCumulant(range(s), pairs, sigma, t))])


def _compositions(n: int):
    """Sequences (n_1, ..., n_k) of positive integers with sum <= n, k >= 0."""
    yield ()
    for first in range(1, n + 1):
        for rest in _compositions(n - first):
            yield (first,) + rest


def generator_from_dissections(s: int, n: int, inner: Callable, sigma: float, t: float) -> Callable:
    """Generating operator of order s + n assembled from the dissection sum.

    Each term is an outer scattering cumulant composed with, for every step
    j, a sum over dissections of the removed block Z_j and distinct anchors
    among the remaining points of products of (1 + |X|)-point cumulants.
    """
    terms = []
    for comp in _compositions(n):
        k = len(comp)
        coef = math.factorial(n) * (-1) ** k / math.factorial(n - sum(comp))
        tops = [s + n]
        for nj in comp:
            tops.append(tops[-1] - nj)
        f = inner
        for j in range(k, 0, -1):
            keep = tops[j]
            Z = tuple(range(keep, tops[j - 1]))
            choices = []
            for D in enumerate_dissections(Z, keep):
                w = 1.0 / math.factorial(len(D.parts))
                for anchors in permutations(range(keep), len(D.parts)):
                    g = f
                    c = w
                    for a, X in zip(anchors, D.parts):
                        g = _HatCumulant((a,) + X, g, sigma, t)
                        c /= math.factorial(len(X))
                    choices.append((c, g))
            f = _Sum(choices)
        terms.append((coef, _HatCumulant(range(tops[-1]), f, sigma, t)))
    return _Sum(terms)


def scattering_cumulant_apply(t: float, s: int, n: int, g1_t: Callable, x: SystemState,
                              max_collisions: int = MAX_COLLISIONS) -> float:
    """Generating operator of order s + n applied to prod g1_t at the state ``x``.

    ``g1_t`` is a one-point evaluator on arrays (B, 1, 3).
    """
    if n not in (0, 1):
        raise DomainError("n must be 0 or 1")
    if x.n != s + n:
        raise DomainError(f"state has {x.n} points, expected {s + n}")
    fn = displayed_generator(s, n, _product_of(g1_t, s + n), x.sigma, t)
    vals, _, _ = robust_evaluate(fn, x.q[None].copy(), x.p[None].copy(), x.sigma, strict=True)
    return float(vals[0])


class OneParticleSolution:
    """G_1(t) for chaos initial data g1_0.

    Calling it gives the free-transport part g1_0(q - p t, p).  ``estimate``
    adds the collision corrections through the reduced-function estimator
    (orders up to ``spec.n_max``) and returns (value, std_error).
    """

    def __init__(self, t: float, g1_0: Callable, sigma: float, spec: Optional[QuadratureSpec] = None):
        self.t = float(t)
        self.g1_0 = g1_0
        self.sigma = float(sigma)
        self.spec = spec
        self._count = 0

    def __call__(self, q, p):
        return self.g1_0(q - self.t * p, p)

    def estimate(self, q: np.ndarray, p: np.ndarray) -> tuple[float, float]:
        if self.spec is None:
            v = float(np.asarray(self(q[None, None], p[None, None])).reshape(1)[0])
            return v, 0.0
        spec = replace(self.spec, seed=self.spec.seed + 7919 * self._count)
        self._count += 1
        init = FunctionSequence({1: self.g1_0}, cap=spec.n_max + 1)
        est = estimate_G(self.t, 1, SystemState(self.sigma, [q], [p]), init, spec, tag="G1")
        return est.value, est.std_error


class _TabulatedProduct:
    """Product of tabulated one-point values at points met during evaluation."""

    def __init__(self, g1, m: int):
        self.g1 = g1
        self.m = m
        self.table: dict[bytes, list] = {}
        self.bump: Optional[bytes] = None

    def _lookup(self, q, p):
        key = np.concatenate([q, p]).tobytes()
        hit = self.table.get(key)
        if hit is None:
            v, e = self.g1.estimate(q.copy(), p.copy())
            if v < 0:
                raise DomainError("one-particle function must be nonnegative")
            hit = [v, e]
            self.table[key] = hit
        return hit[0] + (hit[1] if key == self.bump else 0.0)

    def __call__(self, q, p):
        out = np.ones(q.shape[0])
        for b in range(q.shape[0]):
            for i in range(self.m):
                out[b] *= self._lookup(q[b, i], p[b, i])
        return out


def correlation_functional_G2(t: float, x1: PhasePoint, x2: PhasePoint, g1_t, quad: QuadratureSpec,
                              sigma: float, seed: Optional[int] = None, tag: str = "G2f") -> ReducedEstimate:
    """G_2(t, x1, x2 | G_1(t)) truncated after the first integrated particle.

    The n = 0 term applies the two-point scattering cumulant to G_1 G_1; if
    ``g1_t`` has an ``estimate`` method its values there come from it and
    their errors are propagated exactly (the term is affine in each value).
    The n = 1 term integrates the three-point generating operator applied to
    the product of ``g1_t`` over a third point by Monte Carlo.
    """
    if seed is not None:
        quad = replace(quad, seed=int(seed))
    x = SystemState(sigma, [x1.q, x2.q], [x1.p, x2.p])
    fq, fp = _fixed(x)
    q0, p0 = fq[None].copy(), fp[None].copy()
    if hasattr(g1_t, "estimate"):
        prod = _TabulatedProduct(g1_t, 2)
        op = displayed_generator(2, 0, prod, sigma, t)
        v0 = float(robust_evaluate(op, q0, p0, sigma, strict=True)[0][0])
        var0 = 0.0
        for key in list(prod.table):
            prod.bump = key
            shifted = float(robust_evaluate(op, q0, p0, sigma, strict=True)[0][0])
            var0 += (shifted - v0) ** 2
        prod.bump = None
        e0 = math.sqrt(var0)
    else:
        op = displayed_generator(2, 0, _product_of(g1_t, 2), sigma, t)
        v0, e0 = float(robust_evaluate(op, q0, p0, sigma, strict=True)[0][0]), 0.0

    # the nested term is supported near the free images of the backward-flowed
    # pair, so those points join x1, x2 as proposal anchors
    aq, ap = fq, fp
    if is_allowed(x):
        back = flow(x, -t)
        aq = np.concatenate([fq, back.q + t * back.p])
        ap = np.concatenate([fp, back.p])
    integrand = displayed_generator(2, 1, _product_of(g1_t, 3), sigma, t)
    N = quad.samples(1)
    parts = []
    res = drop = 0
    for chunk in range(-(-N // quad.chunk_size)):
        B = min(quad.chunk_size, N - chunk * quad.chunk_size)
        rng = _stream(quad.seed, tag, 1, chunk)
        qn, pn, w = draw_points(rng, B, 1, aq, ap, quad, t, sigma)
        q = np.concatenate([np.broadcast_to(fq, (B, 2, 3)), qn], axis=1)
        p = np.concatenate([np.broadcast_to(fp, (B, 2, 3)), pn], axis=1)
        vals, r, d = robust_evaluate(integrand, q, p, sigma, strict=False)
        parts.append(vals * w)
        res += r
        drop += d
    c = np.concatenate(parts)
    v1 = float(c.mean())
    e1 = float(c.std(ddof=1) / math.sqrt(c.size))
    est = ReducedEstimate(v0 + v1, math.hypot(e0, e1), [(0, v0, e0), (1, v1, e1)], 1 + c.size,
                          res, drop, [(1.0, 1), effective_sample_size(c)])
    if quad.check_weights:
        _enforce(est, quad, tag)
    return est


# ---------------------------------------------------------------------------
# Boltzmann-Grad scaling probe


@dataclass
class ScalingResult:
    s: int
    n: int
    points: list[tuple[float, float, float]] = field(default_factory=list)
    slope: float = float("nan")
    slope_error: float = float("nan")
    inconclusive: bool = False


def loglog_slope(eps: np.ndarray, mag: np.ndarray, err: np.ndarray) -> tuple[float, float]:
    """Weighted least-squares slope of log(mag) against log(eps) and its std error."""
    x = np.log(eps)
    y = np.log(mag)
    w = (mag / np.maximum(err, 1e-300)) ** 2
    xm = np.sum(w * x) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = float(np.sum(w * (x - xm) * (y - np.sum(w * y) / np.sum(w))) / sxx)
    return slope, float(1.0 / math.sqrt(sxx))


def bg_scaling_probe(t: float, s: int, n: int, epsilons: Sequence[float], init: Callable,
                     spec: QuadratureSpec, x: SystemState, n_sigma: float = 3.0) -> ScalingResult:
    """Magnitude of the order-n term of G_s(t) with diameter eps and fixed f = eps^2 G.

    The one-particle data ``init`` (one-point evaluator, arrays (B, 1, 3)) is
    the rescaled profile and stays fixed while the diameter shrinks; the
    returned magnitudes are |(1/n!) integral of the order-n cumulant| at the
    observed points of ``x`` (its sigma is ignored).  Magnitudes within
    ``n_sigma`` std errors of zero make the slope inconclusive.
    """
    eps = np.asarray(list(epsilons), dtype=float)
    if eps.size < 3 or np.any(np.diff(eps) >= 0) or np.any(eps <= 0):
        raise DomainError("epsilons must be >= 3 positive, strictly decreasing values")
    seq = FunctionSequence({1: init}, cap=s + n)
    out = ScalingResult(s, n)
    for e in eps:
        xs = SystemState(float(e), x.q, x.p)
        fq, fp = _fixed(xs)
        data = _series([n], lambda k: [CorrelationEvaluator(t, seq, float(e), "plain", s + k)],
                       fq, fp, lambda k: k, spec, t, float(e), f"bg-{s}-{n}-{e!r}")
        contrib = data[0][0][0]
        if contrib.size == 1:
            mean, err = float(contrib[0]), 0.0
        else:
            mean = float(contrib.mean())
            err = float(contrib.std(ddof=1) / math.sqrt(contrib.size))
        out.points.append((float(e), abs(mean), err))
    mags = np.array([m for _, m, _ in out.points])
    errs = np.array([r for _, _, r in out.points])
    if np.any(mags <= n_sigma * errs) or np.any(mags == 0):
        out.inconclusive = True
        return out
    if np.all(errs == 0):
        errs = np.full_like(mags, 1e-12) * mags
    out.slope, out.slope_error = loglog_slope(eps, mags, errs)
    return out


SCALING_COLUMNS = ("eps", "s", "n", "magnitude", "std_error")


def scaling_csv(results: Sequence[ScalingResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCALING_COLUMNS)
    for r in results:
        for e, m, err in r.points:
            w.writerow([repr(e), r.s, r.n, repr(m), repr(err)])
    return buf.getvalue()
