"""Monte Carlo quadrature over unobserved particles.

Reduced distribution functions F_s(t) and reduced correlation functions
G_s(t) are truncated series in the number n of integrated particles.  Each
order is estimated by importance sampling with a defensive mixture proposal:

* every new point has its momentum drawn from a Maxwellian (``beta_prop``);
* its position is uniform over the declared box with probability
  ``1 - targeted_fraction``;
* otherwise it is placed in the collision capsule of a randomly chosen
  earlier point (observed or already drawn): the set of relative positions
  whose free backward relative motion over [0, t] comes within
  ``capsule_scale * sigma``.  Cumulant integrands are supported near these
  capsules, so this keeps the variance bounded as sigma shrinks;
* with probability ``near_fraction`` it is uniform in a ball around an
  earlier point whose radius covers deflected paths (see ``reach``).

Random streams are keyed by (seed, quantity tag, order, chunk), so results do
not depend on the number of workers.
"""
from __future__ import annotations

import json
import math
import multiprocessing
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import permutations, product as iproduct
from typing import Callable, Optional, Sequence

import numpy as np

from .correlations import CorrelationEvaluator, EvolvedDensity, robust_evaluate
from .dynamics import SystemState
from .errors import ConfigurationError, ImportanceWeightError
from .partitions import FunctionSequence, exp_star, index_partitions

ESS_FLOOR = 0.1
ESS_NOMINAL_CAP = 1000
ESS_ERROR_SHARE = 0.1


@dataclass(frozen=True)
class QuadratureSpec:
    n_max: int = 2
    samples_per_order: int | tuple[int, ...] = 10_000
    beta_prop: float = 1.0
    box: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-8.0,) * 3, (8.0,) * 3)
    seed: int = 0
    workers: int = 1
    targeted_fraction: float = 0.5
    capsule_scale: float = 1.0
    near_fraction: float = 0.2
    near_radius: Optional[float] = None
    p_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    chunk_size: int = 2048
    check_weights: bool = True

    def __post_init__(self):
        counts = self.samples_per_order
        if isinstance(counts, int):
            counts = (counts,)
        if any(int(c) < 1 for c in counts):
            raise ConfigurationError("samples_per_order must be at least 1")
        if self.n_max < 0 or self.workers < 1 or self.chunk_size < 1:
            raise ConfigurationError("n_max >= 0, workers >= 1 and chunk_size >= 1 required")
        if min(self.targeted_fraction, self.near_fraction) < 0 or \
                self.targeted_fraction + self.near_fraction > 1.0:
            raise ConfigurationError("targeted_fraction and near_fraction must be >= 0 with sum <= 1")
        lo, hi = np.asarray(self.box[0], float), np.asarray(self.box[1], float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ConfigurationError("box must be ((xlo, ylo, zlo), (xhi, yhi, zhi)) with hi > lo")

    def reach(self, t: float, sigma: float) -> float:
        """Radius of the near-ball component around earlier points."""
        if self.near_radius is not None:
            return float(self.near_radius)
        return self.capsule_scale * sigma + 2.0 * abs(t) * 2.0 / np.sqrt(self.beta_prop)

    def samples(self, order: int) -> int:
        counts = self.samples_per_order
        if isinstance(counts, int):
            return counts
        return int(counts[min(order, len(counts) - 1)])

    @classmethod
    def around(cls, center, radius: float, sigma: float, margin: float = 5.0, **kw) -> "QuadratureSpec":
        """Spec whose box is the cube containing a ball of ``radius`` plus ``margin * sigma``."""
        c = np.asarray(center, dtype=float)
        h = radius + margin * sigma
        return cls(box=(tuple(c - h), tuple(c + h)), **kw)

    def check_support(self, center, radius: float, sigma: float, margin: float = 5.0):
        c = np.asarray(center, dtype=float)
        lo, hi = np.asarray(self.box[0]), np.asarray(self.box[1])
        if np.any(c - radius - margin * sigma < lo) or np.any(c + radius + margin * sigma > hi):
            raise ConfigurationError("proposal box does not contain the initial support with margin")


@dataclass
class ReducedEstimate:
    value: float
    std_error: float
    per_order: list[tuple[int, float, float]] = field(default_factory=list)
    samples: int = 0
    resampled: int = 0
    dropped: int = 0
    ess: list[tuple[float, int]] = field(default_factory=list)

    def order_values(self) -> np.ndarray:
        return np.array([v for _, v, _ in self.per_order])

    def order_errors(self) -> np.ndarray:
        return np.array([e for _, _, e in self.per_order])


# ---------------------------------------------------------------------------
# sampling


def _basis(d: np.ndarray):
    """Unit direction and two orthonormal complements for each row of ``d``."""
    L = np.linalg.norm(d, axis=1)
    u = np.where(L[:, None] > 0, d / np.where(L > 0, L, 1.0)[:, None], np.array([1.0, 0.0, 0.0]))
    a = np.where(np.abs(u[:, :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    e1 = np.cross(u, a)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(u, e1)
    return L, u, e1, e2


def capsule_volume(length, r):
    return np.pi * r * r * length + 4.0 / 3.0 * np.pi * r ** 3


def sample_capsule(rng: np.random.Generator, d: np.ndarray, r: float) -> np.ndarray:
    """Uniform points in the set of points within ``r`` of the segments [0, d_b]."""
    B = d.shape[0]
    L, u, e1, e2 = _basis(d)
    cyl = np.pi * r * r * L
    pick = rng.random(B)
    s = rng.random(B) * L
    rad = r * np.sqrt(rng.random(B))
    ang = 2 * np.pi * rng.random(B)
    in_cyl = s[:, None] * u + (rad * np.cos(ang))[:, None] * e1 + (rad * np.sin(ang))[:, None] * e2
    v = rng.normal(size=(B, 3))
    v *= (r * np.cbrt(rng.random(B)) / np.linalg.norm(v, axis=1))[:, None]
    ahead = np.sum(v * u, axis=1) > 0
    in_ball = v + np.where(ahead[:, None], d, 0.0)
    use_cyl = pick < cyl / (cyl + 4.0 / 3.0 * np.pi * r ** 3)
    return np.where(use_cyl[:, None], in_cyl, in_ball)


def in_capsule(x: np.ndarray, d: np.ndarray, r: float) -> np.ndarray:
    dd = np.sum(d * d, axis=-1)
    tau = np.clip(np.sum(x * d, axis=-1) / np.where(dd > 0, dd, 1.0), 0.0, 1.0)
    res = x - tau[..., None] * d
    return np.sum(res * res, axis=-1) < r * r


def _ordered_density(q, p, fixed_q, fixed_p, order, spec: QuadratureSpec, t: float, sigma: float):
    """Density of the sequential proposal placing new points in ``order``."""
    B = q.shape[0]
    lo, hi = np.asarray(spec.box[0], float), np.asarray(spec.box[1], float)
    vbox = float(np.prod(hi - lo))
    r = spec.capsule_scale * sigma
    pc = np.asarray(spec.p_center, float)
    norm = (spec.beta_prop / (2 * np.pi)) ** 1.5
    k = fixed_q.shape[0]
    R = spec.reach(t, sigma)
    vnear = 4.0 / 3.0 * np.pi * R ** 3
    dens = np.ones(B)
    for j, idx in enumerate(order):
        qj, pj = q[:, idx], p[:, idx]
        prev = list(order[:j])
        A = k + j
        tau = spec.targeted_fraction if A > 0 else 0.0
        near = spec.near_fraction if A > 0 else 0.0
        c = pj - pc
        dens_p = norm * np.exp(-0.5 * spec.beta_prop * np.sum(c * c, axis=1))
        inside = np.all((qj >= lo) & (qj <= hi), axis=1)
        dens_q = (1.0 - tau - near) * inside / vbox
        if A > 0:
            aq = np.concatenate([np.broadcast_to(fixed_q, (B, k, 3)), q[:, prev]], axis=1)
            ap = np.concatenate([np.broadcast_to(fixed_p, (B, k, 3)), p[:, prev]], axis=1)
            d_all = t * (ap - pj[:, None])
            hit = in_capsule(aq - qj[:, None], d_all, r)
            vol = capsule_volume(np.linalg.norm(d_all, axis=-1), r)
            dens_q = dens_q + tau / A * np.sum(hit / vol, axis=1)
            close = np.sum((aq - qj[:, None]) ** 2, axis=-1) < R * R
            dens_q = dens_q + near / A * np.sum(close, axis=1) / vnear
        dens *= dens_p * dens_q
    return dens


def draw_points(rng: np.random.Generator, B: int, m: int, fixed_q: np.ndarray, fixed_p: np.ndarray,
                spec: QuadratureSpec, t: float, sigma: float):
    """Draw ``B`` samples of ``m`` exchangeable new points.

    Points are placed sequentially (box or capsule of an earlier point).  The
    returned weight is the inverse of the proposal density symmetrised over
    the placement order, which is valid for integrands symmetric in the new
    points and covers chains of interacting points in any order.
    Returns (q, p, weight) with q, p of shape (B, m, 3).
    """
    lo, hi = np.asarray(spec.box[0], float), np.asarray(spec.box[1], float)
    r = spec.capsule_scale * sigma
    pc = np.asarray(spec.p_center, float)
    k = fixed_q.shape[0]
    R = spec.reach(t, sigma)
    q = np.empty((B, m, 3))
    p = np.empty((B, m, 3))
    rows = np.arange(B)
    for j in range(m):
        pj = pc + rng.normal(size=(B, 3)) / np.sqrt(spec.beta_prop)
        qbox = lo + (hi - lo) * rng.random((B, 3))
        A = k + j
        tau = spec.targeted_fraction if A > 0 else 0.0
        near = spec.near_fraction if A > 0 else 0.0
        choose = rng.integers(0, max(A, 1), size=B)
        u = rng.random(B)
        use_t = u < tau
        use_n = (u >= tau) & (u < tau + near)
        ball = rng.normal(size=(B, 3))
        ball *= (R * np.cbrt(rng.random(B)) / np.linalg.norm(ball, axis=1))[:, None]
        if A > 0:
            aq = np.concatenate([np.broadcast_to(fixed_q, (B, k, 3)), q[:, :j]], axis=1)
            ap = np.concatenate([np.broadcast_to(fixed_p, (B, k, 3)), p[:, :j]], axis=1)
            d = t * (ap[rows, choose] - pj)
            qt = aq[rows, choose] - sample_capsule(rng, d, r)
            qj = np.where(use_t[:, None], qt, np.where(use_n[:, None], aq[rows, choose] + ball, qbox))
        else:
            sample_capsule(rng, np.zeros((B, 3)), r)  # keep stream consumption uniform
            qj = qbox
        q[:, j] = qj
        p[:, j] = pj
    orders = list(permutations(range(m)))
    dens = np.zeros(B)
    for order in orders:
        dens += _ordered_density(q, p, fixed_q, fixed_p, order, spec, t, sigma)
    dens /= len(orders)
    return q, p, 1.0 / dens


def _stream(seed: int, tag: str, order: int, chunk: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(tag.encode()), order, chunk))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# chunked, order-by-order estimation


@dataclass
class _OrderJob:
    """Integrand of one order with its sampling setup."""

    integrands: Sequence[Callable]
    fixed_q: np.ndarray
    fixed_p: np.ndarray
    m: int
    spec: QuadratureSpec
    t: float
    sigma: float
    tag: str
    order: int
    scale: float

    def run(self, chunk: int):
        n_total = self.spec.samples(self.order)
        start = chunk * self.spec.chunk_size
        B = min(self.spec.chunk_size, n_total - start)
        rng = _stream(self.spec.seed, self.tag, self.order, chunk)
        qn, pn, w = draw_points(rng, B, self.m, self.fixed_q, self.fixed_p, self.spec, self.t, self.sigma)
        k = self.fixed_q.shape[0]
        q = np.concatenate([np.broadcast_to(self.fixed_q, (B, k, 3)), qn], axis=1)
        p = np.concatenate([np.broadcast_to(self.fixed_p, (B, k, 3)), pn], axis=1)
        outs = []
        resampled = dropped = 0
        for f in self.integrands:
            vals, r, d = robust_evaluate(f, q, p, self.sigma, strict=False)
            outs.append(vals * w * self.scale)
            resampled += r
            dropped += d
        return np.stack(outs), resampled, dropped


_ACTIVE_JOB: Optional[_OrderJob] = None


def _set_job(job):
    global _ACTIVE_JOB
    _ACTIVE_JOB = job


def _run_active(chunk):
    return _ACTIVE_JOB.run(chunk)


def _run_job(job: _OrderJob):
    """Per-sample contributions (n_integrands, N) in chunk order, plus counts."""
    n_chunks = -(-job.spec.samples(job.order) // job.spec.chunk_size)
    if job.spec.workers == 1 or n_chunks == 1:
        results = [job.run(c) for c in range(n_chunks)]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=job.spec.workers, mp_context=ctx,
                                 initializer=_set_job, initargs=(job,)) as pool:
            results = list(pool.map(_run_active, range(n_chunks)))
    contrib = np.concatenate([r[0] for r in results], axis=1)
    return contrib, sum(r[1] for r in results), sum(r[2] for r in results)


def effective_sample_size(c: np.ndarray) -> tuple[float, int]:
    """ESS of |contributions| over the nonzero ones, and the nominal count.

    The nominal count is the number of nonzero contributions capped at
    ``ESS_NOMINAL_CAP``: mixture proposals legitimately combine many
    small-weight targeted samples with fewer heavy box samples.
    """
    nz = c[c != 0.0]
    if nz.size == 0:
        return 0.0, 0
    a = np.abs(nz)
    return float(a.sum() ** 2 / np.sum(a * a)), min(nz.size, ESS_NOMINAL_CAP)


def check_weights(items, budget: float, tag: str):
    """Raise on weight collapse in an order that matters for the reported error.

    ``items`` holds ``(order, ess, nominal, error_share)`` where
    ``error_share`` is that order's contribution to the reported std error.
    Orders contributing less than ``ESS_ERROR_SHARE * budget`` pass: a
    degenerate but negligible order cannot distort the error bar.
    """
    for n, ess, nominal, share in items:
        if share < ESS_ERROR_SHARE * budget or nominal < 20:
            continue
        if ess < ESS_FLOOR * nominal:
            raise ImportanceWeightError(
                f"{tag} order {n}: effective sample size {ess:.1f} below "
                f"{ESS_FLOOR:.0%} of {nominal} samples")


def _enforce(est: "ReducedEstimate", spec: QuadratureSpec, tag: str):
    if spec.check_weights:
        items = [(n, e, nom, err) for (n, _, err), (e, nom) in zip(est.per_order, est.ess)]
        check_weights(items, est.std_error, tag)


def _mean_err(c: np.ndarray) -> tuple[float, float]:
    N = c.size
    mean = float(np.sum(c) / N)
    err = float(np.std(c, ddof=1) / np.sqrt(N)) if N > 1 else 0.0
    return mean, err


def _series(orders, integrand_for, fixed_q, fixed_p, m_for, spec, t, sigma, tag,
            scale_for=lambda n: 1.0 / math.factorial(n)):
    """Per-order contributions for a family of integrands sharing samples.

    Returns a list over orders of (contrib array (n_integrands, N), resampled, dropped).
    """
    out = []
    for n in orders:
        integrands = integrand_for(n)
        m = m_for(n)
        if m == 0:
            q = fixed_q[None].copy()
            p = fixed_p[None].copy()
            vals = []
            res = drop = 0
            for f in integrands:
                v, r, d = robust_evaluate(f, q, p, sigma, strict=True)
                vals.append(v * scale_for(n))
                res += r
                drop += d
            out.append((np.stack(vals), res, drop))
            continue
        job = _OrderJob(integrands, fixed_q, fixed_p, m, spec, t, sigma, tag, n, scale_for(n))
        contrib, res, drop = _run_job(job)
        out.append((contrib, res, drop))
    return out


def _summarise(per_order_data, row: int = 0) -> ReducedEstimate:
    per = []
    ess = []
    total = var = 0.0
    samples = res = drop = 0
    for n, (contrib, r, d) in enumerate(per_order_data):
        mean, err = _mean_err(contrib[row])
        per.append((n, mean, err))
        ess.append(effective_sample_size(contrib[row]) if contrib.shape[1] > 1 else (1.0, 1))
        total += mean
        var += err * err
        samples += contrib.shape[1]
        res += r
        drop += d
    return ReducedEstimate(total, math.sqrt(var), per, samples, res, drop, ess)


def _fixed(x: Optional[SystemState]):
    if x is None:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.ascontiguousarray(x.q, dtype=float), np.ascontiguousarray(x.p, dtype=float)


# ---------------------------------------------------------------------------
# public estimators


def grand_partition_estimate(t: float, D0: FunctionSequence, spec: QuadratureSpec,
                             sigma: float = 1.0, tag: str = "grand", check: bool = True) -> ReducedEstimate:
    """Sum over n <= n_max of (1/n!) times the integral of D_n(t)."""
    fq, fp = _fixed(None)

    def integrands(n):
        if n == 0:
            return [lambda q, p: np.full(q.shape[0], D0.zeroth)]
        if D0.is_zero(n):
            return [lambda q, p: np.zeros(q.shape[0])]
        return [EvolvedDensity(t, D0.component(n), sigma)]

    data = _series(range(spec.n_max + 1), integrands, fq, fp, lambda n: n, spec, t, sigma, tag)
    est = _summarise(data)
    if check:
        _enforce(est, spec, tag)
    return est


def estimate_F(t: float, s: int, x: SystemState, init: FunctionSequence, spec: QuadratureSpec,
               tag: str = "F", check: bool = True) -> ReducedEstimate:
    """F_s(t, x) from the series of cluster correlations g_{1+n}(t, {x}, ...)."""
    if x.n != s:
        raise ConfigurationError(f"state has {x.n} points, expected {s}")
    fq, fp = _fixed(x)

    def integrands(n):
        return [CorrelationEvaluator(t, init, x.sigma, "cluster", s, n)]

    data = _series(range(spec.n_max + 1), integrands, fq, fp, lambda n: n, spec, t, x.sigma, tag)
    est = _summarise(data)
    if check:
        _enforce(est, spec, tag)
    return est


def estimate_G(t: float, s: int, x: SystemState, init: FunctionSequence, spec: QuadratureSpec,
               tag: str = "G", check: bool = True) -> ReducedEstimate:
    """G_s(t, x) from the series of plain correlations g_{s+n}(t, x, ...)."""
    if x.n != s:
        raise ConfigurationError(f"state has {x.n} points, expected {s}")
    fq, fp = _fixed(x)

    def integrands(n):
        return [CorrelationEvaluator(t, init, x.sigma, "plain", s + n)]

    data = _series(range(spec.n_max + 1), integrands, fq, fp, lambda n: n, spec, t, x.sigma, tag)
    est = _summarise(data)
    if check:
        _enforce(est, spec, tag)
    return est


@dataclass
class RatioEstimate:
    value: float
    std_error: float
    numerator: ReducedEstimate
    denominator: ReducedEstimate


def estimate_F_normalized(t: float, s: int, x: SystemState, init: FunctionSequence,
                          spec: QuadratureSpec, tag: str = "Fnorm") -> RatioEstimate:
    """F_s(t, x) as the ratio of two evolved-density series.

    Numerator: sum_n (1/n!) int D_{s+n}(t, x, z); denominator: the grand
    partition series sum_n (1/n!) int D_n(t, z).  Both use the same samples
    at every order; the error follows from the delta method.
    """
    D0 = exp_star(init)
    fq, fp = _fixed(x)
    sigma = x.sigma

    def integrands(n):
        num = EvolvedDensity(t, D0.component(s + n), sigma)
        if n == 0:
            den = lambda q, p: np.ones(q.shape[0])  # noqa: E731
        else:
            den_ev = EvolvedDensity(t, D0.component(n), sigma)
            den = lambda q, p: den_ev(q[:, s:], p[:, s:])  # noqa: E731
        return [num, den]

    data = _series(range(spec.n_max + 1), integrands, fq, fp, lambda n: n, spec, t, sigma, tag)
    A = _summarise(data, 0)
    Bd = _summarise(data, 1)
    ratio = A.value / Bd.value
    var = 0.0
    items = []
    for n, (contrib, _, _) in enumerate(data):
        N = contrib.shape[1]
        if N < 2:
            continue
        cov = np.cov(contrib[0], contrib[1], ddof=1)
        v = max(cov[0, 0] - 2 * ratio * cov[0, 1] + ratio ** 2 * cov[1, 1], 0.0) / N
        var += v
        items.append((n, *effective_sample_size(contrib[0] - ratio * contrib[1]), math.sqrt(v)))
    if spec.check_weights:
        check_weights(items, math.sqrt(var), tag)
    err = math.sqrt(var) / abs(Bd.value)
    return RatioEstimate(ratio, err, A, Bd)


def truncated_product(factors: Sequence[np.ndarray], n_max: int) -> float:
    """Cauchy product of per-order series, keeping total order <= n_max."""
    total = 0.0
    for orders in iproduct(*[range(len(f)) for f in factors]):
        if sum(orders) <= n_max:
            total += float(np.prod([f[n] for f, n in zip(factors, orders)]))
    return total


@dataclass
class FGResult:
    residual: float
    combined_error: float
    F: ReducedEstimate
    G_sum: float
    G_sum_error: float
    blocks: dict

    @property
    def passed(self) -> bool:
        return self.residual <= 3.0 * self.combined_error


def partition_sum_of_blocks(s: int, block_orders: dict, n_max: int) -> float:
    total = 0.0
    for part in index_partitions(s):
        total += truncated_product([block_orders[b] for b in part], n_max)
    return total


def fg_consistency(t: float, s: int, x: SystemState, init: FunctionSequence,
                   spec: QuadratureSpec) -> FGResult:
    """Compare F_s with the partition sum of products of G-blocks.

    Products are truncated at the same total order as F, so both sides carry
    exactly the same truncation and differ only by sampling error.
    """
    if s > 3:
        raise ConfigurationError("fg_consistency supports s <= 3")
    F = estimate_F(t, s, x, init, spec, tag="fg-F", check=False)
    blocks = {}
    for part in index_partitions(s):
        for b in part:
            if b not in blocks:
                blocks[b] = estimate_G(t, len(b), x.subset(b), init, spec, tag=f"fg-G{b}",
                                       check=False)
    vals = {b: e.order_values() for b, e in blocks.items()}
    g_sum = partition_sum_of_blocks(s, vals, spec.n_max)
    var = 0.0
    items = [(f"F{n}", e, nom, err) for (n, _, err), (e, nom) in zip(F.per_order, F.ess)]
    for b, e in blocks.items():
        for (n, _, err), (ess, nom) in zip(e.per_order, e.ess):
            bumped = dict(vals)
            bumped[b] = vals[b].copy()
            bumped[b][n] += 1.0
            grad = partition_sum_of_blocks(s, bumped, spec.n_max) - g_sum
            var += (grad * err) ** 2
            items.append((f"G{b}:{n}", ess, nom, abs(grad) * err))
    g_err = math.sqrt(var)
    combined = math.hypot(F.std_error, g_err)
    if spec.check_weights:
        check_weights(items, combined, "fg_consistency")
    return FGResult(abs(F.value - g_sum), combined, F, g_sum, g_err, blocks)


@dataclass
class Dispersion:
    mean: float
    variance: float
    mean_error: float
    variance_error: float

    def __iter__(self):
        return iter((self.mean, self.variance))


def dispersion_functional(t: float, a1: Callable, init: FunctionSequence, spec: QuadratureSpec,
                          sigma: float, tag: str = "disp") -> Dispersion:
    """Mean and variance of the additive observable sum_i a1(x_i).

    mean = int a1 G_1(t); variance = int a1^2 G_1(t) + int int a1 a1 G_2(t).
    ``a1`` is a one-point evaluator on arrays of shape (B, 1, 3).
    """
    fq, fp = _fixed(None)

    def values(q, p):
        m = q.shape[1]
        return np.stack([np.asarray(a1(q[:, i:i + 1], p[:, i:i + 1])).reshape(-1) for i in range(m)], axis=1)

    # integrands averaged over the exchangeable sampled points
    def one(n):
        g = CorrelationEvaluator(t, init, sigma, "plain", 1 + n)

        def first(q, p):
            return values(q, p).mean(axis=1) * g(q, p)

        def second(q, p):
            return (values(q, p) ** 2).mean(axis=1) * g(q, p)

        return [first, second]

    def two(n):
        g = CorrelationEvaluator(t, init, sigma, "plain", 2 + n)

        def pair(q, p):
            a = values(q, p)
            m = a.shape[1]
            tot = a.sum(axis=1)
            return (tot * tot - np.sum(a * a, axis=1)) / (m * (m - 1)) * g(q, p)

        return [pair]

    orders1 = range(min(spec.n_max, init.cap - 1) + 1)
    d1 = _series(orders1, one, fq, fp, lambda n: 1 + n, spec, t, sigma, tag + "-1")
    orders2 = range(min(spec.n_max, init.cap - 2) + 1)
    d2 = _series(orders2, two, fq, fp, lambda n: 2 + n, spec, t, sigma, tag + "-2")
    mean = _summarise(d1, 0)
    sq = _summarise(d1, 1)
    cross = _summarise(d2, 0)
    var = sq.value + cross.value
    # the mean and the square term share samples; the variance term errors are independent
    return Dispersion(mean.value, var, mean.std_error, math.hypot(sq.std_error, cross.std_error))


def estimate_record(quantity: str, s: int, t: float, x: Optional[SystemState], est,
                    spec: QuadratureSpec, extra: Optional[dict] = None) -> dict:
    """JSON-serialisable record of an estimate."""
    rec = {
        "quantity": quantity,
        "s": s,
        "t": t,
        "x": None if x is None else {"q": x.q.tolist(), "p": x.p.tolist(), "sigma": x.sigma},
        "value": float(est.value),
        "std_error": float(est.std_error),
        "per_order": [list(o) for o in getattr(est, "per_order", [])],
        "seed": spec.seed,
        "n_max": spec.n_max,
        "samples": [spec.samples(n) for n in range(spec.n_max + 1)],
    }
    if extra:
        rec.update(extra)
    return rec


def dump_records(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
