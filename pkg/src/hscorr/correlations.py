"""Cumulants of groups of flow operators and the correlation-function expansions.

Every evaluation runs on a batch of configurations ``(B, m, 3)``.  A batch
context caches the backward flow of each label subset and the value of each
initial-data factor on each flowed subset, so partition sums that reuse a
group (as they do heavily) pay for each flow once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dynamics import OK, PATHOLOGY, RUNAWAY, SystemState, allowed_batch, flow_batch, MAX_COLLISIONS
from .errors import DomainError, PathologyError
from .partitions import FunctionSequence, cumulant_coefficient, index_partitions

JITTER = 1e-9
_JITTER_DIRS = np.random.default_rng(20240611).normal(size=(64, 3))
_JITTER_DIRS /= np.linalg.norm(_JITTER_DIRS, axis=1, keepdims=True)

KINDS = ("plain", "cluster", "chaos")


class _BadRows(Exception):
    """Raised inside a batch evaluation when some rows hit a flow pathology."""

    def __init__(self, rows):
        super().__init__(f"{len(rows)} pathological rows")
        self.rows = np.asarray(rows)


@dataclass(frozen=True)
class ClusterLabeling:
    """Ordered elements, each a single label or a fused block of labels."""

    elements: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        els = tuple(tuple(int(v) for v in np.atleast_1d(e)) for e in self.elements)
        flat = [v for e in els for v in e]
        if len(set(flat)) != len(flat) or any(len(e) == 0 for e in els):
            raise DomainError("cluster elements must be nonempty and disjoint")
        object.__setattr__(self, "elements", els)

    def declusterize(self) -> tuple[int, ...]:
        return tuple(sorted(v for e in self.elements for v in e))


class BatchContext:
    """Backward flows by time ``t`` and factor values for one batch."""

    def __init__(self, q: np.ndarray, p: np.ndarray, sigma: float, t: float,
                 max_collisions: int = MAX_COLLISIONS):
        self.q = q
        self.p = p
        self.B = q.shape[0]
        self.sigma = sigma
        self.t = t
        self.max_collisions = max_collisions
        self._groups: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._factors: dict[tuple, np.ndarray] = {}

    def group(self, labels: tuple[int, ...]):
        """Backward-flowed (q, p, allowed-mask) of the subsystem ``labels``."""
        hit = self._groups.get(labels)
        if hit is None:
            idx = list(labels)
            qo, po, status, _ = flow_batch(self.q[:, idx], self.p[:, idx], self.sigma, -self.t,
                                           self.max_collisions)
            bad = np.nonzero((status == PATHOLOGY) | (status == RUNAWAY))[0]
            if bad.size:
                raise _BadRows(bad)
            hit = (qo, po, (status == OK).astype(float))
            self._groups[labels] = hit
        return hit

    def _evaluate(self, f, q, p):
        return np.asarray(f(q, p), dtype=float).reshape(self.B)

    def factor(self, f, labels: tuple[int, ...], groups: Sequence[tuple[int, ...]]):
        """Value of ``f`` on ``labels`` after the group flows ``groups``."""
        home = next((g for g in groups if set(labels) <= set(g)), None)
        key = (f, labels, home if home is not None else tuple(groups))
        hit = self._factors.get(key)
        if hit is not None:
            return hit
        if home is not None:
            qg, pg, _ = self.group(home)
            pos = [home.index(v) for v in labels]
            val = self._evaluate(f, qg[:, pos], pg[:, pos])
        else:
            qa = np.empty((self.B, len(labels), 3))
            pa = np.empty_like(qa)
            for k, v in enumerate(labels):
                g = next(g for g in groups if v in g)
                qg, pg, _ = self.group(g)
                qa[:, k] = qg[:, g.index(v)]
                pa[:, k] = pg[:, g.index(v)]
            val = self._evaluate(f, qa, pa)
        self._factors[key] = val
        return val

    def product(self, groups: Sequence[tuple[int, ...]], factors) -> np.ndarray:
        """prod_k S_{groups_k}(-t) applied to the factor product."""
        out = np.ones(self.B)
        for g in groups:
            out = out * self.group(g)[2]
        for f, labels in factors:
            out = out * self.factor(f, labels, groups)
        return out

    def cumulant(self, clusters: Sequence[tuple[int, ...]], factors,
                 coefficient: Callable[[int], int] = cumulant_coefficient) -> np.ndarray:
        """Cumulant of the groups of operators over the cluster elements."""
        total = np.zeros(self.B)
        for part in index_partitions(len(clusters)):
            groups = [tuple(sorted(v for e in b for v in clusters[e])) for b in part]
            total += coefficient(len(part)) * self.product(groups, factors)
        return total


def robust_evaluate(fn: Callable[[np.ndarray, np.ndarray], np.ndarray], q: np.ndarray,
                    p: np.ndarray, sigma: float, strict: bool = True):
    """Evaluate ``fn`` on a batch, retrying pathological rows once with jitter.

    Returns ``(values, resampled, dropped)``.  Rows still pathological after
    the retry raise :class:`PathologyError` when ``strict``, otherwise they are
    set to zero and counted as dropped.
    """
    try:
        return fn(q, p), 0, 0
    except _BadRows as e:
        rows = e.rows
    q = q.copy()
    m = q.shape[1]
    q[rows] += JITTER * sigma * _JITTER_DIRS[:m]
    try:
        return fn(q, p), len(rows), 0
    except _BadRows as e:
        if strict:
            raise PathologyError("pathological configuration persists after jitter") from None
        keep = np.ones(q.shape[0], dtype=bool)
        keep[e.rows] = False
    while True:
        vals = np.zeros(q.shape[0])
        try:
            vals[keep] = fn(q[keep], p[keep])
            return vals, len(rows), int(np.sum(~keep))
        except _BadRows as e:
            idx = np.nonzero(keep)[0]
            keep[idx[e.rows]] = False


# ---------------------------------------------------------------------------
# expansions on a batch context


def plain_correlation(ctx: BatchContext, g0: FunctionSequence, labels: tuple[int, ...],
                      coefficient=cumulant_coefficient) -> np.ndarray:
    """Sum over partitions P of the labels of A_|P| applied to prod g0."""
    total = np.zeros(ctx.B)
    for part in index_partitions(len(labels)):
        blocks = [tuple(labels[i] for i in b) for b in part]
        if any(g0.is_zero(len(b)) for b in blocks):
            continue
        factors = [(g0.component(len(b)), b) for b in blocks]
        total += ctx.cumulant(blocks, factors, coefficient)
    return total


def cluster_correlation(ctx: BatchContext, g0: FunctionSequence, s: int, n: int,
                        coefficient=cumulant_coefficient) -> np.ndarray:
    """Correlation of the cluster {x_1..x_s} with x_{s+1}..x_{s+n}.

    For each partition R of all labels, the blocks meeting the cluster merge
    into one element; the cumulant acts on that element and the other blocks.
    """
    total = np.zeros(ctx.B)
    for part in index_partitions(s + n):
        if any(g0.is_zero(len(b)) for b in part):
            continue
        head = tuple(sorted(v for b in part if b[0] < s for v in b))
        others = [b for b in part if b[0] >= s]
        factors = [(g0.component(len(b)), b) for b in part]
        total += ctx.cumulant([head] + others, factors, coefficient)
    return total


def chaos_correlation(ctx: BatchContext, g1, s: int, coefficient=cumulant_coefficient) -> np.ndarray:
    singles = [(i,) for i in range(s)]
    ind = allowed_batch(ctx.q, ctx.sigma).astype(float)
    return ind * ctx.cumulant(singles, [(g1, (i,)) for i in range(s)], coefficient)


class CorrelationEvaluator:
    """Batched evaluator of g_s(t), g_{1+n}(t, {Y}, ...) or the chaos form.

    Calling it with ``(q, p)`` of shape (B, m, 3) returns values of shape (B,);
    pathological rows raise an internal signal handled by
    :func:`robust_evaluate`.  Use :meth:`evaluate` for a single state.
    """

    def __init__(self, t: float, initial, sigma: float, kind: str = "plain", s: int = 1,
                 n: int = 0, coefficient=cumulant_coefficient,
                 max_collisions: int = MAX_COLLISIONS):
        if kind not in KINDS:
            raise DomainError(f"unknown kind {kind!r}")
        self.t = float(t)
        self.initial = initial
        self.sigma = float(sigma)
        self.kind = kind
        self.s = int(s)
        self.n = int(n)
        self.coefficient = coefficient
        self.max_collisions = max_collisions
        if kind != "chaos" and self.s + self.n > initial.cap:
            raise DomainError(f"order {self.s + self.n} exceeds the cap {initial.cap}")

    @property
    def size(self) -> int:
        return self.s + self.n

    def __call__(self, q, p):
        ctx = BatchContext(q, p, self.sigma, self.t, self.max_collisions)
        if self.kind == "plain":
            return plain_correlation(ctx, self.initial, tuple(range(self.s)), self.coefficient)
        if self.kind == "cluster":
            return cluster_correlation(ctx, self.initial, self.s, self.n, self.coefficient)
        return chaos_correlation(ctx, self.initial, self.s, self.coefficient)

    def values(self, q, p, strict: bool = False):
        return robust_evaluate(self, q, p, self.sigma, strict)

    def evaluate(self, x: SystemState) -> float:
        if x.n != self.size:
            raise DomainError(f"state has {x.n} points, evaluator needs {self.size}")
        vals, _, _ = robust_evaluate(self, x.q[None].copy(), x.p[None].copy(), x.sigma, strict=True)
        return float(vals[0])


class EvolvedDensity:
    """Batched evolved density D_n(t) = D0_n along the backward flow, 0 if forbidden."""

    def __init__(self, t: float, D0_n, sigma: float, max_collisions: int = MAX_COLLISIONS):
        self.t, self.D0_n, self.sigma, self.max_collisions = float(t), D0_n, float(sigma), max_collisions

    def __call__(self, q, p):
        qo, po, status, _ = flow_batch(q, p, self.sigma, -self.t, self.max_collisions)
        bad = np.nonzero((status == PATHOLOGY) | (status == RUNAWAY))[0]
        if bad.size:
            raise _BadRows(bad)
        ok = status == OK
        return np.where(ok, np.asarray(self.D0_n(qo, po), dtype=float).reshape(q.shape[0]), 0.0)


def evolved_sequence(t: float, D0: FunctionSequence, sigma: float) -> FunctionSequence:
    """The sequence of evolved densities D(t) as a FunctionSequence."""
    comps = {0: D0.zeroth}
    for n in D0.nonzero_orders():
        comps[n] = EvolvedDensity(t, D0.component(n), sigma)
    return FunctionSequence(comps, cap=D0.cap, physical=True)


def correlation_sequence(t: float, g0: FunctionSequence, sigma: float) -> FunctionSequence:
    """The sequence g(t) with plain-expansion evaluators in every component."""
    comps = {n: CorrelationEvaluator(t, g0, sigma, "plain", n) for n in range(1, g0.cap + 1)}
    return FunctionSequence(comps, cap=g0.cap)


# ---------------------------------------------------------------------------
# pointwise API


def _labeling(clusters) -> ClusterLabeling:
    if isinstance(clusters, ClusterLabeling):
        return clusters
    return ClusterLabeling(tuple(clusters))


def _factor_list(f, labels):
    if callable(f):
        return [(f, tuple(labels))]
    return [(ev, tuple(int(v) for v in lab)) for ev, lab in f]


def cumulant_apply(t: float, clusters, f, x: SystemState,
                   coefficient=cumulant_coefficient) -> float:
    """Cumulant of groups of operators over ``clusters`` applied to ``f`` at ``x``.

    ``f`` is either one evaluator over the declusterized labels (sorted) or a
    list of ``(evaluator, labels)`` factors.  Labels index the points of ``x``.
    """
    lab = _labeling(clusters)
    factors = _factor_list(f, lab.declusterize())

    def fn(q, p):
        return BatchContext(q, p, x.sigma, t).cumulant(lab.elements, factors, coefficient)

    vals, _, _ = robust_evaluate(fn, x.q[None].copy(), x.p[None].copy(), x.sigma, strict=True)
    return float(vals[0])


def group_apply(t: float, groups, f, x: SystemState) -> float:
    """Product of flow groups prod_k S_{groups_k}(-t) applied to ``f`` at ``x``."""
    groups = [tuple(sorted(int(v) for v in g)) for g in groups]
    factors = _factor_list(f, sorted(v for g in groups for v in g))

    def fn(q, p):
        return BatchContext(q, p, x.sigma, t).product(groups, factors)

    vals, _, _ = robust_evaluate(fn, x.q[None].copy(), x.p[None].copy(), x.sigma, strict=True)
    return float(vals[0])


def evolve_correlations(t: float, g0: FunctionSequence, s: int, x: SystemState,
                        coefficient=cumulant_coefficient) -> float:
    return CorrelationEvaluator(t, g0, x.sigma, "plain", s, coefficient=coefficient).evaluate(x)


def evolve_cluster_correlations(t: float, g0: FunctionSequence, s: int, n: int,
                                x: SystemState) -> float:
    """g_{1+n}(t, {x_1..x_s}, x_{s+1}..x_{s+n}) at a state of s + n points."""
    return CorrelationEvaluator(t, g0, x.sigma, "cluster", s, n).evaluate(x)


def chaos_correlations(t: float, g1_0, s: int, x: SystemState) -> float:
    return CorrelationEvaluator(t, g1_0, x.sigma, "chaos", s).evaluate(x)


def nonlinear_group_compose_check(t1: float, t2: float, g0: FunctionSequence, s: int,
                                  x: SystemState) -> float:
    """|G(t1 + t2 | g0) - G(t1 | G(t2 | g0))| for component s at ``x``."""
    direct = evolve_correlations(t1 + t2, g0, s, x)
    inner = correlation_sequence(t2, g0, x.sigma)
    composed = evolve_correlations(t1, inner, s, x)
    return abs(direct - composed)


def maxwell_weight(beta: float):
    """Unnormalised Maxwellian exp(-beta p^2 / 2) as a one-point evaluator."""

    def g(q, p):
        return np.exp(-0.5 * beta * np.sum(p[:, 0] ** 2, axis=-1))

    return g


def equilibrium_residual(beta: float, s: int, x: SystemState, t: float) -> float:
    """Deviation of g_s(t) from its initial value for the data (0, e^{-beta p^2/2}, 0, ...)."""
    g1 = maxwell_weight(beta)
    g0 = FunctionSequence({1: g1}, cap=max(s, 1))
    val = evolve_correlations(t, g0, s, x)
    if s == 1:
        return abs(val - float(np.exp(-0.5 * beta * x.p[0] @ x.p[0])))
    return abs(val)
