"""Set partitions, dissections and the star-product algebra on function sequences.

A function sequence is a family ``n -> f_n`` where ``f_n`` is a symmetric
evaluator on ``n`` phase points and ``f_0`` is a scalar.  Evaluators are
vectorised: they take positions and momenta of shape ``(B, n, 3)`` and return
an array of shape ``(B,)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import CapacityError, ConfigurationError, DomainError

MAX_ELEMENTS = 12
DEFAULT_CAP = 5

Element = tuple[int, ...]
Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LabelSet:
    """Ordered distinct labels, optionally with a fused prefix ``{Y}``.

    ``fused`` is the length of the prefix treated as one element during
    enumeration; 0 means every label is its own element.
    """

    labels: tuple[int, ...]
    fused: int = 0

    def __post_init__(self):
        labels = tuple(int(v) for v in self.labels)
        object.__setattr__(self, "labels", labels)
        if len(set(labels)) != len(labels):
            raise DomainError(f"labels must be distinct: {labels}")
        if any(v < 0 for v in labels):
            raise DomainError("labels must be non-negative")
        if not 0 <= self.fused <= len(labels):
            raise DomainError("fused prefix longer than the label list")

    @property
    def elements(self) -> tuple[Element, ...]:
        if self.fused > 0:
            head = (self.labels[: self.fused],)
            return head + tuple((v,) for v in self.labels[self.fused:])
        return tuple((v,) for v in self.labels)

    def __len__(self) -> int:
        return len(self.elements)

    def declusterize(self) -> tuple[int, ...]:
        return self.labels


def _as_labelset(ground) -> LabelSet:
    if isinstance(ground, LabelSet):
        return ground
    return LabelSet(tuple(ground))


@dataclass(frozen=True)
class SetPartition:
    """Partition of the elements of a LabelSet into nonempty blocks."""

    blocks: tuple[tuple[Element, ...], ...]

    def __len__(self) -> int:
        return len(self.blocks)

    def labels(self, i: int) -> tuple[int, ...]:
        """Declusterized labels of block ``i``."""
        return tuple(sorted(v for el in self.blocks[i] for v in el))

    @property
    def label_blocks(self) -> tuple[tuple[int, ...], ...]:
        return tuple(self.labels(i) for i in range(len(self.blocks)))


def _restricted_growth_strings(m: int) -> Iterator[tuple[int, ...]]:
    if m == 0:
        yield ()
        return
    a = [0] * m

    def rec(i, top):
        if i == m:
            yield tuple(a)
            return
        for v in range(top + 2):
            a[i] = v
            yield from rec(i + 1, max(top, v))

    yield from rec(1, 0)


@lru_cache(maxsize=None)
def index_partitions(m: int) -> tuple[tuple[tuple[int, ...], ...], ...]:
    """All partitions of ``range(m)`` as tuples of index blocks.

    Canonical order: restricted-growth-string order, blocks sorted by their
    least element.
    """
    if m > MAX_ELEMENTS:
        raise CapacityError(f"{m} elements exceeds the enumeration cap {MAX_ELEMENTS}")
    out = []
    for rgs in _restricted_growth_strings(m):
        blocks: list[list[int]] = [[] for _ in range(max(rgs, default=-1) + 1)]
        for i, b in enumerate(rgs):
            blocks[b].append(i)
        out.append(tuple(tuple(b) for b in blocks))
    return tuple(out)


def enumerate_partitions(ground) -> list[SetPartition]:
    ground = _as_labelset(ground)
    els = ground.elements
    if len(els) < 1:
        raise DomainError("ground set must be nonempty")
    return [
        SetPartition(tuple(tuple(els[i] for i in b) for b in part))
        for part in index_partitions(len(els))
    ]


def enumerate_bipartitions(ground) -> list[SetPartition]:
    ground = _as_labelset(ground)
    els = ground.elements
    if len(els) < 2:
        raise DomainError("bipartitions need at least two elements")
    return [
        SetPartition(tuple(tuple(els[i] for i in b) for b in part))
        for part in index_partitions(len(els))
        if len(part) == 2
    ]


@dataclass(frozen=True)
class Dissection:
    """Split of a linearly ordered ground set into consecutive ordered parts."""

    ground: tuple[int, ...]
    parts: tuple[tuple[int, ...], ...]
    max_parts: int


def enumerate_dissections(ground: Sequence[int] | LabelSet, max_parts: int) -> list[Dissection]:
    """Dissections into at most ``max_parts`` consecutive, order-preserving parts.

    Listed by number of parts, then lexicographically by cut positions.
    """
    labels = ground.labels if isinstance(ground, LabelSet) else tuple(int(v) for v in ground)
    if max_parts < 1:
        raise DomainError("max_parts must be at least 1")
    m = len(labels)
    if m == 0:
        return [Dissection((), (), max_parts)]
    out = []
    for k in range(1, min(max_parts, m) + 1):
        for cuts in combinations(range(1, m), k - 1):
            edges = (0,) + cuts + (m,)
            parts = tuple(labels[edges[i]: edges[i + 1]] for i in range(k))
            out.append(Dissection(labels, parts, max_parts))
    return out


def cumulant_coefficient(block_count: int) -> int:
    """Moebius coefficient (-1)^(k-1) (k-1)! of the partition lattice."""
    k = int(block_count)
    if k < 1:
        raise DomainError("block count must be positive")
    return (-1) ** (k - 1) * math.factorial(k - 1)


# ---------------------------------------------------------------------------
# function sequences


def as_batch(q, p) -> tuple[np.ndarray, np.ndarray]:
    """Coerce positions/momenta to float arrays of shape (B, n, 3)."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if q.ndim == 2:
        q = q[None]
        p = p[None]
    if q.shape != p.shape or q.ndim != 3 or q.shape[-1] != 3:
        raise DomainError(f"bad phase-point shapes {q.shape}, {p.shape}")
    return q, p


class FunctionSequence:
    """Truncated sequence of symmetric evaluators with a scalar zeroth component.

    Missing components (n >= 1) are known to vanish identically and are
    skipped by every partition sum.
    """

    def __init__(self, components: Mapping[int, Evaluator | float] | None = None,
                 cap: int = DEFAULT_CAP, physical: bool = False):
        components = dict(components or {})
        if cap < 0:
            raise ConfigurationError("cap must be non-negative")
        for n in components:
            if not 0 <= n <= cap:
                raise CapacityError(f"component {n} beyond cap {cap}")
        self.cap = int(cap)
        self.physical = physical
        self.zeroth = float(components.pop(0, 0.0))
        self._components = {n: f for n, f in components.items() if f is not None}

    def _check(self, n: int):
        if n > self.cap:
            raise CapacityError(f"component {n} requested beyond cap {self.cap}")
        if n < 0:
            raise DomainError("negative component index")

    def component(self, n: int):
        """Evaluator of component ``n`` (scalar for n = 0, None if zero)."""
        self._check(n)
        if n == 0:
            return self.zeroth
        return self._components.get(n)

    def is_zero(self, n: int) -> bool:
        self._check(n)
        if n == 0:
            return self.zeroth == 0.0
        return n not in self._components

    def __call__(self, n: int, q, p) -> np.ndarray:
        q, p = as_batch(q, p)
        self._check(n)
        if q.shape[1] != n:
            raise DomainError(f"component {n} called with {q.shape[1]} points")
        if n == 0:
            return np.full(q.shape[0], self.zeroth)
        f = self._components.get(n)
        if f is None:
            return np.zeros(q.shape[0])
        return np.asarray(f(q, p), dtype=float).reshape(q.shape[0])

    def at(self, n: int, q, p) -> float:
        """Pointwise value at a single configuration of shape (n, 3)."""
        q = np.asarray(q, dtype=float).reshape(n, 3)
        p = np.asarray(p, dtype=float).reshape(n, 3)
        return float(self(n, q[None], p[None])[0])

    def truncate(self, cap: int) -> "FunctionSequence":
        comps = {n: f for n, f in self._components.items() if n <= cap}
        comps[0] = self.zeroth
        return FunctionSequence(comps, cap=cap, physical=self.physical)

    def nonzero_orders(self) -> list[int]:
        return sorted(self._components)


def symmetry_defect(f: FunctionSequence, n: int, q, p, rng: np.random.Generator,
                    permutations: int = 4) -> float:
    """Largest change of component ``n`` under random argument permutations."""
    q, p = as_batch(q, p)
    base = f(n, q, p)
    worst = 0.0
    for _ in range(permutations):
        perm = rng.permutation(n)
        worst = max(worst, float(np.max(np.abs(f(n, q[:, perm], p[:, perm]) - base), initial=0.0)))
    return worst


class _Star:
    def __init__(self, f: FunctionSequence, g: FunctionSequence):
        self.f, self.g = f, g

    def __call__(self, q, p):
        B, s = q.shape[:2]
        total = np.zeros(B)
        for mask in range(1 << s):
            z = [i for i in range(s) if mask >> i & 1]
            c = [i for i in range(s) if not mask >> i & 1]
            if self.f.is_zero(len(z)) or self.g.is_zero(len(c)):
                continue
            total += self.f(len(z), q[:, z], p[:, z]) * self.g(len(c), q[:, c], p[:, c])
        return total


def star_product(f: FunctionSequence, g: FunctionSequence) -> FunctionSequence:
    """(f * g)_s(X) = sum over subsets Z of X of f(Z) g(X minus Z)."""
    if f.cap != g.cap:
        raise ConfigurationError(f"mismatched caps {f.cap} and {g.cap}")
    comps: dict[int, Evaluator | float] = {0: f.zeroth * g.zeroth}
    for s in range(1, f.cap + 1):
        if any(not f.is_zero(k) and not g.is_zero(s - k) for k in range(s + 1)):
            comps[s] = _Star(f, g)
    return FunctionSequence(comps, cap=f.cap, physical=f.physical and g.physical)


class _PartitionSum:
    """Sum over partitions of the argument of (weighted) block products.

    With ``fused = k > 1`` the first ``k`` arguments form one element.
    """

    def __init__(self, h: FunctionSequence, coefficient: Callable[[int], int] | None = None,
                 fused: int = 0):
        self.h = h
        self.coefficient = coefficient
        self.fused = fused

    def with_fused(self, k: int) -> "_PartitionSum":
        return _PartitionSum(self.h, self.coefficient, k)

    def __call__(self, q, p):
        B, m = q.shape[:2]
        if self.fused > 1:
            elements = [tuple(range(self.fused))] + [(i,) for i in range(self.fused, m)]
        else:
            elements = [(i,) for i in range(m)]
        cache: dict[tuple[int, ...], np.ndarray] = {}
        total = np.zeros(B)
        for part in index_partitions(len(elements)):
            blocks = [tuple(sorted(v for e in b for v in elements[e])) for b in part]
            if any(self.h.is_zero(len(b)) for b in blocks):
                continue
            term = np.ones(B)
            for b in blocks:
                if b not in cache:
                    cache[b] = self.h(len(b), q[:, b], p[:, b])
                term = term * cache[b]
            if self.coefficient is not None:
                term = self.coefficient(len(blocks)) * term
            total += term
        return total


def exp_star(h: FunctionSequence) -> FunctionSequence:
    """Star exponential: component s is the sum over partitions of block products."""
    if h.zeroth != 0.0:
        raise DomainError("exp_star needs a vanishing zeroth component")
    comps: dict[int, Evaluator | float] = {0: 1.0}
    for s in range(1, h.cap + 1):
        comps[s] = _PartitionSum(h)
    return FunctionSequence(comps, cap=h.cap, physical=h.physical)


def ln_star(u: FunctionSequence, coefficient: Callable[[int], int] = cumulant_coefficient) -> FunctionSequence:
    """Star logarithm, the inverse of :func:`exp_star`."""
    if abs(u.zeroth - 1.0) > 1e-12:
        raise DomainError("ln_star needs a unit zeroth component")
    comps: dict[int, Evaluator | float] = {0: 0.0}
    for s in range(1, u.cap + 1):
        comps[s] = _PartitionSum(u, coefficient)
    return FunctionSequence(comps, cap=u.cap)


class _Shifted:
    def __init__(self, f, qy: np.ndarray, py: np.ndarray):
        self.f, self.qy, self.py = f, qy, py

    def __call__(self, q, p):
        B = q.shape[0]
        k = self.qy.shape[0]
        qf = np.concatenate([np.broadcast_to(self.qy, (B, k, 3)), q], axis=1)
        pf = np.concatenate([np.broadcast_to(self.py, (B, k, 3)), p], axis=1)
        return self.f(qf, pf)


def _points(Y) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(Y, tuple) and len(Y) == 2:
        qy, py = Y
    else:
        qy, py = Y.q, Y.p
    qy = np.asarray(qy, dtype=float).reshape(-1, 3)
    py = np.asarray(py, dtype=float).reshape(-1, 3)
    return qy, py


def shift_map(Y, f: FunctionSequence, fused: bool = False) -> FunctionSequence:
    """Prepend the phase points ``Y`` to every component of ``f``.

    ``Y`` is a ``(q, p)`` pair of arrays of shape (k, 3) or an object with
    ``q`` and ``p`` attributes.  With ``fused=True`` the points of ``Y`` count
    as one element ``{Y}`` inside partition-sum components (the cluster shift).
    """
    qy, py = _points(Y)
    k = qy.shape[0]
    cap = f.cap - k
    if cap < 0:
        raise CapacityError(f"|Y| = {k} exceeds the cap {f.cap}")
    if k == 0:
        return f
    comps: dict[int, Evaluator | float] = {}
    for n in range(0, cap + 1):
        inner = f.component(k + n)
        if inner is None:
            continue
        if fused and isinstance(inner, _PartitionSum):
            inner = inner.with_fused(k)
        if n == 0:
            comps[0] = float(np.asarray(inner(qy[None], py[None])).reshape(1)[0])
        else:
            comps[n] = _Shifted(inner, qy, py)
    return FunctionSequence(comps, cap=cap, physical=f.physical)


def cluster_shift_map(Y, f: FunctionSequence) -> FunctionSequence:
    """The cluster shift: ``Y`` is prepended as the single fused element ``{Y}``."""
    return shift_map(Y, f, fused=True)


def product_evaluator(g1: Evaluator, n: int) -> Evaluator:
    """Evaluator of the n-fold product of a one-point evaluator."""

    def prod(q, p):
        out = np.ones(q.shape[0])
        for i in range(n):
            out = out * g1(q[:, i:i + 1], p[:, i:i + 1])
        return out

    return prod
