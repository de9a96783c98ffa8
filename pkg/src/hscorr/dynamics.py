"""Exact event-driven flow of n hard spheres in free space.

Conventions: unit mass, diameter ``sigma``.  At a contact between spheres
``i`` and ``j`` the unit vector ``eta`` points from ``j`` to ``i``, so the
pair approaches iff ``<eta, p_i - p_j> < 0``.  The collision law is
invariant under ``eta -> -eta``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numba import njit

from .errors import DomainError, PathologyError, RunawayError

OK, PATHOLOGY, RUNAWAY, FORBIDDEN = 0, 1, 2, 3

ALLOWED_RTOL = 1e-12
GRAZING_TOL = 1e-12
TIE_RTOL = 1e-12
MAX_COLLISIONS = 1_000_000


@dataclass(frozen=True)
class PhasePoint:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(3))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(3))
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.p))):
            raise DomainError("phase point must be finite")


@dataclass(frozen=True)
class SystemState:
    """Positions and momenta of ``n`` labelled spheres of diameter ``sigma``."""

    sigma: float
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1, 3)
        p = np.array(self.p, dtype=float).reshape(-1, 3)
        if q.shape != p.shape:
            raise DomainError("q and p must have the same number of points")
        if not self.sigma > 0:
            raise DomainError("sigma must be positive")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise DomainError("state must be finite")
        q.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "sigma", float(self.sigma))

    @classmethod
    def from_points(cls, sigma: float, points) -> "SystemState":
        points = list(points)
        return cls(sigma, [pt.q for pt in points], [pt.p for pt in points])

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def points(self) -> list[PhasePoint]:
        return [PhasePoint(self.q[i], self.p[i]) for i in range(self.n)]

    def energy(self) -> float:
        return 0.5 * float(np.sum(self.p * self.p))

    def momentum(self) -> np.ndarray:
        return self.p.sum(axis=0)

    def subset(self, labels) -> "SystemState":
        labels = list(labels)
        return SystemState(self.sigma, self.q[labels], self.p[labels])


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    pair: tuple[int, int]
    eta: np.ndarray


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _allowed(q, sigma):
    lim = (sigma * (1.0 - ALLOWED_RTOL)) ** 2
    n = q.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            d0 = q[i, 0] - q[j, 0]
            d1 = q[i, 1] - q[j, 1]
            d2 = q[i, 2] - q[j, 2]
            if d0 * d0 + d1 * d1 + d2 * d2 < lim:
                return False
    return True


@njit(cache=True)
def _next_contact(q, p, sigma, horizon, tie):
    """Earliest approaching contact within ``horizon``: (status, i, j, time)."""
    n = q.shape[0]
    best = np.inf
    second = np.inf
    bi = -1
    bj = -1
    s2 = sigma * sigma
    for i in range(n):
        for j in range(i + 1, n):
            dq0 = q[i, 0] - q[j, 0]
            dq1 = q[i, 1] - q[j, 1]
            dq2 = q[i, 2] - q[j, 2]
            dp0 = p[i, 0] - p[j, 0]
            dp1 = p[i, 1] - p[j, 1]
            dp2 = p[i, 2] - p[j, 2]
            b = dq0 * dp0 + dq1 * dp1 + dq2 * dp2
            if b >= 0.0:
                continue
            v2 = dp0 * dp0 + dp1 * dp1 + dp2 * dp2
            c = dq0 * dq0 + dq1 * dq1 + dq2 * dq2 - s2
            disc = b * b - v2 * c
            if disc <= 0.0:
                continue
            sq = np.sqrt(disc)
            # |<eta, dp>| at contact equals sq / sigma
            if sq < GRAZING_TOL * sigma:
                continue
            tc = c / (-b + sq)
            if tc < 0.0:
                tc = 0.0
            if tc > horizon:
                continue
            if tc < best:
                second = best
                best = tc
                bi = i
                bj = j
            elif tc < second:
                second = tc
    if bi >= 0 and second - best <= tie:
        return PATHOLOGY, bi, bj, best
    return OK, bi, bj, best


@njit(cache=True)
def _collide_pair(q, p, i, j):
    d0 = q[i, 0] - q[j, 0]
    d1 = q[i, 1] - q[j, 1]
    d2 = q[i, 2] - q[j, 2]
    nrm = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    e0 = d0 / nrm
    e1 = d1 / nrm
    e2 = d2 / nrm
    dot = e0 * (p[i, 0] - p[j, 0]) + e1 * (p[i, 1] - p[j, 1]) + e2 * (p[i, 2] - p[j, 2])
    p[i, 0] -= dot * e0
    p[i, 1] -= dot * e1
    p[i, 2] -= dot * e2
    p[j, 0] += dot * e0
    p[j, 1] += dot * e1
    p[j, 2] += dot * e2


@njit(cache=True)
def _flow_inplace(q, p, sigma, t, max_collisions):
    if t == 0.0:
        return OK, 0
    reverse = t < 0.0
    if reverse:
        p *= -1.0
    horizon = abs(t)
    tie = TIE_RTOL * horizon
    remaining = horizon
    ncoll = 0
    status = OK
    while True:
        st, i, j, tc = _next_contact(q, p, sigma, remaining, tie)
        if st != OK:
            status = st
            break
        if i < 0:
            q += p * remaining
            break
        q += p * tc
        remaining -= tc
        _collide_pair(q, p, i, j)
        ncoll += 1
        if ncoll > max_collisions:
            status = RUNAWAY
            break
    if reverse:
        p *= -1.0
    return status, ncoll


@njit(cache=True)
def _flow_batch(q, p, sigma, t, max_collisions):
    B = q.shape[0]
    qo = q.copy()
    po = p.copy()
    status = np.zeros(B, dtype=np.int64)
    ncoll = np.zeros(B, dtype=np.int64)
    for b in range(B):
        if not _allowed(qo[b], sigma):
            status[b] = FORBIDDEN
            continue
        st, nc = _flow_inplace(qo[b], po[b], sigma, t, max_collisions)
        status[b] = st
        ncoll[b] = nc
    return qo, po, status, ncoll


def flow_batch(q: np.ndarray, p: np.ndarray, sigma: float, t: float,
               max_collisions: int = MAX_COLLISIONS):
    """Flow a batch of configurations (B, n, 3) by signed time ``t``.

    Returns ``(q_t, p_t, status, collisions)``; forbidden inputs are returned
    unchanged with status ``FORBIDDEN``.
    """
    q = np.ascontiguousarray(q, dtype=float)
    p = np.ascontiguousarray(p, dtype=float)
    return _flow_batch(q, p, float(sigma), float(t), int(max_collisions))


@njit(cache=True)
def _allowed_batch(q, sigma):
    out = np.empty(q.shape[0], dtype=np.bool_)
    for b in range(q.shape[0]):
        out[b] = _allowed(q[b], sigma)
    return out


def allowed_batch(q: np.ndarray, sigma: float) -> np.ndarray:
    return _allowed_batch(np.ascontiguousarray(q, dtype=float), float(sigma))


# ---------------------------------------------------------------------------
# pointwise API


def is_allowed(state: SystemState) -> bool:
    return bool(_allowed(np.ascontiguousarray(state.q), state.sigma))


def collide(p_i, p_j, eta) -> tuple[np.ndarray, np.ndarray]:
    """Elastic hard-sphere collision law."""
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if abs(np.linalg.norm(eta) - 1.0) > 1e-12:
        raise DomainError("eta must be a unit vector")
    dot = float(eta @ (p_i - p_j))
    return p_i - dot * eta, p_j + dot * eta


def next_event(state: SystemState, horizon: float) -> Optional[CollisionEvent]:
    """First contact within ``horizon`` under free streaming, or None."""
    if not is_allowed(state):
        raise DomainError("next_event needs an allowed state")
    q = np.ascontiguousarray(state.q, dtype=float)
    p = np.ascontiguousarray(state.p, dtype=float)
    st, i, j, tc = _next_contact(q, p, state.sigma, float(horizon), TIE_RTOL * float(horizon))
    if st == PATHOLOGY:
        raise PathologyError(f"simultaneous contacts near t = {tc}")
    if i < 0:
        return None
    d = (q[i] + p[i] * tc) - (q[j] + p[j] * tc)
    return CollisionEvent(float(tc), (int(i), int(j)), d / np.linalg.norm(d))


def flow(state: SystemState, t: float, max_collisions: int = MAX_COLLISIONS) -> SystemState:
    """Exact flow by signed time ``t`` (negative times by momentum reversal)."""
    qo, po, status, _ = flow_batch(state.q[None], state.p[None], state.sigma, t, max_collisions)
    _raise_status(int(status[0]))
    return SystemState(state.sigma, qo[0], po[0])


def _raise_status(status: int):
    if status == PATHOLOGY:
        raise PathologyError("flow reached a pathological configuration")
    if status == RUNAWAY:
        raise RunawayError("collision count exceeded its cap")
    if status == FORBIDDEN:
        raise DomainError("flow needs an allowed state")


def evolved_density(D0_n: Callable, t: float, x: SystemState) -> float:
    """Pullback of an n-point density along the backward trajectory; 0 if forbidden."""
    if not is_allowed(x):
        return 0.0
    back = flow(x, -t)
    return float(np.asarray(D0_n(back.q[None], back.p[None])).reshape(1)[0])


def scattering_apply(t: float, n: int, f: Callable, x: SystemState) -> float:
    """Scattering operator: backward n-body flow, indicator, forward free flows."""
    if x.n != n:
        raise DomainError(f"state has {x.n} points, expected {n}")
    if not is_allowed(x):
        return 0.0
    back = flow(x, -t)
    q = back.q + back.p * t
    return float(np.asarray(f(q[None], back.p[None])).reshape(1)[0])
