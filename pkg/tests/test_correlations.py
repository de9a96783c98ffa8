import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hscorr.correlations import (CorrelationEvaluator, chaos_correlations, cumulant_apply, equilibrium_residual,
                                 evolve_cluster_correlations, evolve_correlations, nonlinear_group_compose_check)
from hscorr.data import InitialData
from hscorr.dynamics import SystemState, flow, is_allowed
from hscorr.partitions import FunctionSequence, cumulant_coefficient, index_partitions, product_evaluator
from hscorr.suites import cumulants_suite, sample_sequence

G1 = InitialData(rho0=1.0, radius=2.0)


def rand_state(seed, n, sigma=1.0, spread=1.0):
    rng = np.random.default_rng(seed)
    while True:
        x = SystemState(sigma, rng.normal(size=(n, 3)) * spread, rng.normal(size=(n, 3)))
        if is_allowed(x):
            return x


def groups_applied(t, groups, f, x):
    """prod_k S_{G_k}(-t) f at x, each group flowed on its own with its indicator."""
    q = np.empty_like(x.q)
    p = np.empty_like(x.p)
    for g in groups:
        sub = x.subset(g)
        if not is_allowed(sub):
            return 0.0
        back = flow(sub, -t)
        q[list(g)] = back.q
        p[list(g)] = back.p
    return float(f(q[None], p[None])[0])


def cumulant_oracle(t, n, f, x):
    return sum(cumulant_coefficient(len(P)) * groups_applied(t, P, f, x) for P in index_partitions(n))


def g_at(f, q, p):
    return float(f(np.asarray(q)[None, None], np.asarray(p)[None, None])[0])


def test_first_cumulant_is_free_streaming():
    x = SystemState(0.5, [[0.2, -0.1, 0.4]], [[0.7, 0.3, -0.2]])
    t = 1.3
    expect = g_at(G1, x.q[0] - t * x.p[0], x.p[0])
    assert cumulant_apply(t, [(0,)], G1, x) == pytest.approx(expect, rel=1e-14)
    assert evolve_correlations(t, G1.sequence(2), 1, x) == pytest.approx(expect, rel=1e-14)
    assert chaos_correlations(t, G1, 1, x) == pytest.approx(expect, rel=1e-14)


def test_second_cumulant_and_cancellation():
    f = product_evaluator(G1, 2)
    x = SystemState(1.0, [[0, 0, 0], [1.5, 0.2, 0]], [[-0.8, 0, 0], [0.8, 0, 0]])
    t = 1.5
    val = cumulant_apply(t, [(0,), (1,)], f, x)
    expect = groups_applied(t, [(0, 1)], f, x) - groups_applied(t, [(0,), (1,)], f, x)
    assert abs(val) > 1e-5
    assert val == pytest.approx(expect, rel=1e-12)
    apart = SystemState(1.0, [[0, 0, 0], [0, 4, 0]], [[0.8, 0, 0], [0.7, 0.1, 0]])
    assert cumulant_apply(t, [(0,), (1,)], f, apart) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_third_cumulant_matches_oracle(seed):
    f = product_evaluator(G1, 3)
    x = rand_state(seed, 3, spread=0.9)
    t = 1.5
    assert cumulant_apply(t, [(0,), (1,), (2,)], f, x) == pytest.approx(cumulant_oracle(t, 3, f, x), abs=1e-13)
    # A_3 = A_{1+1}({1,2},3) - A_2(2,3)A_1(1) - A_2(1,3)A_1(2)
    fused = groups_applied(t, [(0, 1, 2)], f, x) - groups_applied(t, [(0, 1), (2,)], f, x)
    a23 = groups_applied(t, [(0,), (1, 2)], f, x) - groups_applied(t, [(0,), (1,), (2,)], f, x)
    a13 = groups_applied(t, [(1,), (0, 2)], f, x) - groups_applied(t, [(0,), (1,), (2,)], f, x)
    assert cumulant_apply(t, [(0,), (1,), (2,)], f, x) == pytest.approx(fused - a23 - a13, abs=1e-13)


def test_evolve_correlations_s2_expansion():
    g0 = sample_sequence(3, 21)
    x = rand_state(3, 2, spread=0.8)
    t = 1.2
    g2, g1 = g0.component(2), g0.component(1)
    expect = groups_applied(t, [(0, 1)], g2, x) + cumulant_oracle(t, 2, product_evaluator(g1, 2), x)
    assert evolve_correlations(t, g0, 2, x) == pytest.approx(expect, abs=1e-13)


def test_cluster_correlations_n0_is_partition_sum():
    g0 = sample_sequence(3, 22)
    x = rand_state(4, 3, spread=0.9)
    t = 0.8
    expect = 0.0
    for P in index_partitions(3):
        expect += math.prod(evolve_correlations(t, g0, len(b), x.subset(b)) for b in P)
    assert evolve_cluster_correlations(t, g0, 3, 0, x) == pytest.approx(expect, abs=1e-13)


def test_cluster_with_singleton_is_plain():
    g0 = sample_sequence(3, 23)
    x = rand_state(5, 3, spread=0.9)
    assert evolve_cluster_correlations(0.9, g0, 1, 2, x) == pytest.approx(evolve_correlations(0.9, g0, 3, x),
                                                                          abs=1e-14)


def test_cluster_chaos_form():
    x = rand_state(6, 3, spread=0.9)
    t = 1.1
    val = evolve_cluster_correlations(t, G1.sequence(3), 2, 1, x)
    f = product_evaluator(G1, 3)
    expect = groups_applied(t, [(0, 1, 2)], f, x) - groups_applied(t, [(0, 1), (2,)], f, x)
    assert val == pytest.approx(expect, abs=1e-14)


def test_chaos_pair():
    apart = SystemState(1.0, [[0, 0, 0], [0, 4, 0]], [[0.8, 0, 0], [0.7, 0.1, 0]])
    assert chaos_correlations(1.0, G1, 2, apart) == 0.0
    for seed in range(4):
        x = rand_state(seed + 10, 2, spread=0.8)
        assert chaos_correlations(1.4, G1, 2, x) == pytest.approx(evolve_correlations(1.4, G1.sequence(2), 2, x),
                                                                  abs=1e-14)


def test_chaos_vanishes_on_forbidden():
    x = SystemState(1.0, [[0, 0, 0], [0.5, 0, 0]], [[0.1, 0, 0], [0, 0, 0]])
    assert chaos_correlations(0.7, G1, 2, x) == 0.0


def test_nonlinear_group_trivial_cases():
    g0 = sample_sequence(3, 31)
    x = rand_state(7, 2, spread=1.0)
    assert nonlinear_group_compose_check(0.8, 0.0, g0, 2, x) <= 1e-12
    assert nonlinear_group_compose_check(-0.6, 0.6, g0, 2, x) <= 1e-12


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 31), t1=st.floats(-2, 2), t2=st.floats(-2, 2))
def test_nonlinear_group_property(seed, t1, t2):
    g0 = sample_sequence(3, seed % 1000)
    x = rand_state(seed, 2, spread=1.2)
    assert nonlinear_group_compose_check(t1, t2, g0, 2, x) <= 1e-9


@pytest.mark.parametrize("s", [1, 2, 3])
def test_equilibrium_is_stationary(s):
    for seed in range(3):
        x = rand_state(seed + 40, s, spread=0.9)
        assert equilibrium_residual(1.3, s, x, 1.7) <= 1e-13


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_correlations_are_symmetric(seed):
    g0 = sample_sequence(3, seed % 997)
    x = rand_state(seed, 3, spread=0.9)
    perm = np.random.default_rng(seed).permutation(3)
    y = SystemState(1.0, x.q[perm], x.p[perm])
    for kind, init in (("plain", g0), ("chaos", G1)):
        ev = CorrelationEvaluator(1.0, init, 1.0, kind, 3)
        assert ev.evaluate(x) == pytest.approx(ev.evaluate(y), abs=1e-12)


def test_cumulants_suite_small():
    checks = cumulants_suite(seed=2, points=30, compose_points=10)
    assert all(c.passed for c in checks), checks
