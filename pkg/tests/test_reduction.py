import math

import numpy as np
import pytest

from hscorr.data import InitialData
from hscorr.dynamics import SystemState
from hscorr.errors import ConfigurationError
from hscorr.partitions import FunctionSequence, exp_star
from hscorr.reduction import (QuadratureSpec, dispersion_functional, dump_records, estimate_F,
                              estimate_F_normalized, estimate_G, estimate_record, fg_consistency,
                              grand_partition_estimate)

DILUTE = InitialData(rho0=0.05, radius=2.0)
TINY = 1e-4


def spec(**kw):
    base = dict(n_max=2, samples_per_order=4000, seed=5)
    base.update(kw)
    return QuadratureSpec.around((0.0, 0.0, 0.0), DILUTE.radius, 0.1, **base)


def within(a, b, err, k=3.0):
    return abs(a - b) <= k * err


def test_quadrature_spec_validation():
    with pytest.raises(ConfigurationError):
        QuadratureSpec(samples_per_order=0)
    with pytest.raises(ConfigurationError):
        QuadratureSpec(box=((0, 0, 0), (0, 1, 1)))
    with pytest.raises(ConfigurationError):
        QuadratureSpec(targeted_fraction=0.9, near_fraction=0.2)
    assert QuadratureSpec(samples_per_order=(10, 20)).samples(5) == 20


def test_grand_partition_of_empty_system_is_one():
    est = grand_partition_estimate(0.4, FunctionSequence({0: 1.0}, cap=3), spec())
    assert est.value == 1.0 and est.std_error == 0.0


def test_grand_partition_of_dilute_gas():
    D0 = exp_star(DILUTE.sequence(3))
    lam = DILUTE.total
    est = grand_partition_estimate(0.0, D0, spec(), sigma=TINY)
    assert within(est.value, sum(lam ** n / math.factorial(n) for n in range(3)), est.std_error)
    # plain box proposal holding most of the transported support
    wide = dict(n_max=2, samples_per_order=8000, targeted_fraction=0.0, near_fraction=0.0)
    later = grand_partition_estimate(0.5, D0, QuadratureSpec.around((0, 0, 0), 3.0, 0.1, seed=6, **wide), 0.1)
    now = grand_partition_estimate(0.0, D0, QuadratureSpec.around((0, 0, 0), 3.0, 0.1, seed=7, **wide), 0.1)
    assert within(later.value, now.value, math.hypot(later.std_error, now.std_error))


def test_F1_free_transport_limit():
    x = SystemState(TINY, [[0.3, -0.2, 0.1]], [[0.6, 0.1, -0.3]])
    t = 0.4
    est = estimate_F(t, 1, x, DILUTE.sequence(3), spec())
    expect = float(DILUTE((x.q - t * x.p)[None], x.p[None])[0])
    assert within(est.value, expect, max(est.std_error, 1e-12 * expect))


def test_G1_equals_F1():
    x = SystemState(0.1, [[0.1, 0.0, 0.2]], [[0.4, -0.3, 0.0]])
    F = estimate_F(0.3, 1, x, DILUTE.sequence(3), spec(seed=9))
    G = estimate_G(0.3, 1, x, DILUTE.sequence(3), spec(seed=10))
    assert within(F.value, G.value, math.hypot(F.std_error, G.std_error))
    # the order-0 terms are deterministic and identical
    assert F.per_order[0][1] == pytest.approx(G.per_order[0][1], rel=1e-14)


def test_G2_vanishes_without_interaction():
    x = SystemState(TINY, [[0.0, 0, 0], [0.8, 0.3, 0]], [[0.5, 0, 0], [-0.2, 0.1, 0]])
    est = estimate_G(0.3, 2, x, DILUTE.sequence(4), spec(n_max=1))
    assert abs(est.value) <= 3 * est.std_error + 1e-14


def test_G2_nonzero_after_interaction_and_fg_relation():
    # pair whose backward trajectories meet within t
    x = SystemState(0.1, [[0.0, 0, 0], [0.15, 0.05, 0]], [[0.5, 0, 0], [-0.4, 0.1, 0]])
    init = DILUTE.sequence(5)
    G = estimate_G(0.3, 2, x, init, spec(n_max=1, seed=12))
    assert abs(G.value) > 5 * G.std_error
    res = fg_consistency(0.3, 2, x, init, spec(n_max=1, seed=13))
    assert res.passed, (res.residual, res.combined_error)


def test_fg_s1_is_identity():
    x = SystemState(0.1, [[0.1, 0.2, 0.0]], [[0.4, 0.0, -0.2]])
    res = fg_consistency(0.3, 1, x, DILUTE.sequence(4), spec(n_max=1))
    assert res.passed, (res.residual, res.combined_error)
    assert res.residual <= 1e-5 * res.F.value


def test_fg_s3_first_order():
    x = SystemState(0.1, [[0.0, 0, 0], [0.15, 0.05, 0], [-0.1, 0.12, 0.02]],
                    [[0.5, 0, 0], [-0.4, 0.1, 0], [0.1, -0.5, 0]])
    res = fg_consistency(0.3, 3, x, DILUTE.sequence(5), spec(n_max=1, samples_per_order=3000))
    assert res.passed, (res.residual, res.combined_error)


def test_F_definitions_agree():
    x = SystemState(0.1, [[0.1, -0.1, 0.0]], [[0.3, 0.2, 0.0]])
    a = estimate_F(0.3, 1, x, DILUTE.sequence(4), spec(seed=21))
    b = estimate_F_normalized(0.3, 1, x, DILUTE.sequence(4), spec(seed=22))
    assert within(a.value, b.value, math.hypot(a.std_error, b.std_error))


def test_F_permutation_symmetry():
    q = [[0.0, 0, 0], [0.15, 0.05, 0]]
    p = [[0.5, 0, 0], [-0.4, 0.1, 0]]
    a = estimate_F(0.3, 2, SystemState(0.1, q, p), DILUTE.sequence(4), spec(n_max=1, seed=31))
    b = estimate_F(0.3, 2, SystemState(0.1, q[::-1], p[::-1]), DILUTE.sequence(4), spec(n_max=1, seed=32))
    assert within(a.value, b.value, math.hypot(a.std_error, b.std_error))


def test_per_order_terms_decay():
    x = SystemState(0.1, [[0.1, 0.0, 0.0]], [[0.3, 0.0, 0.0]])
    est = estimate_F(0.3, 1, x, DILUTE.sequence(5), spec(n_max=2, samples_per_order=6000))
    mags = np.abs(est.order_values())
    assert mags[0] > mags[1] > mags[2] or mags[2] <= 3 * est.order_errors()[2]


def test_deterministic_and_worker_independent():
    x = SystemState(0.1, [[0.1, 0.0, 0.0]], [[0.3, 0.0, 0.0]])
    a = estimate_F(0.3, 1, x, DILUTE.sequence(4), spec(samples_per_order=3000, chunk_size=512))
    b = estimate_F(0.3, 1, x, DILUTE.sequence(4), spec(samples_per_order=3000, chunk_size=512))
    c = estimate_F(0.3, 1, x, DILUTE.sequence(4), spec(samples_per_order=3000, chunk_size=512, workers=2))
    assert a.value == b.value == c.value
    assert a.std_error == b.std_error == c.std_error


def test_dispersion_of_zero_observable():
    d = dispersion_functional(0.3, lambda q, p: np.zeros(q.shape[0]), DILUTE.sequence(3), spec(n_max=1), 0.1)
    assert (d.mean, d.variance) == (0.0, 0.0)


def test_dispersion_matches_ensemble_oracle():
    # dilute uncorrelated gas: Poisson number of particles with Maxwellian momenta
    energy = lambda q, p: 0.5 * np.sum(p[:, 0] ** 2, axis=-1)  # noqa: E731
    d = dispersion_functional(0.0, energy, DILUTE.sequence(3), spec(n_max=1, samples_per_order=20000), TINY)
    rng = np.random.default_rng(3)
    lam = DILUTE.total
    counts = rng.poisson(lam, size=200_000)
    e = np.array([0.5 * np.sum(rng.normal(size=(k, 3)) ** 2) for k in counts])
    assert within(d.mean, e.mean(), math.hypot(d.mean_error, e.std() / math.sqrt(e.size)))
    c = e - e.mean()
    var_err = math.sqrt((np.mean(c ** 4) - e.var() ** 2) / e.size)
    assert within(d.variance, e.var(), math.hypot(d.variance_error, var_err))


def test_dispersion_mean_stationary_under_free_flow():
    px = lambda q, p: p[:, 0, 0] ** 2  # noqa: E731
    a = dispersion_functional(0.0, px, DILUTE.sequence(3), spec(n_max=0, seed=41), TINY)
    b = dispersion_functional(0.8, px, DILUTE.sequence(3), spec(n_max=0, seed=42), TINY)
    assert within(a.mean, b.mean, math.hypot(a.mean_error, b.mean_error))


def test_record_is_json_ready():
    x = SystemState(0.1, [[0.1, 0.0, 0.0]], [[0.3, 0.0, 0.0]])
    est = estimate_G(0.3, 1, x, DILUTE.sequence(3), spec(n_max=1, samples_per_order=500))
    rec = estimate_record("G", 1, 0.3, x, est, spec(n_max=1))
    line = dump_records([rec])
    assert line.endswith("\n") and '"quantity": "G"' in line
    for key in ("quantity", "s", "t", "x", "value", "std_error", "per_order", "seed", "n_max", "samples"):
        assert key in rec
