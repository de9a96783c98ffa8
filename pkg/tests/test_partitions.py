import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hscorr.errors import CapacityError, DomainError
from hscorr.partitions import (FunctionSequence, LabelSet, cumulant_coefficient, enumerate_bipartitions,
                               enumerate_dissections, enumerate_partitions, exp_star, index_partitions,
                               ln_star, product_evaluator, shift_map, star_product, symmetry_defect)
from hscorr.suites import sample_sequence

BELL = [1, 1, 2, 5, 15, 52, 203, 877, 4140]


def brute_partitions(items):
    """Set partitions by recursive insertion; independent of the growth-string code."""
    items = list(items)
    if not items:
        yield []
        return
    head, rest = items[0], items[1:]
    for part in brute_partitions(rest):
        yield [[head]] + part
        for i in range(len(part)):
            yield part[:i] + [[head] + part[i]] + part[i + 1:]


def gauss1(a, c):
    return lambda q, p: a * np.exp(-np.sum((q[:, 0] - c) ** 2, axis=-1) - 0.5 * np.sum(p[:, 0] ** 2, axis=-1))


def pts(rng, n):
    return rng.normal(size=(n, 3)), rng.normal(size=(n, 3))


def test_partition_examples():
    assert len(enumerate_partitions(LabelSet((1, 2, 3)))) == 5
    single = enumerate_partitions(LabelSet((1,)))
    assert [P.blocks for P in single] == [(((1,),),)]
    fused = enumerate_partitions(LabelSet((1, 2, 3), fused=2))
    assert sorted(len(P) for P in fused) == [1, 2]
    assert fused[0].label_blocks == ((1, 2, 3),)
    assert fused[1].label_blocks == ((1, 2), (3,))


@pytest.mark.parametrize("m", range(1, 9))
def test_bell_and_bipartition_counts(m):
    parts = index_partitions(m)
    assert len(parts) == BELL[m]
    assert len(set(parts)) == len(parts)
    if m >= 2:
        assert len(enumerate_bipartitions(LabelSet(tuple(range(m))))) == 2 ** (m - 1) - 1


def test_bipartition_examples():
    assert len(enumerate_bipartitions(LabelSet((1, 2)))) == 1
    assert len(enumerate_bipartitions(LabelSet((1, 2, 3)))) == 3
    assert len(enumerate_bipartitions(LabelSet((1, 2, 3, 4), fused=2))) == 3


def test_partitions_match_brute_force():
    for m in range(1, 7):
        ours = {frozenset(frozenset(b) for b in P) for P in index_partitions(m)}
        ref = {frozenset(frozenset(b) for b in P) for P in brute_partitions(range(m))}
        assert ours == ref


def test_canonical_order_blocks_sorted_by_least_element():
    for P in index_partitions(5):
        assert [b[0] for b in P] == sorted(b[0] for b in P)
        assert all(list(b) == sorted(b) for b in P)


def test_capacity_guard():
    with pytest.raises(CapacityError):
        index_partitions(13)


def test_dissection_examples():
    assert len(enumerate_dissections((5,), 3)) == 1
    assert [d.parts for d in enumerate_dissections((4, 5), 2)] == [((4, 5),), ((4,), (5,))]
    assert [d.parts for d in enumerate_dissections((3, 4, 5), 1)] == [((3, 4, 5),)]


def test_dissections_match_brute_force():
    ground = (2, 3, 5, 7, 8)
    for k in range(1, 6):
        ours = {d.parts for d in enumerate_dissections(ground, k)}
        ref = set()
        for mask in itertools.product((0, 1), repeat=len(ground) - 1):
            parts, cur = [], [ground[0]]
            for cut, v in zip(mask, ground[1:]):
                if cut:
                    parts.append(tuple(cur))
                    cur = []
                cur.append(v)
            parts.append(tuple(cur))
            if len(parts) <= k:
                ref.add(tuple(parts))
        assert ours == ref
        assert len(ours) == sum(math.comb(4, j - 1) for j in range(1, k + 1))


def test_cumulant_coefficient_values():
    assert [cumulant_coefficient(k) for k in (1, 2, 3, 4)] == [1, -1, 2, -6]
    with pytest.raises(DomainError):
        cumulant_coefficient(0)


@pytest.mark.parametrize("m", range(1, 9))
def test_moebius_identity(m):
    assert sum(cumulant_coefficient(len(P)) for P in index_partitions(m)) == (1 if m == 1 else 0)


def test_star_unit_and_pair_expansion():
    rng = np.random.default_rng(1)
    g = sample_sequence(4, 3, zeroth=0.7)
    unit = FunctionSequence({0: 1.0}, cap=4)
    fg = star_product(unit, g)
    for n in range(5):
        q, p = pts(rng, n)
        assert fg.at(n, q, p) == pytest.approx(g.at(n, q, p), abs=1e-15)
    f1, g1 = gauss1(0.8, 0.1), gauss1(1.3, -0.4)
    prod = star_product(FunctionSequence({1: f1}, cap=3), FunctionSequence({1: g1}, cap=3))
    q, p = pts(rng, 2)
    one = lambda f, i: float(f(q[None, i:i + 1], p[None, i:i + 1])[0])  # noqa: E731
    assert prod.at(2, q, p) == pytest.approx(one(f1, 0) * one(g1, 1) + one(f1, 1) * one(g1, 0), rel=1e-14)


def test_star_component3_matches_subset_sum():
    rng = np.random.default_rng(2)
    f = sample_sequence(3, 10, 0.4)
    g = sample_sequence(3, 11, -0.9)
    q, p = pts(rng, 3)
    ref = 0.0
    for r in range(4):
        for sub in itertools.combinations(range(3), r):
            rest = [i for i in range(3) if i not in sub]
            ref += f.at(r, q[list(sub)], p[list(sub)]) * g.at(3 - r, q[rest], p[rest])
    assert star_product(f, g).at(3, q, p) == pytest.approx(ref, rel=1e-13)


def test_exp_examples():
    zero = exp_star(FunctionSequence({}, cap=3))
    rng = np.random.default_rng(4)
    assert zero.zeroth == 1.0
    assert all(zero.at(n, *pts(rng, n)) == 0.0 for n in (1, 2, 3))
    h = sample_sequence(4, 5)
    u = exp_star(h)
    q, p = pts(rng, 2)
    expect = h.at(2, q, p) + h.at(1, q[:1], p[:1]) * h.at(1, q[1:], p[1:])
    assert u.at(2, q, p) == pytest.approx(expect, rel=1e-14)
    q, p = pts(rng, 4)
    ref = 0.0
    for P in brute_partitions(range(4)):
        ref += math.prod(h.at(len(b), q[b], p[b]) for b in P)
    assert sum(1 for _ in brute_partitions(range(4))) == 15
    assert u.at(4, q, p) == pytest.approx(ref, rel=1e-13)


def test_ln_examples():
    rng = np.random.default_rng(6)
    u = exp_star(sample_sequence(4, 8))
    g = ln_star(u)
    q, p = pts(rng, 2)
    expect = u.at(2, q, p) - u.at(1, q[:1], p[:1]) * u.at(1, q[1:], p[1:])
    assert g.at(2, q, p) == pytest.approx(expect, abs=1e-14)
    q, p = pts(rng, 3)
    ref = sum(cumulant_coefficient(len(P)) * math.prod(u.at(len(b), q[b], p[b]) for b in P)
              for P in brute_partitions(range(3)))
    assert g.at(3, q, p) == pytest.approx(ref, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(1, 5))
def test_exp_ln_inverse_property(seed, n):
    h = sample_sequence(5, seed)
    rng = np.random.default_rng(seed)
    q, p = pts(rng, n)
    back = ln_star(exp_star(h)).at(n, q, p)
    assert abs(back - h.at(n, q, p)) <= 1e-12 * max(1.0, abs(h.at(n, q, p)))
    u = exp_star(h)
    again = exp_star(ln_star(u)).at(n, q, p)
    assert abs(again - u.at(n, q, p)) <= 1e-12 * max(1.0, abs(u.at(n, q, p)))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(0, 4))
def test_star_commutative_associative(seed, n):
    f, g, k = (sample_sequence(4, seed + i, 0.3 * i) for i in range(3))
    rng = np.random.default_rng(seed)
    q, p = pts(rng, n)
    assert star_product(f, g).at(n, q, p) == pytest.approx(star_product(g, f).at(n, q, p), abs=1e-13)
    left = star_product(star_product(f, g), k).at(n, q, p)
    right = star_product(f, star_product(g, k)).at(n, q, p)
    assert left == pytest.approx(right, abs=1e-12)


def test_exp_components_are_symmetric():
    rng = np.random.default_rng(9)
    u = exp_star(sample_sequence(4, 12))
    assert symmetry_defect(u, 4, *pts(rng, 4), rng) < 1e-13


def test_cap_is_enforced():
    f = sample_sequence(3, 0)
    with pytest.raises(CapacityError):
        f.at(4, np.zeros((4, 3)), np.zeros((4, 3)))
    with pytest.raises(CapacityError):
        FunctionSequence({5: gauss1(1, 0)}, cap=4)


def test_shift_examples():
    rng = np.random.default_rng(13)
    f = sample_sequence(4, 14, 0.2)
    empty = (np.zeros((0, 3)), np.zeros((0, 3)))
    assert shift_map(empty, f) is f
    Y = pts(rng, 2)
    assert shift_map(Y, f).zeroth == pytest.approx(f.at(2, *Y), rel=1e-15)
    q, p = pts(rng, 1)
    assert shift_map(Y, f).at(1, q, p) == pytest.approx(
        f.at(3, np.concatenate([Y[0], q]), np.concatenate([Y[1], p])), rel=1e-15)


def test_cluster_shift_of_exp_is_star_product():
    # d_{Y} Exp f = Exp f * d_{Y} f, checked pointwise with cap 4
    rng = np.random.default_rng(15)
    f = sample_sequence(4, 16)
    Y = pts(rng, 2)
    lhs = shift_map(Y, exp_star(f), fused=True)
    rhs = star_product(exp_star(f.truncate(2)), shift_map(Y, f, fused=True))
    for n in range(3):
        q, p = pts(rng, n)
        assert lhs.at(n, q, p) == pytest.approx(rhs.at(n, q, p), rel=1e-12, abs=1e-14)


def test_product_evaluator():
    g = gauss1(0.5, 0.0)
    q = np.random.default_rng(0).normal(size=(4, 3, 3))
    p = np.ones((4, 3, 3))
    expect = g(q[:, :1], p[:, :1]) * g(q[:, 1:2], p[:, 1:2]) * g(q[:, 2:], p[:, 2:])
    np.testing.assert_allclose(product_evaluator(g, 3)(q, p), expect, rtol=1e-15)
