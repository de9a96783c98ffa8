"""Acceptance criteria 1-10, each at its stated tolerance and runtime budget.

Every test prints one ``CRITERION k: PASS|FAIL`` line; the lines are also
collected into the pytest terminal summary.
"""
import json
import math
import time
from pathlib import Path

from hscorr.cli import main, parse_states
from hscorr.data import InitialData, maxwellian
from hscorr.dynamics import PhasePoint, SystemState
from hscorr.kinetics import (OneParticleSolution, boltzmann_collision_integral, correlation_functional_G2,
                             enskog_collision_term)
from hscorr.reduction import QuadratureSpec, estimate_F, estimate_F_normalized, estimate_G, fg_consistency
from hscorr.suites import algebra_suite, cumulants_suite, dynamics_suite

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMALL = InitialData(rho0=0.05, radius=2.0)
T, SIGMA = 0.3, 0.1


def small_spec(n_max, samples, seed):
    return QuadratureSpec.around((0, 0, 0), SMALL.radius, SIGMA, n_max=n_max, samples_per_order=samples,
                                 seed=seed, targeted_fraction=0.5, near_fraction=0.2)


def report(record_property, k, ok, detail):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    record_property("criterion", line)
    assert ok, line


def run_cli(*argv):
    return main([str(a) for a in argv])


def checks_line(checks):
    return ", ".join(f"{c.check}={c.max_residual:.1e}" for c in checks)


def test_criterion_1_algebra(record_property):
    t0 = time.perf_counter()
    checks = algebra_suite(seed=0, points=100, cap=5)
    dt = time.perf_counter() - t0
    ok = all(c.passed for c in checks) and dt < 10
    report(record_property, 1, ok, f"algebra suite {checks_line(checks)} in {dt:.1f}s")


def test_criterion_2_dynamics(record_property):
    t0 = time.perf_counter()
    checks = dynamics_suite(seed=0, events=1000)
    dt = time.perf_counter() - t0
    ok = all(c.passed for c in checks) and dt < 30
    report(record_property, 2, ok, f"dynamics suite {checks_line(checks)} in {dt:.1f}s")


def test_criterion_3_commuting_square(record_property):
    t0 = time.perf_counter()
    checks = [c for c in cumulants_suite(seed=0, points=200, compose_points=1) if c.check == "commuting_square"]
    dt = time.perf_counter() - t0
    ok = len(checks) == 1 and checks[0].passed and checks[0].tolerance <= 1e-10 and dt < 120
    report(record_property, 3, ok, f"{checks_line(checks)} at 200 points in {dt:.1f}s")


def test_criterion_4_nonlinear_group(record_property):
    checks = [c for c in cumulants_suite(seed=1, points=1, compose_points=100)
              if c.check == "nonlinear_group_property"]
    ok = len(checks) == 1 and checks[0].passed and checks[0].tolerance <= 1e-9
    report(record_property, 4, ok, f"{checks_line(checks)} at 100 triples")


FG_POINTS = {
    1: SystemState(SIGMA, [[0.1, 0.2, 0.0]], [[0.4, 0.0, -0.2]]),
    2: SystemState(SIGMA, [[0.0, 0, 0], [0.15, 0.05, 0]], [[0.5, 0, 0], [-0.4, 0.1, 0]]),
    3: SystemState(SIGMA, [[0.0, 0, 0], [0.15, 0.05, 0], [-0.1, 0.12, 0.02]],
                   [[0.5, 0, 0], [-0.4, 0.1, 0], [0.1, -0.5, 0]]),
}


def test_criterion_5_fg_relations(record_property):
    t0 = time.perf_counter()
    parts, ok = [], True
    for s, x in FG_POINTS.items():
        res = fg_consistency(T, s, x, SMALL.sequence(5), small_spec(2, 10_000, 11))
        z = res.residual / res.combined_error if res.combined_error > 0 else math.inf
        ok &= bool(res.residual <= 3 * res.combined_error)
        parts.append(f"s={s} z={z:.2f}")
    dt = time.perf_counter() - t0
    ok &= dt < 600
    report(record_property, 5, ok, f"{', '.join(parts)} in {dt:.1f}s")


def test_criterion_6_definitions_agree(record_property):
    t0 = time.perf_counter()
    text = (CONFIGS / "reduce_f1.ini").read_text().split("states =")[1]
    states = parse_states(text, SIGMA)
    assert len(states) == 5
    zs = []
    for k, x in enumerate(states):
        spec = small_spec(2, 20_000, 11)
        a = estimate_F(T, 1, x, SMALL.sequence(5), spec, tag=f"F-{k}")
        b = estimate_F_normalized(T, 1, x, SMALL.sequence(5), spec, tag=f"Fn-{k}")
        zs.append((a.value - b.value) / math.hypot(a.std_error, b.std_error))
    dt = time.perf_counter() - t0
    ok = max(abs(z) for z in zs) <= 3 and dt < 600
    report(record_property, 6, ok, f"z = {' '.join(f'{z:+.2f}' for z in zs)} in {dt:.1f}s")


def test_criterion_7_kinetics(record_property, tmp_path):
    t0 = time.perf_counter()
    codes = [run_cli("kinetics", "--config", CONFIGS / name, "--out", tmp_path)
             for name in ("kinetics_relax.ini", "kinetics_collision.ini")]
    dt = time.perf_counter() - t0
    checks = []
    for kind in ("relax", "collision"):
        checks += json.loads((tmp_path / f"kinetics-{kind}.json").read_text())["checks"]
    ok = codes == [0, 0] and all(c["status"] == "pass" for c in checks) and dt < 300
    detail = ", ".join(f"{c['check']}={c['max_residual']:.2g}" for c in checks)
    report(record_property, 7, ok, f"{detail} in {dt:.1f}s")


def test_criterion_8_boltzmann_grad_probe(record_property, tmp_path):
    t0 = time.perf_counter()
    code = run_cli("kinetics", "--config", CONFIGS / "kinetics_scaling.ini", "--out", tmp_path)
    dt = time.perf_counter() - t0
    checks = json.loads((tmp_path / "kinetics-scaling.json").read_text())["checks"]
    slopes = {c["check"]: c["slope"] for c in checks}
    ok = (code == 0 and abs(slopes["slope_order_0"]) <= 0.1 and abs(slopes["slope_order_1"] - 2.0) <= 0.3
          and dt < 900)
    detail = ", ".join(f"{k}={v:.3f}" for k, v in slopes.items())
    report(record_property, 8, ok, f"{detail} in {dt:.1f}s")


def test_criterion_9_enskog(record_property):
    amp = 0.7

    def f(p):
        return amp * 0.5 * (maxwellian(p, 1.0, (1.5, 0, 0)) + maxwellian(p, 1.0, (-1.5, 0, 0)))

    x1 = PhasePoint([0.3, 0, 0], [1.0, 0.5, 0])
    e = enskog_collision_term(lambda q, p: f(p[:, 0]), x1, SIGMA, 200_000, 21)
    b = boltzmann_collision_integral(f, x1.p, 200_000, 22)
    z1 = (e.value - SIGMA ** 2 * b.value) / math.hypot(e.std_error, SIGMA ** 2 * b.std_error)
    spec = small_spec(1, 20_000, 13)
    y1 = PhasePoint([0, 0, 0], [-0.6, 0, 0])
    y2 = PhasePoint([0.25, 0.02, 0], [0.6, 0, 0])
    functional = correlation_functional_G2(T, y1, y2, OneParticleSolution(T, SMALL, SIGMA, spec), spec, SIGMA)
    direct = estimate_G(T, 2, SystemState(SIGMA, [y1.q, y2.q], [y1.p, y2.p]), SMALL.sequence(5), spec)
    z2 = (functional.value - direct.value) / math.hypot(functional.std_error, direct.std_error)
    ok = abs(z1) <= 3 and abs(z2) <= 3 and abs(direct.value) > 5 * direct.std_error
    report(record_property, 9, ok, f"enskog vs sigma^2 Boltzmann z={z1:+.2f}, G2 functional vs estimate_G z={z2:+.2f}")


RELAX_SMALL = """
[experiment]
kind = relax
seed = 7

[solver]
particles = 10000
dt = 0.006
steps = 40
split = 1.5
"""


def test_criterion_10_determinism(record_property, tmp_path):
    relax_cfg = tmp_path / "relax_small.ini"
    relax_cfg.write_text(RELAX_SMALL)
    runs = [("verify", "--suite", "all"),
            ("reduce", "--config", CONFIGS / "reduce_fg.ini"),
            ("reduce", "--config", CONFIGS / "reduce_f1.ini", "--workers", "2"),
            ("kinetics", "--config", CONFIGS / "kinetics_collision.ini"),
            ("kinetics", "--config", CONFIGS / "kinetics_enskog.ini"),
            ("kinetics", "--config", relax_cfg)]
    mismatched = []
    for i, argv in enumerate(runs):
        outs = [tmp_path / f"run{i}-{r}" for r in "ab"]
        for out in outs:
            run_cli(*argv, "--out", out)
        names = sorted(p.name for p in outs[0].iterdir())
        for name in names:
            if (outs[0] / name).read_bytes() != (outs[1] / name).read_bytes():
                mismatched.append(name)
        if names != sorted(p.name for p in outs[1].iterdir()) or not names:
            mismatched.append(f"run{i}")
    ok = not mismatched
    report(record_property, 10, ok, f"{len(runs)} commands rerun, mismatched files: {mismatched or 'none'}")
