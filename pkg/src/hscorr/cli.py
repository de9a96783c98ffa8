"""Command-line entry point: ``hscorr verify | reduce | kinetics``.

Configs are INI files (see README).  Every output carries the seed, the
SHA-256 of the effective configuration and the package version; identical
inputs give byte-identical files.

Exit codes: 0 success, 1 check failure, 2 usage or config error,
3 pathology budget exceeded.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import InitialData, maxwellian
from .dynamics import PhasePoint, SystemState
from .errors import ConfigurationError, DomainError, HSCorrError, ImportanceWeightError, PathologyError
from .kinetics import (HistogramSpec, bg_scaling_probe, bimodal_ensemble, boltzmann_collision_integral,
                       collision_invariant_moments, enskog_collision_term, h_monotone, relax, relaxation_csv,
                       scaling_csv)
from .reduction import (QuadratureSpec, dispersion_functional, estimate_F, estimate_F_normalized, estimate_G,
                        estimate_record, fg_consistency, grand_partition_estimate)
from .suites import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_PATHOLOGY = 0, 1, 2, 3
WORKERS_ENV = "HSCORR_WORKERS"


class PathologyBudgetError(HSCorrError):
    pass


# ---------------------------------------------------------------------------
# config helpers


class Config:
    """Typed access to an INI config with required/optional keys."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    @classmethod
    def load(cls, path: str) -> "Config":
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from None
        return cls(parser)

    def _raw(self, section: str, key: str, default):
        if self.parser.has_option(section, key):
            return self.parser.get(section, key)
        if default is _REQUIRED:
            raise ConfigurationError(f"missing [{section}] {key}")
        return default

    def str(self, section, key, default=None):
        v = self._raw(section, key, _REQUIRED if default is None else default)
        return v.strip() if isinstance(v, str) else v

    def float(self, section, key, default=None, positive: bool = False):
        v = self._raw(section, key, _REQUIRED if default is None else default)
        try:
            v = float(v)
        except (TypeError, ValueError):
            raise ConfigurationError(f"[{section}] {key} must be a number") from None
        if not math.isfinite(v) or (positive and v <= 0):
            raise ConfigurationError(f"[{section}] {key} must be {'positive' if positive else 'finite'}")
        return v

    def int(self, section, key, default=None, minimum: Optional[int] = None):
        v = self._raw(section, key, _REQUIRED if default is None else default)
        try:
            v = int(v)
        except (TypeError, ValueError):
            raise ConfigurationError(f"[{section}] {key} must be an integer") from None
        if minimum is not None and v < minimum:
            raise ConfigurationError(f"[{section}] {key} must be >= {minimum}")
        return v

    def floats(self, section, key, default=None):
        v = self._raw(section, key, _REQUIRED if default is None else default)
        try:
            return [float(x) for x in str(v).replace(",", " ").split()]
        except ValueError:
            raise ConfigurationError(f"[{section}] {key} must be a list of numbers") from None

    def canonical(self) -> str:
        out = []
        for sec in sorted(self.parser.sections()):
            for k in sorted(self.parser.options(sec)):
                out.append(f"{sec}.{k}={' '.join(self.parser.get(sec, k).split())}")
        return "\n".join(out)


_REQUIRED = object()


def parse_states(text: str, sigma: float) -> list[SystemState]:
    """One state per line; points separated by '|', each point 'qx qy qz / px py pz'."""
    states = []
    for line in text.strip().splitlines():
        line = line.strip()
        if not line:
            continue
        qs, ps = [], []
        for point in line.split("|"):
            try:
                q, p = point.split("/")
                q = [float(v) for v in q.split()]
                p = [float(v) for v in p.split()]
            except ValueError:
                raise ConfigurationError(f"bad point {point.strip()!r}") from None
            if len(q) != 3 or len(p) != 3:
                raise ConfigurationError(f"bad point {point.strip()!r}")
            qs.append(q)
            ps.append(p)
        states.append(SystemState(sigma, qs, ps))
    if not states:
        raise ConfigurationError("no states given")
    return states


def _hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _provenance(seed: int, config_hash: str) -> dict:
    return {"seed": seed, "config_sha256": config_hash, "version": __version__,
            "numpy": np.__version__}


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    return path


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _seed(cfg: Config, args) -> int:
    if args.seed is not None:
        return int(args.seed)
    if cfg.parser.has_option("experiment", "seed"):
        return cfg.int("experiment", "seed")
    raise ConfigurationError("a seed is required ([experiment] seed or --seed)")


def _workers(cfg: Optional[Config], args) -> int:
    if args.workers is not None:
        w = int(args.workers)
    elif os.environ.get(WORKERS_ENV):
        try:
            w = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise ConfigurationError(f"{WORKERS_ENV} must be an integer") from None
    elif cfg is not None and cfg.parser.has_option("quadrature", "workers"):
        w = cfg.int("quadrature", "workers")
    else:
        w = 1
    if w < 1:
        raise ConfigurationError("workers must be >= 1")
    return w


def _initial(cfg: Config, section: str = "initial") -> InitialData:
    return InitialData(rho0=cfg.float(section, "rho0", positive=True),
                       radius=cfg.float(section, "radius", 2.0, positive=True),
                       beta=cfg.float(section, "beta", 1.0, positive=True),
                       split=cfg.float(section, "split", 0.0))


def _quadrature(cfg: Config, seed: int, workers: int, sigma: float, radius: float) -> QuadratureSpec:
    samples = [int(v) for v in cfg.floats("quadrature", "samples", "10000")]
    if not samples or min(samples) < 1:
        raise ConfigurationError("[quadrature] samples must be positive")
    return QuadratureSpec.around(
        (0.0, 0.0, 0.0), radius, sigma, cfg.float("quadrature", "margin", 5.0),
        n_max=cfg.int("quadrature", "n_max", 2, minimum=0),
        samples_per_order=samples[0] if len(samples) == 1 else tuple(samples),
        beta_prop=cfg.float("quadrature", "beta_prop", 1.0, positive=True),
        seed=seed, workers=workers,
        targeted_fraction=cfg.float("quadrature", "targeted_fraction", 0.5),
        near_fraction=cfg.float("quadrature", "near_fraction", 0.2),
        capsule_scale=cfg.float("quadrature", "capsule_scale", 1.0, positive=True))


def _check_budget(dropped: int, samples: int, budget: float):
    if samples and dropped / samples > budget:
        raise PathologyBudgetError(f"{dropped} of {samples} samples dropped as pathological "
                                   f"(budget {budget:g})")


OBSERVABLES = {
    "number": lambda q, p: np.ones(q.shape[0]),
    "energy": lambda q, p: 0.5 * np.sum(p[:, 0] ** 2, axis=-1),
    "px": lambda q, p: p[:, 0, 0],
}


# ---------------------------------------------------------------------------
# commands


def cmd_verify(args) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    seed = 0 if args.seed is None else int(args.seed)
    checks = []
    for name in names:
        for c in run_suite(name, seed, fault=args.inject_fault):
            d = c.as_dict()
            d["suite"] = name
            checks.append(d)
    failed = [c for c in checks if c["status"] != "pass"]
    report = {"command": "verify", "suites": list(names), "inject_fault": bool(args.inject_fault),
              "checks": checks, "passed": not failed,
              **_provenance(seed, _hash(f"verify {args.suite} fault={bool(args.inject_fault)}"))}
    path = _write(Path(args.out), f"verify-{args.suite}.json", _dump(report))
    for c in checks:
        print(f"{c['status'].upper():4s} {c['suite']}.{c['check']}: residual {c['max_residual']:.3e} "
              f"(tol {c['tolerance']:.1e})")
    print(f"report: {path}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_reduce(args) -> int:
    cfg = Config.load(args.config)
    seed = _seed(cfg, args)
    workers = _workers(cfg, args)
    quantity = cfg.str("experiment", "quantity")
    init = _initial(cfg)
    sigma = cfg.float("initial", "sigma", positive=True)
    cap = cfg.int("initial", "cap", 5, minimum=1)
    spec = _quadrature(cfg, seed, workers, sigma, init.radius)
    t = cfg.float("run", "t", 0.0)
    budget = cfg.float("run", "pathology_budget", 1e-3)
    seqn = init.sequence(cap)
    chash = _hash(cfg.canonical())
    prov = _provenance(seed, chash)
    records = []
    failed = False
    if quantity in ("F", "G", "F_normalized", "fg"):
        s = cfg.int("run", "s", minimum=1)
        for k, x in enumerate(parse_states(cfg.str("run", "states"), sigma)):
            if x.n != s:
                raise ConfigurationError(f"state {k} has {x.n} points, expected s = {s}")
            tag = f"{quantity}-{k}"
            if quantity == "fg":
                res = fg_consistency(t, s, x, seqn, spec)
                rec = {"quantity": "fg", "s": s, "t": t, "state": k, "residual": res.residual,
                       "combined_error": res.combined_error, "F": res.F.value,
                       "F_error": res.F.std_error, "G_sum": res.G_sum, "G_sum_error": res.G_sum_error,
                       "passed": bool(res.passed), "n_max": spec.n_max}
                failed |= not res.passed
            else:
                if quantity == "F":
                    est = estimate_F(t, s, x, seqn, spec, tag=tag)
                elif quantity == "G":
                    est = estimate_G(t, s, x, seqn, spec, tag=tag)
                else:
                    est = estimate_F_normalized(t, s, x, seqn, spec, tag=tag)
                _check_budget(getattr(est, "dropped", 0), max(getattr(est, "samples", 0), 1), budget)
                rec = estimate_record(quantity, s, t, x, est, spec)
                if cfg.str("run", "compare", "none") == "free" and s == 1 and quantity != "G":
                    ref = float(init(x.q[None] - t * x.p[None], x.p[None])[0])
                    ok = abs(est.value - ref) <= 3.0 * est.std_error + 1e-300
                    rec["free_reference"] = ref
                    rec["free_check"] = "pass" if ok else "fail"
                    failed |= not ok
            rec.update(prov)
            records.append(rec)
    elif quantity == "dispersion":
        name = cfg.str("run", "observable", "number")
        if name not in OBSERVABLES:
            raise ConfigurationError(f"unknown observable {name!r}; choose from {sorted(OBSERVABLES)}")
        d = dispersion_functional(t, OBSERVABLES[name], seqn, spec, sigma)
        records.append({"quantity": "dispersion", "observable": name, "t": t, "mean": d.mean,
                        "variance": d.variance, "mean_error": d.mean_error,
                        "variance_error": d.variance_error, **prov})
    elif quantity == "grand":
        from .partitions import exp_star
        est = grand_partition_estimate(t, exp_star(seqn), spec, sigma)
        rec = estimate_record("grand", 0, t, None, est, spec)
        rec.update(prov)
        records.append(rec)
    else:
        raise ConfigurationError(f"unknown quantity {quantity!r}")
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    path = _write(Path(args.out), f"reduce-{quantity}.jsonl", text)
    print(f"{len(records)} records -> {path}")
    return EXIT_FAIL if failed else EXIT_OK


def _kinetics_relax(cfg: Config, seed: int, out: Path, prov: dict) -> tuple[list[dict], list[str]]:
    n = cfg.int("solver", "particles", 100000, minimum=1000)
    dt = cfg.float("solver", "dt", positive=True)
    steps = cfg.int("solver", "steps", minimum=1)
    sigma = cfg.float("solver", "sigma", 1.0, positive=True)
    rho = cfg.float("solver", "rho", 1.0, positive=True)
    beta = cfg.float("solver", "beta", 1.0, positive=True)
    split = cfg.float("solver", "split", 0.0)
    bins = HistogramSpec(bins=cfg.int("solver", "bins", 24, minimum=2),
                         width=cfg.float("solver", "width", 4.5, positive=True))
    tail = cfg.float("solver", "average_fraction", 0.2, positive=True)
    ens = bimodal_ensemble(n, split, beta, np.random.SeedSequence(seed, spawn_key=(2**31,)), rho)
    p0, e0 = ens.total_momentum(), ens.total_energy()
    final, records = relax(ens, dt, steps, sigma, seed, bins)
    files = [str(_write(out, "relaxation.csv", _csv_header(prov) + relaxation_csv(records)))]
    mono, worst = h_monotone(records)
    last = records[-max(1, int(tail * len(records))):]
    T = float(np.mean([r.temperature for r in last]))
    axis = np.mean([r.axis_temperatures for r in last], axis=0)
    m4 = float(np.mean([r.fourth_moment_ratio for r in last]))
    scale = max(float(np.sqrt(2 * e0 / n)), 1.0)
    checks = [
        {"check": "h_nonincreasing", "status": "pass" if mono else "fail", "max_residual": worst,
         "tolerance": 1.0},
        {"check": "axis_temperatures", "max_residual": float(np.max(np.abs(axis / T - 1.0))), "tolerance": 0.01},
        {"check": "fourth_moment", "max_residual": abs(m4 - 1.0), "tolerance": 0.01},
        {"check": "momentum_conservation",
         "max_residual": float(np.max(np.abs(final.total_momentum() - p0))) / (n * scale), "tolerance": 1e-12},
        {"check": "energy_conservation", "max_residual": abs(final.total_energy() - e0) / e0, "tolerance": 1e-12},
    ]
    for c in checks[1:]:
        c["status"] = "pass" if c["max_residual"] <= c["tolerance"] else "fail"
    return checks, files


def _profile(cfg: Config, section: str):
    beta = cfg.float(section, "beta", 1.0, positive=True)
    split = cfg.float(section, "split", 1.5)
    amp = cfg.float(section, "amplitude", 1.0, positive=True)

    def f(p):
        return amp * 0.5 * (maxwellian(p, beta, (split, 0.0, 0.0)) + maxwellian(p, beta, (-split, 0.0, 0.0)))

    return f


def _kinetics_collision(cfg: Config, seed: int, out: Path, prov: dict):
    f = _profile(cfg, "collision")
    quad = cfg.int("collision", "samples", 1000000, minimum=2)
    checks = []
    rows = []
    for name, est in collision_invariant_moments(f, quad, seed):
        z = abs(est.value) / est.std_error
        rows.append({"moment": name, "value": est.value, "std_error": est.std_error})
        checks.append({"check": f"invariant_{name}", "status": "pass" if z <= 3.0 else "fail",
                       "max_residual": z, "tolerance": 3.0})
    p1 = cfg.floats("collision", "p1", "1.5 0 0")
    est = boltzmann_collision_integral(f, p1, quad, np.random.SeedSequence(seed, spawn_key=(1,)))
    rows.append({"moment": "Q(p1)", "value": est.value, "std_error": est.std_error})
    files = [str(_write(out, "collision.jsonl", "".join(json.dumps({**r, **prov}, sort_keys=True) + "\n"
                                                        for r in rows)))]
    return checks, files


def _kinetics_enskog(cfg: Config, seed: int, out: Path, prov: dict):
    f = _profile(cfg, "enskog")
    sigma = cfg.float("enskog", "sigma", positive=True)
    quad = cfg.int("enskog", "samples", 200000, minimum=2)
    x = parse_states(cfg.str("enskog", "point"), sigma)[0]
    x1 = PhasePoint(x.q[0], x.p[0])
    e = enskog_collision_term(lambda q, p: f(p[:, 0]), x1, sigma, quad, np.random.SeedSequence(seed, spawn_key=(1,)))
    b = boltzmann_collision_integral(f, x1.p, quad, np.random.SeedSequence(seed, spawn_key=(2,)))
    z = abs(e.value - sigma ** 2 * b.value) / math.hypot(e.std_error, sigma ** 2 * b.std_error)
    rec = {"enskog": e.value, "enskog_error": e.std_error, "sigma2_boltzmann": sigma ** 2 * b.value,
           "sigma2_boltzmann_error": sigma ** 2 * b.std_error, "z": z, **prov}
    files = [str(_write(out, "enskog.jsonl", json.dumps(rec, sort_keys=True) + "\n"))]
    return [{"check": "enskog_uniform_q", "status": "pass" if z <= 3.0 else "fail", "max_residual": z,
             "tolerance": 3.0}], files


def _kinetics_scaling(cfg: Config, seed: int, workers: int, out: Path, prov: dict):
    eps = cfg.floats("scaling", "epsilons", "0.1 0.05 0.025")
    t = cfg.float("scaling", "t", 0.5)
    init = _initial(cfg, "scaling")
    x = parse_states(cfg.str("scaling", "point"), 1.0)[0]
    samples = cfg.int("scaling", "samples", 20000, minimum=2)
    results = []
    checks = []
    for n in [int(v) for v in cfg.floats("scaling", "orders", "0 1")]:
        spec = QuadratureSpec.around((0.0, 0.0, 0.0), init.radius, max(eps), 5.0, n_max=n,
                                     samples_per_order=samples, seed=seed, workers=workers)
        r = bg_scaling_probe(t, x.n, n, eps, init, spec, x)
        results.append(r)
        expected = 2.0 * n
        tol = 0.1 if n == 0 else 0.3
        dev = abs(r.slope - expected) if not r.inconclusive else float("inf")
        checks.append({"check": f"slope_order_{n}", "status": "pass" if dev <= tol else "fail",
                       "max_residual": dev, "tolerance": tol, "slope": r.slope,
                       "slope_error": r.slope_error, "inconclusive": r.inconclusive})
    files = [str(_write(out, "scaling.csv", _csv_header(prov) + scaling_csv(results)))]
    return checks, files


def _csv_header(prov: dict) -> str:
    return "# " + " ".join(f"{k}={prov[k]}" for k in sorted(prov)) + "\n"


def cmd_kinetics(args) -> int:
    cfg = Config.load(args.config)
    seed = _seed(cfg, args)
    workers = _workers(cfg, args)
    kind = cfg.str("experiment", "kind")
    out = Path(args.out)
    prov = _provenance(seed, _hash(cfg.canonical()))
    if kind == "relax":
        checks, files = _kinetics_relax(cfg, seed, out, prov)
    elif kind == "collision":
        checks, files = _kinetics_collision(cfg, seed, out, prov)
    elif kind == "enskog":
        checks, files = _kinetics_enskog(cfg, seed, out, prov)
    elif kind == "scaling":
        checks, files = _kinetics_scaling(cfg, seed, workers, out, prov)
    else:
        raise ConfigurationError(f"unknown kinetics kind {kind!r}")
    failed = [c for c in checks if c["status"] != "pass"]
    report = {"command": "kinetics", "kind": kind, "checks": checks, "passed": not failed,
              "files": [Path(f).name for f in files], **prov}
    path = _write(out, f"kinetics-{kind}.json", _dump(report))
    for c in checks:
        print(f"{c['status'].upper():4s} {c['check']}: {c['max_residual']:.3e} (tol {c['tolerance']:g})")
    print(f"report: {path}")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--workers", type=int, default=None,
                        help=f"worker processes (default: ${WORKERS_ENV} or the config)")
    common.add_argument("--out", default="out", help="output directory")
    parser = argparse.ArgumentParser(prog="hscorr", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"hscorr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", parents=[common], help="run invariant suites")
    v.add_argument("--suite", required=True, choices=SUITES + ("all",))
    v.add_argument("--inject-fault", action="store_true",
                   help="tamper with the cumulant coefficient (test hook)")
    r = sub.add_parser("reduce", parents=[common], help="estimate reduced functions")
    r.add_argument("--config", required=True)
    k = sub.add_parser("kinetics", parents=[common], help="kinetic runs and scaling probes")
    k.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"verify": cmd_verify, "reduce": cmd_reduce, "kinetics": cmd_kinetics}[args.command]
    try:
        return handler(args)
    except (ConfigurationError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PathologyBudgetError, PathologyError) as e:
        print(f"pathology: {e}", file=sys.stderr)
        return EXIT_PATHOLOGY
    except ImportanceWeightError as e:
        print(f"estimate rejected: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
