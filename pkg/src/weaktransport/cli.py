"""Configuration-driven experiment runner.

Every verification in the package is exposed as a subcommand operating on a
JSON config.  Outputs are machine readable: a ``summary.json`` with one
record per report and CSV files for tabular data (simulated paths, coverage
rows).  Runs are deterministic for a fixed seed and independent of the
worker count.

Exit codes: 0 all checks passed, 1 some check failed or was inconclusive,
2 usage or config error, 3 numeric failure inside a solver or simulator.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from weaktransport import concentration, dependence, oracle, processes, transport
from weaktransport.measures import (
    DiscreteMeasure,
    DiscreteSpace,
    DomainError,
    MetricSpec,
    PathMeasure,
    derived_rng,
    kl_divergence,
)
from weaktransport.report import FAIL, INCONCLUSIVE, PASS, ExperimentReport


class ConfigError(ValueError):
    """Schema violation; the message carries the offending key path."""


INEQUALITY_REGISTRY = {
    "weak-transport-certificate": "certified two-sided weak transport cost",
    "classical-wasserstein": "order-p optimal transport cost",
    "transport-dual-form": "exponential dual form of the transport-entropy bound",
    "coefficient-matrix": "dependence coefficients, norms, and the path constant",
    "gamma-estimate": "Monte-Carlo dependence coefficients from trajectory coupling",
    "path-transport-entropy": "weak transport cost vs entropy with the coefficient-matrix constant",
    "separately-convex-exponential": "exponential moment bound for separately convex functions",
    "separately-concave-exponential": "exponential moment bound for separately concave functions",
    "weighted-hamming-exponential": "self-bounding weighted-Hamming exponential bound",
    "convex-poincare": "variance bound for separately convex functions",
    "convex-distance-hamming_dT": "convex-distance concentration, weighted Hamming",
    "convex-distance-euclidean_dN": "hull-distance concentration, Euclidean",
    "residual-risk-inequality": "least-squares residual risk inequality",
    "risk-bound-coverage-nonexact": "coverage of the multiplicative risk bound",
    "risk-bound-coverage-exact": "coverage of the additive span-condition risk bound",
    "simulated-path": "process trajectory export",
}


SCHEMAS = {
    "transport": {
        "required": {"task", "first", "second", "p", "metric"},
        "optional": {"markov", "metric_table", "tolerance"},
    },
    "gamma": {
        "required": {"task", "mode"},
        "optional": {
            "path_measure", "p", "metric", "metric_prime", "metric_table",
            "base_C", "process", "horizon", "replicates", "pairs",
        },
    },
    "verify": {
        "required": {"task", "check"},
        "optional": {
            "C", "N", "dim", "sampler", "g", "path_measure", "p", "trials",
            "base_C", "metric", "variant", "set", "measure", "samples",
            "lam_max", "concave", "scale", "constant",
        },
    },
    "oracle": {
        "required": {"task", "mode", "generator", "params"},
        "optional": {"replications", "bound", "bound_kwargs"},
    },
    "simulate": {
        "required": {"task", "process", "n", "x0"},
        "optional": set(),
    },
}

MEASURE_KEYS = {"points", "weights", "embedding"}
PATH_MEASURE_KEYS = {"points", "initial", "kernels", "embedding"}


def validate_config(cfg) -> str:
    """Check the config against the schema; returns the task name."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    task = cfg.get("task")
    if task is None:
        raise ConfigError("missing required key 'task'")
    if task not in SCHEMAS:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(SCHEMAS)}")
    schema = SCHEMAS[task]
    keys = set(cfg)
    unknown = keys - schema["required"] - schema["optional"]
    if unknown:
        raise ConfigError(f"unknown key '{task}.{sorted(unknown)[0]}'")
    missing = schema["required"] - keys
    if missing:
        raise ConfigError(
            f"missing required keys for task {task!r}: {sorted(missing)}"
        )
    for key in ("first", "second", "measure"):
        if key in cfg:
            _check_subkeys(cfg[key], MEASURE_KEYS, f"{task}.{key}")
    if "path_measure" in cfg:
        _check_subkeys(cfg["path_measure"], PATH_MEASURE_KEYS, f"{task}.path_measure")
    return task


def _check_subkeys(sub, allowed, path):
    if not isinstance(sub, dict):
        raise ConfigError(f"{path} must be an object")
    unknown = set(sub) - allowed
    if unknown:
        raise ConfigError(f"unknown key '{path}.{sorted(unknown)[0]}'")


def _parse_metric(cfg, key="metric"):
    kind = cfg.get(key, "hamming")
    if kind == "table":
        table = cfg.get("metric_table")
        if table is None:
            raise ConfigError("metric 'table' needs 'metric_table'")
        return MetricSpec("table", table=np.asarray(table, dtype=float))
    try:
        return MetricSpec(kind)
    except DomainError as err:
        raise ConfigError(str(err)) from None


def _parse_process(spec):
    if not isinstance(spec, dict):
        raise ConfigError("process must be an object")
    kind = spec.get("kind")
    laws = {
        "gaussian": processes.gaussian_innovations,
        "uniform": processes.uniform_innovations,
        "rademacher": processes.rademacher_innovations,
        "truncated_gaussian": processes.truncated_gaussian_innovations,
    }
    law_name = spec.get("innovation", "gaussian")
    if law_name not in laws:
        raise ConfigError(f"unknown innovation law {law_name!r}")
    if kind == "arma":
        mat = np.asarray(spec["matrix"], dtype=float)
        dim = mat.shape[0] if mat.ndim == 2 else 1
        return processes.Arma(
            mat, laws[law_name](dim),
            allow_unstable=bool(spec.get("allow_unstable", False)),
        )
    if kind == "ar_infinity":
        return processes.ArInfinity(
            np.asarray(spec["coeffs"], dtype=float), laws[law_name]()
        )
    raise ConfigError(
        f"process kind {kind!r} is not configurable from JSON "
        "(function-valued variants are library-only)"
    )


def _parse_generator(spec):
    kind = spec.get("kind")
    if kind == "iid_gaussian":
        return oracle.IIDGaussianRegression(
            d=int(spec["d"]),
            n=int(spec["n"]),
            theta_star=np.asarray(spec["theta_star"], dtype=float),
            noise_sd=float(spec.get("noise_sd", 1.0)),
        )
    if kind == "ar1":
        return oracle.AR1Regression(
            n=int(spec["n"]), phi=float(spec["phi"]),
            noise_sd=float(spec.get("noise_sd", 1.0)),
        )
    if kind == "rademacher":
        return oracle.RademacherRegression(
            d=int(spec["d"]),
            n=int(spec["n"]),
            theta_star=np.asarray(spec["theta_star"], dtype=float),
            noise_bound=float(spec.get("noise_bound", 1.0)),
        )
    raise ConfigError(f"unknown generator kind {kind!r}")


def _parse_test_function(spec):
    kind = spec.get("kind")
    if kind == "max":
        return concentration.coordinate_max_fn()
    if kind == "linear":
        return concentration.linear_fn(np.asarray(spec["coeffs"], dtype=float))
    if kind == "norm2":
        return concentration.euclidean_norm_fn()
    if kind == "pwl":
        return concentration.piecewise_linear_fn(
            np.asarray(spec["slopes"], dtype=float),
            np.asarray(spec["offsets"], dtype=float),
        )
    raise ConfigError(f"unknown test function kind {kind!r}")


def _parse_sampler(name, dim):
    if name == "gaussian":
        return concentration.gaussian_sampler(dim)
    if name == "uniform01":
        return concentration.uniform01_sampler(dim)
    if name == "rademacher":
        return concentration.rademacher_sampler(dim)
    raise ConfigError(f"unknown sampler {name!r}")


def _parse_set(spec, dim):
    kind = spec.get("kind")
    if kind == "halfspace_sum":
        level = float(spec["level"])
        return lambda b: b.sum(axis=1) <= level
    if kind == "first_coords_positive":
        count = int(spec["count"])
        return lambda b: np.all(b[:, :count] > 0, axis=1)
    if kind == "whole_space":
        return lambda b: np.ones(len(b), dtype=bool)
    raise ConfigError(f"unknown set kind {kind!r}")


# ---------------------------------------------------------------------------
# Task runners
# ---------------------------------------------------------------------------


def _run_transport(cfg, seed, tolerance, workers):
    first = DiscreteMeasure.from_dict(cfg["first"])
    second = DiscreteMeasure.from_dict(cfg["second"])
    metric = _parse_metric(cfg)
    p = float(cfg["p"])
    tol = float(cfg.get("tolerance", tolerance))
    cert = transport.weak_transport_cost(
        first, second, p, metric, markov=bool(cfg.get("markov", True)),
        tol=tol, seed=seed,
    )
    w, _ = transport.wasserstein(first, second, p, metric)
    kl = kl_divergence(second, first)
    verdict = PASS if cert.certified(tol) else INCONCLUSIVE
    report = ExperimentReport(
        experiment="weak-transport-certificate",
        verdict=verdict,
        left=cert.lower,
        right=cert.upper,
        seed=seed,
        inputs={"p": p, "metric": cfg["metric"]},
        detail={
            "gap": cert.gap,
            "wasserstein": w,
            "relative_entropy": kl,
            "witness_coupling": cert.coupling,
            "witness_alpha": None if cert.alpha is None else cert.alpha.values,
        },
    )
    return [report], {}


def _run_gamma(cfg, seed, tolerance, workers):
    mode = cfg["mode"]
    p = float(cfg.get("p", 2))
    if mode in ("exact", "tv"):
        if "path_measure" not in cfg:
            raise ConfigError("gamma mode 'exact'/'tv' needs 'path_measure'")
        pm = PathMeasure.from_dict(cfg["path_measure"])
        if mode == "tv":
            gm = dependence.tv_gamma(pm, p)
        else:
            gm = dependence.gamma_from_kernel(
                pm, p, _parse_metric(cfg), _parse_metric(cfg, "metric_prime")
            )
        norms = {
            "l1": dependence.subordinated_norm(gm, 1),
            "l2": dependence.subordinated_norm(gm, 2),
            "linf": dependence.subordinated_norm(gm, math.inf),
        }
        base_c = float(cfg.get("base_C", 1.0))
        constant = dependence.theorem_constant(base_c, gm, p, pm.n)
        report = ExperimentReport(
            experiment="coefficient-matrix",
            verdict=PASS,
            seed=seed,
            inputs={"mode": mode, "p": p, "base_C": base_c},
            detail={"matrix": gm.to_dict(), "norms": norms, "constant": constant},
        )
        return [report], {}
    if mode == "simulate":
        spec = _parse_process(cfg["process"])
        pairs = cfg.get("pairs")
        if pairs is not None:
            pairs = [(np.asarray(a, dtype=float), np.asarray(b, dtype=float)) for a, b in pairs]
        est = processes.estimate_gamma(
            spec, p, int(cfg.get("horizon", 20)), int(cfg.get("replicates", 1000)),
            pairs=pairs, seed=seed,
        )
        report = ExperimentReport(
            experiment="gamma-estimate",
            verdict=PASS,
            seed=seed,
            inputs={"p": p, "horizon": len(est.gamma_hat)},
            detail={
                "gamma_hat": est.gamma_hat,
                "se": est.se,
                "s_hat": est.s_hat,
                "tail": est.tail,
                "s_total": est.s_total,
            },
        )
        csv_lines = ["k,gamma_hat,se"] + [
            f"{k+1},{repr(float(g))},{repr(float(s))}"
            for k, (g, s) in enumerate(zip(est.gamma_hat, est.se))
        ]
        return [report], {"gamma.csv": "\n".join(csv_lines) + "\n"}
    raise ConfigError(f"unknown gamma mode {mode!r}")


def _run_verify(cfg, seed, tolerance, workers):
    check = cfg["check"]
    if check == "wti":
        pm = PathMeasure.from_dict(cfg["path_measure"])
        metric = _parse_metric(cfg)
        rep = dependence.verify_wti(
            pm, float(cfg.get("p", 2)), metric, metric,
            float(cfg.get("base_C", 1.0)), int(cfg.get("trials", 100)),
            seed, tol=tolerance, workers=workers,
            constant=cfg.get("constant"),
        )
        return [rep], {}
    if check == "dual":
        measure = DiscreteMeasure.from_dict(cfg["measure"])
        metric = _parse_metric(cfg)
        c = float(cfg.get("C", 1.0))
        p = float(cfg.get("p", 2))
        samples = int(cfg.get("samples", 100))
        lam_max = float(cfg.get("lam_max", 3.0))
        rng = derived_rng(seed, 0xD0A1)
        worst = None
        for _ in range(samples):
            f = rng.uniform(0.0, 1.0, measure.size)
            alpha = np.abs(rng.standard_normal(measure.size))
            lam = math.exp(rng.uniform(math.log(0.05), math.log(lam_max)))
            rep = transport.dual_form_check(
                measure, c, p, metric, f, alpha, lam,
                inverted=bool(rng.integers(2)),
            )
            if worst is None or rep.left > worst.left:
                worst = rep
        worst.inputs["samples"] = samples
        worst.seed = seed
        return [worst], {}
    dim = int(cfg.get("dim", 1))
    sampler = _parse_sampler(cfg.get("sampler", "gaussian"), dim)
    n_samples = int(cfg.get("N", 10**5))
    c = float(cfg.get("C", 1.0))
    if check == "tsirelson":
        g = _parse_test_function(cfg.get("g", {"kind": "max"}))
        rep = concentration.tsirelson_check(
            sampler, g, c, n_samples, seed, dim,
            concave=bool(cfg.get("concave", False)),
            scale=float(cfg.get("scale", 1.0)),
        )
        return [rep], {}
    if check == "poincare":
        g = _parse_test_function(cfg.get("g", {"kind": "max"}))
        rep = concentration.convex_poincare_check(sampler, g, c, n_samples, seed, dim)
        return [rep], {}
    if check == "talagrand":
        membership = _parse_set(cfg.get("set", {"kind": "whole_space"}), dim)
        rep = concentration.talagrand_check(
            sampler, membership, dim, c,
            cfg.get("variant", "euclidean_dN"), n_samples, seed,
        )
        return [rep], {}
    raise ConfigError(f"unknown verify check {check!r}")


def _run_oracle(cfg, seed, tolerance, workers):
    generator = _parse_generator(cfg["generator"])
    p = cfg["params"]
    params = oracle.OracleParams(
        eta=float(p.get("eta", 0.1)),
        eps=float(p.get("eps", 0.05)),
        C=float(p.get("C", 1.0)),
        beta=float(p.get("beta", 1.0)),
        M=float(p.get("M", 1.0)),
        B=float(p.get("B", 0.0)),
    )
    mode = cfg["mode"]
    if mode == "bounds":
        ora = generator.risk_oracle()
        nb = oracle.nonexact_bound(params, ora, generator.d, generator.n)
        report = ExperimentReport(
            experiment="risk-bound-coverage-nonexact",
            verdict=PASS,
            seed=seed,
            inputs={"mode": "bounds"},
            detail={
                "b1": nb.b1, "b2": nb.b2, "b3": nb.b3,
                "multiplier": nb.multiplier, "additive": nb.additive, "rhs": nb.rhs,
            },
        )
        return [report], {}
    if mode == "residual":
        reps = int(cfg.get("replications", 200))
        datasets = [
            generator.sample(int(derived_rng(seed, 0xDA, r).integers(2**63)))
            for r in range(reps)
        ]
        rep = oracle.theorem_io_residual(datasets, params, generator.risk_oracle(), seed=seed)
        return [rep], {}
    if mode == "coverage":
        rep = oracle.coverage_experiment(
            generator, params,
            bound=cfg.get("bound", "nonexact"),
            replications=int(cfg.get("replications", 500)),
            seed=seed, workers=workers,
            bound_kwargs=cfg.get("bound_kwargs"),
        )
        rows = rep.detail.pop("rows")
        csv_lines = ["seed,risk,bound,hit"] + [
            f"{r[0]},{repr(float(r[1]))},{repr(float(r[2]))},{int(r[3])}" for r in rows
        ]
        return [rep], {"coverage.csv": "\n".join(csv_lines) + "\n"}
    raise ConfigError(f"unknown oracle mode {mode!r}")


def _run_simulate(cfg, seed, tolerance, workers):
    spec = _parse_process(cfg["process"])
    path = processes.simulate(spec, int(cfg["n"]), cfg["x0"], seed)
    report = ExperimentReport(
        experiment="simulated-path",
        verdict=PASS,
        seed=seed,
        inputs={"n": int(cfg["n"])},
        detail={"final_state": path[-1]},
    )
    return [report], {"path.csv": processes.path_to_csv(path)}


RUNNERS = {
    "transport": _run_transport,
    "gamma": _run_gamma,
    "verify": _run_verify,
    "oracle": _run_oracle,
    "simulate": _run_simulate,
}


def run(config: dict, seed=0, workers=1, out_dir=None, tolerance=1e-6):
    """Validate and execute one config; returns (exit_code, reports).

    Writes ``summary.json`` plus any CSV outputs into ``out_dir`` when
    given.  Exit code 0 means every report passed.
    """
    task = validate_config(config)
    start = time.perf_counter()
    try:
        reports, files = RUNNERS[task](config, seed, tolerance, workers)
    except (ConfigError, DomainError):
        raise
    except Exception as err:  # numeric failure inside a solver or simulator
        stub = ExperimentReport(
            experiment=task,
            verdict=FAIL,
            seed=seed,
            detail={"numeric_failure": f"{type(err).__name__}: {err}"},
        )
        _write_outputs([stub], {}, out_dir)
        return 3, [stub]
    wall = time.perf_counter() - start
    for rep in reports:
        rep.wall_time = wall
        rep.detail.setdefault(
            "inequality", INEQUALITY_REGISTRY.get(rep.experiment, rep.experiment)
        )
    _write_outputs(reports, files, out_dir)
    if all(r.verdict == PASS for r in reports):
        return 0, reports
    return 1, reports


def _write_outputs(reports, files, out_dir):
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = [r.to_dict() for r in reports]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    for name, text in files.items():
        (out / name).write_text(text)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="weaktransport",
        description="transport, dependence, concentration, and risk-bound checks",
    )
    parser.add_argument(
        "task",
        choices=sorted(SCHEMAS),
        help="subcommand; must match the config's 'task' field",
    )
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--tolerance", type=float, default=1e-6)
    args = parser.parse_args(argv)
    try:
        config = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        print(f"config not found: {args.config}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as err:
        print(f"config is not valid JSON: {err}", file=sys.stderr)
        return 2
    try:
        task = validate_config(config)
        if task != args.task:
            print(
                f"config task {task!r} does not match subcommand {args.task!r}",
                file=sys.stderr,
            )
            return 2
        code, reports = run(
            config,
            seed=args.seed,
            workers=args.workers,
            out_dir=args.out,
            tolerance=args.tolerance,
        )
    except (ConfigError, DomainError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    for rep in reports:
        line = f"[{rep.verdict}] {rep.experiment}"
        if rep.left is not None and rep.right is not None:
            line += f" left={rep.left:.6g} right={rep.right:.6g}"
        print(line)
    return code


if __name__ == "__main__":
    sys.exit(main())
