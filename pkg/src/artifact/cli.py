"""Command-line experiment runner.

Each subcommand reads an optional TOML config, runs one experiment family and
writes CSV data, ``report.json`` (deterministic given config and seed) and
``manifest.json`` (config hash, seed, versions, wall time) into ``--out``.

Config schema (every key optional; unknown keys are rejected)::

    seed = 0
    [params]     N = 16, rho_minus = 0.2, rho_plus = 0.8
    [bias]       form = "zero" | "k0-shaped" | "basis", eps = 0.05,
                 coeffs = [..] (basis), P = 4 (basis size)
    [grid]       M = 64
    [run]        T = 50.0, burn_in = 5.0, stride = 0 (auto)
    [tolerances] tol = 1e-10, max_iter = 200
    [dv]         measure = "random" | "product", restarts = 10
    [entropy]    Ns = [3, 4, 5], t_max = 50.0, n_times = 100
    [measure]    Ns = [2, 3, 4, 5], amplitude = 0.8, n = [2, 3]
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .io import json_text, write_csv, write_json
from .lattice import Params, steady_profile

KINDS = ("simulate", "pde", "rate", "dv", "entropy", "measure")

DEFAULTS = {
    "seed": None,
    "params": {"N": 16, "rho_minus": 0.2, "rho_plus": 0.8},
    "bias": {"form": "zero", "eps": 0.05, "coeffs": [], "P": 4},
    "grid": {"M": 64},
    "run": {"T": 50.0, "burn_in": 5.0, "stride": 0},
    "tolerances": {"tol": 1e-10, "max_iter": 200},
    "dv": {"measure": "random", "restarts": 10},
    "entropy": {"Ns": [3, 4, 5], "t_max": 50.0, "n_times": 100},
    "measure": {"Ns": [2, 3, 4, 5], "amplitude": 0.8, "n": [2, 3]},
}

STOCHASTIC = {"simulate", "dv", "measure"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected a table")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def _check(cond, where, msg):
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def validate(cfg: dict, kind: str) -> dict:
    p = cfg["params"]
    _check(isinstance(p["N"], int) and p["N"] >= 2, "params.N", "must be an integer >= 2")
    for key in ("rho_minus", "rho_plus"):
        _check(isinstance(p[key], (int, float)) and 0 < p[key] < 1, f"params.{key}", "must lie in (0, 1)")
    _check(p["rho_minus"] <= p["rho_plus"], "params.rho_plus", "must be >= rho_minus")
    b = cfg["bias"]
    _check(b["form"] in ("zero", "k0-shaped", "basis"), "bias.form",
           "must be 'zero', 'k0-shaped' or 'basis'")
    _check(b["eps"] > 0, "bias.eps", "must be positive")
    if b["form"] == "basis":
        _check(len(b["coeffs"]) > 0, "bias.coeffs", "needs at least one coefficient")
    _check(isinstance(cfg["grid"]["M"], int) and cfg["grid"]["M"] >= 4, "grid.M", "must be an integer >= 4")
    _check(cfg["run"]["T"] > 0, "run.T", "must be positive")
    _check(cfg["run"]["burn_in"] >= 0, "run.burn_in", "must be nonnegative")
    _check(cfg["tolerances"]["tol"] > 0, "tolerances.tol", "must be positive")
    _check(cfg["dv"]["measure"] in ("random", "product"), "dv.measure", "must be 'random' or 'product'")
    if kind in STOCHASTIC:
        _check(cfg["seed"] is not None, "seed", f"required for '{kind}' (use --seed or the config)")
    if cfg["seed"] is not None:
        _check(isinstance(cfg["seed"], int) and 0 <= cfg["seed"] < 1 << 64, "seed",
               "must be an unsigned 64-bit integer")
    return cfg


def load_config(path=None, kind="pde", seed=None) -> dict:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config: file {path} does not exist")
        import tomli
        with path.open("rb") as fh:
            try:
                data = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"config: {exc}") from exc
    cfg = _merge(DEFAULTS, data)
    if seed is not None:
        cfg["seed"] = seed
    return validate(cfg, kind)


def config_hash(cfg: dict, kind: str) -> str:
    blob = json.dumps({"kind": kind, "config": cfg}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _params(cfg) -> Params:
    p = cfg["params"]
    return Params(int(p["N"]), float(p["rho_minus"]), float(p["rho_plus"]))


def bias_callable(cfg, params: Params):
    """The configured bias as a callable h(x, y), or None."""
    b = cfg["bias"]
    eps = float(b["eps"])
    if b["form"] == "zero":
        return None
    if b["form"] == "k0-shaped":
        from .kernel_pde import k0_eval
        # k0 with rho' = 1 has sup 1/2 and sup |d1| = 1
        return lambda x, y: eps * k0_eval(x, y, 1.0)
    from .basis import SineBasis
    basis = SineBasis(len(b["coeffs"]))
    coeffs = np.asarray(b["coeffs"], dtype=float)
    return lambda x, y: basis.evaluate(coeffs, x, y)


# ---------------------------------------------------------------------------
# experiment families; each returns the report dict and writes its CSVs


def run_simulate(cfg, out: Path, threads=1) -> dict:
    from .dynamics import kmc_run
    from .fields import KernelEstimate
    from .kernel_pde import k0_eval
    from .rng import stream
    params = _params(cfg)
    h = bias_callable(cfg, params)
    stride = cfg["run"]["stride"] or None
    traj = kmc_run(params, h, float(cfg["run"]["T"]), stream(cfg["seed"], 0),
                   burn_in=float(cfg["run"]["burn_in"]), stride=stride)
    est = KernelEstimate.from_trajectory(traj)
    est.write_csv(out / "kernel.csv")
    p, q = est.pairs(min_separation=1)
    x = est.positions
    rp = steady_profile(params).rho_prime
    ref = k0_eval(x[p], x[q], rp)
    diff = est.k_hat[p, q] - ref
    return {
        "kind": "simulate", "N": params.N, "T": est.T, "t_end": traj.T, "burn_in": traj.burn_in,
        "proposals": traj.proposals, "accepted": traj.accepted, "n_pairs": int(p.size),
        "rms_vs_k0": float(np.sqrt(np.mean(diff ** 2))),
        "mean_stderr": float(np.mean(est.stderr[p, q])),
    }


def _grid_and_bias(cfg, params):
    from .kernel_pde import TriangleGrid, as_bias
    grid = TriangleGrid(int(cfg["grid"]["M"]))
    h = bias_callable(cfg, params)
    if h is None:
        return grid, as_bias(None, grid, cfg["bias"]["eps"])
    if cfg["bias"]["form"] == "basis":
        from .basis import SineBasis
        basis = SineBasis(len(cfg["bias"]["coeffs"]))
        return grid, basis.bias(cfg["bias"]["coeffs"], grid, cfg["bias"]["eps"])
    return grid, as_bias(grid.sample(h), grid, cfg["bias"]["eps"])


def run_pde(cfg, out: Path, threads=1) -> dict:
    from .kernel_pde import (ContractionError, k0_grid, k_from_g, solve_euler_lagrange,
                             solve_main_equation)
    params = _params(cfg)
    profile = steady_profile(params)
    grid, h = _grid_and_bias(cfg, params)
    tol, it = float(cfg["tolerances"]["tol"]), int(cfg["tolerances"]["max_iter"])
    try:
        g, rep_g = solve_main_equation(h, profile, grid, tol, it)
        k_el, rep_k = solve_euler_lagrange(h, profile, grid, tol, it)
    except ContractionError as exc:
        return {"kind": "pde", "error": str(exc), "history": list(map(float, exc.history))}
    sig = profile.sigma(grid.x)
    k = k_from_g(g, sig, grid)
    k0 = k0_grid(grid, profile.rho_prime)
    rows = [(grid.x[a], grid.x[b], k[a, b], k0[a, b], g[a, b])
            for a, b in zip(grid.ua, grid.ub)]
    write_csv(out / "kernel.csv", ["x", "y", "k_h", "k0", "g_h"], rows,
              "correlation kernel k_h on the triangle with the closed-form k0")
    return {
        "kind": "pde", "M": grid.M, "h": h.as_dict(),
        "main_equation": rep_g.as_dict(), "euler_lagrange": rep_k.as_dict(),
        "max_abs_k_minus_k0": float(np.max(np.abs(k - k0))),
        "max_abs_el_minus_main": float(np.max(np.abs(k_el - k))),
    }


def run_rate(cfg, out: Path, threads=1) -> dict:
    from .basis import SineBasis
    from .kernel_pde import solve_euler_lagrange
    from .rates import rate_sup
    params = _params(cfg)
    profile = steady_profile(params)
    grid, h = _grid_and_bias(cfg, params)
    tol, it = float(cfg["tolerances"]["tol"]), int(cfg["tolerances"]["max_iter"])
    k, rep = solve_euler_lagrange(h, profile, grid, tol, it)
    P = len(cfg["bias"]["coeffs"]) or int(cfg["bias"]["P"])
    rr = rate_sup(k, SineBasis(P), profile, grid, cfg["bias"]["eps"])
    if cfg["bias"]["form"] == "basis":
        truth = list(cfg["bias"]["coeffs"])
    else:
        truth = [float("nan")] * P
    rows = [(m, c, t) for m, (c, t) in enumerate(zip(rr.coeffs, truth))]
    write_csv(out / "coefficients.csv", ["mode", "recovered", "input"], rows,
              "rate-function maximiser coefficients in the sine basis")
    return {"kind": "rate", "euler_lagrange": rep.as_dict(), "rate": rr.as_dict()}


def run_dv(cfg, out: Path, threads=1) -> dict:
    from .dynamics import MeasureVector, build_generator
    from .rates import dv_edge_sum, dv_reversible, dv_variational, product_measure
    from .rng import stream
    params = _params(cfg)
    gen = build_generator(params)
    if cfg["dv"]["measure"] == "product":
        mu = product_measure(params)
    else:
        w = stream(cfg["seed"], 0).dirichlet(np.ones(gen.n_states))
        mu = MeasureVector(w, params)
    var = dv_variational(mu, gen, restarts=int(cfg["dv"]["restarts"]), seed=int(cfg["seed"]))
    rep = {"kind": "dv", "N": params.N, "reversible": params.reversible, "variational": var,
           "edge_sum": dv_edge_sum(mu, params) if params.reversible else None}
    rows = [("variational", var)]
    if params.reversible:
        df = dv_reversible(mu, params)
        rep["dirichlet_form"] = df
        rep["abs_difference"] = abs(var - df)
        rows.append(("dirichlet_form", df))
    write_csv(out / "dv.csv", ["method", "value"], rows, "Donsker-Varadhan rate of a measure")
    return rep


def run_entropy(cfg, out: Path, threads=1) -> dict:
    from .entropy import default_times, fit_plateau_power, plateau_scan, write_series_csv
    params = _params(cfg)
    e = cfg["entropy"]
    rp = steady_profile(params).rho_prime
    mid = 0.5 * (params.rho_minus + params.rho_plus)
    series = plateau_scan(tuple(e["Ns"]), rp, mid, default_times(float(e["t_max"]), int(e["n_times"])))
    write_series_csv(out / "entropy.csv", series)
    summ = [s.summary() for s in series]
    rep = {"kind": "entropy", "series": summ}
    for ref in ("zero", "g0"):
        pl = [s.plateau for s in series if s.reference == ref]
        if len(pl) > 1:
            rep[f"plateau_slope_{ref}"] = fit_plateau_power(e["Ns"], pl)
    return rep


def run_measure(cfg, out: Path, threads=1) -> dict:
    from .measures import (GaussianMeasureSpec, correlation_table, exact_gaussian_measure,
                           rms_correlation, write_correlation_csv)
    m = cfg["measure"]
    amp = float(m["amplitude"])
    g = lambda x, y: -amp * np.cos(np.pi * x / 2) * np.cos(np.pi * y / 2)
    base = _params(cfg)
    rows = {n: [] for n in m["n"]}
    per_N = []
    for N in m["Ns"]:
        params = Params(int(N), base.rho_minus, base.rho_plus)
        prof = steady_profile(params)
        spec = GaussianMeasureSpec(g, prof)
        mv = exact_gaussian_measure(spec)
        entry = {"N": int(N), "log_partition": spec.log_partition, "sup_norm": spec.sup_norm,
                 "partition_bound_holds": bool(spec.log_partition <= spec.sup_norm)}
        for n in m["n"]:
            if n <= params.n_sites:
                rows[n] += correlation_table(mv, n, prof, f"exact N={N}")
                entry[f"rms_{n}"] = rms_correlation(mv, n, prof)
        per_N.append(entry)
    for n, r in rows.items():
        write_correlation_csv(out / f"correlation_{n}.csv", r, n)
    rep = {"kind": "measure", "amplitude": amp, "per_N": per_N}
    for n in m["n"]:
        pts = [(e["N"], e[f"rms_{n}"]) for e in per_N if e.get(f"rms_{n}", 0) > 1e-14]
        if len(pts) > 1:
            x, y = np.log(np.array(pts)).T
            rep[f"slope_{n}"] = float(np.polyfit(x, y, 1)[0])
    return rep


RUNNERS = {"simulate": run_simulate, "pde": run_pde, "rate": run_rate, "dv": run_dv,
           "entropy": run_entropy, "measure": run_measure}


# ---------------------------------------------------------------------------
# entry point


def _versions():
    import numba
    import scipy
    return {"artifact": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def run(kind: str, config=None, seed=None, out=".", threads=1) -> dict:
    """Run one experiment and write its artifacts; returns the report."""
    if kind not in RUNNERS:
        raise ConfigError(f"kind: must be one of {', '.join(KINDS)}")
    cfg = load_config(config, kind, seed)
    if threads is not None and threads > 1:
        import numba
        numba.set_num_threads(min(int(threads), numba.config.NUMBA_NUM_THREADS))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report = RUNNERS[kind](cfg, out, threads)
    wall = time.perf_counter() - t0
    report["config"] = cfg
    write_json(out / "report.json", report)
    write_json(out / "manifest.json", {
        "kind": kind, "config_hash": config_hash(cfg, kind), "seed": cfg["seed"],
        "versions": _versions(), "wall_time_s": wall, "threads": threads,
        "files": sorted(p.name for p in out.iterdir() if p.name != "manifest.json"),
    })
    return report


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="artifact", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run the {kind} experiment")
        sp.add_argument("--config", type=Path, default=None, help="TOML configuration file")
        sp.add_argument("--seed", type=int, default=None, help="unsigned 64-bit master seed")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="worker threads")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = run(args.kind, args.config, args.seed, args.out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if "error" in report:
        print(json_text({"error": report["error"]}), file=sys.stderr, end="")
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
