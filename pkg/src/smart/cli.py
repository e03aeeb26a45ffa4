"""``smart`` command line: simulate, fit, evaluate and diagnose.

Every option can also come from ``--config FILE`` (a JSON object whose keys
are the option names with dashes replaced by underscores); flags given on
the command line win. A simulate manifest is itself a valid config file.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from smart import __version__
from smart import io as sio

EXIT_USAGE = 2
EXIT_DATA = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parsing

def _csv_list(item):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return [item(v) for v in text]
        return [item(v.strip()) for v in str(text).split(",") if v.strip()]
    return parse


def _level(v):
    if isinstance(v, str) and v.strip().lower() == "full":
        return "full"
    return int(v)


def _number(v):
    if isinstance(v, (int, float)):
        return v
    try:
        return int(v)
    except ValueError:
        return float(v)


SOLVER_DEFAULTS = {"rho0": 1.0, "gamma_rho": 1.05, "t_max": 500, "eps": 1e-4}

DEFAULTS = {
    "simulate": dict(model="I", experiment="vary_n", sweep=None, reps=20, seed=None, n=200,
                     r_hat=5, ru=10, rv=10, sigma0=0.01, r0=10, r=5, sigma=0.5,
                     lambda_multipliers=[4.0, 2.0, 1.0, 0.5], cv_rs=[10, 20, "full"], folds=5,
                     methods=None, timing=False, dump_instance=False, **SOLVER_DEFAULTS),
    "fit": dict(X=None, Y=None, source=None, rank=None, ru=None, rv=None, lambda_u=None,
                lambda_v=None, lambda_multipliers=[4.0, 2.0, 1.0, 0.5],
                cv_ru=[10, 20, "full"], cv_rv=[10, 20, "full"], cv_product=False, folds=5,
                cv_seed=0, **SOLVER_DEFAULTS),
    "evaluate": dict(model_dir=None, coef=None, X_test=None, Y_test=None),
    "diagnose": dict(truth=None, model="I", seed=None, n=200, r=5, r0=10, sigma=0.5,
                     sigma0=0.01, ru=10, rv=10, tau=0.5, tol=1e-8, delta=0.05, max_level=None),
}

# parsers applied to config-file values, matching the flag types
COERCE = {
    "sweep": _csv_list(_number), "lambda_multipliers": _csv_list(float),
    "cv_rs": _csv_list(_level), "cv_ru": _csv_list(_level), "cv_rv": _csv_list(_level),
    "lambda_u": _csv_list(float), "lambda_v": _csv_list(float), "methods": _csv_list(str),
    "reps": int, "seed": int, "n": int, "r_hat": int, "ru": int, "rv": int, "r0": int, "r": int,
    "folds": int, "rank": int, "cv_seed": int, "t_max": int, "max_level": int,
    "sigma0": float, "sigma": float, "rho0": float, "gamma_rho": float, "eps": float,
    "tau": float, "tol": float, "delta": float,
}


def _add_solver(p):
    g = p.add_argument_group("solver")
    g.add_argument("--rho0", type=float, help="initial ADMM penalty (default 1.0)")
    g.add_argument("--gamma-rho", dest="gamma_rho", type=float, help="penalty growth (default 1.05)")
    g.add_argument("--t-max", dest="t_max", type=int, help="max ADMM iterations (default 500)")
    g.add_argument("--eps", type=float, help="residual tolerance (default 1e-4)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smart", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"smart {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", default=S, help="JSON config file (flags override it)")
        p.add_argument("--out", default=S, help="output directory")
        p.add_argument("--jobs", type=int, default=S,
                       help="worker processes (default $SMART_JOBS or 1)")

    p = sub.add_parser("simulate", argument_default=S, help="run a simulation sweep")
    common(p)
    p.add_argument("--model", choices=["I", "II", "III"])
    p.add_argument("--experiment", choices=["vary_n", "vary_rhat", "vary_rs", "vary_sigma0"])
    p.add_argument("--sweep", type=_csv_list(_number), help="comma list of sweep values")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int, help="master seed (required)")
    p.add_argument("--n", type=int)
    p.add_argument("--r-hat", dest="r_hat", type=int)
    p.add_argument("--ru", type=int)
    p.add_argument("--rv", type=int)
    p.add_argument("--sigma0", type=float)
    p.add_argument("--r0", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--lambda-multipliers", dest="lambda_multipliers", type=_csv_list(float))
    p.add_argument("--cv-rs", dest="cv_rs", type=_csv_list(_level))
    p.add_argument("--folds", type=int)
    p.add_argument("--methods", type=_csv_list(str))
    p.add_argument("--timing", action="store_true", help="record wall times (not reproducible)")
    p.add_argument("--dump-instance", dest="dump_instance", action="store_true",
                   help="also write the first replicate's matrices")
    _add_solver(p)

    p = sub.add_parser("fit", argument_default=S, help="fit SMART to CSV data")
    common(p)
    p.add_argument("--X")
    p.add_argument("--Y")
    p.add_argument("--source", help="source coefficient matrix CSV (p x q)")
    p.add_argument("--rank", type=int)
    p.add_argument("--ru", type=int)
    p.add_argument("--rv", type=int)
    p.add_argument("--lambda-u", dest="lambda_u", type=_csv_list(float))
    p.add_argument("--lambda-v", dest="lambda_v", type=_csv_list(float))
    p.add_argument("--lambda-multipliers", dest="lambda_multipliers", type=_csv_list(float))
    p.add_argument("--cv-ru", dest="cv_ru", type=_csv_list(_level))
    p.add_argument("--cv-rv", dest="cv_rv", type=_csv_list(_level))
    p.add_argument("--cv-product", dest="cv_product", action="store_true",
                   help="try every (r_u, r_v) combination instead of pairing the lists")
    p.add_argument("--folds", type=int)
    p.add_argument("--cv-seed", dest="cv_seed", type=int)
    _add_solver(p)

    p = sub.add_parser("evaluate", argument_default=S, help="normalized test prediction error")
    common(p)
    p.add_argument("--model-dir", dest="model_dir", help="directory holding U.csv, D.csv, V.csv")
    p.add_argument("--coef", help="coefficient matrix CSV instead of factors")
    p.add_argument("--X-test", dest="X_test")
    p.add_argument("--Y-test", dest="Y_test")

    p = sub.add_parser("diagnose", argument_default=S, help="spectral diagnostics from ground truth")
    common(p)
    p.add_argument("--truth", help="directory with C_star.csv, C0_clean.csv, C0_tilde.csv")
    p.add_argument("--model", choices=["I", "II", "III"])
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--r0", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--sigma0", type=float)
    p.add_argument("--ru", type=int)
    p.add_argument("--rv", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--max-level", dest="max_level", type=int)
    return ap


def resolve(ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = ns.command
    flags = {k: v for k, v in vars(ns).items() if k != "command"}
    cfg = dict(DEFAULTS[cmd])
    if "config" in flags:
        path = Path(flags.pop("config"))
        if not path.is_file():
            raise UsageError(f"--config: no such file {path}")
        data = sio.read_json(path)
        if not isinstance(data, dict):
            raise UsageError("--config: expected a JSON object")
        data = data.get("config", data)
        for k, v in data.items():
            if k in ("command", "subcommand"):
                if v != cmd:
                    raise UsageError(f"config is for {v!r}, not {cmd!r}")
                continue
            if k not in cfg and k not in ("jobs", "out"):
                raise UsageError(f"config: unknown field {k!r} for {cmd}")
            try:
                cfg[k] = COERCE[k](v) if (k in COERCE and v is not None) else v
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config: bad value for {k!r}: {exc}") from exc
    cfg.update(flags)
    if "out" not in cfg:
        raise UsageError("--out is required")
    if "jobs" not in cfg:
        env = os.environ.get("SMART_JOBS", "1")
        try:
            cfg["jobs"] = int(env)
        except ValueError:
            raise UsageError(f"SMART_JOBS must be an integer, got {env!r}")
    return cfg


def _echo(cfg: dict, cmd: str) -> dict:
    """The reproducibility-relevant part of a resolved config."""
    out = {k: v for k, v in cfg.items() if k not in ("jobs", "out")}
    out["command"] = cmd
    return out


def _solver(cfg):
    from smart.solver import SolverConfig
    try:
        return SolverConfig(rho0=cfg["rho0"], gamma_rho=cfg["gamma_rho"], t_max=cfg["t_max"],
                            eps=cfg["eps"])
    except ValueError as exc:
        raise UsageError(f"solver: {exc}") from exc


def _need_file(cfg, key, flag):
    v = cfg.get(key)
    if v is None:
        raise UsageError(f"{flag} is required")
    if not Path(v).is_file():
        raise UsageError(f"{flag}: no such file {v}")
    return Path(v)


# ------------------------------------------------------------- commands

def cmd_simulate(cfg: dict) -> Path:
    from smart import simulation as sim
    if cfg.get("seed") is None:
        raise UsageError("--seed is required for simulate")
    kw = dict(model=cfg["model"], experiment=cfg["experiment"], replications=cfg["reps"],
              seed=cfg["seed"], n=cfg["n"], r_hat=cfg["r_hat"], r_u=cfg["ru"], r_v=cfg["rv"],
              sigma0=cfg["sigma0"], r0=cfg["r0"], r=cfg["r"], sigma=cfg["sigma"],
              lambda_multipliers=tuple(cfg["lambda_multipliers"]), cv_rs=tuple(cfg["cv_rs"]),
              k_folds=cfg["folds"])
    if cfg.get("sweep") is not None:
        cast = float if cfg["experiment"] == "vary_sigma0" else int
        kw["sweep"] = tuple(cast(v) for v in cfg["sweep"])
    try:
        expt = sim.ExperimentConfig(**kw)
        expt.dgp(expt.sweep[0])
    except ValueError as exc:
        raise UsageError(f"simulate config: {exc}") from exc
    methods = cfg["methods"] if cfg.get("methods") else list(sim.METHODS)
    bad = [m for m in methods if m not in sim.METHODS]
    if bad:
        raise UsageError(f"methods: unknown {bad}; choose from {list(sim.METHODS)}")

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = sim.run_experiment(expt, methods, jobs=cfg["jobs"], timing=bool(cfg["timing"]),
                              solver_cfg=_solver(cfg))
    sio.write_results(out / "results.csv", rows)

    summary = {}
    for m in methods:
        mine = [r for r in rows if r.method == m]
        errs = [r.error for r in mine if not r.failed]
        secs = [r.seconds for r in mine if r.seconds is not None]
        summary[m] = {"rows": len(mine), "failures": len(mine) - len(errs),
                      "mean_error": float(np.mean(errs)) if errs else None,
                      "total_seconds": float(np.sum(secs)) if secs else None}
    outputs = {"results": "results.csv"}
    if cfg["dump_instance"]:
        inst = sim.simulate(expt.dgp(expt.sweep[0]), seed=sim.replicate_seed(expt.seed, 0, 0))
        d = out / "instance"
        d.mkdir(exist_ok=True)
        for name in ("X", "Y", "C_star", "C0_clean", "C0_tilde"):
            sio.write_matrix(d / f"{name}.csv", getattr(inst, name))
        outputs["instance"] = "instance"
    manifest = {"artifact": "smart", "version": __version__, "config": _echo(cfg, "simulate"),
                "experiment": expt.to_dict(), "seed": expt.seed, "rows": len(rows),
                "methods": summary, "outputs": outputs}
    sio.write_json(out / "manifest.json", manifest)
    return out / "results.csv"


def _check_shapes(X, Y, C0):
    if X.shape[0] != Y.shape[0]:
        raise sio.DataError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]} "
                            f"(X {X.shape}, Y {Y.shape})")
    if C0 is not None and C0.shape != (X.shape[1], Y.shape[1]):
        raise sio.DataError(f"source matrix {C0.shape} does not match "
                            f"X {X.shape} and Y {Y.shape}: expected ({X.shape[1]}, {Y.shape[1]})")


def cmd_fit(cfg: dict) -> Path:
    from smart import model_select as ms
    X = sio.read_matrix(_need_file(cfg, "X", "--X"))
    Y = sio.read_matrix(_need_file(cfg, "Y", "--Y"))
    C0 = sio.read_matrix(_need_file(cfg, "source", "--source"))
    _check_shapes(X, Y, C0)
    n, p = X.shape
    q = Y.shape[1]
    solver = _solver(cfg)

    lu, lv = cfg.get("lambda_u"), cfg.get("lambda_v")
    tie = lu is None and lv is None
    if tie:
        lu = lv = list(ms.default_lambda_grid(X, Y, tuple(cfg["lambda_multipliers"])))
    else:
        lu = lu if lu is not None else lv
        lv = lv if lv is not None else lu
    ru_grid = [p if v == "full" else v for v in cfg["cv_ru"]]
    rv_grid = [q if v == "full" else v for v in cfg["cv_rv"]]
    try:
        grid = ms.SelectionGrid(tuple(lu), tuple(lv), tuple(ru_grid), tuple(rv_grid),
                                k_folds=cfg["folds"], seed=cfg["cv_seed"], tie_lambdas=tie,
                                pair_truncations=not cfg["cv_product"])
    except ValueError as exc:
        raise UsageError(f"selection grid: {exc}") from exc
    for key, lim in (("rank", min(p, q)), ("ru", p), ("rv", q)):
        v = cfg.get(key)
        if v is not None and not (0 if key != "rank" else 1) <= v <= lim:
            raise UsageError(f"--{key}={v} outside its range for p={p}, q={q}")
    if (cfg.get("ru") is None or cfg.get("rv") is None) and grid.k_folds > n:
        raise UsageError(f"--folds={grid.k_folds} exceeds the number of samples {n}")

    res = ms.auto_fit(X, Y, C0, grid, solver, rank=cfg.get("rank"), r_u=cfg.get("ru"),
                      r_v=cfg.get("rv"), jobs=cfg["jobs"])
    fit = res.fit
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    f = fit.factors
    sio.write_matrix(out / "U.csv", f.U)
    sio.write_matrix(out / "D.csv", f.D[None, :])
    sio.write_matrix(out / "V.csv", f.V)
    R = X @ fit.C_hat - Y
    report = {
        "version": __version__, "config": _echo(cfg, "fit"),
        "shape": {"n": n, "p": p, "q": q},
        "rank": res.rank, "r_u": res.r_u, "r_v": res.r_v,
        "lambda_u": res.lambda_u, "lambda_v": res.lambda_v,
        "converged": fit.converged, "iterations": fit.iterations,
        "primal_residual": fit.primal_residual,
        "stationarity_residual": fit.stationarity_residual,
        "objective": fit.objective, "orthogonality_error": fit.orthogonality_error(),
        "train_error": float(np.linalg.norm(R) / np.sqrt(R.size)),
        "penalty_free": fit.penalty_free,
        "bic": [{"lambda_u": a, "lambda_v": b, "score": s} for a, b, s in res.bic_scores],
    }
    if res.cv is not None:
        report["cv"] = [{"r_u": a, "r_v": b, "mean_error": m}
                        for (a, b), m in zip(res.cv.pairs, res.cv.mean_errors)]
    if fit.penalty_free:
        report["note"] = ("penalty-free mode: r_u = p and r_v = q leave no source "
                          "complement to penalize")
    sio.write_json(out / "report.json", report)
    return out / "report.json"


def load_coefficients(cfg) -> np.ndarray:
    if cfg.get("coef") is not None:
        return sio.read_matrix(_need_file(cfg, "coef", "--coef"))
    d = cfg.get("model_dir")
    if d is None:
        raise UsageError("one of --model-dir or --coef is required")
    d = Path(d)
    parts = {}
    for name in ("U", "D", "V"):
        f = d / f"{name}.csv"
        if not f.is_file():
            raise UsageError(f"--model-dir: missing {f}")
        parts[name] = sio.read_matrix(f)
    U, D, V = parts["U"], parts["D"].ravel(), parts["V"]
    if U.shape[1] != D.size or V.shape[1] != D.size:
        raise sio.DataError(f"factor shapes disagree: U {U.shape}, D ({D.size},), V {V.shape}")
    return (U * D) @ V.T


def cmd_evaluate(cfg: dict) -> Path:
    Xt = sio.read_matrix(_need_file(cfg, "X_test", "--X-test"))
    Yt = sio.read_matrix(_need_file(cfg, "Y_test", "--Y-test"))
    C = load_coefficients(cfg)
    if Xt.shape[0] != Yt.shape[0] or C.shape != (Xt.shape[1], Yt.shape[1]):
        raise sio.DataError(f"coefficients {C.shape} do not match "
                            f"X_test {Xt.shape} and Y_test {Yt.shape}")
    R = Xt @ C - Yt
    n_test, q = Yt.shape
    metrics = {
        "version": __version__, "config": _echo(cfg, "evaluate"),
        "n_test": n_test, "q": q,
        "test_error": float(np.linalg.norm(R) / np.sqrt(n_test * q)),
        "column_errors": (np.linalg.norm(R, axis=0) / np.sqrt(n_test)).tolist(),
    }
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    sio.write_json(out / "metrics.json", metrics)
    return out / "metrics.json"


def cmd_diagnose(cfg: dict) -> Path:
    from smart import diagnostics as dg
    from smart import simulation as sim
    n = None
    if cfg.get("truth") is not None:
        d = Path(cfg["truth"])
        mats = {}
        for name in ("C_star", "C0_clean", "C0_tilde"):
            f = d / f"{name}.csv"
            if not f.is_file():
                raise UsageError(f"--truth: missing ground-truth file {f}")
            mats[name] = sio.read_matrix(f)
        if (d / "X.csv").is_file():
            n = sio.read_matrix(d / "X.csv").shape[0]
        source = {"truth": str(d)}
    else:
        if cfg.get("seed") is None:
            raise UsageError("diagnose needs --truth DIR or a --seed to simulate from")
        p, q = sim.MODELS[cfg["model"]]
        try:
            dgp = sim.DgpConfig(p=p, q=q, n=cfg["n"], r=cfg["r"], r0=cfg["r0"],
                                sigma=cfg["sigma"], sigma0=cfg["sigma0"])
        except ValueError as exc:
            raise UsageError(f"diagnose config: {exc}") from exc
        inst = sim.simulate(dgp, seed=cfg["seed"])
        mats = {"C_star": inst.C_star, "C0_clean": inst.C0_clean, "C0_tilde": inst.C0_tilde}
        n = dgp.n
        source = {"simulated": asdict(dgp) | {"seed": cfg["seed"]}}
    p, q = mats["C_star"].shape
    for name in ("C0_clean", "C0_tilde"):
        if mats[name].shape != (p, q):
            raise sio.DataError(f"{name} {mats[name].shape} does not match C_star {(p, q)}")
    if not 0 <= cfg["ru"] <= p or not 0 <= cfg["rv"] <= q:
        raise UsageError(f"--ru/--rv must lie in [0, {p}] and [0, {q}]")
    ml = cfg.get("max_level")
    levels_u = list(range(0, min(p, ml) + 1)) if ml is not None else None
    levels_v = list(range(0, min(q, ml) + 1)) if ml is not None else None
    try:
        diag = dg.spectral_diagnostics(mats["C0_clean"], mats["C0_tilde"], mats["C_star"],
                                       cfg["ru"], cfg["rv"], tau=cfg["tau"], ru_levels=levels_u,
                                       rv_levels=levels_v, tol=cfg["tol"], n=n,
                                       delta=cfg["delta"])
    except ValueError as exc:
        raise sio.DataError(str(exc)) from exc
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    payload = {"version": __version__, "config": _echo(cfg, "diagnose"), "input": source,
               "diagnostics": diag.to_dict()}
    sio.write_json(out / "diagnostics.json", payload)
    return out / "diagnostics.json"


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "evaluate": cmd_evaluate,
            "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[ns.command]
    try:
        cfg = resolve(ns)
        path = COMMANDS[ns.command](cfg)
    except UsageError as exc:
        sub.print_usage(sys.stderr)
        print(f"smart {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except sio.DataError as exc:
        print(f"smart {ns.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
