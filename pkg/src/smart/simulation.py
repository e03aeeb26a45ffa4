"""Synthetic source/target data, experiment sweeps and the error metric."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from smart.linalg import as_matrix, qr_orthonormalize

MODELS = {"I": (100, 50), "II": (150, 100), "III": (300, 200)}
EXPERIMENTS = ("vary_n", "vary_rhat", "vary_rs", "vary_sigma0")
METHODS = ("smart_fixed", "smart_auto", "ridge_target", "ols_target", "lasso_target", "rrr_target")


@dataclass(frozen=True)
class DgpConfig:
    p: int = 100
    q: int = 50
    n: int = 200
    r: int = 5
    r0: int = 10
    sigma: float = 0.5
    sigma0: float = 0.01
    source_sv: tuple = (1.0, 10.0)
    target_sv: tuple = (3.0, 5.0)
    ar_coef: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.r <= self.r0 <= min(self.p, self.q):
            raise ValueError("need 1 <= r <= r0 <= min(p, q)")
        if self.sigma < 0 or self.sigma0 < 0:
            raise ValueError("noise levels must be nonnegative")
        if not -1.0 < self.ar_coef < 1.0:
            raise ValueError("ar_coef must lie in (-1, 1)")
        if self.n < 1:
            raise ValueError("n must be positive")


@dataclass
class SimInstance:
    X: np.ndarray
    Y: np.ndarray
    C_star: np.ndarray
    C0_clean: np.ndarray
    C0_tilde: np.ndarray
    U0: np.ndarray
    V0: np.ndarray
    D0: np.ndarray
    U_star: np.ndarray
    V_star: np.ndarray
    D_star: np.ndarray
    selected_columns_u: np.ndarray
    selected_columns_v: np.ndarray


def _streams(seed):
    """Independent generators for the four DGP steps."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def descending_linspace(lo: float, hi: float, k: int) -> np.ndarray:
    # a single point takes the upper endpoint
    if k == 1:
        return np.array([float(hi)])
    return np.linspace(hi, lo, k)


def gen_source(cfg: DgpConfig, rng: Optional[np.random.Generator] = None):
    """Returns (C0_clean, C0_tilde, U0, V0, D0)."""
    rng = rng if rng is not None else _streams(cfg.seed)[0]
    U0 = qr_orthonormalize(rng.standard_normal((cfg.p, cfg.r0)))
    V0 = qr_orthonormalize(rng.standard_normal((cfg.q, cfg.r0)))
    D0 = descending_linspace(*cfg.source_sv, cfg.r0)
    C0 = (U0 * D0) @ V0.T
    E0 = rng.standard_normal((cfg.p, cfg.q))
    C0_tilde = C0 + cfg.sigma0 * E0 if cfg.sigma0 > 0 else C0.copy()
    return C0, C0_tilde, U0, V0, D0


def toeplitz_ar1(p: int, coef: float = 0.5) -> np.ndarray:
    idx = np.arange(p)
    return coef ** np.abs(idx[:, None] - idx[None, :])


def gen_features(cfg: DgpConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Rows from N(0, Sigma) with Sigma_ij = a^|i-j|, via the stationary AR(1) recursion."""
    rng = rng if rng is not None else _streams(cfg.seed)[1]
    Z = rng.standard_normal((cfg.n, cfg.p))
    a = cfg.ar_coef
    s = np.sqrt(1.0 - a * a)
    X = np.empty_like(Z)
    X[:, 0] = Z[:, 0]
    for j in range(1, cfg.p):
        X[:, j] = a * X[:, j - 1] + s * Z[:, j]
    return X


def gen_target(cfg: DgpConfig, U0, V0, rng: Optional[np.random.Generator] = None):
    """Returns (C_star, U_star, D_star, V_star, cols_u, cols_v)."""
    rng = rng if rng is not None else _streams(cfg.seed)[2]
    cols_u = rng.choice(U0.shape[1], size=cfg.r, replace=False)
    cols_v = rng.choice(V0.shape[1], size=cfg.r, replace=False)
    U_star = U0[:, cols_u]
    V_star = V0[:, cols_v]
    D_star = descending_linspace(*cfg.target_sv, cfg.r)
    return (U_star * D_star) @ V_star.T, U_star, D_star, V_star, cols_u, cols_v


def gen_response(cfg: DgpConfig, X, C_star, rng: Optional[np.random.Generator] = None):
    rng = rng if rng is not None else _streams(cfg.seed)[3]
    E = rng.standard_normal((X.shape[0], C_star.shape[1]))
    Y = X @ C_star
    if cfg.sigma > 0:
        Y = Y + cfg.sigma * E
    return Y


def simulate(cfg: DgpConfig, seed=None) -> SimInstance:
    """Draw a full instance; `seed` (int or SeedSequence) overrides ``cfg.seed``."""
    g_src, g_x, g_tgt, g_y = _streams(cfg.seed if seed is None else seed)
    C0, C0_tilde, U0, V0, D0 = gen_source(cfg, g_src)
    X = gen_features(cfg, g_x)
    C_star, U_star, D_star, V_star, cu, cv = gen_target(cfg, U0, V0, g_tgt)
    Y = gen_response(cfg, X, C_star, g_y)
    return SimInstance(X, Y, C_star, C0, C0_tilde, U0, V0, D0, U_star, V_star, D_star, cu, cv)


def norm_frob_error(C_hat, C_star) -> float:
    C_hat = as_matrix(C_hat)
    C_star = as_matrix(C_star)
    if C_hat.shape != C_star.shape:
        raise ValueError(f"shape mismatch {C_hat.shape} vs {C_star.shape}")
    return float(np.linalg.norm(C_hat - C_star) / np.sqrt(C_star.size))


# ------------------------------------------------------------ experiments

DEFAULT_SWEEPS = {
    "vary_n": (100, 200, 400),
    "vary_rhat": (3, 5, 7),
    "vary_rs": (5, 10, 15),
    "vary_sigma0": (0.01, 0.1, 1.0, 5.0),
}
SWEEP_NAMES = {"vary_n": "n", "vary_rhat": "r_hat", "vary_rs": "r_s", "vary_sigma0": "sigma0"}
# sweeps that change the data rather than only the fitted hyperparameters
DATA_SWEEPS = ("vary_n", "vary_sigma0")
TARGET_ONLY = ("ridge_target", "ols_target", "lasso_target", "rrr_target")


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep of the simulation study.

    `cv_rs` lists the paired truncation levels (r_s, r_s) tried by smart_auto;
    ``"full"`` stands for (p, q), i.e. no source penalty at all.
    """

    model: str = "I"
    experiment: str = "vary_n"
    sweep: Optional[tuple] = None
    replications: int = 20
    seed: int = 0
    n: int = 200
    r_hat: int = 5
    r_u: int = 10
    r_v: int = 10
    sigma0: float = 0.01
    r0: int = 10
    r: int = 5
    sigma: float = 0.5
    lambda_multipliers: tuple = (4.0, 2.0, 1.0, 0.5)
    cv_rs: tuple = (10, 20, "full")
    k_folds: int = 5

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {sorted(MODELS)}, got {self.model!r}")
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        sweep = DEFAULT_SWEEPS[self.experiment] if self.sweep is None else tuple(self.sweep)
        if not sweep:
            raise ValueError("sweep must be non-empty")
        object.__setattr__(self, "sweep", sweep)
        object.__setattr__(self, "lambda_multipliers", tuple(self.lambda_multipliers))
        object.__setattr__(self, "cv_rs", tuple(self.cv_rs))
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        for v in self.cv_rs:
            if v != "full" and (not isinstance(v, (int, np.integer)) or v < 0):
                raise ValueError(f"cv_rs entries must be counts or 'full', got {v!r}")

    @property
    def sweep_name(self) -> str:
        return SWEEP_NAMES[self.experiment]

    @property
    def pq(self):
        return MODELS[self.model]

    def setting(self, value) -> dict:
        """Data and method settings at one sweep value."""
        s = dict(n=self.n, r_hat=self.r_hat, r_u=self.r_u, r_v=self.r_v, sigma0=self.sigma0)
        if self.experiment == "vary_n":
            s["n"] = int(value)
        elif self.experiment == "vary_rhat":
            s["r_hat"] = int(value)
        elif self.experiment == "vary_rs":
            s["r_u"] = s["r_v"] = int(value)
        else:
            s["sigma0"] = float(value)
        return s

    def dgp(self, value) -> DgpConfig:
        p, q = self.pq
        s = self.setting(value)
        return DgpConfig(p=p, q=q, n=s["n"], r=self.r, r0=self.r0, sigma=self.sigma,
                         sigma0=s["sigma0"])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResultRow:
    method: str
    sweep_name: str
    sweep_value: float
    replicate: int
    seed: int
    error: float
    seconds: Optional[float]
    hyperparams: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return not np.isfinite(self.error)


def replicate_seed(master: int, sweep_index: int, rep: int) -> int:
    """Integer seed of the (sweep index, replicate) child stream of `master`."""
    ss = np.random.SeedSequence(master, spawn_key=(sweep_index, rep))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def data_checksum(X, Y) -> str:
    import hashlib
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X).tobytes())
    h.update(np.ascontiguousarray(Y).tobytes())
    return h.hexdigest()[:16]


def _truncation_grid(expt: ExperimentConfig, p, q):
    ru = tuple(p if v == "full" else int(v) for v in expt.cv_rs)
    rv = tuple(q if v == "full" else int(v) for v in expt.cv_rs)
    return ru, rv


def fit_method(method: str, inst: SimInstance, setting: dict, expt: ExperimentConfig,
               solver_cfg=None):
    """Fit one method on one instance; returns (C_hat, hyperparams)."""
    from smart import initializers as ini
    from smart import model_select as ms
    from smart.solver import SolverConfig

    cfg = solver_cfg if solver_cfg is not None else SolverConfig()
    X, Y = inst.X, inst.Y
    p, q = X.shape[1], Y.shape[1]
    if method == "ridge_target":
        C, lam = ini.ridge_gcv(X, Y)
        return C, {"lambda0": lam}
    if method == "ols_target":
        return ini.ols_fit(X, Y), {}
    if method == "lasso_target":
        lam = ini.default_lasso_lambda(X, Y)
        return ini.lasso_fit(X, Y, lam), {"lambda0": lam}
    if method == "rrr_target":
        r = min(setting["r_hat"], p, q)
        return ini.warm_start(ini.ols_fit(X, Y), r).product(), {"r_hat": r}
    lam = ms.default_lambda_grid(X, Y, expt.lambda_multipliers)
    if method == "smart_fixed":
        grid = ms.SelectionGrid(lam, lam, tie_lambdas=True)
        r = min(setting["r_hat"], p, q)
        r_u, r_v = min(setting["r_u"], p), min(setting["r_v"], q)
        sel = ms.select_lambda_path(X, Y, inst.C0_tilde, r, r_u, r_v, grid, cfg)
        fit = sel.fit
        hp = {"r_hat": r, "r_u": r_u, "r_v": r_v}
    elif method == "smart_auto":
        ru, rv = _truncation_grid(expt, p, q)
        grid = ms.SelectionGrid(lam, lam, ru, rv, k_folds=expt.k_folds, seed=0,
                                tie_lambdas=True, pair_truncations=True)
        res = ms.auto_fit(X, Y, inst.C0_tilde, grid, cfg)
        fit = res.fit
        hp = {"r_hat": res.rank, "r_u": res.r_u, "r_v": res.r_v}
    else:
        raise ValueError(f"unknown method {method!r}")
    hp.update(lambda_u=fit.lambda_u, lambda_v=fit.lambda_v, converged=fit.converged,
              iterations=fit.iterations, primal=fit.primal_residual,
              stationarity=fit.stationarity_residual, orth=fit.orthogonality_error())
    return fit.C_hat, hp


def _invariant(method: str, experiment: str) -> bool:
    """Whether the method's output ignores the sweep variable of a non-data sweep."""
    if experiment in DATA_SWEEPS:
        return False
    if method == "smart_auto" or method == "ridge_target" or method == "ols_target" \
            or method == "lasso_target":
        return True
    return method == "rrr_target" and experiment == "vary_rs"


def _run_group(task, expt: ExperimentConfig, methods, timing: bool, solver_cfg):
    """All rows for one replicate of one data setting (one or several sweep values)."""
    sweep_idx, rep, values = task
    seed = replicate_seed(expt.seed, sweep_idx, rep)
    inst = simulate(expt.dgp(values[0]), seed=seed)
    checksum = data_checksum(inst.X, inst.Y)
    cache = {}
    rows = []
    for v in values:
        setting = expt.setting(v)
        for m in methods:
            if m in cache and _invariant(m, expt.experiment):
                err, secs, hp = cache[m]
            else:
                t0 = time.perf_counter()
                try:
                    C_hat, hp = fit_method(m, inst, setting, expt, solver_cfg)
                    err = norm_frob_error(C_hat, inst.C_star)
                except Exception as exc:  # recorded, the sweep goes on
                    err, hp = float("nan"), {"failure": f"{type(exc).__name__}: {exc}"}
                secs = time.perf_counter() - t0 if timing else None
                cache[m] = (err, secs, hp)
            hp = dict(hp, data=checksum)
            rows.append(ResultRow(m, expt.sweep_name, v, rep, seed, err, secs, hp))
    return rows


def run_experiment(expt: ExperimentConfig, methods: Sequence[str] = METHODS, jobs: int = 1,
                   timing: bool = False, solver_cfg=None) -> list:
    """Run every method on every (sweep value, replicate) instance.

    Rows come out sweep-major, replicate-minor, methods in the given order,
    whatever `jobs` is. For sweeps that only change fitted hyperparameters
    (r_hat, r_s) every sweep value reuses the replicate's data, so paired
    comparisons across the sweep are possible. Wall times are recorded only
    with ``timing=True`` since they would break byte-for-byte reproducibility.
    """
    from smart._pool import ordered_map
    from functools import partial

    methods = list(methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
    if expt.experiment in DATA_SWEEPS:
        tasks = [(i, rep, (v,)) for i, v in enumerate(expt.sweep)
                 for rep in range(expt.replications)]
    else:
        tasks = [(0, rep, expt.sweep) for rep in range(expt.replications)]
    groups = ordered_map(partial(_run_group, expt=expt, methods=methods, timing=timing,
                                 solver_cfg=solver_cfg), tasks, jobs)
    rows = [row for g in groups for row in g]
    index = {v: i for i, v in enumerate(expt.sweep)}
    mpos = {m: i for i, m in enumerate(methods)}
    rows.sort(key=lambda r: (index[r.sweep_value], r.replicate, mpos[r.method]))
    return rows
