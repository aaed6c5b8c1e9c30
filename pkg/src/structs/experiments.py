"""Monte Carlo replications, consistency sweeps and breakdown probes."""
from __future__ import annotations

import csv
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import inference
from .errors import HarnessWarning, StructsError
from .estimator import Dataset, SolverConfig, fit_s, with_seed
from .rho import RhoFunction
from .spherical import constants_for, consistency_b0
from .structures import CovarianceStructure

FAILURE_WARN_FRACTION = 0.05

# Budget used by the harness: far fewer starts than a single careful fit,
# enough for clean Gaussian replications.
MC_SOLVER = SolverConfig(n_subsamples=20, n_keep=3)


@dataclass(frozen=True)
class SimConfig:
    X: np.ndarray
    st: CovarianceStructure
    beta0: np.ndarray
    theta0: np.ndarray
    rho: RhoFunction
    n: int = 100
    reps: int = 100
    seed: int = 0
    solver: SolverConfig = MC_SOLVER
    b0: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=float))
        object.__setattr__(self, "beta0", np.asarray(self.beta0, dtype=float))
        object.__setattr__(self, "theta0", np.asarray(self.theta0, dtype=float))
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.X.shape != (self.st.k, self.beta0.size):
            raise ValueError("X must be k x q with q = len(beta0)")
        if not self.st.is_pds(self.theta0):
            raise ValueError("V(theta0) is not positive definite")

    @property
    def xi0(self):
        return np.concatenate([self.beta0, self.theta0])

    def resolved_b0(self):
        return consistency_b0(self.rho, self.st.k) if self.b0 is None else self.b0


@dataclass
class SimResult:
    n: int
    reps: int
    estimates: np.ndarray  # (reps, q+l), NaN rows for failures
    status: list
    empirical_cov: np.ndarray | None
    formula: dict
    relative_deviation: dict
    failures: int
    xi0: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def scaled_deviations(self):
        return np.sqrt(self.n) * (self.estimates - self.xi0)

    def to_dict(self):
        return {
            "n": self.n,
            "reps": self.reps,
            "failures": self.failures,
            "empirical_cov": None if self.empirical_cov is None else self.empirical_cov.tolist(),
            "formula": {k: v.tolist() for k, v in self.formula.items()},
            "relative_deviation": {k: v.tolist() for k, v in self.relative_deviation.items()},
            "warnings": list(self.warnings),
            "estimates": [None if np.isnan(r).any() else r.tolist() for r in self.estimates],
        }

    def write_csv(self, path):
        """One row per replication with the scaled deviations sqrt(n)(xi - xi0)."""
        devs = self.scaled_deviations
        q_l = devs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rep", "status"] + [f"dev{j}" for j in range(q_l)])
            for i, (row, st) in enumerate(zip(devs, self.status)):
                w.writerow([i, st] + [repr(float(x)) for x in row])


def _rep_seed(seed, rep_index):
    return int(np.random.SeedSequence([seed, rep_index]).generate_state(1)[0])


def simulate_dataset(cfg: SimConfig, rep_index) -> Dataset:
    """Gaussian responses y_i = X beta0 + V(theta0)^{1/2} z_i."""
    rng = np.random.default_rng([cfg.seed, rep_index])
    lam, Q = np.linalg.eigh(cfg.st.value(cfg.theta0))
    root = (Q * np.sqrt(lam)) @ Q.T
    z = rng.standard_normal((cfg.n, cfg.st.k))
    y = cfg.X @ cfg.beta0 + z @ root
    return Dataset.common_design(y, cfg.X)


def _one_rep(cfg: SimConfig, rep_index):
    data = simulate_dataset(cfg, rep_index)
    solver = with_seed(cfg.solver, _rep_seed(cfg.seed, rep_index))
    try:
        fit = fit_s(data, cfg.st, cfg.rho, cfg.resolved_b0(), solver)
    except (StructsError, ValueError, np.linalg.LinAlgError) as exc:
        return rep_index, None, type(exc).__name__
    return rep_index, fit.xi, "ok"


def _map_reps(cfg, indices, parallel):
    if parallel and parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            return list(ex.map(_one_rep, [cfg] * len(indices), indices, chunksize=8))
    return [_one_rep(cfg, i) for i in indices]


def formula_covariances(cfg: SimConfig):
    const = constants_for(cfg.rho, cfg.st.k, cfg.resolved_b0())
    Sigma = cfg.st.value(cfg.theta0)
    out = {
        "lgrg_beta": inference.lgrg_beta(Sigma, const, cfg.X),
        "cvf_beta": inference.cvf_beta(Sigma, const, cfg.X),
    }
    if cfg.st.is_linear:
        out["lgrg_theta"] = inference.lgrg_theta(cfg.st, cfg.theta0, const)
        out["cvf_theta"] = inference.cvf_theta(cfg.st, cfg.theta0, const)
    return out


def run_replications(cfg: SimConfig, parallel=None) -> SimResult:
    """Fit cfg.reps simulated datasets; failures are excluded and counted."""
    results = sorted(_map_reps(cfg, list(range(cfg.reps)), parallel), key=lambda r: r[0])
    p = cfg.xi0.size
    est = np.full((cfg.reps, p), np.nan)
    status = []
    for i, xi, st in results:
        status.append(st)
        if xi is not None:
            est[i] = xi
    ok = ~np.isnan(est).any(axis=1)
    failures = int(cfg.reps - ok.sum())
    devs = np.sqrt(cfg.n) * (est[ok] - cfg.xi0)
    emp = np.cov(devs, rowvar=False).reshape(p, p) if devs.shape[0] >= 2 else None

    formula = formula_covariances(cfg)
    q = cfg.beta0.size
    rel = {}
    if emp is not None:
        for name, F in formula.items():
            block = emp[:q, :q] if name.endswith("beta") else emp[q:, q:]
            rel[name] = np.diag(block) / np.diag(F) - 1.0
    notes = []
    if failures > FAILURE_WARN_FRACTION * cfg.reps:
        msg = f"{failures} of {cfg.reps} replications failed"
        warnings.warn(msg, HarnessWarning, stacklevel=2)
        notes.append(msg)
    return SimResult(cfg.n, cfg.reps, est, status, emp, formula, rel, failures, cfg.xi0, notes)


def jackknife_cov_se(devs, groups=20):
    """Delete-a-group jackknife standard errors of the covariance entries."""
    devs = np.asarray(devs, dtype=float)
    parts = np.array_split(np.arange(devs.shape[0]), groups)
    full = np.cov(devs, rowvar=False)
    reps = np.stack([np.cov(np.delete(devs, idx, axis=0), rowvar=False) for idx in parts])
    g = len(parts)
    return np.sqrt((g - 1) / g * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0)), full


def breakdown_probe(data: Dataset, st, rho, b0, m, t_schedule=None, cfg=None):
    """Replace the first m subjects by (t * sum_j q_j, 0) and refit for each t.

    q_j are the eigenvectors of the clean fitted V.  Fit failures are recorded
    as NaN entries together with the error name.
    """
    if not 0 <= m < data.n:
        raise ValueError("m must satisfy 0 <= m < n")
    if t_schedule is None:
        t_schedule = 10.0 ** np.arange(1, 7)
    cfg = cfg or SolverConfig()
    clean = fit_s(data, st, rho, b0, cfg)
    lam = np.linalg.eigvalsh(clean.V)
    direction = np.linalg.eigh(clean.V)[1].sum(axis=1)
    out = {
        "t": [float(t) for t in t_schedule],
        "clean_lambda1": float(lam[-1]),
        "clean_lambdak_inv": float(1.0 / lam[0]),
        "clean_beta_norm": float(np.linalg.norm(clean.beta)),
        "lambda1_path": [],
        "lambdak_path": [],
        "beta_norm_path": [],
        "errors": [],
    }
    for t in t_schedule:
        y = data.y.copy()
        X = data.X.copy()
        y[:m] = t * direction
        X[:m] = 0.0
        try:
            fit = fit_s(Dataset(y, X), st, rho, b0, cfg)
            lam_t = np.linalg.eigvalsh(fit.V)
            vals = (lam_t[-1], 1.0 / lam_t[0], np.linalg.norm(fit.beta), None)
        except StructsError as exc:
            best = getattr(exc, "best", None)
            if best is not None:
                lam_t = np.linalg.eigvalsh(best.V)
                vals = (lam_t[-1], 1.0 / lam_t[0], np.linalg.norm(best.beta), type(exc).__name__)
            else:
                vals = (np.nan, np.nan, np.nan, type(exc).__name__)
        out["lambda1_path"].append(float(vals[0]))
        out["lambdak_path"].append(float(vals[1]))
        out["beta_norm_path"].append(float(vals[2]))
        out["errors"].append(vals[3])
    return out


def consistency_sweep(cfg: SimConfig, n_grid, reps=200, parallel=None):
    """Median ||xi_hat - xi0|| over ``reps`` replications for each n."""
    n_grid = list(n_grid)
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be increasing")
    table = []
    for n in n_grid:
        sub = replace(cfg, n=int(n), reps=int(reps), seed=_rep_seed(cfg.seed, int(n)))
        res = run_replications(sub, parallel)
        ok = ~np.isnan(res.estimates).any(axis=1)
        err = np.linalg.norm(res.estimates[ok] - cfg.xi0, axis=1)
        table.append({
            "n": int(n),
            "median_error": float(np.median(err)) if err.size else float("nan"),
            "failures": res.failures,
        })
    return table


def default_workers():
    return os.cpu_count() or 1
