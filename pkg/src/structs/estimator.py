"""S-estimation of (beta, theta) in balanced linear models with a structured
covariance: minimize det V(theta) subject to mean rho(d_i) <= b0.

The solver combines random elemental starts, concentration steps built from
the score equations, and a one-dimensional rescaling of V that keeps the
constraint active (the structures are closed under positive scalar
multiples).  Near convergence a Newton iteration on the mean score finishes
the job.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.linalg import solve_triangular

from . import scores
from .errors import (
    Degenerate,
    NoFeasibleScale,
    NoSolution,
    NotPds,
    RankDeficient,
)
from .rho import RhoFunction
from .spherical import consistency_b0
from .structures import CovarianceStructure, require_pds

MAX_SCALE = 1e12
NEWTON_SWITCH = 1e-4
_HALVINGS = 10


@dataclass(frozen=True)
class Dataset:
    """n balanced subjects: ``y`` of shape (n, k) and ``X`` of shape (n, k, q)."""

    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if y.ndim != 2:
            raise ValueError("y must have shape (n, k)")
        if X.ndim != 3 or X.shape[:2] != y.shape:
            raise ValueError(f"X must have shape (n, k, q) with (n, k) = {y.shape}")
        if y.shape[0] < 2:
            raise ValueError("at least two subjects are required")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValueError("data contain non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def k(self):
        return self.y.shape[1]

    @property
    def q(self):
        return self.X.shape[2]

    @classmethod
    def from_subjects(cls, subjects):
        ys, Xs = zip(*subjects)
        return cls(np.array(ys, dtype=float), np.array(Xs, dtype=float))

    @classmethod
    def common_design(cls, y, X):
        """All subjects share the same k x q design ``X``."""
        y = np.asarray(y, dtype=float)
        return cls(y, np.broadcast_to(np.asarray(X, float), (y.shape[0],) + np.shape(X)))

    def subset(self, idx):
        return Dataset(self.y[idx], self.X[idx])


@dataclass(frozen=True)
class SolverConfig:
    n_subsamples: int = 500
    max_iter: int = 200
    tol: float = 1e-9
    eig_floor: float = 1e-12
    seed: int = 0
    # Fast-S style pruning: every start gets n_initial_steps concentration
    # steps, then only the n_keep best are iterated to convergence.
    n_initial_steps: int = 2
    n_keep: int | None = 10
    polish: bool = True

    def __post_init__(self):
        for name in ("n_subsamples", "max_iter", "tol", "eig_floor", "n_initial_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.n_keep is not None and self.n_keep < 1:
            raise ValueError("n_keep must be positive or None")


@dataclass
class SFit:
    beta: np.ndarray
    theta: np.ndarray
    V: np.ndarray
    det_V: float
    logdet_V: float
    b0: float
    distances: np.ndarray
    constraint_residual: float
    score_norm: float
    converged: bool
    iterations: int
    n_subsamples_used: int
    seed: int
    det_gap: float = 0.0
    logdet_path: list = field(default_factory=list)

    @property
    def xi(self):
        return np.concatenate([self.beta, self.theta])

    def to_dict(self):
        return {
            "beta": self.beta.tolist(),
            "theta": self.theta.tolist(),
            "V": self.V.tolist(),
            "det_V": float(self.det_V),
            "logdet_V": float(self.logdet_V),
            "b0": float(self.b0),
            "distances": self.distances.tolist(),
            "constraint_residual": float(self.constraint_residual),
            "score_norm": float(self.score_norm),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "n_subsamples_used": int(self.n_subsamples_used),
            "seed": int(self.seed),
            "det_gap": float(self.det_gap),
            "logdet_path": [float(x) for x in self.logdet_path],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            beta=np.asarray(d["beta"], float),
            theta=np.asarray(d["theta"], float),
            V=np.asarray(d["V"], float),
            det_V=float(d["det_V"]),
            logdet_V=float(d.get("logdet_V", np.log(d["det_V"]))),
            b0=float(d["b0"]),
            distances=np.asarray(d["distances"], float),
            constraint_residual=float(d["constraint_residual"]),
            score_norm=float(d.get("score_norm", np.nan)),
            converged=bool(d["converged"]),
            iterations=int(d["iterations"]),
            n_subsamples_used=int(d["n_subsamples_used"]),
            seed=int(d["seed"]),
            det_gap=float(d.get("det_gap", 0.0)),
            logdet_path=list(d.get("logdet_path", [])),
        )


def mahalanobis_d(y, X, beta, theta, st: CovarianceStructure):
    """Distance of one subject, sqrt(r' V(theta)^{-1} r) with r = y - X beta."""
    y = np.asarray(y, float)[None, :]
    X = np.asarray(X, float)[None, :, :]
    return float(scores.distances(y, X, np.asarray(beta, float), st.value(theta))[0])


def constraint_scale(d, rho: RhoFunction, b0):
    """Factor s with mean rho(d / sqrt(s)) = b0.

    For hard rejection the mean is a step function and the smallest s
    with mean <= b0 is returned.
    """
    d = np.asarray(d, dtype=float)
    n = d.size
    if rho.kind == "hard_rejection":
        allowed = int(math.floor(n * b0 / rho.a0 + 1e-9))
        if allowed >= n:
            raise Degenerate("constraint satisfied by every scale")
        d2 = np.sort(d * d)[::-1]
        s = d2[allowed] / rho.c0**2
        if s <= 0:
            raise Degenerate("too many exact fits for the constraint")
        return float(s)

    if rho.a0 * np.count_nonzero(d > 0) / n <= b0 * (1 + 1e-12):
        raise Degenerate("too many zero distances to meet the constraint")

    def gap(t):
        return float(np.mean(rho.rho(d * math.exp(-0.5 * t)))) - b0

    step = math.log(10.0)
    t_lo = t_hi = 0.0
    g = gap(0.0)
    if g == 0.0:
        return 1.0
    if g > 0:
        while g > 0:
            t_lo, t_hi = t_hi, t_hi + step
            if t_hi > math.log(MAX_SCALE) + 1e-9:
                raise NoFeasibleScale("constraint mean stays above b0 up to scale 1e12")
            g = gap(t_hi)
    else:
        while g < 0:
            t_hi, t_lo = t_lo, t_lo - step
            if t_lo < -1400:
                raise Degenerate("constraint cannot be met by shrinking V")
            g = gap(t_lo)
    t = optimize.brentq(gap, t_lo, t_hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return math.exp(t)


def scale_to_constraint(data: Dataset, beta, theta, st, rho, b0):
    """Rescale theta so that mean rho(d_i) = b0 (returns the new theta)."""
    d = scores.distances(data.y, data.X, np.asarray(beta, float), st.value(theta))
    return st.scale_theta(theta, constraint_scale(d, rho, b0))


class _Problem:
    """Data, structure and rho bundled for the inner loops of :func:`fit_s`."""

    def __init__(self, data: Dataset, st, rho, b0, cfg: SolverConfig):
        self.data, self.st, self.rho, self.b0, self.cfg = data, st, rho, b0, cfg
        self.n, self.k, self.q = data.n, data.k, data.q
        self.l = st.l
        self._Xk = data.X.transpose(1, 0, 2).reshape(self.k, -1)  # (k, n*q)
        self._yk = data.y.T.copy()  # (k, n)

    # -- basic quantities -------------------------------------------------
    def chol(self, theta):
        return require_pds(self.st.value(theta))

    def logdet(self, theta):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol(theta)))))

    def whiten(self, C):
        Xt = solve_triangular(C, self._Xk, lower=True, check_finite=False)
        yt = solve_triangular(C, self._yk, lower=True, check_finite=False)
        return Xt.reshape(self.k, self.n, self.q), yt

    def distances(self, beta, theta):
        return scores.distances(self.data.y, self.data.X, beta, self.st.value(theta))

    def rescale(self, beta, theta):
        return self.st.scale_theta(
            theta, constraint_scale(self.distances(beta, theta), self.rho, self.b0)
        )

    def mean_score(self, xi):
        beta, theta = xi[: self.q], xi[self.q:]
        return scores.mean_score(
            self.data.y, self.data.X, beta, theta, self.st, self.rho, self.b0
        )

    def pds(self, theta):
        return self.st.is_pds(theta, self.cfg.eig_floor)

    # -- starts -----------------------------------------------------------
    def start(self, idx):
        rng = np.random.default_rng([self.cfg.seed, idx])
        h = min(self.n, math.ceil((self.q + self.l) / self.k) + 1)
        sub = rng.choice(self.n, size=h, replace=False)
        Xs = self.data.X[sub].reshape(-1, self.q)
        ys = self.data.y[sub].reshape(-1)
        beta = np.linalg.lstsq(Xs, ys, rcond=None)[0]
        R = self.data.y[sub] - np.einsum("nkq,q->nk", self.data.X[sub], beta)
        S = R.T @ R / h
        lam, Q = np.linalg.eigh(S)
        top = max(lam[-1], np.finfo(float).tiny)
        lam = np.maximum(lam, max(self.cfg.eig_floor, 1e-8) * top)
        theta = self.repair(self.st.project((Q * lam) @ Q.T), top)
        return beta, theta

    def repair(self, theta, scale):
        if self.pds(theta):
            return theta
        ref = self.st.reference_theta(max(scale, np.finfo(float).tiny))
        for w in (0.5, 0.75, 0.875, 0.9375, 0.99, 1.0):
            cand = (1 - w) * theta + w * ref
            if self.pds(cand):
                return cand
        return ref

    # -- concentration ----------------------------------------------------
    def step(self, beta, theta):
        """Unscaled update (beta', theta~) from the score equations."""
        C = self.chol(theta)
        Xt, yt = self.whiten(C)
        d = np.sqrt(np.sum((yt - np.einsum("knq,q->kn", Xt, beta)) ** 2, axis=0))
        u = self.rho.u(d)
        A = np.einsum("kni,n,knj->ij", Xt, u, Xt)
        b = np.einsum("kni,n,kn->i", Xt, u, yt)
        try:
            if np.linalg.cond(A) > 1e14:
                raise np.linalg.LinAlgError
            beta_new = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise RankDeficient("weighted normal matrix is singular") from exc
        if not self.st.is_linear:
            return beta_new, self._gauss_newton_theta(beta_new, theta)

        Rt = yt - np.einsum("knq,q->kn", Xt, beta_new)
        d2 = np.sum(Rt * Rt, axis=0)
        d = np.sqrt(d2)
        u = self.rho.u(d)
        if np.sum(u * d2) <= 1e-12:
            raise Degenerate("all weighted residuals vanish")
        sv = np.sum(self.rho.v(d, self.b0))
        if sv <= 0:
            raise Degenerate("non-positive sum of v(d)")
        S_t = self.k * (Rt * u) @ Rt.T / sv  # C^{-1} S_u C^{-T}
        # B_j = C^{-1} L_j C^{-T}
        B = np.stack(
            [
                solve_triangular(
                    C, solve_triangular(C, Lj, lower=True, check_finite=False).T,
                    lower=True, check_finite=False,
                )
                for Lj in self.st.basis
            ]
        )
        G = np.einsum("jab,tab->jt", B, B)
        h = np.einsum("jab,ab->j", B, S_t)
        return beta_new, np.linalg.solve(G, h)

    def _gauss_newton_theta(self, beta, theta):
        q = self.q

        def lam_theta(th):
            return self.mean_score(np.concatenate([beta, th]))[q:]

        f0 = lam_theta(theta)
        J = np.empty((self.l, self.l))
        for j in range(self.l):
            hj = 1e-6 * (1.0 + abs(theta[j]))
            e = np.zeros(self.l)
            e[j] = hj
            J[:, j] = (lam_theta(theta + e) - lam_theta(theta - e)) / (2 * hj)
        return theta - np.linalg.lstsq(J, f0, rcond=None)[0]

    def advance(self, beta, theta, logdet):
        """One damped concentration step followed by rescaling.

        Returns (beta, theta, logdet) or None when no damped step lowers det.
        """
        try:
            beta_new, theta_new = self.step(beta, theta)
        except (RankDeficient, Degenerate, NotPds, np.linalg.LinAlgError):
            return None
        tau = 1.0
        for _ in range(_HALVINGS + 1):
            bt = beta + tau * (beta_new - beta)
            th = theta + tau * (theta_new - theta)
            tau *= 0.5
            if not np.all(np.isfinite(th)) or not self.pds(th):
                continue
            try:
                th = self.rescale(bt, th)
                ld = self.logdet(th)
            except (Degenerate, NoFeasibleScale, NotPds):
                continue
            if ld <= logdet + 1e-12 * max(1.0, abs(logdet)):
                return bt, th, ld
        return None

    def newton(self, beta, theta, logdet, max_steps=10):
        """Newton iteration on the mean score, each step rescaled to the
        constraint and accepted only if det does not increase."""
        xi = np.concatenate([beta, theta])
        f = self.mean_score(xi)
        path = []
        for _ in range(max_steps):
            fn = np.linalg.norm(f)
            if fn <= 1e-11 * (1 + np.linalg.norm(xi)):
                break
            try:
                J = self.score_jacobian(xi)
                delta = np.linalg.solve(J, -f)
            except (NotPds, np.linalg.LinAlgError):
                break
            if not np.all(np.isfinite(delta)):
                break
            accepted = False
            tau = 1.0
            for _ in range(_HALVINGS + 1):
                cand = xi + tau * delta
                tau *= 0.5
                b, th = cand[: self.q], cand[self.q:]
                if not self.pds(th):
                    continue
                try:
                    th = self.rescale(b, th)
                    ld = self.logdet(th)
                    cand = np.concatenate([b, th])
                    fc = self.mean_score(cand)
                except (Degenerate, NoFeasibleScale, NotPds):
                    continue
                if np.linalg.norm(fc) < fn and ld <= logdet + 1e-10 * max(1.0, abs(logdet)):
                    xi, f, logdet, accepted = cand, fc, ld, True
                    path.append(ld)
                    break
            if not accepted:
                break
        return xi[: self.q], xi[self.q:], logdet, path

    def score_jacobian(self, xi):
        p = xi.size
        J = np.empty((p, p))
        for j in range(p):
            hj = 1e-6 * (1.0 + abs(xi[j]))
            e = np.zeros(p)
            e[j] = hj
            J[:, j] = (self.mean_score(xi + e) - self.mean_score(xi - e)) / (2 * hj)
        return J

    def refine(self, beta, theta, logdet, max_iter):
        path = [logdet]
        it = 0
        settled = False
        while it < max_iter:
            nxt = self.advance(beta, theta, logdet)
            if nxt is None:
                break
            b, th, ld = nxt
            it += 1
            change = max(
                np.linalg.norm(b - beta) / (1 + np.linalg.norm(beta)),
                np.linalg.norm(th - theta) / (1 + np.linalg.norm(theta)),
                abs(math.expm1(ld - logdet)),
            )
            beta, theta, logdet = b, th, ld
            path.append(ld)
            if change < self.cfg.tol:
                settled = True
                break
            if self.cfg.polish and change < NEWTON_SWITCH:
                break
        if self.cfg.polish and self.rho.differentiable:
            beta, theta, logdet, extra = self.newton(beta, theta, logdet)
            path.extend(extra)
            it += len(extra)
        return beta, theta, logdet, it, path, settled


def concentration_step(data: Dataset, beta, theta, st, rho, b0):
    """One undamped concentration step followed by constraint rescaling."""
    prob = _Problem(data, st, rho, b0, SolverConfig())
    beta_new, theta_new = prob.step(np.asarray(beta, float), np.asarray(theta, float))
    if not st.is_pds(theta_new):
        raise NotPds("concentration step left the positive definite cone")
    return beta_new, prob.rescale(beta_new, theta_new)


def _tie_key(entry):
    logdet, theta, idx = entry[0], entry[2], entry[3]
    return (logdet, np.linalg.norm(theta), idx)


def _pick_best(entries):
    best_ld = min(e[0] for e in entries)
    close = [e for e in entries if e[0] <= best_ld + 1e-12 * max(1.0, abs(best_ld))]
    return min(close, key=lambda e: (np.linalg.norm(e[2]), e[3]))


def fit_s(data: Dataset, st: CovarianceStructure, rho: RhoFunction, b0=None,
          cfg: SolverConfig | None = None) -> SFit:
    """Compute the S-estimate by subsampling plus concentration.

    Raises :class:`NoSolution` (with the best partial fit attached) when no
    candidate meets the convergence criteria.
    """
    cfg = cfg or SolverConfig()
    if st.k != data.k:
        raise ValueError(f"structure dimension {st.k} does not match data k={data.k}")
    if b0 is None:
        b0 = consistency_b0(rho, data.k)
    if not 0 < b0 < rho.a0:
        raise ValueError("b0 must lie in (0, a0)")
    h = math.ceil((data.q + st.l) / data.k) + 1
    if data.n < h:
        raise ValueError(f"need at least {h} subjects")
    prob = _Problem(data, st, rho, b0, cfg)

    starts = []  # (logdet, beta, theta, idx)
    for idx in range(cfg.n_subsamples):
        try:
            beta, theta = prob.start(idx)
            theta = prob.rescale(beta, theta)
            starts.append((prob.logdet(theta), beta, theta, idx))
        except (Degenerate, NoFeasibleScale, NotPds, np.linalg.LinAlgError):
            continue
    if not starts:
        raise NoSolution("no usable elemental start")

    if rho.kind == "hard_rejection":
        return _finish_mve(prob, starts)

    stepped = []
    for ld, beta, theta, idx in starts:
        for _ in range(cfg.n_initial_steps):
            nxt = prob.advance(beta, theta, ld)
            if nxt is None:
                break
            beta, theta, ld = nxt
        stepped.append((ld, beta, theta, idx))
    stepped.sort(key=_tie_key)
    keep = stepped if cfg.n_keep is None else stepped[: cfg.n_keep]

    finals = []
    for ld, beta, theta, idx in keep:
        try:
            b, th, l2, it, path, _ = prob.refine(beta, theta, ld, cfg.max_iter)
        except (NotPds, Degenerate, NoFeasibleScale, RankDeficient):
            b, th, l2, it, path = beta, theta, ld, 0, [ld]
        finals.append((l2, b, th, idx, it + cfg.n_initial_steps, path))
    best = _pick_best(finals)
    others = sorted(e[0] for e in finals if e is not best)
    gap = math.exp(others[0]) - math.exp(best[0]) if others else 0.0
    try:
        fit = _make_fit(prob, best[1], best[2], best[4], len(starts), best[5], gap)
    except NotPds as exc:
        raise NoSolution("best candidate has a numerically singular V") from exc
    if not fit.converged:
        raise NoSolution("no candidate satisfied the score and constraint criteria", fit)
    return fit


def _make_fit(prob: _Problem, beta, theta, iterations, used, path, gap):
    V = prob.st.value(theta)
    d = prob.distances(beta, theta)
    resid = float(np.mean(prob.rho.rho(d)) - prob.b0)
    if prob.rho.differentiable:
        xi = np.concatenate([beta, theta])
        snorm = float(np.linalg.norm(prob.mean_score(xi)))
        converged = (
            abs(resid) <= 1e-9 and snorm <= 1e-6 * (1 + np.linalg.norm(xi))
        )
    else:
        snorm = float("nan")
        converged = resid <= 0
    ld = prob.logdet(theta)
    return SFit(
        beta=np.asarray(beta, float),
        theta=np.asarray(theta, float),
        V=V,
        det_V=math.exp(ld),
        logdet_V=ld,
        b0=float(prob.b0),
        distances=d,
        constraint_residual=resid,
        score_norm=snorm,
        converged=bool(converged),
        iterations=int(iterations),
        n_subsamples_used=int(used),
        seed=int(prob.cfg.seed),
        det_gap=float(gap),
        logdet_path=list(path),
    )


def _finish_mve(prob: _Problem, starts):
    """Hard-rejection mode: candidates are compared by det only.

    Each start is improved by C-steps: refit beta by GLS and theta by the
    projected scatter of the subjects inside the current cylinder.
    """
    finals = []
    h = prob.n - int(math.floor(prob.n * prob.b0 / prob.rho.a0 + 1e-9))
    for ld, beta, theta, idx in starts:
        path = [ld]
        for _ in range(prob.cfg.max_iter):
            d = prob.distances(beta, theta)
            inside = np.argsort(d, kind="stable")[:h]
            try:
                C = prob.chol(theta)
                Xt, yt = prob.whiten(C)
                Xi, yi = Xt[:, inside], yt[:, inside]
                A = np.einsum("kni,knj->ij", Xi, Xi)
                b_new = np.linalg.solve(A, np.einsum("kni,kn->i", Xi, yi))
                R = prob.data.y[inside] - np.einsum("nkq,q->nk", prob.data.X[inside], b_new)
                th = prob.repair(prob.st.project(R.T @ R / h), np.trace(R.T @ R) / h)
                th = prob.rescale(b_new, th)
                l2 = prob.logdet(th)
            except (np.linalg.LinAlgError, Degenerate, NoFeasibleScale, NotPds):
                break
            if l2 >= ld - 1e-12 * max(1.0, abs(ld)):
                break
            beta, theta, ld = b_new, th, l2
            path.append(ld)
        finals.append((ld, beta, theta, idx, len(path) - 1, path))
    best = _pick_best(finals)
    others = sorted(e[0] for e in finals if e is not best)
    gap = math.exp(others[0]) - math.exp(best[0]) if others else 0.0
    return _make_fit(prob, best[1], best[2], best[4], len(starts), best[5], gap)


# -- Gaussian maximum likelihood comparator ---------------------------------

def _gls_beta(data, V):
    C = np.linalg.cholesky(V)
    k, n, q = data.k, data.n, data.q
    Xt = solve_triangular(C, data.X.transpose(1, 0, 2).reshape(k, -1), lower=True)
    Xt = Xt.reshape(k, n, q)
    yt = solve_triangular(C, data.y.T, lower=True)
    A = np.einsum("kni,knj->ij", Xt, Xt)
    return np.linalg.solve(A, np.einsum("kni,kn->i", Xt, yt))


def _floored(V, floor=1e-10):
    lam, Q = np.linalg.eigh(0.5 * (V + V.T))
    lam_f = np.maximum(lam, floor * max(lam[-1], 1.0))
    return (Q * lam_f) @ Q.T, bool(np.all(lam == lam_f))


def fit_ml_reference(data: Dataset, st: CovarianceStructure, max_outer=200, tol=1e-11):
    """Gaussian maximum likelihood by alternating GLS and quasi-Newton on theta.

    Non-robust comparator; non-PDS iterates are repaired by flooring the
    eigenvalues of V(theta).
    """
    n = data.n
    Xs = data.X.reshape(-1, data.q)
    beta = np.linalg.lstsq(Xs, data.y.reshape(-1), rcond=None)[0]
    R = scores.residuals(data.y, data.X, beta)
    theta = st.project(R.T @ R / n)
    if not st.is_pds(theta):
        theta = st.reference_theta(max(np.trace(R.T @ R) / (n * data.k), 1e-8))

    bounds = None
    if st.kind == "ar1":
        bounds = [(1e-12, None), (-0.999999, 0.999999)]

    for _ in range(max_outer):
        V, _ = _floored(st.value(theta))
        beta_new = _gls_beta(data, V)
        R = scores.residuals(data.y, data.X, beta_new)
        S = R.T @ R

        def nll(th):
            Vf, _ = _floored(st.value(th))
            Vi = np.linalg.inv(Vf)
            sign, ld = np.linalg.slogdet(Vf)
            G = st.grads(th)
            M = Vi @ S @ Vi
            grad = 0.5 * (n * np.einsum("ab,jba->j", Vi, G) - np.einsum("ab,jba->j", M, G))
            return 0.5 * (n * ld + np.sum(Vi * S)), grad

        res = optimize.minimize(
            nll, theta, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 2000},
        )
        theta_new = res.x
        change = max(
            np.linalg.norm(beta_new - beta) / (1 + np.linalg.norm(beta)),
            np.linalg.norm(theta_new - theta) / (1 + np.linalg.norm(theta)),
        )
        beta, theta = beta_new, theta_new
        if change < tol:
            break
    else:
        raise NoSolution("maximum likelihood iteration did not converge")
    if not st.is_pds(theta):
        raise NoSolution("maximum likelihood estimate is not positive definite")
    return beta, theta


# -- breakdown ----------------------------------------------------------------

def bdp_bound(n, r, kappa):
    """Finite-sample breakdown bounds for ratio r = b0/a0.

    ``lower_beta`` bounds the regression breakdown point from below;
    ``exact_theta`` is the covariance breakdown point; ``valid`` tells
    whether r <= (n - kappa) / (2n) holds.
    """
    if not 1 <= kappa < n:
        raise ValueError("kappa must satisfy 1 <= kappa < n")
    if not 0 < r < 1:
        raise ValueError("r must lie in (0, 1)")
    m = math.ceil(n * r - 1e-9)
    return {
        "lower_beta": m / n,
        "upper_beta": ((n + 1) // 2) / n,
        "exact_theta": m / n,
        "valid": bool(r <= (n - kappa) / (2 * n) + 1e-12),
    }


def kappa_heuristic(data: Dataset):
    """k + p with p the rank of the centred design rows vec(X_i).

    This is the general-position value of the maximal number of points on a
    hyperplane; it is not an exact computation for a given sample.
    """
    raw = data.X.reshape(data.n, -1)
    rows = raw - raw.mean(axis=0)
    # tolerance relative to the raw design so a common design gives p = 0
    tol = max(rows.shape) * np.finfo(float).eps * max(np.abs(raw).max(), 1.0) * 100
    p = int(np.linalg.matrix_rank(rows, tol=tol)) if rows.size else 0
    return data.k + p


def with_seed(cfg: SolverConfig, seed) -> SolverConfig:
    return replace(cfg, seed=int(seed))
