"""Scores, derivative matrices, influence functions and asymptotic covariances.

Closed forms hold at the k-variate normal with Sigma = V(theta_P); the
constants alpha, gamma1, gamma2, sigma1, sigma2 come from
:func:`structs.spherical.constants_for`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scores
from .errors import BadConstants, NonInvertible, NotIdentifiable, RankDeficient
from .estimator import Dataset, SFit
from .spherical import EllipticalConstants
from .structures import CovarianceStructure, require_pds, vec

ILL_CONDITIONED = 1e12
JACOBIAN_RCOND = 1e-10


@dataclass(frozen=True)
class ScoreVector:
    psi_beta: np.ndarray
    psi_theta: np.ndarray

    def as_array(self):
        return np.concatenate([self.psi_beta, self.psi_theta])


@dataclass
class SandwichReport:
    D: np.ndarray
    M: np.ndarray
    acov: np.ndarray
    which: str
    condition: float = float("nan")

    @property
    def ill_conditioned(self):
        return bool(self.condition > ILL_CONDITIONED)

    def to_dict(self):
        return {
            "D": self.D.tolist(),
            "M": self.M.tolist(),
            "acov": self.acov.tolist(),
            "which": self.which,
            "condition": float(self.condition),
            "ill_conditioned": self.ill_conditioned,
        }


@dataclass
class InfluenceReport:
    if_beta: np.ndarray
    if_theta: np.ndarray
    if_vecC: np.ndarray
    mode: str = "elliptical"

    def to_dict(self):
        return {
            "if_beta": self.if_beta.tolist(),
            "if_theta": self.if_theta.tolist(),
            "if_vecC": self.if_vecC.tolist(),
            "mode": self.mode,
        }


def psi(y, X, beta, theta, st, rho, b0, path="auto") -> ScoreVector:
    """Score of one subject with response ``y`` (k,) and design ``X`` (k, q)."""
    row = scores.score_matrix(
        np.asarray(y, float)[None, :], np.asarray(X, float)[None, :, :],
        beta, theta, st, rho, b0, path,
    )[0]
    q = np.shape(X)[1]
    return ScoreVector(row[:q], row[q:])


def _split(xi, q):
    xi = np.asarray(xi, dtype=float)
    return xi[:q], xi[q:]


def jacobian_empirical(data: Dataset, xi, st, rho, b0, step=1e-6):
    """Central-difference Jacobian of the mean score at ``xi``.

    Raises :class:`NonInvertible` when the reciprocal condition number of the
    result falls below 1e-10.
    """
    xi = np.asarray(xi, dtype=float)
    q = data.q

    def lam(x):
        b, t = _split(x, q)
        return scores.mean_score(data.y, data.X, b, t, st, rho, b0)

    p = xi.size
    D = np.empty((p, p))
    for j in range(p):
        h = step * (1.0 + abs(xi[j]))
        e = np.zeros(p)
        e[j] = h
        D[:, j] = (lam(xi + e) - lam(xi - e)) / (2 * h)
    if not np.all(np.isfinite(D)) or 1.0 / np.linalg.cond(D) < JACOBIAN_RCOND:
        raise NonInvertible("empirical derivative matrix is singular")
    return D


def expected_xtsx(Sigma, X):
    """E[X' Sigma^{-1} X]: X of shape (k, q) for one repeated design or
    (n, k, q) for a fixed design, averaged over subjects."""
    X = np.asarray(X, dtype=float)
    Si = _inv(Sigma, "Sigma")
    if X.ndim == 2:
        return X.T @ Si @ X
    return np.einsum("nki,kl,nlj->ij", X, Si, X) / X.shape[0]


def _inv(M, what="matrix"):
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)) or np.linalg.cond(M) > 1e15:
        raise RankDeficient(f"{what} is singular")
    return np.linalg.inv(M)


def _sym(M):
    return 0.5 * (M + M.T)


def _weight_block(st: CovarianceStructure, Sigma):
    """A = L'(Sigma^{-1} kron Sigma^{-1})L and g = L' vc(Sigma^{-1})."""
    Si = _inv(Sigma, "Sigma")
    L = st.basis_matrix()
    WL = np.stack([vec(Si @ Lj @ Si) for Lj in st.basis], axis=1)
    A = _sym(L.T @ WL)
    if np.linalg.matrix_rank(A) < st.l:
        raise NotIdentifiable("L'(Sigma^-1 kron Sigma^-1)L is singular")
    return A, L.T @ vec(Si)


def block_derivative_elliptical(st, Sigma, constants: EllipticalConstants, EXtSinvX,
                                theta=None, form="auto"):
    """Derivative of the population mean score at the normal model.

    ``form="kronecker"`` uses L'(Sigma^-1 kron Sigma^-1)L (linear structures
    only); ``form="trace"`` the trace expression with alpha1 = gamma1/k and
    alpha2 = gamma1/k - gamma2, which needs ``theta``.
    """
    EXtSinvX = np.atleast_2d(np.asarray(EXtSinvX, dtype=float))
    q, l, k = EXtSinvX.shape[0], st.l, st.k
    if form == "auto":
        form = "kronecker" if st.is_linear else "trace"
    if form == "kronecker":
        A, g = _weight_block(st, Sigma)
        Dt = constants.gamma1 * A - constants.gamma2 * np.outer(g, g)
    elif form == "trace":
        if theta is None:
            raise ValueError("the trace form needs theta")
        theta = np.asarray(theta, dtype=float)
        Si = _inv(Sigma, "Sigma")
        G = st.grads(theta)
        H = scores.h_matrices(st, theta)
        t = np.einsum("ab,jba->j", Si, G)
        a1 = constants.gamma1 / k
        a2 = constants.gamma1 / k - constants.gamma2
        SG = np.einsum("ab,sbc->sac", Si, G)
        SH = np.einsum("ab,jbc->jac", Si, H)
        tr = np.einsum("sab,jba->js", SG, SH)  # rows: score j, columns: theta_s
        Dt = -a1 * tr + a2 * np.outer(t, t)
        if np.linalg.matrix_rank(Dt) < l:
            raise NotIdentifiable("theta block of the derivative is singular")
    else:
        raise ValueError(f"unknown form {form!r}")
    D = np.zeros((q + l, q + l))
    D[:q, :q] = -constants.alpha * EXtSinvX
    D[q:, q:] = Dt
    return D


def theta_block_inverse(st, Sigma, theta, constants: EllipticalConstants):
    """Closed-form inverse of the theta block:
    (1/gamma1) A^{-1} + gamma2 / (gamma1 (gamma1 - k gamma2)) theta theta'."""
    A, _ = _weight_block(st, Sigma)
    g1, g2, k = constants.gamma1, constants.gamma2, st.k
    theta = np.asarray(theta, dtype=float)
    return np.linalg.inv(A) / g1 + g2 / (g1 * (g1 - k * g2)) * np.outer(theta, theta)


def _vec_chain(st, theta, if_theta):
    G = st.grads(theta)
    return vec(np.tensordot(if_theta, G, axes=1))


def influence_function(y0, X0, beta, theta, st, rho, b0, mode="elliptical",
                       constants: EllipticalConstants | None = None, D=None,
                       EXtSinvX=None) -> InfluenceReport:
    """Influence of a point mass at (y0, X0) on (beta, theta, vc(C)).

    ``mode="empirical"`` returns -D^{-1} Psi with the supplied derivative
    matrix ``D``; ``mode="elliptical"`` uses the normal-model closed form with
    Sigma = V(theta).  ``EXtSinvX`` defaults to X0' Sigma^{-1} X0.
    """
    y0 = np.asarray(y0, dtype=float)
    X0 = np.asarray(X0, dtype=float)
    beta = np.asarray(beta, dtype=float)
    theta = np.asarray(theta, dtype=float)
    q = X0.shape[1]
    score = psi(y0, X0, beta, theta, st, rho, b0)
    if mode == "empirical":
        if D is None:
            raise ValueError("empirical mode needs the derivative matrix D")
        D = np.asarray(D, dtype=float)
        if 1.0 / np.linalg.cond(D) < JACOBIAN_RCOND:
            raise NonInvertible("derivative matrix is singular")
        out = -np.linalg.solve(D, score.as_array())
        return InfluenceReport(out[:q], out[q:], _vec_chain(st, theta, out[q:]), "empirical")
    if mode != "elliptical":
        raise ValueError(f"unknown mode {mode!r}")
    if constants is None:
        raise ValueError("elliptical mode needs the constants")
    g1, g2, k = constants.gamma1, constants.gamma2, st.k
    if g1 <= 0 or constants.alpha <= 0 or g1 - k * g2 <= 0:
        raise BadConstants("closed form needs gamma1 > 0, alpha > 0, gamma1 > k gamma2")
    Sigma = st.value(theta)
    if EXtSinvX is None:
        EXtSinvX = expected_xtsx(Sigma, X0)
    if not st.is_linear:
        Dm = block_derivative_elliptical(st, Sigma, constants, EXtSinvX, theta)
        out = -np.linalg.solve(Dm, score.as_array())
        return InfluenceReport(out[:q], out[q:], _vec_chain(st, theta, out[q:]), "elliptical")

    Si = _inv(Sigma, "Sigma")
    r = y0 - X0 @ beta
    w = Si @ r
    d = float(np.sqrt(r @ w))
    u = float(rho.u(d))
    if_beta = (u / constants.alpha) * np.linalg.solve(EXtSinvX, X0.T @ w)
    A, _ = _weight_block(st, Sigma)
    L = st.basis_matrix()
    if_theta = (k * u / g1) * np.linalg.solve(A, L.T @ vec(np.outer(w, w)))
    if_theta = if_theta + (-u * d * d / g1 + (float(rho.rho(d)) - b0) / (g1 - k * g2)) * theta
    return InfluenceReport(if_beta, if_theta, L @ if_theta, "elliptical")


def if_theta_bound(st, theta, rho, b0, constants: EllipticalConstants):
    """Upper bound on ||IF_theta|| over all y0 (linear structures).

    Uses u(d) d^2 <= 4 c0^2 / 27 and |rho - b0| <= max(b0, a0 - b0).
    """
    theta = np.asarray(theta, dtype=float)
    Sigma = st.value(theta)
    lam, Q = np.linalg.eigh(Sigma)
    root_inv = (Q / np.sqrt(lam)) @ Q.T
    A, _ = _weight_block(st, Sigma)
    E = np.kron(root_inv, root_inv) @ st.basis_matrix()
    g1, g2, k = constants.gamma1, constants.gamma2, st.k
    m1 = rho.sup_psi_s()
    op = np.linalg.norm(np.linalg.solve(A, E.T), 2)
    return (k * m1 / g1) * op + (
        m1 / g1 + max(b0, rho.a0 - b0) / (g1 - k * g2)
    ) * np.linalg.norm(theta)


# -- asymptotic covariances -------------------------------------------------

def _beta_factor(c: EllipticalConstants):
    if c.alpha <= 0:
        raise BadConstants("alpha must be positive")
    return c.e_rho1_sq / (c.k * c.alpha**2)


def lgrg_beta(Sigma, constants, X):
    """Covariance of sqrt(n)(beta_hat - beta) with ``X`` one k x q design
    or a stack (n, k, q) of fixed designs."""
    return _sym(_beta_factor(constants) * _inv(expected_xtsx(Sigma, X), "E[X'S^-1X]"))


def cvf_beta(Sigma, constants, X):
    """Sandwich form built on the OLS projection (XtX)^{-1} Xt."""
    X = np.asarray(X, dtype=float)
    P = _inv(X.T @ X, "X'X") @ X.T
    return _sym(_beta_factor(constants) * P @ Sigma @ P.T)


def lgrg_theta(st, theta, constants):
    theta = np.asarray(theta, dtype=float)
    A, _ = _weight_block(st, st.value(theta))
    return _sym(2 * constants.sigma1 * np.linalg.inv(A) + constants.sigma2 * np.outer(theta, theta))


def cvf_theta(st, theta, constants):
    theta = np.asarray(theta, dtype=float)
    Sigma = st.value(theta)
    L = st.basis_matrix()
    P = _inv(L.T @ L, "L'L") @ L.T
    return _sym(
        2 * constants.sigma1 * P @ np.kron(Sigma, Sigma) @ P.T
        + constants.sigma2 * np.outer(theta, theta)
    )


def acov_vecC(st, cov_theta):
    L = st.basis_matrix()
    return _sym(L @ cov_theta @ L.T)


def sandwich(data: Dataset, xi, st, rho, b0, D=None) -> SandwichReport:
    """D^{-1} avg(Psi Psi') D^{-T} with the empirical derivative by default."""
    b, t = _split(xi, data.q)
    if D is None:
        D = jacobian_empirical(data, xi, st, rho, b0)
    S = scores.score_matrix(data.y, data.X, b, t, st, rho, b0)
    M = S.T @ S / data.n
    Di = np.linalg.inv(D)
    return SandwichReport(D, M, _sym(Di @ M @ Di.T), "empirical", float(np.linalg.cond(D)))


def sandwich_elliptical(st, theta, constants, X, Psi_rows):
    """Sandwich with the closed-form derivative and a supplied score sample."""
    theta = np.asarray(theta, dtype=float)
    Sigma = st.value(theta)
    D = block_derivative_elliptical(st, Sigma, constants, expected_xtsx(Sigma, X), theta)
    M = Psi_rows.T @ Psi_rows / Psi_rows.shape[0]
    Di = np.linalg.inv(D)
    return SandwichReport(
        D, M, _sym(Di @ M @ Di.T), "elliptical_closed_form", float(np.linalg.cond(D))
    )


def asy_cov(variant, *, st=None, theta=None, constants=None, X=None, data=None,
            xi=None, rho=None, b0=None):
    """Dispatch over lgrg_beta, cvf_beta, lgrg_theta, cvf_theta, sandwich
    and vecC (the lgrg covariance of vc(C))."""
    if variant in ("lgrg_beta", "cvf_beta"):
        fn = lgrg_beta if variant == "lgrg_beta" else cvf_beta
        return fn(st.value(theta), constants, X)
    if variant == "lgrg_theta":
        return lgrg_theta(st, theta, constants)
    if variant == "cvf_theta":
        return cvf_theta(st, theta, constants)
    if variant == "vecC":
        return acov_vecC(st, lgrg_theta(st, theta, constants))
    if variant == "sandwich":
        return sandwich(data, xi, st, rho, b0).acov
    raise ValueError(f"unknown variant {variant!r}")


def standardized_residuals(data: Dataset, fit: SFit):
    """Mahalanobis distance of every subject at the fitted (beta, theta)."""
    V = fit.V
    require_pds(V)
    return scores.distances(data.y, data.X, fit.beta, V)
