"""Mahalanobis distances and the score function Psi = (Psi_beta, Psi_theta).

Every function here is vectorized over subjects: ``y`` has shape (n, k) and
``X`` has shape (n, k, q).
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .structures import CovarianceStructure, require_pds


def residuals(y, X, beta):
    return y - np.einsum("nkq,q->nk", X, beta)


def distances_from_residuals(R, V):
    C = require_pds(V)
    Z = solve_triangular(C, R.T, lower=True, check_finite=False)
    return np.sqrt(np.einsum("kn,kn->n", Z, Z))


def distances(y, X, beta, V):
    return distances_from_residuals(residuals(y, X, beta), V)


def h_matrices(st: CovarianceStructure, theta):
    """The matrices H_j, shape (l, k, k); they satisfy sum_j theta_j H_j = 0."""
    V = st.value(theta)
    G = st.grads(theta)
    Vi = np.linalg.inv(V)
    T = np.tensordot(theta, G, axes=1)  # sum_t theta_t dV/dtheta_t
    tr_G = np.einsum("ab,jba->j", Vi, G)
    tr_T = np.trace(Vi @ T)
    return tr_G[:, None, None] * T[None] - tr_T * G


def score_matrix(y, X, beta, theta, st, rho, b0, path="auto"):
    """Per-subject scores, shape (n, q + l).

    ``path`` selects the covariance part: ``"general"`` uses the H_j form,
    ``"linear"`` the Kronecker form available for linear structures, and
    ``"auto"`` picks ``"linear"`` whenever possible.
    """
    beta = np.asarray(beta, dtype=float)
    theta = np.asarray(theta, dtype=float)
    V = st.value(theta)
    C = require_pds(V)
    R = residuals(y, X, beta)
    Vi = np.linalg.inv(V)
    Vi = 0.5 * (Vi + Vi.T)
    W = R @ Vi  # rows w_i = V^{-1} r_i
    Z = solve_triangular(C, R.T, lower=True, check_finite=False)
    d = np.sqrt(np.einsum("kn,kn->n", Z, Z))
    u = rho.u(d)
    psi_beta = u[:, None] * np.einsum("nkq,nk->nq", X, W)

    if path == "auto":
        path = "linear" if st.is_linear else "general"
    G = st.grads(theta)
    tr_G = np.einsum("ab,jba->j", Vi, G)
    if path == "linear":
        if not st.is_linear:
            raise ValueError("linear path requires a linear structure")
        k = st.k
        v = rho.v(d, b0)
        quad = np.einsum("nk,jkl,nl->nj", W, G, W)
        psi_theta = v[:, None] * tr_G[None, :] - k * u[:, None] * quad
    elif path == "general":
        H = h_matrices(st, theta)
        quad = np.einsum("nk,jkl,nl->nj", W, H, W)
        psi_theta = u[:, None] * quad - (rho.rho(d) - b0)[:, None] * tr_G[None, :]
    else:
        raise ValueError(f"unknown path {path!r}")
    return np.hstack([psi_beta, psi_theta])


def mean_score(y, X, beta, theta, st, rho, b0, path="auto"):
    """Lambda_n(xi) = (1/n) sum_i Psi(s_i, xi)."""
    return score_matrix(y, X, beta, theta, st, rho, b0, path).mean(axis=0)
