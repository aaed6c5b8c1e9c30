"""Structured covariance maps theta -> V(theta).

Linear structures carry their basis ``L_1, ..., L_l`` so that
``V(theta) = sum_j theta_j L_j``; the AR(1) structure is the one non-linear
family and provides analytic partial derivatives instead.

Conventions: ``vec`` stacks columns, ``vech`` stacks the columns of the lower
triangle, and the index ``j`` of a parameter is zero based.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadIndex,
    BadTheta,
    NotIdentifiable,
    NotLinear,
    NotPds,
    NotSymmetric,
)

LINEAR_KINDS = ("unstructured", "lmm", "compound_symmetry", "stationary_banded")
KINDS = LINEAR_KINDS + ("ar1",)

RANK_TOL = 1e-10


def vec(A):
    return np.asarray(A, dtype=float).reshape(-1, order="F")


def unvec(v, k):
    return np.asarray(v, dtype=float).reshape(k, k, order="F")


def vech(A):
    A = np.asarray(A, dtype=float)
    k = A.shape[0]
    return np.concatenate([A[j:, j] for j in range(k)])


def unvech(h, k):
    h = np.asarray(h, dtype=float)
    if h.shape != (k * (k + 1) // 2,):
        raise BadTheta(f"vech vector must have length {k * (k + 1) // 2}")
    A = np.zeros((k, k))
    pos = 0
    for j in range(k):
        A[j:, j] = h[pos:pos + k - j]
        pos += k - j
    return A + np.tril(A, -1).T


def duplication_matrix(k):
    """The 0/1 matrix ``D_k`` with ``D_k vech(C) = vec(C)`` for symmetric C."""
    D = np.zeros((k * k, k * (k + 1) // 2))
    col = 0
    for j in range(k):
        for i in range(j, k):
            D[i + j * k, col] = 1.0
            D[j + i * k, col] = 1.0
            col += 1
    return D


def commutation_matrix(k):
    """The permutation ``K_{k,k}`` with ``K vec(A) = vec(A^T)``."""
    K = np.zeros((k * k, k * k))
    for i in range(k):
        for j in range(k):
            K[i * k + j, j * k + i] = 1.0
    return K


@dataclass(frozen=True)
class EigenSummary:
    eigenvalues: np.ndarray  # descending
    floor: float
    is_pds: bool

    @property
    def condition(self):
        lo = self.eigenvalues[-1]
        return np.inf if lo <= 0 else self.eigenvalues[0] / lo


def validate_pds(M, floor=None):
    """Eigen-summary of a symmetric matrix; flags it non-PDS below ``floor``.

    The default floor is ``1e-12 * lambda_1``.
    """
    M = np.asarray(M, dtype=float)
    scale = max(np.max(np.abs(M)), np.finfo(float).tiny)
    if np.max(np.abs(M - M.T)) > 1e-12 * scale:
        raise NotSymmetric("matrix is not symmetric")
    lam = np.linalg.eigvalsh(0.5 * (M + M.T))[::-1]
    if floor is None:
        floor = 1e-12 * max(lam[0], 0.0)
    return EigenSummary(lam, float(floor), bool(lam[-1] > 0 and lam[-1] >= floor))


@dataclass(frozen=True, eq=False)
class CovarianceStructure:
    """The map ``theta -> V(theta)``.

    Use the constructors :func:`unstructured`, :func:`lmm`,
    :func:`compound_symmetry`, :func:`stationary_banded` and :func:`ar1`
    rather than instantiating directly.
    """

    kind: str
    k: int
    l: int
    basis: np.ndarray | None = None  # (l, k, k) for linear kinds
    design_blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown structure kind {self.kind!r}")
        if self.basis is not None:
            L = self.basis_matrix()
            sv = np.linalg.svd(L, compute_uv=False)
            if sv[-1] <= RANK_TOL * sv[0]:
                raise NotIdentifiable(
                    f"basis matrix L of {self.kind} structure has rank below {self.l}"
                )

    @property
    def is_linear(self):
        return self.basis is not None

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.l,):
            raise BadTheta(f"theta must have length {self.l}, got shape {theta.shape}")
        return theta

    def value(self, theta):
        theta = self._check_theta(theta)
        if self.is_linear:
            return np.tensordot(theta, self.basis, axes=1)
        sigma2, r = theta
        lag = self._lags()
        return sigma2 * np.power(r, lag)

    def grad(self, theta, j):
        """Partial derivative dV/dtheta_j."""
        if not 0 <= j < self.l:
            raise BadIndex(f"parameter index {j} outside 0..{self.l - 1}")
        return self.grads(theta)[j]

    def grads(self, theta):
        """All partial derivatives, shape ``(l, k, k)``."""
        theta = self._check_theta(theta)
        if self.is_linear:
            return self.basis
        sigma2, r = theta
        lag = self._lags()
        d_sigma = np.power(r, lag)
        d_r = np.zeros_like(d_sigma)
        off = lag > 0
        d_r[off] = sigma2 * lag[off] * np.power(r, lag[off] - 1)
        return np.stack([d_sigma, d_r])

    def basis_matrix(self):
        """The k^2 x l matrix whose columns are vec(L_j)."""
        if self.basis is None:
            raise NotLinear(f"{self.kind} structure is not linear")
        return self.basis.reshape(self.l, -1).T.copy()  # L_j symmetric: order irrelevant

    def scale_theta(self, theta, alpha):
        """theta' with V(theta') = alpha * V(theta)."""
        theta = self._check_theta(theta)
        if self.is_linear:
            return alpha * theta
        return np.array([alpha * theta[0], theta[1]])

    def in_domain(self, theta):
        if self.kind == "ar1":
            return theta[0] > 0 and -1.0 < theta[1] < 1.0
        return True

    def reference_theta(self, scale=1.0):
        """A parameter with V(theta) positive definite, used to repair starts."""
        if self.kind == "unstructured":
            return scale * vech(np.eye(self.k))
        if self.kind == "lmm":
            t = np.zeros(self.l)
            t[-1] = scale
            return t
        if self.kind == "compound_symmetry":
            return np.array([0.0, scale])
        if self.kind == "stationary_banded":
            t = np.zeros(self.l)
            t[0] = scale
            return t
        return np.array([scale, 0.0])

    def project(self, S):
        """Least-squares projection of a symmetric matrix onto the structure."""
        S = 0.5 * (np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T)
        if self.is_linear:
            L = self.basis_matrix()
            return np.linalg.lstsq(L, vec(S), rcond=None)[0]
        lag = self._lags()
        sigma2 = max(np.mean(np.diag(S)), np.finfo(float).tiny)
        if self.k == 1:
            return np.array([sigma2, 0.0])
        r = np.mean(S[lag == 1]) / sigma2
        return np.array([sigma2, float(np.clip(r, -0.95, 0.95))])

    def is_pds(self, theta, eig_floor=1e-12):
        if not self.in_domain(theta):
            return False
        lam = np.linalg.eigvalsh(self.value(theta))
        return bool(lam[0] > 0 and lam[0] >= eig_floor * lam[-1])

    def _lags(self):
        idx = np.arange(self.k)
        return np.abs(idx[:, None] - idx[None, :])

    def to_config(self):
        cfg = {"kind": self.kind, "k": self.k}
        if self.kind == "lmm":
            cfg["Z"] = self.design_blocks["Z"].tolist()
            cfg["groups"] = list(self.design_blocks["groups"])
            cfg["R"] = self.design_blocks["R"].tolist()
        return cfg


def unstructured(k):
    D = duplication_matrix(k)
    basis = np.stack([unvec(D[:, j], k) for j in range(D.shape[1])])
    return CovarianceStructure("unstructured", k, D.shape[1], basis)


def compound_symmetry(k):
    basis = np.stack([np.ones((k, k)), np.eye(k)])
    return CovarianceStructure("compound_symmetry", k, 2, basis)


def stationary_banded(k):
    idx = np.arange(k)
    lag = np.abs(idx[:, None] - idx[None, :])
    basis = np.stack([(lag == j).astype(float) for j in range(k)])
    return CovarianceStructure("stationary_banded", k, k, basis)


def ar1(k):
    return CovarianceStructure("ar1", k, 2)


def lmm(Z, R=None, groups=None):
    """Variance-components structure ``sum_j theta_j Z_j Z_j^T + theta_{r+1} R``.

    Parameters
    ----------
    Z : array_like, shape (k, g)
        Random-effects design.
    R : array_like, optional
        Known error pattern; identity by default.  A 1-d array is a diagonal.
    groups : list of int, optional
        Variance-component label per column of ``Z``.  By default every column
        is its own independent random effect.

    theta is ordered as (random-effect variances..., error variance).
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    k, g = Z.shape
    if R is None:
        R = np.eye(k)
    R = np.asarray(R, dtype=float)
    if R.ndim == 1:
        R = np.diag(R)
    if R.shape != (k, k):
        raise BadTheta(f"R must be {k}x{k}")
    if groups is None:
        groups = list(range(g))
    groups = [int(x) for x in groups]
    if len(groups) != g:
        raise BadTheta("one group label per column of Z required")
    labels = sorted(set(groups))
    blocks = []
    for lab in labels:
        Zj = Z[:, [c for c in range(g) if groups[c] == lab]]
        blocks.append(Zj @ Zj.T)
    validate_pds(R)  # symmetry check
    basis = np.stack(blocks + [R])
    return CovarianceStructure(
        "lmm", k, len(blocks) + 1, basis, {"Z": Z, "R": R, "groups": groups}
    )


def from_config(cfg):
    """Build a structure from its JSON fragment."""
    kind = cfg.get("kind")
    if kind == "lmm":
        R = cfg.get("R", "identity")
        Z = np.asarray(cfg["Z"], dtype=float)
        if isinstance(R, str):
            if R != "identity":
                raise ValueError(f"unknown R value {R!r}")
            R = None
        elif isinstance(R, dict):
            R = np.diag(np.asarray(R["diag"], dtype=float))
        return lmm(Z, R, cfg.get("groups"))
    k = int(cfg["k"])
    if k < 1:
        raise ValueError("k must be positive")
    builders = {
        "unstructured": unstructured,
        "compound_symmetry": compound_symmetry,
        "stationary_banded": stationary_banded,
        "ar1": ar1,
    }
    if kind not in builders:
        raise ValueError(f"unknown structure kind {kind!r}")
    return builders[kind](k)


def require_pds(V):
    """Cholesky factor of V or :class:`NotPds`."""
    try:
        C = np.linalg.cholesky(V)
    except np.linalg.LinAlgError as exc:
        raise NotPds("V(theta) is not positive definite") from exc
    dg = np.diag(C) ** 2
    if dg.min() <= 0 or not np.all(np.isfinite(C)):
        raise NotPds("V(theta) is not positive definite")
    return C
