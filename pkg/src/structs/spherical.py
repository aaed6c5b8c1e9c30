"""Expectations of functions of ||z|| for z ~ N(0, I_k), and the constants
of the asymptotic theory derived from them.

``||z||`` follows the chi distribution with ``k`` degrees of freedom.  All
rho-derived kernels are piecewise polynomial with a kink at ``c0``, so the
integrals are computed with adaptive Gauss-Legendre panels split at the
cutoff, plus the exact constant tail ``f(c0+) * P(||z|| > c0)`` when the
kernel is constant beyond the cutoff.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, special, stats

from .errors import BadConstants, BadDim, NoRoot, NotDifferentiable
from .rho import RhoFunction

QUAD_TOL = 1e-10
_TAIL_PROB = 1e-20


@lru_cache(maxsize=None)
def _gauss_legendre(m):
    return np.polynomial.legendre.leggauss(m)


def chi_logpdf(s, k):
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore"):
        return (
            (k - 1) * np.log(s)
            - 0.5 * s * s
            - (0.5 * k - 1) * np.log(2.0)
            - special.gammaln(0.5 * k)
        )


def chi_pdf(s, k):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    pos = s > 0
    out[pos] = np.exp(chi_logpdf(s[pos], k))
    if k == 1:
        out[s == 0] = np.sqrt(2.0 / np.pi)
    return out


def _panel(g, a, b, m):
    """Gauss-Legendre estimate and the matching integral of |g|."""
    x, w = _gauss_legendre(m)
    half = 0.5 * (b - a)
    vals = g(half * x + 0.5 * (a + b))
    return half * np.dot(w, vals), half * np.dot(w, np.abs(vals))


def integrate(g, a, b, tol=QUAD_TOL, order=20, max_depth=40):
    """Adaptive Gauss-Legendre on [a, b] comparing m and 2m point rules.

    A panel is accepted once the two rules agree to its share of ``tol`` or
    to rounding level relative to the panel's integral of |g|.
    """
    total = 0.0
    stack = [(a, b, 0)]
    width = b - a
    eps = np.finfo(float).eps
    while stack:
        lo, hi, depth = stack.pop()
        coarse, _ = _panel(g, lo, hi, order)
        fine, mag = _panel(g, lo, hi, 2 * order)
        limit = max(tol * (hi - lo) / width, 100 * eps * mag)
        if abs(fine - coarse) <= limit or depth >= max_depth:
            total += fine
        else:
            mid = 0.5 * (lo + hi)
            stack.append((lo, mid, depth + 1))
            stack.append((mid, hi, depth + 1))
    return total


def upper_limit(k):
    """Radius beyond which the chi_k mass is below 1e-20."""
    return float(stats.chi.isf(_TAIL_PROB, k))


def expect_chi(f, k, breakpoints=(), tol=QUAD_TOL, order=20):
    """E[f(||z||)] for z ~ N(0, I_k), by quadrature over the chi_k density.

    ``f`` must be vectorized.  ``breakpoints`` are kinks of ``f`` (e.g. the
    rho cutoff) at which panels are split.
    """
    if int(k) != k or k <= 0:
        raise BadDim(f"dimension must be a positive integer, got {k}")
    k = int(k)
    top = upper_limit(k)
    edges = sorted({0.0, top, *[float(b) for b in breakpoints if 0 < b < top]})
    g = lambda s: f(s) * chi_pdf(s, k)  # noqa: E731
    return sum(
        integrate(g, lo, hi, tol=tol / len(edges), order=order)
        for lo, hi in zip(edges[:-1], edges[1:])
    )


def expect_chi_split(f, k, c0, tail_value, tol=QUAD_TOL, order=20):
    """E[f(||z||)] for kernels equal to ``tail_value`` beyond ``c0``."""
    if int(k) != k or k <= 0:
        raise BadDim(f"dimension must be a positive integer, got {k}")
    k = int(k)
    top = min(c0, upper_limit(k))
    g = lambda s: f(s) * chi_pdf(s, k)  # noqa: E731
    inner = integrate(g, 0.0, top, tol=tol, order=order)
    return inner + tail_value * float(stats.chi.sf(c0, k))


def consistency_b0(rho: RhoFunction, k):
    """b0 = E rho(||z||) at the standard normal."""
    return expect_chi_split(rho.rho, k, rho.c0, rho.a0)


def bdp_ratio(rho: RhoFunction, k):
    return consistency_b0(rho, k) / rho.a0


def tune_cutoff(kind, k, target_r, bracket=(0.1, 100.0)):
    """Cutoff c0 with b0(c0)/a0(c0) = target_r at the k-variate normal."""
    if int(k) != k or k <= 0:
        raise BadDim(f"dimension must be a positive integer, got {k}")
    if not 0 < target_r < 1:
        raise NoRoot("target ratio must lie in (0, 1)")
    if kind == "hard_rejection":
        return float(stats.chi.isf(target_r, k))
    if kind != "biweight":
        raise ValueError(f"unknown rho kind {kind!r}")

    def gap(c):
        return bdp_ratio(RhoFunction(kind, c), k) - target_r

    lo, hi = bracket
    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo * g_hi > 0:
        raise NoRoot(
            f"ratio {target_r} not attainable for c0 in [{lo}, {hi}] at k={k}"
        )
    return float(optimize.brentq(gap, lo, hi, xtol=1e-13, rtol=1e-15))


@dataclass(frozen=True)
class EllipticalConstants:
    """Constants of the limiting theory at the k-variate standard normal."""

    k: int
    c0: float
    b0: float
    a0: float
    r: float
    alpha: float
    gamma1: float
    gamma2: float
    sigma1: float
    sigma2: float
    sigma2_alt: float
    e_rho1_sq: float
    e_rho1_s: float
    e_rho_centered_sq: float
    e_u2_s4: float
    e_rho2: float
    e_rho2_s2: float

    def to_dict(self):
        return asdict(self)


def constants_for(rho: RhoFunction, k, b0=None, order=20):
    """All elliptical constants for a bi-weight rho in dimension k.

    ``b0`` defaults to the consistency value E rho(||z||).  ``sigma2`` uses
    (E[rho'(s) s])^2 in the denominator of its second term;
    ``sigma2_alt`` uses (E[rho'(s)^2])^2 and is reported for comparison.
    """
    if not rho.differentiable:
        raise NotDifferentiable("constants require a differentiable rho")
    c, a0 = rho.c0, rho.a0
    if b0 is None:
        b0 = expect_chi_split(rho.rho, k, c, a0, order=order)

    def E(f, tail=0.0):
        return expect_chi_split(f, k, c, tail, order=order)

    e_rho1_sq = E(lambda s: rho.psi(s) ** 2)
    e_rho1_s = E(lambda s: rho.psi(s) * s)
    e_rho2 = E(rho.rho2)
    e_rho2_s2 = E(lambda s: rho.rho2(s) * s * s)
    e_u = E(rho.u)
    e_u2_s4 = E(lambda s: (rho.u(s) * s * s) ** 2)
    e_rho_centered_sq = E(lambda s: (rho.rho(s) - b0) ** 2, tail=(a0 - b0) ** 2)

    alpha = (1.0 - 1.0 / k) * e_u + e_rho2 / k
    num1 = e_rho2_s2 + (k + 1) * e_rho1_s
    gamma1 = num1 / (k + 2)
    gamma2 = (2.0 * e_rho2_s2 + k * e_rho1_s) / (2.0 * k * (k + 2))
    if num1 == 0:
        raise BadConstants("degenerate gamma1")
    sigma1 = k * (k + 2) * e_u2_s4 / num1**2
    sigma2 = -2.0 / k * sigma1 + 4.0 * e_rho_centered_sq / e_rho1_s**2
    sigma2_alt_ = -2.0 / k * sigma1 + 4.0 * e_rho_centered_sq / e_rho1_sq**2
    return EllipticalConstants(
        k=int(k),
        c0=float(c),
        b0=float(b0),
        a0=float(a0),
        r=float(b0 / a0),
        alpha=float(alpha),
        gamma1=float(gamma1),
        gamma2=float(gamma2),
        sigma1=float(sigma1),
        sigma2=float(sigma2),
        sigma2_alt=float(sigma2_alt_),
        e_rho1_sq=float(e_rho1_sq),
        e_rho1_s=float(e_rho1_s),
        e_rho_centered_sq=float(e_rho_centered_sq),
        e_u2_s4=float(e_u2_s4),
        e_rho2=float(e_rho2),
        e_rho2_s2=float(e_rho2_s2),
    )
