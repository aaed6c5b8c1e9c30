"""Bounded rho functions and the kernels derived from them.

Two families are provided: Tukey's bi-weight, which is smooth and drives the
score equations, and the hard-rejection function ``1 - 1{|s| <= c0}`` that
turns the S-problem into a minimum volume cylinder (MVE/LMS type) problem.
All functions are vectorized over ``s``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotDifferentiable

KINDS = ("biweight", "hard_rejection")

# distances below this magnitude are treated as exact zeros
_TINY = 1e-300


@dataclass(frozen=True)
class RhoFunction:
    """A bounded rho function with cutoff ``c0``.

    Parameters
    ----------
    kind : {"biweight", "hard_rejection"}
    c0 : float
        Cutoff beyond which rho is constant.
    """

    kind: str
    c0: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown rho kind {self.kind!r}")
        if not np.isfinite(self.c0) or self.c0 <= 0:
            raise ValueError("c0 must be a positive finite number")

    @property
    def a0(self) -> float:
        """Supremum of rho."""
        if self.kind == "biweight":
            return self.c0**2 / 6.0
        return 1.0

    @property
    def differentiable(self) -> bool:
        return self.kind == "biweight"

    def rho(self, s):
        s = _clean(s)
        c = self.c0
        if self.kind == "hard_rejection":
            return np.where(s <= c, 0.0, 1.0)
        x = np.minimum(s / c, 1.0) ** 2
        # s^2/2 - s^4/(2c^2) + s^6/(6c^4), written in x = (s/c)^2
        return c * c * x * (3.0 - 3.0 * x + x * x) / 6.0

    def psi(self, s):
        """First derivative rho'(s)."""
        self._require_derivs()
        s = _clean(s)
        w = self.u(s)
        return w * s

    def u(self, s):
        """Weight u(s) = rho'(s)/s, with u(0) = 1 by continuity."""
        self._require_derivs()
        s = _clean(s)
        x = (s / self.c0) ** 2
        return np.where(x <= 1.0, (1.0 - x) ** 2, 0.0)

    def rho2(self, s):
        """Second derivative rho''(s) (one-sided at the cutoff)."""
        self._require_derivs()
        s = _clean(s)
        x = (s / self.c0) ** 2
        return np.where(x <= 1.0, (1.0 - x) * (1.0 - 5.0 * x), 0.0)

    def v(self, s, b0):
        """v(s) = u(s) s^2 - rho(s) + b0."""
        s = _clean(s)
        return self.u(s) * s * s - self.rho(s) + b0

    def sup_psi_s(self) -> float:
        """sup over s of rho'(s) s = u(s) s^2 (attained at s^2 = c0^2/3)."""
        self._require_derivs()
        return 4.0 * self.c0**2 / 27.0

    def _require_derivs(self):
        if self.kind != "biweight":
            raise NotDifferentiable(f"{self.kind} rho has no classical derivative")


def _clean(s):
    s = np.abs(np.asarray(s, dtype=float))
    return np.where(s < _TINY, 0.0, s)


def rho_eval(f: RhoFunction, s):
    return f.rho(s)


def rho_derivs(f: RhoFunction, s, b0=0.0):
    """Return ``(rho', rho'', u, v)`` at ``s``; ``b0`` enters only ``v``."""
    if not f.differentiable:
        raise NotDifferentiable(f"{f.kind} rho has no classical derivative")
    return f.psi(s), f.rho2(s), f.u(s), f.v(s, b0)
