"""Axisymmetric base state on the large-aspect-ratio torus.

The shipped state has a radial flux function psi0(r) = psibar (1 - (r/r0)^2)
on the disk cross-section, swirl C0(psi) = cbar sqrt(psibar - psi + eps) and
linear pressure P0(psi) = pbar (r0 R0)^-2 psi with pbar = 2 psibar -
(cbar r0)^2.  Levels of psi0 are circles, so streamline quantities reduce to
single-angle quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "BaseStateError",
    "DegenerateLevelError",
    "AnalyticProfile",
    "ProfileFn",
    "BaseState",
    "build_base_state",
    "axisym_gs_residual",
    "travel_time",
    "h1_spectrum",
]


class BaseStateError(ValueError):
    pass


class DegenerateLevelError(BaseStateError):
    """Flux level at or beyond the critical value."""


@dataclass
class AnalyticProfile:
    """Profile of a flux label given by closed-form callables."""

    fn: object
    dfn: object
    d2fn: object = None

    def value(self, c):
        return self.fn(np.asarray(c, dtype=float))

    def derivative(self, c):
        return self.dfn(np.asarray(c, dtype=float))

    def second_derivative(self, c):
        if self.d2fn is None:
            h = 1e-6
            c = np.asarray(c, dtype=float)
            return (self.dfn(c + h) - self.dfn(c - h)) / (2 * h)
        return self.d2fn(np.asarray(c, dtype=float))


class ProfileFn:
    """Monotone-cubic interpolant on collocation nodes with clamped evaluation.

    Evaluations outside the node range are clamped to the nearest endpoint
    and counted in ``clamp_count``.
    """

    def __init__(self, nodes, values):
        nodes = np.asarray(nodes, dtype=float)
        values = np.asarray(values, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2 or np.any(np.diff(nodes) <= 0):
            raise BaseStateError("profile nodes must be strictly increasing")
        self.nodes = nodes
        self.values = values
        self._interp = PchipInterpolator(nodes, values)
        self._deriv = self._interp.derivative()
        self.clamp_count = 0

    def _clamp(self, c):
        c = np.asarray(c, dtype=float)
        lo, hi = self.nodes[0], self.nodes[-1]
        out = np.clip(c, lo, hi)
        self.clamp_count += int(np.count_nonzero((c < lo) | (c > hi)))
        return out

    def value(self, c):
        return self._interp(self._clamp(c))

    def derivative(self, c):
        return self._deriv(self._clamp(c))

    def antiderivative_from(self, c0):
        anti = self._interp.antiderivative()
        shift = anti(np.clip(c0, self.nodes[0], self.nodes[-1]))
        return lambda c: anti(self._clamp(c)) - shift


@dataclass
class BaseState:
    psi_bar: float
    c_bar: float
    r0: float
    R0: float
    eps_reg: float
    p_bar: float = field(init=False)

    def __post_init__(self):
        self.p_bar = 2.0 * self.psi_bar - (self.c_bar * self.r0) ** 2

    # flux function of the minor radius --------------------------------
    def psi0(self, r):
        r = np.asarray(r, dtype=float)
        return self.psi_bar * (1.0 - (r / self.r0) ** 2)

    def dpsi0(self, r):
        r = np.asarray(r, dtype=float)
        return -2.0 * self.psi_bar * r / self.r0**2

    def d2psi0(self, r):
        return np.full(np.shape(np.asarray(r)), -2.0 * self.psi_bar / self.r0**2)

    def r_of_psi(self, c):
        c = np.asarray(c, dtype=float)
        arg = 1.0 - c / self.psi_bar
        if np.any(arg < 0):
            raise DegenerateLevelError("flux level above the on-axis value")
        return self.r0 * np.sqrt(arg)

    def omega(self, r):
        """Angular rate of the streamline flow dx/ds = grad-perp psi0.

        For the radial state |grad psi0| / r = 2 psibar / r0^2, independent
        of radius, so every streamline has the same travel time.
        """
        r = np.asarray(r, dtype=float)
        return np.full(np.shape(r), 2.0 * self.psi_bar / self.r0**2)

    # profiles ----------------------------------------------------------
    def C0_profile(self):
        sq = lambda c: np.sqrt(self.psi_bar - np.asarray(c, dtype=float) + self.eps_reg)
        return AnalyticProfile(
            fn=lambda c: self.c_bar * sq(c),
            dfn=lambda c: -0.5 * self.c_bar / sq(c),
            d2fn=lambda c: -0.25 * self.c_bar / sq(c) ** 3,
        )

    def P0_profile(self):
        k = self.p_bar / (self.r0 * self.R0) ** 2
        return AnalyticProfile(
            fn=lambda c: k * np.asarray(c, dtype=float),
            dfn=lambda c: np.full(np.shape(np.asarray(c)), k),
            d2fn=lambda c: np.zeros(np.shape(np.asarray(c))),
        )

    def cc_prime(self, c):
        """C0 C0'(psi) = -(c_bar^2)/2, exactly, for every eps_reg."""
        return np.full(np.shape(np.asarray(c)), -0.5 * self.c_bar**2)

    def dcc_prime(self, c):
        return np.zeros(np.shape(np.asarray(c)))

    # cartesian cross-section helpers ----------------------------------
    def psi0_xy(self, x, y):
        return self.psi0(np.hypot(x, y))

    def grad_psi0_xy(self, x, y):
        r = np.hypot(x, y)
        r_safe = np.where(r > 0, r, 1.0)
        dp = self.dpsi0(r)
        return dp * x / r_safe, dp * y / r_safe

    def hess_psi0_xy(self, x, y):
        """Cartesian Hessian of the radial flux function."""
        r = np.hypot(x, y)
        r_safe = np.where(r > 0, r, 1.0)
        cx, sy = x / r_safe, y / r_safe
        d2, d1 = self.d2psi0(r), self.dpsi0(r)
        hxx = d2 * cx**2 + d1 * sy**2 / r_safe
        hyy = d2 * sy**2 + d1 * cx**2 / r_safe
        hxy = (d2 - d1 / r_safe) * cx * sy
        return hxx, hxy, hyy


def build_base_state(psi_bar=1.0, c_bar=1.0, r0=0.5, R0=10.0, eps_reg=None):
    if not (0 < r0 < R0):
        raise BaseStateError("need 0 < r0 < R0")
    if psi_bar <= 0:
        raise BaseStateError("need psi_bar > 0")
    if eps_reg is None:
        eps_reg = 1e-6 * psi_bar
    if eps_reg <= 0:
        raise BaseStateError("need eps_reg > 0")
    return BaseState(psi_bar=psi_bar, c_bar=c_bar, r0=r0, R0=R0, eps_reg=eps_reg)


def axisym_gs_residual(state, r, theta):
    """Residuals of the toroidal Grad-Shafranov equation for the base state.

    Returns a dict with the full toroidal residual, the infinite-aspect
    residual (1/R0 terms dropped, the (1/r) d_r term kept) and the
    radial-only combination d_r^2 psi0 + R0^2 P0' + C0 C0'.  The latter is
    the constant (pbar - 2 psibar)/r0^2 - cbar^2/2 for this family; it
    vanishes only in the swirl-free case.
    """
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    R = state.R0 + r * np.cos(theta)
    psi = state.psi0(r)
    d1, d2 = state.dpsi0(r), state.d2psi0(r)
    P0p = state.P0_profile().derivative(psi)
    ccp = state.cc_prime(psi)
    lap2d = d2 + np.where(r > 0, d1 / np.where(r > 0, r, 1.0), d2)  # (1/r)d_r -> d2 at r=0
    toroidal = lap2d - np.cos(theta) / R * d1 + R**2 * P0p + ccp
    infinite_aspect = lap2d + state.R0**2 * P0p + ccp
    radial_only = d2 + state.R0**2 * P0p + ccp
    return {
        "toroidal": toroidal,
        "infinite_aspect": infinite_aspect,
        "radial_only": radial_only,
        "toroidal_max": float(np.abs(toroidal).max()),
        "infinite_aspect_max": float(np.abs(infinite_aspect).max()),
        "radial_only_max": float(np.abs(radial_only).max()),
    }


def travel_time(state, c):
    """Loop integral of dl / |grad psi0| over the level set {psi0 = c}.

    Levels are circles of radius r_c with |grad psi0| = 2 psibar r_c / r0^2,
    so the value is pi r0^2 / psibar for every interior level.
    """
    c = float(c)
    if not (0.0 < c < state.psi_bar):
        raise DegenerateLevelError(f"level {c} outside (0, psi_bar)")
    r_c = float(state.r_of_psi(c))
    grad = abs(float(state.dpsi0(r_c)))
    if grad == 0.0:
        raise DegenerateLevelError("gradient vanishes on the requested level")
    return 2.0 * np.pi * r_c / grad


def h1_spectrum(state, n_r=64, n_theta=64, max_iter=200, tol=1e-10):
    """Smallest eigenvalue of the discretized linearized operator.

    Inverse power iteration on the Dirichlet discretization; a positive
    value certifies the positivity hypothesis at this resolution.
    """
    from . import elliptic
    from . import operators

    grid = elliptic.PolarGrid(n_r=n_r, n_theta=n_theta, r0=state.r0)
    op = operators.linearized_operator(state, grid)
    return elliptic.smallest_eigenvalue(op, max_iter=max_iter, tol=tol)
