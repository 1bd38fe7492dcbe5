"""Coefficients and sources of the axisymmetric and generalized operators.

The generalized scalar operator on the cross-section is derived in a frame
adapted to the symmetry field: at a half-plane point the frame is
(e_x, e_z, xi) and, because the metric is invariant along the flow, the
full 3D metric divergence of sqrt|g| grad_g psi / |xi|_g^2 reduces to a 2D
operator whose coefficients involve only pointwise frame data.  Both the
in-plane Cartesian form (smooth through the pole) and the polar-chart form
are provided; the axisymmetric specialization reproduces the toroidal
Grad-Shafranov coefficients exactly.

Sign convention: operators are stored as L = -(sum a d2 + sum b d1) (+
zeroth order), so the linearized operator is positive like the negative
Dirichlet Laplacian, and L psi = F(psi) + G(x, psi) is the equation solved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import metrics as qmetrics
from .elliptic import DiskSpline, LinearOperator, PolarGrid

__all__ = [
    "DegenerateSymmetryError",
    "l0_coefficients",
    "l0_cartesian",
    "cartesian_to_polar_coefficients",
    "CoefficientField",
    "build_coefficient_field",
    "ggs_coefficients",
    "SourceG",
    "axisym_source",
    "ggs_sources",
    "coefficient_distance",
    "linearized_operator",
    "apply_cartesian_operator",
]


class DegenerateSymmetryError(geo.GeometryError):
    """|xi|_g vanishes on the requested points."""


# ---------------------------------------------------------------------------
# Axisymmetric operator
# ---------------------------------------------------------------------------


def l0_coefficients(r, theta, R0):
    """Polar-chart coefficients of the toroidal Grad-Shafranov operator.

    With R = R0 + r cos(theta):
        a_rr = 1/R^2, a_rt = 0, a_tt = 1/(r^2 R^2),
        b_r = (1/R^2)(1/r - cos(theta)/R), b_t = sin(theta)/(r R^3).
    Finite pole variants r*b_r, r^2*a_tt, r*b_t are included.
    """
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    R = R0 + r * np.cos(theta)
    r_safe = np.where(r > 0, r, np.nan)
    out = {
        "a_rr": 1.0 / R**2,
        "a_rt": np.zeros(np.broadcast_shapes(r.shape, theta.shape)),
        "a_tt": 1.0 / (r_safe**2 * R**2),
        "b_r": (1.0 / R**2) * (1.0 / r_safe - np.cos(theta) / R),
        "b_t": np.sin(theta) / (r_safe * R**3),
        "r_b_r": (1.0 / R**2) * (1.0 - r * np.cos(theta) / R),
        "r2_a_tt": 1.0 / R**2,
        "r_b_t": np.sin(theta) / R**3,
    }
    return out


def l0_cartesian(x, y, R0):
    """In-plane Cartesian form of the axisymmetric coefficients.

    A = I / R^2 and B = (-1/R^3, 0) with R = R0 + x; this is the
    cylindrical-coordinate operator divided by R^2.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    R = R0 + x
    shape = np.broadcast_shapes(x.shape, y.shape)
    A = np.zeros(shape + (2, 2))
    A[..., 0, 0] = 1.0 / R**2
    A[..., 1, 1] = 1.0 / R**2
    B = np.zeros(shape + (2,))
    B[..., 0] = -1.0 / R**3
    return A, B


def cartesian_to_polar_coefficients(A, B, x, y):
    """Rewrite sum A^{IJ} d_I d_J + B^I d_I in polar derivatives."""
    r = np.hypot(x, y)
    r_safe = np.where(r > 0, r, np.nan)
    c, s = x / r_safe, y / r_safe
    Axx, Axy, Ayy = A[..., 0, 0], A[..., 0, 1], A[..., 1, 1]
    Bx, By = B[..., 0], B[..., 1]
    out = {
        "a_rr": Axx * c**2 + 2 * Axy * c * s + Ayy * s**2,
        "a_rt": (-Axx * c * s + Axy * (c**2 - s**2) + Ayy * c * s) / r_safe,
        "a_tt": (Axx * s**2 - 2 * Axy * c * s + Ayy * c**2) / r_safe**2,
        "b_r": (Axx * s**2 - 2 * Axy * c * s + Ayy * c**2) / r_safe
        + Bx * c
        + By * s,
        "b_t": (
            (Axx - Ayy) * 2 * c * s / r_safe**2
            - 2 * Axy * (c**2 - s**2) / r_safe**2
        ) / 1.0
        + (-Bx * s + By * c) / r_safe,
    }
    return out


# ---------------------------------------------------------------------------
# Generalized operator via the adapted frame
# ---------------------------------------------------------------------------


def _plane_points(x, y, R0):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shape = np.broadcast_shapes(x.shape, y.shape)
    pts = np.zeros(shape + (3,))
    pts[..., 0] = R0 + x
    pts[..., 2] = y
    return pts


def _frame_data(gsource, xi, x, y, R0):
    """Adapted 3x3 metric M, s = sqrt(det g), w = |xi|_g^2 at plane points."""
    pts = _plane_points(x, y, R0)
    g = gsource.metric(pts)
    xival = xi.value(pts)
    shape = np.shape(pts)[:-1]
    E = np.zeros(shape + (3, 3))
    E[..., 0, 0] = 1.0
    E[..., 2, 1] = 1.0
    E[..., :, 2] = xival
    M = np.einsum("...ai,...ab,...bj->...ij", E, g, E)
    s = np.sqrt(np.linalg.det(g))
    w = M[..., 2, 2]
    if np.any(w <= 0):
        raise DegenerateSymmetryError("|xi|_g^2 <= 0 on the cross-section")
    return M, s, w


def _raw_cartesian_coefficients(gsource, xi, x, y, R0):
    """Second-order block and the conservative-form flux density.

    Returns (A, q, sqrtM, s, w) with A = (s/w) * inverse(M)[:2,:2] and
    q^{IJ} = sqrt|M| A^{IJ}; the first-order coefficients are
    B^J = (1/sqrt|M|) d_I q^{IJ}.
    """
    M, s, w = _frame_data(gsource, xi, x, y, R0)
    Mi = np.linalg.inv(M)
    sqrtM = np.sqrt(np.linalg.det(M))
    A = (s / w)[..., None, None] * Mi[..., :2, :2]
    q = sqrtM[..., None, None] * A
    return A, q, sqrtM, s, w


def ggs_coefficients(gsource, xi, x, y, R0, fd_step=None, r0_scale=1.0):
    """Cartesian-frame coefficients (A, B) of the generalized operator,
    plus the scalar fields s = sqrt det g and w = |xi|_g^2.

    The first-order terms use central differences of the conservative flux
    density in the cross-section plane.
    """
    h = fd_step if fd_step is not None else 1e-5 * r0_scale
    A, q0, sqrtM, s, w = _raw_cartesian_coefficients(gsource, xi, x, y, R0)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _, qxp, _, _, _ = _raw_cartesian_coefficients(gsource, xi, x + h, y, R0)
    _, qxm, _, _, _ = _raw_cartesian_coefficients(gsource, xi, x - h, y, R0)
    _, qyp, _, _, _ = _raw_cartesian_coefficients(gsource, xi, x, y + h, R0)
    _, qym, _, _, _ = _raw_cartesian_coefficients(gsource, xi, x, y - h, R0)
    dq_x = (qxp - qxm) / (2 * h)
    dq_y = (qyp - qym) / (2 * h)
    B = (dq_x[..., 0, :] + dq_y[..., 1, :]) / sqrtM[..., None]
    return A, B, s, w


def curl_source_term(gsource, xi, x, y, R0, fd_step=1e-6):
    """K = (xi/|xi|_g^2) ._g curl_g (xi/|xi|_g^2) at plane points."""
    pts = _plane_points(x, y, R0)

    def vfield(p):
        g = gsource.metric(p)
        v = xi.value(p)
        w = np.einsum("...ij,...i,...j->...", g, v, v)
        return v / w[..., None]

    g = gsource.metric(pts)
    dg = gsource.metric_derivative(pts)
    V = vfield(pts)
    jac = geo.fd_jacobian(vfield, pts, fd_step)
    curl = geo.curl_g(g, dg, V, jac)
    return geo.dot_g(g, V, curl)


@dataclass
class CoefficientField:
    """Generalized-operator data tabulated on a padded polar grid.

    Splines give the Cartesian-frame coefficients at arbitrary
    cross-section points (needed at deformed evaluation points during the
    iteration); the polar-chart form on the solve grid is derived from the
    same data.
    """

    R0: float
    pad_grid: PolarGrid
    A11: object
    A12: object
    A22: object
    B1: object
    B2: object
    s: object
    w: object
    K: object
    ellipticity_min: float

    def coefficients_at(self, x, y):
        r = np.hypot(x, y)
        th = np.arctan2(y, x)
        shape = np.shape(r)
        A = np.zeros(shape + (2, 2))
        A[..., 0, 0] = self.A11(r, th)
        A[..., 0, 1] = A[..., 1, 0] = self.A12(r, th)
        A[..., 1, 1] = self.A22(r, th)
        B = np.stack([self.B1(r, th), self.B2(r, th)], axis=-1)
        return A, B

    def scalars_at(self, x, y):
        r = np.hypot(x, y)
        th = np.arctan2(y, x)
        return self.s(r, th), self.w(r, th), self.K(r, th)


def build_coefficient_field(gsource, xi, base, pad=1.15, n_r=None, n_theta=None,
                            grid=None, fd_step=None):
    """Tabulate generalized coefficients on a padded polar grid and wrap
    them in splines."""
    if grid is None:
        raise ValueError("grid required")
    n_r = n_r or grid.n_r
    n_theta = n_theta or grid.n_theta
    pad_grid = PolarGrid(
        n_r=int(np.ceil(n_r * pad)), n_theta=n_theta, r0=grid.r0 * pad
    )
    x, y = pad_grid.xx, pad_grid.yy
    A, B, s, w = ggs_coefficients(
        gsource, xi, x, y, base.R0, fd_step=fd_step, r0_scale=base.r0
    )
    K = curl_source_term(gsource, xi, x, y, base.R0)
    eigs = np.linalg.eigvalsh(A)
    ell_min = float(eigs.min())
    mk = lambda f: DiskSpline(pad_grid, f)
    return CoefficientField(
        R0=base.R0,
        pad_grid=pad_grid,
        A11=mk(A[..., 0, 0]),
        A12=mk(A[..., 0, 1]),
        A22=mk(A[..., 1, 1]),
        B1=mk(B[..., 0]),
        B2=mk(B[..., 1]),
        s=mk(s),
        w=mk(w),
        K=mk(K),
        ellipticity_min=ell_min,
    )


def apply_cartesian_operator(A, B, hess, grad):
    """L u = -(A : hess(u) + B . grad(u)) for stacked 2D data."""
    return -(
        np.einsum("...ij,...ij->...", A, hess)
        + np.einsum("...i,...i->...", B, grad)
    )


# ---------------------------------------------------------------------------
# Sources
# ---------------------------------------------------------------------------


@dataclass
class SourceG:
    """G(x, psi) = C C'(psi) / (s w) - C(psi) K(x) with clamp accounting."""

    C_profile: object
    s_at: object
    w_at: object
    K_at: object

    def __call__(self, x, y, psi):
        s = self.s_at(x, y)
        w = self.w_at(x, y)
        K = self.K_at(x, y)
        C = self.C_profile.value(psi)
        Cp = self.C_profile.derivative(psi)
        return C * Cp / (s * w) - C * K

    def d_psi(self, x, y, psi, h=1e-6):
        return (self(x, y, psi + h) - self(x, y, psi - h)) / (2 * h)


def axisym_source(base):
    """G0(x, psi) = C0 C0'(psi) / R^2 (s = 1, w = R^2, no curl term)."""
    C0 = base.C0_profile()
    R0 = base.R0
    return SourceG(
        C_profile=C0,
        s_at=lambda x, y: np.ones(np.broadcast_shapes(np.shape(x), np.shape(y))),
        w_at=lambda x, y: (R0 + np.asarray(x, dtype=float)) ** 2,
        K_at=lambda x, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))),
    )


def ggs_sources(cfield, C_profile):
    return SourceG(
        C_profile=C_profile,
        s_at=lambda x, y: cfield.s(np.hypot(x, y), np.arctan2(y, x)),
        w_at=lambda x, y: cfield.w(np.hypot(x, y), np.arctan2(y, x)),
        K_at=lambda x, y: cfield.K(np.hypot(x, y), np.arctan2(y, x)),
    )


def coefficient_distance(cfield, base, grid, boundary_radius=None):
    """C0 surrogate for the closeness of (L, G, boundary) to the
    axisymmetric data: max-norm aggregate over in-plane coefficient
    components, the source at the base flux values, and the boundary."""
    x, y = grid.xx, grid.yy
    A, B = cfield.coefficients_at(x, y)
    A0, B0 = l0_cartesian(x, y, base.R0)
    dA = float(np.abs(A - A0).max())
    dB = float(np.abs(B - B0).max())
    psi = base.psi0(grid.rr)
    G = ggs_sources(cfield, base.C0_profile())
    G0 = axisym_source(base)
    dG = float(np.abs(G(x, y, psi) - G0(x, y, psi)).max())
    if boundary_radius is None:
        db = 0.0
    else:
        th = np.linspace(0, 2 * np.pi, 256, endpoint=False)
        db = float(np.abs(boundary_radius(th) - base.r0).max()) / base.r0
    parts = {"dA": dA, "dB": dB, "dG": dG, "db": db}
    scale = 1.0 / base.R0**2  # size of the axisymmetric a-coefficients
    total = dA / scale + dB / (scale / base.R0) + dG / max(abs(G0(0.0, 0.0, 0.5 * base.psi_bar)), 1e-30) + db
    return float(total), parts


def linearized_operator(state, grid, zeroth_extra=None):
    """Discrete linearization of the axisymmetric operator at the base
    state: -(a0 : d2 + b0 : d1) - F0'(psi0) - dG0/dpsi, Dirichlet."""
    c = l0_coefficients(grid.rr, grid.tt, state.R0)
    psi = state.psi0(grid.rr)
    F0p = state.P0_profile().second_derivative(psi)  # derivative of F0 = P0'
    R = state.R0 + grid.rr * np.cos(grid.tt)
    dG0 = state.dcc_prime(psi) / R**2
    c0 = -(F0p + dG0)
    if zeroth_extra is not None:
        c0 = c0 + zeroth_extra
    return LinearOperator.assemble(
        grid,
        c_rr=-c["a_rr"],
        c_rt=0.0,
        c_tt=-c["a_tt"],
        c_r=-c["b_r"],
        c_t=-c["b_t"],
        c_0=c0,
    )
