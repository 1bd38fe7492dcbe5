"""Metric-aware vector calculus on R^3.

All operations are batch-first: points and vector values have shape
(..., 3), metrics (..., 3, 3), metric first derivatives (..., 3, 3, 3)
with ``dg[..., k, i, j] = d_k g_ij``, and vector Jacobians (..., 3, 3)
with ``jac[..., i, j] = d_j X^i``.  Components are always Cartesian;
``sqrt(det g)`` therefore denotes the Cartesian-component determinant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EPS3",
    "GeometryError",
    "InvalidMetricError",
    "InsufficientDataError",
    "MetricFrame",
    "VecSample",
    "euclidean_frame",
    "metric_inverse",
    "sqrt_det",
    "dlog_sqrt_det",
    "christoffel",
    "dot_g",
    "norm2_g",
    "cross_g",
    "grad_g",
    "div_g",
    "div_euclid",
    "curl_g",
    "deformation_tensor",
    "lie_deformation_euclid",
    "lie_bracket",
    "fd_jacobian",
    "fd_gradient",
    "toroidal_from_cartesian",
    "cartesian_from_toroidal",
]

# Levi-Civita symbol, eps_{123} = +1 (right-handed Cartesian frame).
EPS3 = np.zeros((3, 3, 3))
EPS3[0, 1, 2] = EPS3[1, 2, 0] = EPS3[2, 0, 1] = 1.0
EPS3[0, 2, 1] = EPS3[2, 1, 0] = EPS3[1, 0, 2] = -1.0


class GeometryError(Exception):
    pass


class InvalidMetricError(GeometryError):
    """Metric is not symmetric positive definite."""


class InsufficientDataError(GeometryError):
    """An operation needs derivative data that was not supplied."""


def metric_inverse(g):
    return np.linalg.inv(g)


def sqrt_det(g):
    return np.sqrt(np.linalg.det(g))


def dlog_sqrt_det(g, dg):
    """d_k log sqrt|g| = (1/2) g^{ij} d_k g_ij (Jacobi's formula)."""
    gi = metric_inverse(g)
    return 0.5 * np.einsum("...ij,...kij->...k", gi, dg)


def christoffel(g, dg):
    """Gamma^k_ij = (1/2) g^{kl} (d_i g_jl + d_j g_il - d_l g_ij)."""
    gi = metric_inverse(g)
    term = dg + np.einsum("...jil->...ijl", dg) - np.einsum("...lij->...ijl", dg)
    return 0.5 * np.einsum("...kl,...ijl->...kij", gi, term)


@dataclass
class MetricFrame:
    """Pointwise metric with optional first derivatives.

    ``g`` has Cartesian components; ``dg[..., k, i, j] = d_k g_ij`` when
    available.  Second derivatives of the metric are never stored: every
    supported operation needs at most Christoffel symbols.
    """

    g: np.ndarray
    dg: np.ndarray | None = None
    _inv: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def create(cls, g, dg=None, validate=True):
        g = np.asarray(g, dtype=float)
        if validate:
            sym = np.abs(g - np.swapaxes(g, -1, -2)).max()
            if sym > 1e-10 * max(1.0, np.abs(g).max()):
                raise InvalidMetricError(f"metric not symmetric (defect {sym:.3e})")
            try:
                np.linalg.cholesky(g)
            except np.linalg.LinAlgError as exc:
                raise InvalidMetricError("metric not positive definite") from exc
        return cls(g=g, dg=None if dg is None else np.asarray(dg, dtype=float))

    @property
    def inv(self):
        if self._inv is None:
            self._inv = metric_inverse(self.g)
        return self._inv

    @property
    def det(self):
        return np.linalg.det(self.g)

    @property
    def sqrt_det(self):
        return np.sqrt(self.det)

    def christoffel(self):
        if self.dg is None:
            raise InsufficientDataError("Christoffel symbols need metric derivatives")
        return christoffel(self.g, self.dg)

    def require_derivatives(self):
        if self.dg is None:
            raise InsufficientDataError("operation needs metric first derivatives")
        return self.dg


@dataclass
class VecSample:
    """Vector value with optional Jacobian, ``jac[..., i, j] = d_j X^i``."""

    value: np.ndarray
    jac: np.ndarray | None = None

    def require_jac(self):
        if self.jac is None:
            raise InsufficientDataError("operation needs the field Jacobian")
        return self.jac


def euclidean_frame(shape=()):
    g = np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
    dg = np.zeros(shape + (3, 3, 3))
    return MetricFrame(g=g, dg=dg)


def dot_g(g, X, Y):
    return np.einsum("...ij,...i,...j->...", g, X, Y)


def norm2_g(g, X):
    return dot_g(g, X, X)


def cross_g(g, X, Y):
    """(X x_g Y)^k = sqrt|g| g^{kl} eps_{ijl} X^i Y^j."""
    gi = metric_inverse(g)
    c = np.einsum("ijl,...i,...j->...l", EPS3, X, Y)
    return sqrt_det(g)[..., None] * np.einsum("...kl,...l->...k", gi, c)


def grad_g(g, df):
    """(grad_g f)^i = g^{ij} d_j f, from the Euclidean gradient df."""
    return np.einsum("...ij,...j->...i", metric_inverse(g), df)


def div_euclid(jac):
    return np.einsum("...ii->...", jac)


def div_g(g, dg, X, jac):
    """div_g X = (1/sqrt|g|) d_i (sqrt|g| X^i) = tr(dX) + X . dlog sqrt|g|."""
    return div_euclid(jac) + np.einsum("...k,...k->...", X, dlog_sqrt_det(g, dg))


def _lower_jacobian(g, dg, X, jac):
    """d_i X_j for the lowered one-form X_j = g_jk X^k."""
    return np.einsum("...ijk,...k->...ij", dg, X) + np.einsum(
        "...jk,...ki->...ij", g, jac
    )


def curl_g(g, dg, X, jac):
    """(curl_g X)^m = sqrt|g| g^{mn} g^{ik} g^{jl} eps_{kln} d_i X_j."""
    gi = metric_inverse(g)
    dXl = _lower_jacobian(g, dg, X, jac)
    raised = np.einsum("...ik,...jl,...ij->...kl", gi, gi, dXl)
    contracted = np.einsum("kln,...kl->...n", EPS3, raised)
    return sqrt_det(g)[..., None] * np.einsum("...mn,...n->...m", gi, contracted)


def cross_g_jacobian(g, dg, X, jacX, Y, jacY):
    """Value and Jacobian of W = X x_g Y by the product rule.

    Needs only first derivatives of the metric.  Returns (W, dW) with
    ``dW[..., i, k] = d_k W^i``.
    """
    gi = metric_inverse(g)
    s = sqrt_det(g)
    ds = s[..., None] * dlog_sqrt_det(g, dg)  # d_k sqrt|g|
    c = np.einsum("ijl,...i,...j->...l", EPS3, X, Y)
    dc = np.einsum("ijl,...ik,...j->...lk", EPS3, jacX, Y) + np.einsum(
        "ijl,...i,...jk->...lk", EPS3, X, jacY
    )
    # d_k (g^{ml}) = -g^{ma} (d_k g_ab) g^{bl}
    dgi = -np.einsum("...ma,...kab,...bl->...mlk", gi, dg, gi)
    W = s[..., None] * np.einsum("...ml,...l->...m", gi, c)
    dW = (
        np.einsum("...k,...ml,...l->...mk", ds, gi, c)
        + s[..., None, None] * np.einsum("...mlk,...l->...mk", dgi, c)
        + s[..., None, None] * np.einsum("...ml,...lk->...mk", gi, dc)
    )
    return W, dW


def deformation_tensor(g, dg, X, jac):
    """(L_X g)_ij = X^k d_k g_ij + g_kj d_i X^k + g_ik d_j X^k."""
    lie = np.einsum("...k,...kij->...ij", X, dg)
    lie = lie + np.einsum("...kj,...ki->...ij", g, jac)
    lie = lie + np.einsum("...ik,...kj->...ij", g, jac)
    return lie


def lie_deformation_euclid(jac):
    """Euclidean deformation tensor from the field Jacobian: dX + dX^T."""
    return jac + np.swapaxes(jac, -1, -2)


def lie_bracket(X, jacX, Y, jacY):
    """[X, Y]^i = X^j d_j Y^i - Y^j d_j X^i."""
    return np.einsum("...ij,...j->...i", jacY, X) - np.einsum(
        "...ij,...j->...i", jacX, Y
    )


def fd_jacobian(fn, points, h):
    """Central-difference Jacobian of a batch vector field fn: (...,3)->(...,3)."""
    points = np.asarray(points, dtype=float)
    cols = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        cols.append((fn(points + e) - fn(points - e)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def fd_gradient(fn, points, h):
    """Central-difference gradient of a batch scalar field."""
    points = np.asarray(points, dtype=float)
    comps = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        comps.append((fn(points + e) - fn(points - e)) / (2.0 * h))
    return np.stack(comps, axis=-1)


# ---------------------------------------------------------------------------
# Toroidal chart (r, theta, phi):
#   X = (R0 + r cos th) cos ph, Y = (R0 + r cos th) sin ph, Z = r sin th.
# Ordered (r, theta, phi); right-handed with eps_{123} = +1.
# ---------------------------------------------------------------------------


def toroidal_from_cartesian(points, R0):
    """Map Cartesian points to (r, theta, phi).

    Returns (coords, valid) where ``valid`` is False when the chart is
    undefined (cylindrical radius R = 0).
    """
    points = np.asarray(points, dtype=float)
    X, Y, Z = points[..., 0], points[..., 1], points[..., 2]
    R = np.hypot(X, Y)
    valid = R > 0.0
    phi = np.arctan2(Y, X)
    r = np.hypot(R - R0, Z)
    theta = np.arctan2(Z, R - R0)
    return np.stack([r, theta, phi], axis=-1), valid


def cartesian_from_toroidal(coords, R0):
    coords = np.asarray(coords, dtype=float)
    r, theta, phi = coords[..., 0], coords[..., 1], coords[..., 2]
    R = R0 + r * np.cos(theta)
    return np.stack([R * np.cos(phi), R * np.sin(phi), r * np.sin(theta)], axis=-1)
