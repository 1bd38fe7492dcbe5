"""Designer (xi, g) pairs: metrics for which a prescribed field is Killing.

Two construction routes are provided.  The pullback route conjugates the
rotation field through a near-identity diffeomorphism; the family shipped
here is a composition of coordinate shears, which is exactly
volume-preserving (so the symmetry field stays divergence-free), has a
closed-form inverse, and carries analytic first and second derivatives.
The circle-average route averages the Euclidean metric along the flow of
the symmetry field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import geometry as geo

__all__ = [
    "OrientationError",
    "NonPeriodicOrbitError",
    "ShearDiffeo",
    "default_shear_family",
    "RotationField",
    "PushforwardField",
    "EuclideanMetric",
    "PullbackMetric",
    "CircleAveragedMetric",
    "RawMetric",
    "SymmetryField",
    "pullback_frame",
    "circle_average_metric",
    "killing_residual",
]


class OrientationError(geo.GeometryError):
    """det df <= 0 somewhere on the working region."""


class NonPeriodicOrbitError(geo.GeometryError):
    def __init__(self, gap, tol):
        super().__init__(f"orbit closure gap {gap:.3e} exceeds tolerance {tol:.3e}")
        self.gap = gap
        self.tol = tol


# ---------------------------------------------------------------------------
# Shear profiles.  Each shear displaces one coordinate by t * profile of the
# other two, so the map has unit Jacobian determinant and an exact inverse.
# ---------------------------------------------------------------------------


@dataclass
class _Shear:
    axis: int          # displaced coordinate
    profile: object    # callable bundle over the other two coordinates

    def _args(self, pts):
        others = [k for k in range(3) if k != self.axis]
        return others, pts[..., others[0]], pts[..., others[1]]

    def forward(self, pts, t):
        out = np.array(pts, dtype=float, copy=True)
        _, u, v = self._args(pts)
        out[..., self.axis] += t * self.profile.value(u, v)
        return out

    def inverse(self, pts, t):
        out = np.array(pts, dtype=float, copy=True)
        _, u, v = self._args(pts)
        out[..., self.axis] -= t * self.profile.value(u, v)
        return out

    def jacobian(self, pts, t):
        shape = np.shape(pts)[:-1]
        J = np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
        others, u, v = self._args(pts)
        du, dv = self.profile.grad(u, v)
        J[..., self.axis, others[0]] += t * du
        J[..., self.axis, others[1]] += t * dv
        return J

    def second_derivative(self, pts, t):
        """D2[..., i, j, k] = d_j d_k f^i; nonzero only for i = axis."""
        shape = np.shape(pts)[:-1]
        D2 = np.zeros(shape + (3, 3, 3))
        others, u, v = self._args(pts)
        huu, huv, hvv = self.profile.hess(u, v)
        a, b, c = self.axis, others[0], others[1]
        D2[..., a, b, b] = t * huu
        D2[..., a, b, c] = t * huv
        D2[..., a, c, b] = t * huv
        D2[..., a, c, c] = t * hvv
        return D2


@dataclass
class _RingBump:
    """exp(-((rho-R0)/sigma)^2 - (w/sigma_w)^2) * cos(m*phi + phase) * amp.

    rho, phi are polar coordinates of the shear plane (u, v); for shears
    whose plane does not contain the torus axis the ring reduces to a
    Gaussian in both arguments (R0 = 0 allowed).  Smooth for rho > 0.
    """

    amp: float
    R0: float
    sigma: float
    m: int
    phase: float = 0.0

    def _polar(self, u, v):
        rho = np.hypot(u, v)
        phi = np.arctan2(v, u)
        return rho, phi

    def value(self, u, v):
        rho, phi = self._polar(u, v)
        return self.amp * np.exp(-(((rho - self.R0) / self.sigma) ** 2)) * np.cos(
            self.m * phi + self.phase
        )

    def grad(self, u, v):
        rho, phi = self._polar(u, v)
        w = np.exp(-(((rho - self.R0) / self.sigma) ** 2))
        c = np.cos(self.m * phi + self.phase)
        s = np.sin(self.m * phi + self.phase)
        dw = w * (-2.0 * (rho - self.R0) / self.sigma**2)
        rho_safe = np.where(rho > 0, rho, 1.0)
        drho_u, drho_v = u / rho_safe, v / rho_safe
        dphi_u, dphi_v = -v / rho_safe**2, u / rho_safe**2
        du = self.amp * (dw * drho_u * c - w * self.m * s * dphi_u)
        dv = self.amp * (dw * drho_v * c - w * self.m * s * dphi_v)
        return du, dv

    def hess(self, u, v):
        # Analytic second derivatives are not worth the algebra here; a
        # high-order central difference of the analytic gradient keeps the
        # error at the 1e-10 level for the scales used.
        h = 1e-5 * max(self.sigma, 1.0)

        def g(uu, vv):
            return np.stack(self.grad(uu, vv), axis=-1)

        duu = (g(u + h, v) - g(u - h, v)) / (2 * h)
        dvv = (g(u, v + h) - g(u, v - h)) / (2 * h)
        return duu[..., 0], 0.5 * (duu[..., 1] + dvv[..., 0]), dvv[..., 1]


@dataclass
class _PlaneWave:
    """amp * cos(k_u u + k_v v + phase) * exp(-(v/sigma_v)^2) envelope."""

    amp: float
    k_u: float
    k_v: float
    sigma_v: float
    phase: float = 0.0

    def value(self, u, v):
        return (
            self.amp
            * np.cos(self.k_u * u + self.k_v * v + self.phase)
            * np.exp(-((v / self.sigma_v) ** 2))
        )

    def grad(self, u, v):
        env = np.exp(-((v / self.sigma_v) ** 2))
        arg = self.k_u * u + self.k_v * v + self.phase
        du = -self.amp * self.k_u * np.sin(arg) * env
        dv = self.amp * (
            -self.k_v * np.sin(arg) * env
            + np.cos(arg) * env * (-2.0 * v / self.sigma_v**2)
        )
        return du, dv

    def hess(self, u, v):
        env = np.exp(-((v / self.sigma_v) ** 2))
        arg = self.k_u * u + self.k_v * v + self.phase
        c, s = np.cos(arg), np.sin(arg)
        denv = env * (-2.0 * v / self.sigma_v**2)
        d2env = env * (4.0 * v**2 / self.sigma_v**4 - 2.0 / self.sigma_v**2)
        huu = -self.amp * self.k_u**2 * c * env
        huv = self.amp * (-self.k_u * self.k_v * c * env - self.k_u * s * denv)
        hvv = self.amp * (
            -self.k_v**2 * c * env - 2.0 * self.k_v * s * denv + c * d2env
        )
        return huu, huv, hvv


@dataclass
class ShearDiffeo:
    """Composition of coordinate shears scaled by a common amplitude t.

    det(df) = 1 identically, the inverse is exact (shears invert one at a
    time), and f = id exactly at t = 0.
    """

    shears: list
    t: float

    def forward(self, pts):
        out = np.asarray(pts, dtype=float)
        for s in self.shears:
            out = s.forward(out, self.t)
        return out

    def inverse(self, pts):
        out = np.asarray(pts, dtype=float)
        for s in reversed(self.shears):
            out = s.inverse(out, self.t)
        return out

    def jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        shape = np.shape(pts)[:-1]
        J = np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
        cur = pts
        for s in self.shears:
            J = np.einsum("...ij,...jk->...ik", s.jacobian(cur, self.t), J)
            cur = s.forward(cur, self.t)
        return J

    def jacobian_and_second(self, pts):
        """Jacobian and second derivative D2[..., i, j, k] = d_j d_k f^i."""
        pts = np.asarray(pts, dtype=float)
        shape = np.shape(pts)[:-1]
        J = np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
        D2 = np.zeros(shape + (3, 3, 3))
        cur = pts
        for s in self.shears:
            Js = s.jacobian(cur, self.t)
            D2s = s.second_derivative(cur, self.t)
            # chain rule: D2(s o f) = D2s(Df, Df) + Ds . D2f
            D2 = np.einsum("...iab,...aj,...bk->...ijk", D2s, J, J) + np.einsum(
                "...ia,...ajk->...ijk", Js, D2
            )
            J = np.einsum("...ij,...jk->...ik", Js, J)
            cur = s.forward(cur, self.t)
        return J, D2

    def with_amplitude(self, t):
        return ShearDiffeo(shears=self.shears, t=t)


def default_shear_family(R0, r0, t, modes=(3, 2, 2), phases=(0.0, 0.4, 1.1)):
    """Default non-axisymmetric deformation used by the solver pipeline.

    One vertical shear shaped as a ring bump around the magnetic axis with
    toroidal mode number modes[0], plus two transverse plane-wave shears.
    The composition is exactly volume-preserving.
    """
    shears = [
        _Shear(axis=2, profile=_RingBump(amp=r0, R0=R0, sigma=4.0 * r0,
                                         m=modes[0], phase=phases[0])),
        _Shear(axis=0, profile=_PlaneWave(amp=0.7 * r0, k_u=modes[1] / R0,
                                          k_v=0.9 / r0, sigma_v=4.0 * r0,
                                          phase=phases[1])),
        _Shear(axis=1, profile=_PlaneWave(amp=0.5 * r0, k_u=modes[2] / R0,
                                          k_v=1.1 / r0, sigma_v=4.0 * r0,
                                          phase=phases[2])),
    ]
    return ShearDiffeo(shears=shears, t=t)


@dataclass
class GenericDiffeo:
    """User-supplied map with optional analytic Jacobian and inverse."""

    map_fn: object
    jac_fn: object = None
    inv_fn: object = None
    fd_step: float = 1e-6

    def forward(self, pts):
        return self.map_fn(np.asarray(pts, dtype=float))

    def jacobian(self, pts):
        if self.jac_fn is not None:
            return self.jac_fn(np.asarray(pts, dtype=float))
        return geo.fd_jacobian(self.map_fn, pts, self.fd_step)

    def inverse(self, pts):
        pts = np.asarray(pts, dtype=float)
        if self.inv_fn is not None:
            return self.inv_fn(pts)
        # Newton iteration; the maps of interest are near-identity.
        y = pts.copy()
        for _ in range(50):
            res = self.forward(y) - pts
            if np.abs(res).max() < 1e-13:
                break
            J = self.jacobian(y)
            y = y - np.linalg.solve(J, res[..., None])[..., 0]
        return y

    def jacobian_and_second(self, pts):
        J = self.jacobian(pts)
        D2 = np.stack(
            [
                (self.jacobian(_shift(pts, k, self.fd_step))
                 - self.jacobian(_shift(pts, k, -self.fd_step))) / (2 * self.fd_step)
                for k in range(3)
            ],
            axis=-1,
        )
        return J, D2


def _shift(pts, k, h):
    out = np.array(pts, dtype=float, copy=True)
    out[..., k] += h
    return out


# ---------------------------------------------------------------------------
# Vector-field sources
# ---------------------------------------------------------------------------


class RotationField:
    """xi0 = R e_Phi = (-Y, X, 0), the generator of rotations."""

    def value(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.stack([-pts[..., 1], pts[..., 0], np.zeros_like(pts[..., 0])],
                        axis=-1)

    def jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        shape = np.shape(pts)[:-1]
        J = np.zeros(shape + (3, 3))
        J[..., 0, 1] = -1.0
        J[..., 1, 0] = 1.0
        return J

    def divergence(self, pts):
        return np.zeros(np.shape(pts)[:-1])


@dataclass
class PushforwardField:
    """xi = df(xi0) through a diffeomorphism: xi(p) = Df(f^-1 p) xi0(f^-1 p)."""

    diffeo: object
    base: object

    def value(self, pts):
        q = self.diffeo.inverse(pts)
        J = self.diffeo.jacobian(q)
        return np.einsum("...ij,...j->...i", J, self.base.value(q))

    def jacobian(self, pts):
        q = self.diffeo.inverse(pts)
        if hasattr(self.diffeo, "jacobian_and_second"):
            J, D2 = self.diffeo.jacobian_and_second(q)
            Ji = np.linalg.inv(J)
            xi0 = self.base.value(q)
            dxi0 = self.base.jacobian(q)
            # d_p [J(q) xi0(q)] = [D2(.,k) xi0 + J dxi0(.,k)] dq/dp
            inner = np.einsum("...ijk,...j->...ik", D2, xi0) + np.einsum(
                "...ij,...jk->...ik", J, dxi0
            )
            return np.einsum("...ik,...kl->...il", inner, Ji)
        return geo.fd_jacobian(self.value, pts, 1e-6)

    def divergence(self, pts):
        J = self.jacobian(pts)
        return np.einsum("...ii->...", J)


# ---------------------------------------------------------------------------
# Metric sources
# ---------------------------------------------------------------------------


class EuclideanMetric:
    def metric(self, pts):
        shape = np.shape(pts)[:-1]
        return np.broadcast_to(np.eye(3), shape + (3, 3)).copy()

    def metric_derivative(self, pts):
        return np.zeros(np.shape(pts)[:-1] + (3, 3, 3))

    def frame(self, pts):
        return geo.MetricFrame(self.metric(pts), self.metric_derivative(pts))


@dataclass
class PullbackMetric:
    """Metric for which the pushforward symmetry field is Killing.

    At p with q = f^-1(p) and J = Df(q), the components are
    g(p) = J^{-T} J^{-1}, so that f is an isometry from Euclidean space to
    (R^3, g).  At t = 0 this returns the identity metric exactly.
    """

    diffeo: object

    def metric(self, pts):
        q = self.diffeo.inverse(pts)
        J = self.diffeo.jacobian(q)
        Ji = np.linalg.inv(J)
        return np.einsum("...ki,...kj->...ij", Ji, Ji)

    def metric_derivative(self, pts):
        if hasattr(self.diffeo, "jacobian_and_second"):
            q = self.diffeo.inverse(pts)
            J, D2 = self.diffeo.jacobian_and_second(q)
            Ji = np.linalg.inv(J)
            # dJ/dp_k = D2[:, :, m] (dq_m/dp_k) = D2 . Ji
            dJ = np.einsum("...ijm,...mk->...ijk", D2, Ji)
            dJi = -np.einsum("...ia,...abk,...bj->...ijk", Ji, dJ, Ji)
            term = np.einsum("...aik,...aj->...kij", dJi, Ji)
            return term + np.einsum("...kij->...kji", term)
        g = self.metric
        h = 1e-6
        return np.stack(
            [(g(_shift(pts, k, h)) - g(_shift(pts, k, -h))) / (2 * h) for k in range(3)],
            axis=-3,
        )

    def sqrt_det(self, pts):
        q = self.diffeo.inverse(pts)
        det = np.linalg.det(self.diffeo.jacobian(q))
        if np.any(det <= 0):
            raise OrientationError("det df <= 0 on the requested points")
        return 1.0 / det

    def frame(self, pts):
        return geo.MetricFrame(self.metric(pts), self.metric_derivative(pts))


@dataclass
class RawMetric:
    """Metric given by an explicit callable (mainly for tests)."""

    fn: object
    dfn: object = None
    fd_step: float = 1e-6

    def metric(self, pts):
        return self.fn(np.asarray(pts, dtype=float))

    def metric_derivative(self, pts):
        if self.dfn is not None:
            return self.dfn(np.asarray(pts, dtype=float))
        h = self.fd_step
        return np.stack(
            [(self.fn(_shift(pts, k, h)) - self.fn(_shift(pts, k, -h))) / (2 * h)
             for k in range(3)],
            axis=-3,
        )

    def frame(self, pts):
        return geo.MetricFrame(self.metric(pts), self.metric_derivative(pts))


@dataclass
class CircleAveragedMetric:
    """g = (1/2pi) integral of phi_s^* delta over one period of the flow.

    For symmetry fields conjugated through a diffeomorphism the flow is
    available in closed form; for generic fields the orbit is integrated
    numerically and must close within tolerance.
    """

    xi: object
    n_quad: int = 256
    fd_step: float = 1e-6
    closure_tol: float = 1e-7

    def metric(self, pts):
        pts = np.asarray(pts, dtype=float)
        xi = self.xi
        if isinstance(xi, PushforwardField) and isinstance(xi.base, RotationField):
            return self._metric_conjugated(pts)
        return self._metric_generic(pts)

    def _metric_conjugated(self, pts):
        f = self.xi.diffeo
        q = f.inverse(pts)
        s = 2.0 * np.pi * np.arange(self.n_quad) / self.n_quad
        acc = np.zeros(np.shape(pts)[:-1] + (3, 3))
        for sv in s:
            c, sn = np.cos(sv), np.sin(sv)
            rot = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
            qs = np.einsum("ij,...j->...i", rot, q)
            # D phi_s = Df(rot q) rot Df(q)^{-1}
            J = np.einsum(
                "...ij,jk,...kl->...il",
                f.jacobian(qs),
                rot,
                np.linalg.inv(f.jacobian(q)),
            )
            acc += np.einsum("...ki,...kj->...ij", J, J)
        return acc / self.n_quad

    def _metric_generic(self, pts):
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, 3)
        out = np.zeros((flat.shape[0], 3, 3))
        for idx, p in enumerate(flat):
            out[idx] = self._average_single(p)
        return out.reshape(np.shape(pts)[:-1] + (3, 3))

    def _average_single(self, p):
        n = self.n_quad
        svals = np.linspace(0.0, 2.0 * np.pi, n + 1)

        def rhs(_, state):
            x = state[:3]
            M = state[3:].reshape(3, 3)
            dxi = self.xi.jacobian(x[None])[0]
            return np.concatenate([self.xi.value(x[None])[0], (dxi @ M).ravel()])

        y0 = np.concatenate([p, np.eye(3).ravel()])
        sol = solve_ivp(rhs, (0.0, 2.0 * np.pi), y0, t_eval=svals,
                        rtol=1e-10, atol=1e-12, method="RK45")
        xs = sol.y[:3].T
        gap = np.linalg.norm(xs[-1] - p)
        scale = max(np.linalg.norm(p), 1.0)
        if gap > self.closure_tol * scale:
            raise NonPeriodicOrbitError(gap, self.closure_tol * scale)
        Ms = sol.y[3:].T.reshape(-1, 3, 3)
        acc = np.zeros((3, 3))
        for k in range(n):  # trapezoid over the closed orbit
            acc += Ms[k].T @ Ms[k]
        return acc / n

    def metric_derivative(self, pts):
        h = self.fd_step
        return np.stack(
            [
                (self.metric(_shift(pts, k, h)) - self.metric(_shift(pts, k, -h)))
                / (2 * h)
                for k in range(3)
            ],
            axis=-3,
        )

    def frame(self, pts):
        return geo.MetricFrame(self.metric(pts), self.metric_derivative(pts))


# ---------------------------------------------------------------------------
# Spec-level operations
# ---------------------------------------------------------------------------


def pullback_frame(diffeo, pts):
    """Return (MetricFrame, VecSample) of the pullback metric and df(xi0)."""
    source = PullbackMetric(diffeo)
    xi = PushforwardField(diffeo, RotationField())
    source.sqrt_det(pts)  # orientation gate
    frame = geo.MetricFrame.create(source.metric(pts), source.metric_derivative(pts))
    return frame, geo.VecSample(xi.value(pts), xi.jacobian(pts))


def circle_average_metric(xi, pts, n_quad=256, closure_tol=1e-7):
    source = CircleAveragedMetric(xi, n_quad=n_quad, closure_tol=closure_tol)
    return geo.MetricFrame.create(source.metric(pts), source.metric_derivative(pts))


@dataclass
class SymmetryField:
    """Symmetry candidate with flow utilities and hygiene checks."""

    xi: object
    rtol: float = 1e-10
    closure_tol: float = 1e-7

    def divergence_max(self, pts):
        return float(np.abs(self.xi.divergence(pts)).max())

    def flow(self, p, s_final, n_eval=2):
        sol = solve_ivp(
            lambda _, x: self.xi.value(x[None])[0],
            (0.0, s_final),
            np.asarray(p, dtype=float),
            t_eval=np.linspace(0.0, s_final, n_eval),
            rtol=self.rtol,
            atol=1e-13,
            method="RK45",
        )
        return sol.y.T

    def orbit_closure_gap(self, p):
        traj = self.flow(p, 2.0 * np.pi)
        return float(np.linalg.norm(traj[-1] - np.asarray(p, dtype=float)))


def killing_residual(xi, metric_source, pts):
    """Max Frobenius norms of L_xi g and of the Euclidean deformation tensor."""
    pts = np.asarray(pts, dtype=float)
    g = metric_source.metric(pts)
    dg = metric_source.metric_derivative(pts)
    val = xi.value(pts)
    jac = xi.jacobian(pts)
    lie_g = geo.deformation_tensor(g, dg, val, jac)
    lie_delta = geo.lie_deformation_euclid(jac)
    frob = lambda T: np.sqrt(np.einsum("...ij,...ij->...", T, T))
    return float(frob(lie_g).max()), float(frob(lie_delta).max())
