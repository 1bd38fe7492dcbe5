"""Finite-difference machinery on the disk cross-section.

Cell-centered polar grid (no node at r = 0), second-order stencils with
symmetric-partner ghost values across the pole, sparse direct solves, and
the streamline quadrature / profile-solvability machinery built on the
radial base state whose streamlines are circles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RectBivariateSpline
from scipy.sparse.linalg import splu

__all__ = [
    "EllipticError",
    "SingularOperatorError",
    "SolvabilityError",
    "StreamlineError",
    "GaugeError",
    "SpectralFailureError",
    "PolarGrid",
    "DiskSpline",
    "LinearOperator",
    "dirichlet_solve",
    "NeumannPoisson",
    "streamline_integral",
    "collocation_levels",
    "ProfileSolver",
    "recover_phi",
    "smallest_eigenvalue",
]


class EllipticError(Exception):
    pass


class SingularOperatorError(EllipticError):
    """Factorization failed; signals a positivity violation at this grid."""


class SolvabilityError(EllipticError):
    """The profile solvability system is too ill-conditioned to trust."""


class StreamlineError(EllipticError):
    pass


class GaugeError(EllipticError):
    def __init__(self, level, value, tol):
        super().__init__(
            f"loop integral {value:.3e} at level {level:.6f} exceeds {tol:.1e}"
        )
        self.level = level
        self.value = value


class SpectralFailureError(EllipticError):
    pass


@dataclass
class PolarGrid:
    """Cell-centered polar grid: r_i = (i + 1/2) h_r, theta_j = j h_theta."""

    n_r: int
    n_theta: int
    r0: float

    def __post_init__(self):
        if self.n_theta % 2 != 0:
            raise EllipticError("n_theta must be even (pole partner indexing)")
        self.h_r = self.r0 / self.n_r
        self.h_theta = 2.0 * np.pi / self.n_theta
        self.r = (np.arange(self.n_r) + 0.5) * self.h_r
        self.theta = np.arange(self.n_theta) * self.h_theta
        self.rr = self.r[:, None] * np.ones((1, self.n_theta))
        self.tt = np.ones((self.n_r, 1)) * self.theta[None, :]
        self.xx = self.rr * np.cos(self.tt)
        self.yy = self.rr * np.sin(self.tt)
        self.cell_area = self.rr * self.h_r * self.h_theta

    @property
    def shape(self):
        return (self.n_r, self.n_theta)

    @property
    def size(self):
        return self.n_r * self.n_theta

    # -- grid derivatives ------------------------------------------------

    def _pole_row(self, u):
        """Ghost row at r = -h_r/2: u(-r, theta) = u(r, theta + pi)."""
        return np.roll(u[0], self.n_theta // 2)

    def d_theta(self, u, order=1):
        """Spectral periodic theta derivative."""
        k = np.fft.rfftfreq(self.n_theta, d=1.0 / self.n_theta)
        fac = (1j * k) ** order
        return np.fft.irfft(fac * np.fft.rfft(u, axis=1), n=self.n_theta, axis=1)

    def d_r(self, u, outer=None):
        """Centered radial derivative; one-sided at the outer ring unless a
        Dirichlet boundary trace ``outer`` at r = r0 is given."""
        du = np.empty_like(u)
        du[1:-1] = (u[2:] - u[:-2]) / (2 * self.h_r)
        ghost_in = self._pole_row(u)
        du[0] = (u[1] - ghost_in) / (2 * self.h_r)
        if outer is None:
            du[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * self.h_r)
        else:
            ghost_out = 2.0 * outer - u[-1]
            du[-1] = (ghost_out - u[-2]) / (2 * self.h_r)
        return du

    def d2_r(self, u, outer=None):
        d2 = np.empty_like(u)
        d2[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / self.h_r**2
        ghost_in = self._pole_row(u)
        d2[0] = (u[1] - 2 * u[0] + ghost_in) / self.h_r**2
        if outer is None:
            d2[-1] = (2 * u[-1] - 5 * u[-2] + 4 * u[-3] - u[-4]) / self.h_r**2
        else:
            ghost_out = 2.0 * outer - u[-1]
            d2[-1] = (ghost_out - 2 * u[-1] + u[-2]) / self.h_r**2
        return d2

    def cartesian_gradient(self, u, outer=None):
        """(d_x u, d_y u) on the grid from polar derivatives."""
        ur = self.d_r(u, outer=outer)
        ut = self.d_theta(u)
        c, s = np.cos(self.tt), np.sin(self.tt)
        ux = c * ur - s / self.rr * ut
        uy = s * ur + c / self.rr * ut
        return ux, uy

    def integrate(self, u):
        return float(np.sum(u * self.cell_area))

    def boundary_extrapolate(self, u):
        """Quadratic extrapolation of a field to the boundary circle r = r0."""
        r1, r2, r3 = self.r[-1], self.r[-2], self.r[-3]
        u1, u2, u3 = u[-1], u[-2], u[-3]
        # Lagrange basis at r = r0
        x = self.r0
        l1 = (x - r2) * (x - r3) / ((r1 - r2) * (r1 - r3))
        l2 = (x - r1) * (x - r3) / ((r2 - r1) * (r2 - r3))
        l3 = (x - r1) * (x - r2) / ((r3 - r1) * (r3 - r2))
        return l1 * u1 + l2 * u2 + l3 * u3


class DiskSpline:
    """Bicubic interpolant of a polar-grid field, smooth across the pole.

    The radial axis is augmented with reflected rows (u(-r, th) =
    u(r, th + pi)) and with quadratically extrapolated outer rings, and the
    angular axis is wrap-padded, so evaluation is interpolation for
    0 <= r <= r0 + pad and any angle.
    """

    def __init__(self, grid, u, n_outer=3):
        n = grid.n_theta
        half = n // 2
        rows_in = [np.roll(u[i], half) for i in range(min(3, grid.n_r))]
        r_in = [-grid.r[i] for i in range(min(3, grid.n_r))]
        # outer quadratic-extension rings
        r1, r2, r3 = grid.r[-1], grid.r[-2], grid.r[-3]
        u1, u2, u3 = u[-1], u[-2], u[-3]
        rows_out, r_out = [], []
        for k in range(1, n_outer + 1):
            x = grid.r0 + (k - 0.5) * grid.h_r
            l1 = (x - r2) * (x - r3) / ((r1 - r2) * (r1 - r3))
            l2 = (x - r1) * (x - r3) / ((r2 - r1) * (r2 - r3))
            l3 = (x - r1) * (x - r2) / ((r3 - r1) * (r3 - r2))
            rows_out.append(l1 * u1 + l2 * u2 + l3 * u3)
            r_out.append(x)
        r_full = np.concatenate([r_in[::-1], grid.r, r_out])
        vals = np.vstack([rows_in[::-1], u, rows_out])
        # wrap-pad theta
        pad = 4
        th = np.concatenate(
            [grid.theta[-pad:] - 2 * np.pi, grid.theta, grid.theta[:pad] + 2 * np.pi]
        )
        vals = np.hstack([vals[:, -pad:], vals, vals[:, :pad]])
        self._spline = RectBivariateSpline(r_full, th, vals, kx=3, ky=3)
        self.r_max = r_out[-1] if r_out else grid.r[-1]

    def __call__(self, r, theta):
        r = np.asarray(r, dtype=float)
        theta = np.mod(np.asarray(theta, dtype=float), 2.0 * np.pi)
        return self._spline(r, theta, grid=False)

    def at_xy(self, x, y):
        return self(np.hypot(x, y), np.arctan2(y, x))


# ---------------------------------------------------------------------------
# Sparse operator assembly
# ---------------------------------------------------------------------------

_STENCIL = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)]


@dataclass
class LinearOperator:
    """Sparse stencil operator on a polar grid with Dirichlet outer boundary.

    Discretizes  c_rr d_r^2 + c_rt d_r d_th + c_tt d_th^2 + c_r d_r
    + c_t d_th + c_0  with centered second-order differences.  The ghost
    ring beyond r0 is eliminated against the Dirichlet trace; ``matrix``
    acts on interior unknowns and ``boundary_matrix`` maps a boundary trace
    to the induced right-hand-side shift.
    """

    grid: PolarGrid
    matrix: sp.csr_matrix
    boundary_matrix: sp.csr_matrix
    _lu: object = field(default=None, repr=False)

    @classmethod
    def assemble(cls, grid, c_rr, c_rt, c_tt, c_r, c_t, c_0=None):
        n_r, n_t = grid.n_r, grid.n_theta
        hr, ht = grid.h_r, grid.h_theta
        shape = (n_r, n_t)

        def full(c):
            if c is None:
                return np.zeros(shape)
            return np.broadcast_to(np.asarray(c, dtype=float), shape)

        c_rr, c_rt, c_tt = full(c_rr), full(c_rt), full(c_tt)
        c_r, c_t, c_0 = full(c_r), full(c_t), full(c_0)

        weights = {}

        def add(di, dj, w):
            key = (di, dj)
            weights[key] = weights.get(key, 0.0) + w

        add(1, 0, c_rr / hr**2 + c_r / (2 * hr))
        add(-1, 0, c_rr / hr**2 - c_r / (2 * hr))
        add(0, 1, c_tt / ht**2 + c_t / (2 * ht))
        add(0, -1, c_tt / ht**2 - c_t / (2 * ht))
        add(0, 0, -2 * c_rr / hr**2 - 2 * c_tt / ht**2 + c_0)
        add(1, 1, c_rt / (4 * hr * ht))
        add(-1, -1, c_rt / (4 * hr * ht))
        add(1, -1, -c_rt / (4 * hr * ht))
        add(-1, 1, -c_rt / (4 * hr * ht))

        I = np.arange(n_r)[:, None] * np.ones((1, n_t), dtype=int)
        J = np.ones((n_r, 1), dtype=int) * np.arange(n_t)[None, :]
        rows, cols, vals = [], [], []
        brows, bcols, bvals = [], [], []
        half = n_t // 2
        for (di, dj), w in weights.items():
            if np.all(w == 0):
                continue
            ii = I + di
            jj = (J + dj) % n_t
            src = I * n_t + J
            # pole crossing: (-1, j) -> (0, j + half)
            below = ii < 0
            jj = np.where(below, (jj + half) % n_t, jj)
            ii = np.where(below, 0, ii)
            outside = ii >= n_r
            inside = ~outside
            rows.append(src[inside])
            cols.append((ii * n_t + jj)[inside])
            vals.append(w[inside] if w.shape == shape else np.broadcast_to(w, shape)[inside])
            if np.any(outside):
                # ghost = 2 b(theta_jj) - u[n_r-1, jj]
                rows.append(src[outside])
                cols.append(((n_r - 1) * n_t + jj)[outside])
                vals.append(-w[outside])
                brows.append(src[outside])
                bcols.append(jj[outside])
                bvals.append(2.0 * w[outside])
        A = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(grid.size, grid.size),
        ).tocsr()
        if brows:
            B = sp.coo_matrix(
                (np.concatenate(bvals), (np.concatenate(brows), np.concatenate(bcols))),
                shape=(grid.size, n_t),
            ).tocsr()
        else:
            B = sp.csr_matrix((grid.size, n_t))
        return cls(grid=grid, matrix=A, boundary_matrix=B)

    @property
    def lu(self):
        if self._lu is None:
            try:
                self._lu = splu(self.matrix.tocsc())
            except RuntimeError as exc:
                raise SingularOperatorError(str(exc)) from exc
        return self._lu

    def apply(self, u, boundary=None):
        """Honest stencil application including the boundary trace."""
        v = self.matrix @ u.ravel()
        if boundary is not None:
            v = v + self.boundary_matrix @ np.asarray(boundary, dtype=float)
        return v.reshape(self.grid.shape)

    def solve(self, rhs, boundary=None):
        b = np.asarray(rhs, dtype=float).ravel().copy()
        if boundary is not None:
            b = b - self.boundary_matrix @ np.asarray(boundary, dtype=float)
        u = self.lu.solve(b)
        return u.reshape(self.grid.shape)


def dirichlet_solve(op, rhs, boundary=None, check_tol=1e-10):
    """Solve op u = rhs with Dirichlet trace; verifies the residual."""
    u = op.solve(rhs, boundary=boundary)
    res = op.apply(u, boundary=boundary) - np.asarray(rhs, dtype=float)
    scale = max(float(np.abs(np.asarray(rhs)).max()), 1e-300)
    if float(np.abs(res).max()) > check_tol * max(scale, 1.0) * 1e3:
        raise SingularOperatorError("direct solve residual unexpectedly large")
    return u


class NeumannPoisson:
    """Conservative Laplacian with constant Neumann data and mean-zero gauge.

    Discretizes (1/r) d_r (r d_r u) + (1/r^2) d_th^2 u; the radial flux
    through r = 0 vanishes identically for the cell-centered grid, and the
    outer flux is the prescribed constant.  The singular constant mode is
    pinned by a bordered (area-weighted mean) system.
    """

    def __init__(self, grid):
        self.grid = grid
        n_r, n_t = grid.n_r, grid.n_theta
        hr, ht = grid.h_r, grid.h_theta
        r = grid.r
        r_ph = r + hr / 2
        r_mh = r - hr / 2  # r_mh[0] = 0: no flux through the pole
        rows, cols, vals = [], [], []
        I = np.arange(n_r)[:, None] * np.ones((1, n_t), dtype=int)
        J = np.ones((n_r, 1), dtype=int) * np.arange(n_t)[None, :]
        src = (I * n_t + J).ravel()

        cen = np.zeros((n_r, n_t))
        up = np.zeros((n_r, n_t))
        dn = np.zeros((n_r, n_t))
        for i in range(n_r):
            a_up = r_ph[i] / (r[i] * hr**2) if i < n_r - 1 else 0.0
            a_dn = r_mh[i] / (r[i] * hr**2) if i > 0 else 0.0
            up[i] = a_up
            dn[i] = a_dn
            cen[i] = -(a_up + a_dn)
        tt = 1.0 / (r[:, None] ** 2 * ht**2) * np.ones((1, n_t))
        cen -= 2 * tt

        def push(ii, jj, w):
            rows.append(src)
            cols.append((ii * n_t + jj).ravel())
            vals.append(w.ravel())

        push(np.minimum(I + 1, n_r - 1), J, up)
        push(np.maximum(I - 1, 0), J, dn)
        push(I, (J + 1) % n_t, tt)
        push(I, (J - 1) % n_t, tt)
        push(I, J, cen)
        A = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(grid.size, grid.size),
        ).tocsr()
        w = grid.cell_area.ravel()
        bordered = sp.bmat(
            [[A, sp.csr_matrix(w[:, None])], [sp.csr_matrix(w[None, :]), None]],
            format="csc",
        )
        self._matrix = A
        self._lu = splu(bordered)
        self._outer_coeff = r_ph[-1] / (r[-1] * hr)  # flux / h_r weight

    def solve(self, rhs, boundary_const):
        """Solve with d_n u = boundary_const on r = r0; returns (u, defect).

        The right-hand side is projected onto the compatible range; the
        projection magnitude (per unit area) is returned.
        """
        grid = self.grid
        rhs = np.array(rhs, dtype=float, copy=True)
        flux_rhs = np.zeros(grid.shape)
        flux_rhs[-1] = -self._outer_coeff * boundary_const
        total = grid.integrate(rhs + flux_rhs)
        area = np.pi * grid.r0**2
        defect = total / area
        rhs -= defect
        b = np.concatenate([(rhs + flux_rhs).ravel(), [0.0]])
        sol = self._lu.solve(b)
        return sol[:-1].reshape(grid.shape), defect


# ---------------------------------------------------------------------------
# Streamline quadrature and profile solvability
# ---------------------------------------------------------------------------


def _level_radius(state, c):
    if not (0.0 < c < state.psi_bar):
        raise StreamlineError(f"level {c} not in the interior of the flux range")
    return float(state.r_of_psi(c))


def streamline_integral(q, c, state, grid=None, n_quad=None):
    """Closed-orbit integral of q ds along {psi0 = c}, ds the time element
    of dx/ds = grad-perp psi0 (so the integral of 1 is the travel time)."""
    r_c = _level_radius(state, c)
    omega = float(state.omega(r_c))
    if grid is not None:
        n = n_quad or grid.n_theta
        theta = np.arange(n) * 2.0 * np.pi / n
        if isinstance(q, np.ndarray):
            q = DiskSpline(grid, q)
        vals = q(np.full(n, r_c), theta) if isinstance(q, DiskSpline) else q(r_c, theta)
    else:
        n = n_quad or 256
        theta = np.arange(n) * 2.0 * np.pi / n
        vals = q(r_c, theta)
    return float(np.sum(vals) * (2.0 * np.pi / n) / omega)


def collocation_levels(state, m=32, lo=0.05, hi=0.95):
    """Uniform flux levels in [lo, hi] * psibar, endpoints avoided."""
    return np.linspace(lo * state.psi_bar, hi * state.psi_bar, m)


class ProfileSolver:
    """Dense solvability system T F = R for the free profile.

    Column j of T applies the inverse linearized operator to the j-th hat
    profile of the flux label and integrates along each collocation
    streamline.
    """

    def __init__(self, op, state, levels, cond_limit=1e10):
        self.op = op
        self.state = state
        self.levels = np.asarray(levels, dtype=float)
        grid = op.grid
        m = len(self.levels)
        # Radial cell averages of the hat profiles: pointwise sampling can
        # miss a narrow hat entirely where |d psi0/dr| is large, which
        # makes the solvability matrix numerically singular.
        gauss_x, gauss_w = np.polynomial.legendre.leggauss(4)
        r_sub = grid.r[:, None] + 0.5 * grid.h_r * gauss_x[None, :]
        psi_sub = state.psi0(r_sub)
        self.basis_radial = [
            0.5 * np.sum(gauss_w[None, :] * self._hat(psi_sub, j), axis=1)
            for j in range(m)
        ]
        self.basis_solutions = []
        T = np.zeros((m, m))
        for j in range(m):
            e_j = self.basis_radial[j][:, None] * np.ones((1, grid.n_theta))
            u_j = op.solve(e_j)
            self.basis_solutions.append(u_j)
            spl = DiskSpline(grid, u_j)
            for i, c in enumerate(self.levels):
                T[i, j] = streamline_integral(spl, c, state, grid=grid)
        self.T = T
        self.cond = float(np.linalg.cond(T))
        if self.cond > cond_limit:
            raise SolvabilityError(
                f"solvability matrix condition number {self.cond:.3e}"
            )

    def _hat(self, c, j):
        nodes = self.levels
        c = np.asarray(c, dtype=float)
        out = np.zeros_like(c)
        if j > 0:
            left = (c - nodes[j - 1]) / (nodes[j] - nodes[j - 1])
            out = np.where((c >= nodes[j - 1]) & (c <= nodes[j]), left, out)
        else:
            out = np.where(c <= nodes[0], 1.0, out)
        if j < len(nodes) - 1:
            right = (nodes[j + 1] - c) / (nodes[j + 1] - nodes[j])
            out = np.where((c > nodes[j]) & (c <= nodes[j + 1]), right, out)
        else:
            out = np.where(c > nodes[-1], 1.0, out)
        return out

    def profile_field(self, values):
        """Profile on the grid in the solver's own (cell-averaged) basis."""
        grid = self.op.grid
        acc = np.zeros(grid.n_r)
        for j, v in enumerate(values):
            acc += v * self.basis_radial[j]
        return acc[:, None] * np.ones((1, grid.n_theta))

    def apply_basis(self, values):
        out = np.zeros(self.op.grid.shape)
        for j, v in enumerate(values):
            out += v * self.basis_solutions[j]
        return out

    def solve_for_profile(self, R):
        """Solve T F = R for the profile nodal values."""
        return np.linalg.solve(self.T, np.asarray(R, dtype=float))

    def streamline_integrals(self, u):
        spl = DiskSpline(self.op.grid, u)
        return np.array(
            [streamline_integral(spl, c, self.state, grid=self.op.grid)
             for c in self.levels]
        )


def recover_phi(grid, state, Phi, levels=None, loop_tol=1e-8):
    """Recover phi from its streamline derivative Phi = omega(r) d_theta phi.

    Per-ring Fourier inversion; residual ring means (non-single-valued
    part) are removed and reported.  Raises GaugeError when the loop
    integral at a requested collocation level exceeds tolerance.
    """
    omega = state.omega(grid.r)[:, None]
    if levels is not None:
        spl = DiskSpline(grid, Phi)
        worst, worst_c = 0.0, None
        for c in levels:
            val = streamline_integral(spl, c, state, grid=grid)
            if abs(val) > worst:
                worst, worst_c = abs(val), c
        scale = max(float(np.abs(Phi).max()) * 2 * np.pi / float(omega.max()), 1e-30)
        if worst > loop_tol * max(scale, 1.0):
            raise GaugeError(worst_c, worst, loop_tol)
    rhs = Phi / omega
    F = np.fft.rfft(rhs, axis=1)
    loop_defect = float(np.abs(F[:, 0]).max()) / grid.n_theta * 2 * np.pi
    k = np.fft.rfftfreq(grid.n_theta, d=1.0 / grid.n_theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        Fphi = np.where(k[None, :] > 0, F / (1j * k[None, :]), 0.0)
    phi = np.fft.irfft(Fphi, n=grid.n_theta, axis=1)
    # per-streamline mean already zero (k=0 mode dropped); global gauge
    phi -= grid.integrate(phi) / (np.pi * grid.r0**2)
    return phi, loop_defect


def smallest_eigenvalue(op, max_iter=200, tol=1e-10):
    """Inverse power iteration for the smallest-magnitude eigenvalue."""
    rng = np.random.default_rng(7)
    v = rng.standard_normal(op.grid.size)
    v /= np.linalg.norm(v)
    lam_old = np.inf
    for _ in range(max_iter):
        w = op.lu.solve(v)
        nw = np.linalg.norm(w)
        if not np.isfinite(nw) or nw == 0:
            raise SpectralFailureError("inverse iteration produced invalid vector")
        v = w / nw
        lam = float(v @ (op.matrix @ v))
        if abs(lam - lam_old) < tol * max(abs(lam), 1.0):
            return lam
        lam_old = lam
    raise SpectralFailureError("inverse power iteration did not converge")
