"""Fixed-point iteration for the deformation gamma = id + grad eta + perp grad phi.

Each sweep determines the free profile from the streamline solvability
system, solves a compatible Neumann problem for eta and a Dirichlet
problem for the streamline derivative of phi, and recovers phi by Fourier
integration along the circular streamlines of the base state.  The
deformed operator is never assembled on the image domain: the composed
residual is evaluated by the chain rule from the inverse displacement
Jacobian, so only the base-disk grid is meshed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import operators as qops
from .base_state import ProfileFn, travel_time
from .elliptic import (
    DiskSpline,
    GaugeError,
    NeumannPoisson,
    PolarGrid,
    ProfileSolver,
    collocation_levels,
    recover_phi,
    smallest_eigenvalue,
    streamline_integral,
)

__all__ = [
    "SolverError",
    "GateError",
    "DiffeomorphismError",
    "DivergenceError",
    "BoundarySpec",
    "DeformationPair",
    "DeformationProblem",
    "eval_N_eta",
    "eval_N_phi",
    "boundary_remainder",
    "iterate_step",
    "run_to_convergence",
    "SolveResult",
]


class SolverError(Exception):
    pass


class GateError(SolverError):
    def __init__(self, gate, message):
        super().__init__(f"gate '{gate}' failed: {message}")
        self.gate = gate


class DiffeomorphismError(SolverError):
    pass


class DivergenceError(SolverError):
    def __init__(self, history):
        super().__init__("iteration failed to contract")
        self.history = history


# ---------------------------------------------------------------------------
# Boundary of the target cross-section
# ---------------------------------------------------------------------------


@dataclass
class BoundarySpec:
    """Target cross-section boundary r = b(theta) as a trigonometric series.

    b(theta) = r0 (1 + mean + sum_k [cos_k cos(k theta) + sin_k sin(k theta)]).
    The defining function is b0 = r - r0 for the reference disk (unit
    gradient, increasing outward) and bt = r - b(theta) for the target.
    """

    r0: float
    cos_coeffs: tuple = ()
    sin_coeffs: tuple = ()
    mean: float = 0.0
    autoscaled: bool = False
    area_tol: float = 1e-8

    def radius(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = np.full(theta.shape, 1.0 + self.mean)
        for k, a in enumerate(self.cos_coeffs, start=1):
            out = out + a * np.cos(k * theta)
        for k, a in enumerate(self.sin_coeffs, start=1):
            out = out + a * np.sin(k * theta)
        return self.r0 * out

    def area(self, n=4096):
        th = np.arange(n) * 2 * np.pi / n
        return 0.5 * float(np.sum(self.radius(th) ** 2)) * (2 * np.pi / n)

    def area_defect(self):
        target = np.pi * self.r0**2
        return abs(self.area() - target) / target

    def require_area_match(self):
        defect = self.area_defect()
        if defect > self.area_tol:
            raise GateError(
                "boundary-area",
                f"area mismatch {defect:.3e} exceeds {self.area_tol:.1e} "
                "(enable autoscale or adjust the boundary)",
            )

    def autoscale(self):
        """Rescale the radius function so the enclosed area matches the disk."""
        lam = np.sqrt(np.pi * self.r0**2 / self.area())
        return BoundarySpec(
            r0=self.r0,
            cos_coeffs=tuple(lam * c for c in self.cos_coeffs),
            sin_coeffs=tuple(lam * c for c in self.sin_coeffs),
            mean=(1.0 + self.mean) * lam - 1.0,
            autoscaled=True,
            area_tol=self.area_tol,
        )

    @classmethod
    def circular(cls, r0):
        return cls(r0=r0)

    @classmethod
    def from_map(cls, diffeo, R0, r0, n_modes=12, n_samples=512, autoscale=True):
        """Trace of the deformed torus surface on the half-plane.

        For each poloidal angle of the reference surface the toroidal angle
        is adjusted by Newton iteration until the image lands on Y = 0; the
        resulting closed curve is resampled in polar angle and projected on
        a truncated Fourier series.
        """
        th0 = np.arange(n_samples) * 2 * np.pi / n_samples
        phi = np.zeros(n_samples)
        img = None
        for _ in range(60):
            R = R0 + r0 * np.cos(th0)
            pts = np.stack(
                [R * np.cos(phi), R * np.sin(phi), r0 * np.sin(th0)], axis=-1
            )
            img = diffeo.forward(pts)
            res = img[:, 1]
            if np.abs(res).max() < 1e-13 * R0:
                break
            J = diffeo.jacobian(pts)
            dYdphi = J[:, 1, 0] * (-R * np.sin(phi)) + J[:, 1, 1] * (R * np.cos(phi))
            phi = phi - res / dYdphi
        x = img[:, 0] - R0
        y = img[:, 2]
        rho = np.hypot(x, y)
        ang = np.arctan2(y, x) % (2 * np.pi)
        order = np.argsort(ang)
        ang_s, rho_s = ang[order], rho[order]
        ang_ext = np.concatenate([ang_s - 2 * np.pi, ang_s, ang_s + 2 * np.pi])
        rho_ext = np.concatenate([rho_s, rho_s, rho_s])
        th_u = np.arange(n_samples) * 2 * np.pi / n_samples
        b = np.interp(th_u, ang_ext, rho_ext)
        F = np.fft.rfft(b) / n_samples
        spec = cls(
            r0=r0,
            cos_coeffs=tuple(2 * F[k].real / r0 for k in range(1, n_modes + 1)),
            sin_coeffs=tuple(-2 * F[k].imag / r0 for k in range(1, n_modes + 1)),
            mean=float(F[0].real / r0 - 1.0),
        )
        return spec.autoscale() if autoscale else spec


# ---------------------------------------------------------------------------
# Deformation pair
# ---------------------------------------------------------------------------


@dataclass
class DeformationPair:
    """Scalar potentials on the reference disk and derived displacement."""

    eta: np.ndarray
    phi: np.ndarray
    Phi: np.ndarray          # streamline derivative of phi (solved field)
    Phi_trace: np.ndarray    # its Dirichlet boundary data
    F_nodes: np.ndarray      # free-profile values on collocation levels
    iteration: int = 0

    @classmethod
    def zero(cls, grid, levels, F0_value):
        return cls(
            eta=np.zeros(grid.shape),
            phi=np.zeros(grid.shape),
            Phi=np.zeros(grid.shape),
            Phi_trace=np.zeros(grid.n_theta),
            F_nodes=np.full(len(levels), F0_value),
            iteration=0,
        )

    def norms(self):
        return float(np.abs(self.eta).max()), float(np.abs(self.phi).max())


def displacement(grid, eta, phi):
    """Cartesian displacement (alpha, beta) = grad eta + perp grad phi,
    with perp grad phi = (d_y phi, -d_x phi)."""
    ex, ey = grid.cartesian_gradient(eta)
    px, py = grid.cartesian_gradient(phi)
    return ex + py, ey - px


def displacement_jacobian(grid, alpha, beta):
    ax, ay = grid.cartesian_gradient(alpha)
    bx, by = grid.cartesian_gradient(beta)
    H = np.empty(grid.shape + (2, 2))
    H[..., 0, 0], H[..., 0, 1] = ax, ay
    H[..., 1, 0], H[..., 1, 1] = bx, by
    return H


def eval_N_eta(grid, eta, phi, H=None):
    """Quadratic nonlinearity of the unit-Jacobian constraint.

    det(I + H) = 1 + tr H + det H and tr H = Lap eta, so requiring a unit
    Jacobian at the PDE level means Lap eta = -det H.
    """
    if H is None:
        alpha, beta = displacement(grid, eta, phi)
        H = displacement_jacobian(grid, alpha, beta)
    return -(H[..., 0, 0] * H[..., 1, 1] - H[..., 0, 1] * H[..., 1, 0])


def boundary_remainder(grid, boundary, alpha_b, beta_b):
    """Nonlinear boundary remainder and derived boundary data.

    At boundary nodes p = r0 (cos th, sin th) with displacement (alpha,
    beta): b1 = r(gamma p) - b(theta(gamma p)) - displacement . e_r.
    Returns (b1, neumann_const, mean_b1) where neumann_const is the
    arc-mean -<b1> of the exact compatibility condition.
    """
    th = grid.theta
    px = grid.r0 * np.cos(th) + alpha_b
    py = grid.r0 * np.sin(th) + beta_b
    r_g = np.hypot(px, py)
    th_g = np.arctan2(py, px)
    u_dot_er = alpha_b * np.cos(th) + beta_b * np.sin(th)
    b1 = r_g - boundary.radius(th_g) - u_dot_er
    mean_b1 = float(np.mean(b1))
    return b1, -mean_b1, mean_b1


# ---------------------------------------------------------------------------
# Problem bundle
# ---------------------------------------------------------------------------


@dataclass
class DeformationProblem:
    base: object
    grid: PolarGrid
    boundary: BoundarySpec
    cfield: qops.CoefficientField
    source_G: qops.SourceG
    source_G0: qops.SourceG
    op: object = None                 # linearized operator
    neumann: NeumannPoisson = None
    profile_solver: ProfileSolver = None
    levels: np.ndarray = None
    eps_gate: float = 1.0
    h2_bound: float = 1.0
    gates: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict)

    @classmethod
    def build(cls, base, grid, boundary, cfield, C_profile=None, n_levels=32,
              eps_gate=1.0, h2_bound=1.0):
        C_profile = C_profile or base.C0_profile()
        op = qops.linearized_operator(base, grid)
        levels = collocation_levels(base, m=n_levels)
        problem = cls(
            base=base,
            grid=grid,
            boundary=boundary,
            cfield=cfield,
            source_G=qops.ggs_sources(cfield, C_profile),
            source_G0=qops.axisym_source(base),
            op=op,
            neumann=NeumannPoisson(grid),
            profile_solver=ProfileSolver(op, base, levels),
            levels=levels,
            eps_gate=eps_gate,
            h2_bound=h2_bound,
        )
        return problem

    # cached axisymmetric reference fields -----------------------------
    def _base_fields(self):
        if "V0" not in self._cache:
            grid, base = self.grid, self.base
            gx, gy = base.grad_psi0_xy(grid.xx, grid.yy)
            V0 = np.stack([gx, gy], axis=-1)
            H0 = _field_jacobian(grid, V0)
            H0 = 0.5 * (H0 + np.swapaxes(H0, -1, -2))
            A0, B0 = qops.l0_cartesian(grid.xx, grid.yy, base.R0)
            L0psi0 = qops.apply_cartesian_operator(A0, B0, H0, V0)
            psi = base.psi0(grid.rr)
            F0 = base.P0_profile().derivative(psi)
            G0 = self.source_G0(grid.xx, grid.yy, psi)
            self._cache.update(
                V0=V0, L0psi0=L0psi0, psi_grid=psi, F0_grid=F0, G0_grid=G0,
                F0_value=float(np.asarray(F0).ravel()[0]),
            )
        return self._cache

    def check_gates(self, skip=()):
        gates = {}
        if "h1" not in skip:
            lam = smallest_eigenvalue(self.op)
            gates["h1_lambda_min"] = lam
            if lam <= 0:
                raise GateError("H1", f"linearized operator not positive ({lam:.3e})")
        if "h2" not in skip:
            mu = max(travel_time(self.base, c) for c in self.levels)
            gates["h2_mu_max"] = mu
            if mu > self.h2_bound:
                raise GateError("H2", f"travel time {mu:.3e} exceeds {self.h2_bound}")
        if "distance" not in skip:
            dist, parts = qops.coefficient_distance(
                self.cfield, self.base, self.grid, self.boundary.radius
            )
            gates["coefficient_distance"] = dist
            gates["coefficient_distance_parts"] = parts
            if dist > self.eps_gate:
                raise GateError(
                    "coefficient-distance",
                    f"distance {dist:.3e} exceeds eps_gate {self.eps_gate:.3e}",
                )
        if "area" not in skip:
            self.boundary.require_area_match()
            gates["boundary_area_defect"] = self.boundary.area_defect()
        self.gates = gates
        return gates


def _field_jacobian(grid, V):
    """Grid Jacobian dV[..., i, j] = d_j V^i of a stacked 2-vector field."""
    J = np.empty(grid.shape + (2, 2))
    for i in range(2):
        vx, vy = grid.cartesian_gradient(V[..., i])
        J[..., i, 0], J[..., i, 1] = vx, vy
    return J


def eval_N_phi(problem, pair, return_parts=False):
    """Composed residual nonlinearity.

    N_phi(y) = [linearized op applied to d_s phi](y) - (L psi)(gamma(y))
    + (L0 psi0)(y), where derivatives of psi = psi0 o gamma^{-1} at
    gamma(y) come from the chain rule with the displacement Jacobian; no
    mesh is built on the image domain.  Independent of the free profile.
    """
    grid, base = problem.grid, problem.base
    cache = problem._base_fields()
    alpha, beta = displacement(grid, pair.eta, pair.phi)
    H = displacement_jacobian(grid, alpha, beta)
    Jg = np.zeros(grid.shape + (2, 2))
    Jg[..., 0, 0] = 1.0 + H[..., 0, 0]
    Jg[..., 0, 1] = H[..., 0, 1]
    Jg[..., 1, 0] = H[..., 1, 0]
    Jg[..., 1, 1] = 1.0 + H[..., 1, 1]
    detJ = Jg[..., 0, 0] * Jg[..., 1, 1] - Jg[..., 0, 1] * Jg[..., 1, 0]
    if detJ.min() <= 0:
        raise DiffeomorphismError(
            f"det grad gamma reached {detJ.min():.3e}; deformation too large"
        )
    Jg_inv = np.empty_like(Jg)
    Jg_inv[..., 0, 0] = Jg[..., 1, 1]
    Jg_inv[..., 1, 1] = Jg[..., 0, 0]
    Jg_inv[..., 0, 1] = -Jg[..., 0, 1]
    Jg_inv[..., 1, 0] = -Jg[..., 1, 0]
    Jg_inv /= detJ[..., None, None]

    # grad psi at gamma(y): (grad gamma)^{-T} grad psi0(y)
    V = np.einsum("...ji,...j->...i", Jg_inv, cache["V0"])
    dV = _field_jacobian(grid, V)
    hess = np.einsum("...ik,...kj->...ij", dV, Jg_inv)
    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))

    gx = grid.xx + alpha
    gy = grid.yy + beta
    A, B = problem.cfield.coefficients_at(gx, gy)
    Lpsi_at_gamma = qops.apply_cartesian_operator(A, B, hess, V)

    LPhi = problem.op.apply(pair.Phi, boundary=pair.Phi_trace)
    N_phi = LPhi - Lpsi_at_gamma + cache["L0psi0"]
    if return_parts:
        return N_phi, {
            "alpha": alpha, "beta": beta, "H": H, "detJ": detJ,
            "gamma_x": gx, "gamma_y": gy, "Lpsi_at_gamma": Lpsi_at_gamma,
        }
    return N_phi


@dataclass
class StepDiagnostics:
    iteration: int
    d_eta: float
    d_phi: float
    ratio: float
    det_defect: float
    boundary_defect: float
    neumann_projection: float
    loop_defect: float
    relax: float


def iterate_step(problem, pair, relax=1.0):
    """One sweep of the deformation iteration; returns (pair, diagnostics)."""
    grid, base = problem.grid, problem.base
    cache = problem._base_fields()
    N_phi, parts = eval_N_phi(problem, pair, return_parts=True)

    # boundary remainder from the previous pair
    alpha_spl = DiskSpline(grid, parts["alpha"])
    beta_spl = DiskSpline(grid, parts["beta"])
    th = grid.theta
    alpha_b = alpha_spl(np.full_like(th, grid.r0), th)
    beta_b = beta_spl(np.full_like(th, grid.r0), th)
    b1, neumann_exact, mean_b1 = boundary_remainder(
        grid, problem.boundary, alpha_b, beta_b
    )
    grad_psi_b = abs(float(base.dpsi0(grid.r0)))
    Phi_trace = grad_psi_b * (-b1 + mean_b1)

    # source difference, G evaluated at the displaced points
    psi = cache["psi_grid"]
    dG = problem.source_G(parts["gamma_x"], parts["gamma_y"], psi) - cache["G0_grid"]

    # particular solve and profile determination
    rhs_part = N_phi - cache["F0_grid"] + dG
    Phi_part = problem.op.solve(rhs_part, boundary=Phi_trace)
    R = -problem.profile_solver.streamline_integrals(Phi_part)
    F_nodes = problem.profile_solver.solve_for_profile(R)
    Phi_new = Phi_part + problem.profile_solver.apply_basis(F_nodes)

    # eta: compatible Neumann problem
    N_eta = eval_N_eta(grid, None, None, H=parts["H"])
    bconst = grid.integrate(N_eta) / (2 * np.pi * grid.r0)
    eta_new, proj = problem.neumann.solve(N_eta, bconst)

    # phi recovery along streamlines
    phi_new, loop_defect = recover_phi(
        grid, base, Phi_new, levels=problem.levels
    )

    if relax != 1.0:
        eta_new = pair.eta + relax * (eta_new - pair.eta)
        phi_new = pair.phi + relax * (phi_new - pair.phi)
        Phi_new = pair.Phi + relax * (Phi_new - pair.Phi)
        Phi_trace = pair.Phi_trace + relax * (Phi_trace - pair.Phi_trace)
        F_nodes = pair.F_nodes + relax * (F_nodes - pair.F_nodes)

    d_eta = float(np.abs(eta_new - pair.eta).max())
    d_phi = float(np.abs(phi_new - pair.phi).max())

    # diagnostics on the updated pair
    alpha2, beta2 = displacement(grid, eta_new, phi_new)
    H2 = displacement_jacobian(grid, alpha2, beta2)
    det2 = (1 + H2[..., 0, 0]) * (1 + H2[..., 1, 1]) - H2[..., 0, 1] * H2[..., 1, 0]
    a2 = DiskSpline(grid, alpha2)(np.full_like(th, grid.r0), th)
    b2 = DiskSpline(grid, beta2)(np.full_like(th, grid.r0), th)
    px = grid.r0 * np.cos(th) + a2
    py = grid.r0 * np.sin(th) + b2
    bdefect = float(
        np.abs(np.hypot(px, py) - problem.boundary.radius(np.arctan2(py, px))).max()
    )

    new_pair = DeformationPair(
        eta=eta_new, phi=phi_new, Phi=Phi_new, Phi_trace=Phi_trace,
        F_nodes=F_nodes, iteration=pair.iteration + 1,
    )
    diag = StepDiagnostics(
        iteration=new_pair.iteration,
        d_eta=d_eta,
        d_phi=d_phi,
        ratio=np.nan,
        det_defect=float(np.abs(det2 - 1).max()),
        boundary_defect=bdefect,
        neumann_projection=float(proj),
        loop_defect=float(loop_defect),
        relax=relax,
    )
    return new_pair, diag


@dataclass
class SolveResult:
    converged: bool
    reason: str
    pair: DeformationPair
    history: list
    problem: DeformationProblem
    F_profile: ProfileFn = None
    P_profile: object = None
    sqrtg_spread: float = 0.0
    composed_residual: float = 0.0
    composed_residual_vs_base: float = 0.0
    base_residual: float = 0.0
    contraction_q: float = np.nan
    # displacement splines for gamma^{-1} evaluation
    _interp: dict = field(default_factory=dict)

    def gamma_inverse(self, qx, qy, tol=1e-12, max_iter=60):
        """Invert gamma = id + displacement by Newton on the splines."""
        grid = self.problem.grid
        if not self._interp:
            alpha, beta = displacement(grid, self.pair.eta, self.pair.phi)
            H = displacement_jacobian(grid, alpha, beta)
            self._interp = {
                "a": DiskSpline(grid, alpha),
                "b": DiskSpline(grid, beta),
                "H": [[DiskSpline(grid, H[..., i, j]) for j in range(2)]
                      for i in range(2)],
            }
        qx = np.asarray(qx, dtype=float)
        qy = np.asarray(qy, dtype=float)
        x = qx.copy()
        y = qy.copy()
        itp = self._interp
        for _ in range(max_iter):
            r, th = np.hypot(x, y), np.arctan2(y, x)
            rx = x + itp["a"](r, th) - qx
            ry = y + itp["b"](r, th) - qy
            if max(np.abs(rx).max(), np.abs(ry).max()) < tol * grid.r0:
                break
            h00 = 1 + itp["H"][0][0](r, th)
            h01 = itp["H"][0][1](r, th)
            h10 = itp["H"][1][0](r, th)
            h11 = 1 + itp["H"][1][1](r, th)
            det = h00 * h11 - h01 * h10
            x = x - (h11 * rx - h01 * ry) / det
            y = y - (-h10 * rx + h00 * ry) / det
        return x, y

    def psi_at(self, qx, qy):
        """psi = psi0 o gamma^{-1} on the target cross-section."""
        x, y = self.gamma_inverse(qx, qy)
        return self.problem.base.psi0(np.hypot(x, y))

    def F_value(self, c):
        return self.F_profile.value(c)


def run_to_convergence(problem, tol_iter=None, max_iter=200, relax=1.0,
                       auto_damp=True, check_gates=True, gate_skip=()):
    """Iterate to the deformation fixed point and post-process profiles."""
    grid, base = problem.grid, problem.base
    if check_gates:
        problem.check_gates(skip=gate_skip)
    tol = tol_iter if tol_iter is not None else 1e-9 * base.r0
    cache = problem._base_fields()
    pair = DeformationPair.zero(grid, problem.levels, cache["F0_value"])
    history = []
    deltas = []
    relax_now = relax
    high_ratio_count = 0
    converged = False
    reason = "max-iterations"
    for _ in range(max_iter):
        try:
            pair, diag = iterate_step(problem, pair, relax=relax_now)
        except (DiffeomorphismError, GaugeError) as exc:
            reason = f"aborted: {exc}"
            break
        delta = max(diag.d_eta, diag.d_phi)
        deltas.append(delta)
        if len(deltas) >= 2 and deltas[-2] > 0:
            diag.ratio = deltas[-1] / deltas[-2]
        history.append(diag)
        if delta < tol:
            converged = True
            reason = "converged"
            break
        if auto_damp and np.isfinite(diag.ratio) and diag.ratio > 0.9:
            high_ratio_count += 1
            if high_ratio_count >= 3 and relax_now == 1.0:
                relax_now = 0.5
                high_ratio_count = 0
        elif np.isfinite(diag.ratio):
            high_ratio_count = 0
        if len(deltas) >= 6 and deltas[-1] > 10 * deltas[0] and deltas[-1] > tol:
            reason = "diverged"
            break

    ratios = [h.ratio for h in history[2:] if np.isfinite(h.ratio)]
    q = float(max(ratios)) if ratios else np.nan

    result = SolveResult(
        converged=converged,
        reason=reason,
        pair=pair,
        history=history,
        problem=problem,
        contraction_q=q,
    )
    if not converged:
        return result

    # free profile and pressure reconstruction
    F_prof = ProfileFn(problem.levels, pair.F_nodes)
    N_phi, parts = eval_N_phi(problem, pair, return_parts=True)
    s_gamma = problem.cfield.s(
        np.hypot(parts["gamma_x"], parts["gamma_y"]),
        np.arctan2(parts["gamma_y"], parts["gamma_x"]),
    )
    spl_s = DiskSpline(grid, s_gamma)
    s_means, s_spread = [], 0.0
    for c in problem.levels:
        mu = streamline_integral(spl_s, c, base, grid=grid)
        mean = mu / travel_time(base, c)
        s_means.append(mean)
        r_c = float(base.r_of_psi(c))
        ring = spl_s(np.full(grid.n_theta, r_c), grid.theta)
        s_spread = max(s_spread, float(ring.max() - ring.min()) / mean)
    Pp_nodes = pair.F_nodes * np.asarray(s_means)
    nodes_ext = np.concatenate([[0.0], problem.levels, [base.psi_bar]])
    Pp_ext = np.concatenate([[Pp_nodes[0]], Pp_nodes, [Pp_nodes[-1]]])
    Pp_prof = ProfileFn(nodes_ext, Pp_ext)
    P_fn = Pp_prof.antiderivative_from(0.0)

    # composed residual on the image domain
    psi = cache["psi_grid"]
    G_at = problem.source_G(parts["gamma_x"], parts["gamma_y"], psi)
    F_at = F_prof.value(psi)
    composed = parts["Lpsi_at_gamma"] - F_at - G_at
    base_res = cache["L0psi0"] - cache["F0_grid"] - cache["G0_grid"]
    result.F_profile = F_prof
    result.P_profile = P_fn
    result.sqrtg_spread = s_spread
    result.composed_residual = float(np.abs(composed).max())
    result.composed_residual_vs_base = float(np.abs(composed - base_res).max())
    result.base_residual = float(np.abs(base_res).max())
    return result
