"""Finite-difference solvers for the coupled density / value system.

Forward equation (density m):  dm/dt = d^2(a1 m)/dx^2 - d(G1 m)/dx with the
drift G1 evaluated at the optimal minor feedback.  Backward equation (value
field): -dPsi/dt = H1(x, major state/control, law, DPsi) + a1 d^2Psi/dx^2
with terminal condition given by the minor terminal cost.

Discretization choices
----------------------
* Space: uniform grid.  Diffusion in the forward equation uses the
  conservative flux form with zero-flux closures, so mass is conserved to
  linear-solver precision.  The backward equation uses central second
  differences with one-sided (quadratic-extrapolation) closures at the two
  end rows, which keeps the scheme exact for quadratic value fields.
* Advection: conservative face fluxes, blending an upwind and a central
  reconstruction (`upwind_blend` = 1 is pure upwind, 0 pure central).
* Time: two-stage Heun predictor/corrector for the explicit terms with
  Crank-Nicolson treatment of diffusion, second order in dt.  The backward
  sweep keeps the Hamiltonian explicit in the unknown slice.

The frozen-common-noise regime applies throughout: the major player's
diffusion is zero or handled per sampled path, so the backward equations
are deterministic and their martingale fields vanish identically.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .measure import Grid, JointLaw
from .model import CoefficientError, ModelSpec, minimize_h1_field

__all__ = [
    "TimeGrid",
    "Grids",
    "DensityPath",
    "ValuePath",
    "StepSizeError",
    "StepOperators",
    "apply_a1",
    "apply_a1_star",
    "fp_forward",
    "hjb_backward",
    "value_for_feedback",
    "evaluate_j1",
]


class StepSizeError(RuntimeError):
    """Advective Courant number exceeded 1 at some time step."""

    def __init__(self, step: int, courant: float):
        self.step = step
        self.courant = courant
        super().__init__(f"advective Courant number {courant:.3f} > 1 at time index {step}")


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one time step")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


@dataclass(frozen=True)
class Grids:
    space: Grid
    time: TimeGrid


@dataclass
class DensityPath:
    """Density per (time, node) with conservation diagnostics."""

    m: np.ndarray
    grid: Grid
    timegrid: TimeGrid
    max_mass_error: float = 0.0
    clipped_mass: float = 0.0
    boundary_density_max: float = 0.0
    stage_m_hat: np.ndarray | None = None

    def mass(self, n: int) -> float:
        return self.grid.quadrature(self.m[n])


@dataclass
class ValuePath:
    """Value field, its spatial gradient, and the induced optimal feedback."""

    psi: np.ndarray
    dpsi: np.ndarray
    feedback: np.ndarray
    grid: Grid
    timegrid: TimeGrid
    stage_psi_hat: np.ndarray | None = None
    stage_w_hat: np.ndarray | None = None

    @property
    def kpsi(self) -> np.ndarray:
        """Common-noise martingale field; identically zero per frozen path."""
        return np.zeros_like(self.psi)


# ---------------------------------------------------------------------------
# operators


def _second_difference_onesided(n: int, h: float) -> sp.csr_matrix:
    """Second-difference matrix, one-sided 3-point stencils at the end rows."""
    main = np.full(n, -2.0)
    off = np.ones(n - 1)
    L = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    L[0, 0], L[0, 1], L[0, 2] = 1.0, -2.0, 1.0
    L[n - 1, n - 3], L[n - 1, n - 2], L[n - 1, n - 1] = 1.0, -2.0, 1.0
    return (L / h**2).tocsr()


def _neumann_laplacian(n: int, h: float) -> sp.csr_matrix:
    """Symmetric flux-form Laplacian with zero-flux closures."""
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return (sp.diags([off, main, off], [-1, 0, 1]) / h**2).tocsr()


def apply_a1(fieldvals: np.ndarray, grid: Grid, model: ModelSpec) -> np.ndarray:
    """Elliptic operator of the backward equation: -a1 * d^2/dx^2."""
    if grid.n < 3:
        raise ValueError("grid too small for second differences")
    a1 = np.broadcast_to(np.asarray(model.a1(grid.nodes), dtype=float), (grid.n,))
    L = _second_difference_onesided(grid.n, grid.h)
    return -a1 * (L @ np.asarray(fieldvals, dtype=float))


def apply_a1_star(fieldvals: np.ndarray, grid: Grid, model: ModelSpec) -> np.ndarray:
    """Formal adjoint: -d^2(a1 * field)/dx^2 in conservative form."""
    if grid.n < 3:
        raise ValueError("grid too small for second differences")
    a1 = np.broadcast_to(np.asarray(model.a1(grid.nodes), dtype=float), (grid.n,))
    L = _neumann_laplacian(grid.n, grid.h)
    return -(L @ (a1 * np.asarray(fieldvals, dtype=float)))


class StepOperators:
    """Pre-factorized linear pieces of one time step, with exact transposes.

    Every linear map applied by the forward solvers is available here
    together with its transpose, so the adjoint sweeps can run the exact
    dual recursion.
    """

    def __init__(self, grid: Grid, timegrid: TimeGrid, model: ModelSpec, upwind_blend: float = 1.0):
        if not 0.0 <= upwind_blend <= 1.0:
            raise ValueError("upwind_blend must lie in [0, 1]")
        self.grid = grid
        self.timegrid = timegrid
        self.upwind_blend = float(upwind_blend)
        n, h, dt = grid.n, grid.h, timegrid.dt
        a1 = np.broadcast_to(np.asarray(model.a1(grid.nodes), dtype=float), (n,)).copy()
        self.a1 = a1

        L2 = _second_difference_onesided(n, h)
        Lf = _neumann_laplacian(n, h)
        A1h = -sp.diags(a1) @ L2          # backward-equation operator
        DiffOp = Lf @ sp.diags(a1)        # forward-equation diffusion
        I = sp.identity(n, format="csr")

        self._lu_b_pred = splu((I + dt * A1h).tocsc())
        self._lu_b_cn = splu((I + 0.5 * dt * A1h).tocsc())
        self.b_cn_rhs = (I - 0.5 * dt * A1h).tocsr()
        self.b_cn_rhs_t = self.b_cn_rhs.T.tocsr()
        self._lu_bs_pred = splu((I - dt * DiffOp).tocsc())
        self._lu_bs_cn = splu((I - 0.5 * dt * DiffOp).tocsc())
        self.bs_cn_rhs = (I + 0.5 * dt * DiffOp).tocsr()
        self.bs_cn_rhs_t = self.bs_cn_rhs.T.tocsr()

        # spatial gradient: central interior, second-order one-sided ends
        D = sp.lil_matrix((n, n))
        for i in range(1, n - 1):
            D[i, i - 1], D[i, i + 1] = -0.5 / h, 0.5 / h
        D[0, 0], D[0, 1], D[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
        D[n - 1, n - 3], D[n - 1, n - 2], D[n - 1, n - 1] = 0.5 / h, -2.0 / h, 1.5 / h
        self.dmat = D.tocsr()
        self.dmat_t = self.dmat.T.tocsr()

    # linear solves -------------------------------------------------------
    def solve_b_pred(self, rhs, trans=False):
        return self._lu_b_pred.solve(np.asarray(rhs, dtype=float), trans="T" if trans else "N")

    def solve_b_cn(self, rhs, trans=False):
        return self._lu_b_cn.solve(np.asarray(rhs, dtype=float), trans="T" if trans else "N")

    def solve_bs_pred(self, rhs, trans=False):
        return self._lu_bs_pred.solve(np.asarray(rhs, dtype=float), trans="T" if trans else "N")

    def solve_bs_cn(self, rhs, trans=False):
        return self._lu_bs_cn.solve(np.asarray(rhs, dtype=float), trans="T" if trans else "N")

    def grad(self, v: np.ndarray) -> np.ndarray:
        return self.dmat @ np.asarray(v, dtype=float)

    def grad_t(self, v: np.ndarray) -> np.ndarray:
        return self.dmat_t @ np.asarray(v, dtype=float)

    # conservative advection ----------------------------------------------
    def face_speeds(self, G: np.ndarray) -> np.ndarray:
        G = np.asarray(G, dtype=float)
        return 0.5 * (G[:-1] + G[1:])

    def courant(self, G: np.ndarray) -> float:
        return float(np.max(np.abs(self.face_speeds(G))) * self.timegrid.dt / self.grid.h)

    def adv_div(self, G: np.ndarray, m: np.ndarray) -> np.ndarray:
        """Divergence of the blended upwind/central flux of G*m, zero-flux ends."""
        h = self.grid.h
        th = self.upwind_blend
        gf = self.face_speeds(G)
        m = np.asarray(m, dtype=float)
        up = np.where(gf >= 0, m[:-1], m[1:])
        cen = 0.5 * (m[:-1] + m[1:])
        phi = gf * (th * up + (1.0 - th) * cen)
        div = np.zeros_like(m)
        div[:-1] += phi / h
        div[1:] -= phi / h
        return div

    def adv_div_vjp(self, G: np.ndarray, m: np.ndarray, ybar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cotangents of adv_div with respect to (G, m), upwind switches frozen."""
        h = self.grid.h
        th = self.upwind_blend
        G = np.asarray(G, dtype=float)
        m = np.asarray(m, dtype=float)
        ybar = np.asarray(ybar, dtype=float)
        gf = self.face_speeds(G)
        pos = gf >= 0
        up = np.where(pos, m[:-1], m[1:])
        cen = 0.5 * (m[:-1] + m[1:])
        phi_bar = (ybar[:-1] - ybar[1:]) / h
        gf_bar = phi_bar * (th * up + (1.0 - th) * cen)
        g_bar = np.zeros_like(m)
        g_bar[:-1] += 0.5 * gf_bar
        g_bar[1:] += 0.5 * gf_bar
        m_bar = np.zeros_like(m)
        coeff = phi_bar * gf
        m_bar[:-1] += coeff * (th * pos + (1.0 - th) * 0.5)
        m_bar[1:] += coeff * (th * (~pos) + (1.0 - th) * 0.5)
        return g_bar, m_bar


# ---------------------------------------------------------------------------
# forward density solve


def _drift_field(model: ModelSpec, xs, x0, u0, law: JointLaw, v) -> np.ndarray:
    g = np.asarray(model.g1(xs, x0, u0, law, v), dtype=float)
    if not np.all(np.isfinite(g)):
        raise CoefficientError("g1", "while assembling the forward drift")
    return g


def fp_forward(
    model: ModelSpec,
    pi_path: list[JointLaw],
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    omega: np.ndarray,
    grids: Grids,
    upwind_blend: float = 1.0,
    ops: StepOperators | None = None,
    feedback: np.ndarray | None = None,
) -> DensityPath:
    """Propagate the initial density under the feedback carried by pi_path.

    The laws in pi_path supply the measure argument of the drift; the drift
    control is the same laws' feedback unless an explicit per-slice
    `feedback` array overrides it (used by the best-response map, where the
    freshly computed feedback is propagated against the candidate laws).

    Mass is checked against 1 before any clipping; tiny negative values
    produced by the central flux are clipped and the slice renormalized,
    with the total clipped mass accumulated in the diagnostics.
    """
    grid, tg = grids.space, grids.time
    nt, xs, dt = tg.steps, grid.nodes, tg.dt
    if len(pi_path) != nt + 1:
        raise ValueError("pi_path must have one law per time node")
    if ops is None:
        ops = StepOperators(grid, tg, model, upwind_blend)

    def fb(n: int) -> np.ndarray:
        return pi_path[n].feedback if feedback is None else feedback[n]

    m = np.empty((nt + 1, grid.n))
    m_hat_store = np.empty((nt, grid.n))
    omega = np.asarray(omega, dtype=float)
    mass0 = grid.quadrature(omega)
    if abs(mass0 - 1.0) > 1e-8:
        raise ValueError("initial density must have unit mass")
    m[0] = omega

    max_mass_err = 0.0
    clipped = 0.0
    for n in range(nt):
        g_a = _drift_field(model, xs, x0_path[n], u0_path[n], pi_path[n], fb(n))
        cou = ops.courant(g_a)
        if cou > 1.0:
            raise StepSizeError(n, cou)
        f_a = ops.adv_div(g_a, m[n])
        m_hat = ops.solve_bs_pred(m[n] - dt * f_a)
        m_hat_store[n] = m_hat
        g_b = _drift_field(model, xs, x0_path[n + 1], u0_path[n + 1], pi_path[n + 1], fb(n + 1))
        f_b = ops.adv_div(g_b, m_hat)
        nxt = ops.solve_bs_cn(ops.bs_cn_rhs @ m[n] - 0.5 * dt * (f_a + f_b))
        mass = grid.quadrature(nxt)
        max_mass_err = max(max_mass_err, abs(mass - 1.0))
        neg = nxt < 0
        if np.any(neg):
            clipped += -grid.quadrature(np.where(neg, nxt, 0.0))
            nxt = np.maximum(nxt, 0.0)
            nxt = nxt / grid.quadrature(nxt)
        m[n + 1] = nxt

    boundary = float(max(np.max(np.abs(m[:, 0])), np.max(np.abs(m[:, -1]))))
    if boundary > 1e-8:
        warnings.warn(
            f"density reached {boundary:.2e} at the grid boundary; widen the state grid",
            RuntimeWarning,
        )
    return DensityPath(
        m=m,
        grid=grid,
        timegrid=tg,
        max_mass_error=max_mass_err,
        clipped_mass=clipped,
        boundary_density_max=boundary,
        stage_m_hat=m_hat_store,
    )


# ---------------------------------------------------------------------------
# backward value solve


def hjb_backward(
    model: ModelSpec,
    pi_path: list[JointLaw],
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    grids: Grids,
    ops: StepOperators | None = None,
) -> ValuePath:
    """Backward sweep of the minor value equation with recorded feedback.

    The Hamiltonian stays explicit in the unknown slice: stage A evaluates
    it at the known later slice, stage B at the predictor.  After each step
    the slice-consistent optimal feedback is recorded from the freshly
    computed gradient, so the recorded control satisfies the pointwise
    stationarity condition of the minimized Hamiltonian exactly.
    """
    grid, tg = grids.space, grids.time
    nt, xs, dt = tg.steps, grid.nodes, tg.dt
    if len(pi_path) != nt + 1:
        raise ValueError("pi_path must have one law per time node")
    if ops is None:
        ops = StepOperators(grid, tg, model)

    psi = np.empty((nt + 1, grid.n))
    dpsi = np.empty_like(psi)
    feedback = np.empty_like(psi)
    psi_hat = np.empty((nt, grid.n))
    w_hat = np.empty((nt, grid.n))

    term = np.asarray(model.h1(xs, x0_path[nt], u0_path[nt], pi_path[nt]), dtype=float)
    if not np.all(np.isfinite(term)):
        raise CoefficientError("h1", "in the terminal condition")
    psi[nt] = term
    dpsi[nt] = ops.grad(psi[nt])
    feedback[nt], _ = minimize_h1_field(model, xs, x0_path[nt], u0_path[nt], pi_path[nt], dpsi[nt])

    for n in range(nt - 1, -1, -1):
        law_a, law_b = pi_path[n + 1], pi_path[n]
        v_a = feedback[n + 1]
        ha = np.asarray(model.f1(xs, x0_path[n + 1], u0_path[n + 1], law_a, v_a), dtype=float) + dpsi[
            n + 1
        ] * np.asarray(model.g1(xs, x0_path[n + 1], u0_path[n + 1], law_a, v_a), dtype=float)
        p_hat = ops.solve_b_pred(psi[n + 1] + dt * ha)
        dp_hat = ops.grad(p_hat)
        w, _ = minimize_h1_field(model, xs, x0_path[n], u0_path[n], law_b, dp_hat)
        hb = np.asarray(model.f1(xs, x0_path[n], u0_path[n], law_b, w), dtype=float) + dp_hat * np.asarray(
            model.g1(xs, x0_path[n], u0_path[n], law_b, w), dtype=float
        )
        psi[n] = ops.solve_b_cn(ops.b_cn_rhs @ psi[n + 1] + 0.5 * dt * (ha + hb))
        if not np.all(np.isfinite(psi[n])):
            raise CoefficientError("value field", f"non-finite at time index {n}")
        dpsi[n] = ops.grad(psi[n])
        feedback[n], _ = minimize_h1_field(model, xs, x0_path[n], u0_path[n], law_b, dpsi[n])
        psi_hat[n] = p_hat
        w_hat[n] = w

    return ValuePath(
        psi=psi,
        dpsi=dpsi,
        feedback=feedback,
        grid=grid,
        timegrid=tg,
        stage_psi_hat=psi_hat,
        stage_w_hat=w_hat,
    )


def value_for_feedback(
    model: ModelSpec,
    pi_path: list[JointLaw],
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    feedback: np.ndarray,
    grids: Grids,
    ops: StepOperators | None = None,
) -> ValuePath:
    """Backward value sweep for a prescribed (not necessarily optimal) feedback."""
    grid, tg = grids.space, grids.time
    nt, xs, dt = tg.steps, grid.nodes, tg.dt
    if ops is None:
        ops = StepOperators(grid, tg, model)
    psi = np.empty((nt + 1, grid.n))
    dpsi = np.empty_like(psi)
    psi[nt] = np.asarray(model.h1(xs, x0_path[nt], u0_path[nt], pi_path[nt]), dtype=float)
    dpsi[nt] = ops.grad(psi[nt])
    for n in range(nt - 1, -1, -1):
        def running(k, dp):
            return np.asarray(
                model.f1(xs, x0_path[k], u0_path[k], pi_path[k], feedback[k]), dtype=float
            ) + dp * np.asarray(model.g1(xs, x0_path[k], u0_path[k], pi_path[k], feedback[k]), dtype=float)

        ha = running(n + 1, dpsi[n + 1])
        p_hat = ops.solve_b_pred(psi[n + 1] + dt * ha)
        hb = running(n, ops.grad(p_hat))
        psi[n] = ops.solve_b_cn(ops.b_cn_rhs @ psi[n + 1] + 0.5 * dt * (ha + hb))
        dpsi[n] = ops.grad(psi[n])
    return ValuePath(psi=psi, dpsi=dpsi, feedback=np.asarray(feedback, dtype=float), grid=grid, timegrid=tg)


# ---------------------------------------------------------------------------
# cost quadrature


def _time_weights(nt: int) -> np.ndarray:
    w = np.ones(nt + 1)
    w[0] = w[-1] = 0.5
    return w


def evaluate_j1(
    model: ModelSpec,
    density_path: DensityPath,
    pi_path: list[JointLaw],
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    feedback: np.ndarray,
) -> float:
    """Representative-agent cost: time-space quadrature of f1 against the
    density plus the terminal cost against the final slice."""
    grid, tg = density_path.grid, density_path.timegrid
    xs, nt = grid.nodes, tg.steps
    w = _time_weights(nt)
    total = 0.0
    for n in range(nt + 1):
        f = np.asarray(model.f1(xs, x0_path[n], u0_path[n], pi_path[n], feedback[n]), dtype=float)
        total += w[n] * tg.dt * grid.quadrature(f * density_path.m[n])
    h1v = np.asarray(model.h1(xs, x0_path[nt], u0_path[nt], pi_path[nt]), dtype=float)
    total += grid.quadrature(h1v * density_path.m[nt])
    if not np.isfinite(total):
        raise CoefficientError("f1/h1", "in the cost quadrature")
    return float(total)


def write_value_slice_csv(path, grid: Grid, psi: np.ndarray, feedback: np.ndarray) -> None:
    """Write one value-field time slice as CSV with columns x,psi,u."""
    with open(path, "w") as f:
        f.write("x,psi,u\n")
        for x, p, u in zip(grid.nodes, psi, feedback):
            f.write(f"{x:.17g},{p:.17g},{u:.17g}\n")
