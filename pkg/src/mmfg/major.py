"""Dominating player: adjoint fields, control gradient, and optimization.

The major player's cost responds to its control through three coupled
channels: its own state, the population density, and the minor agents'
value field (whose feedback steers the density).  The sensitivity is
carried by three adjoint quantities

  p(t)    costate of the major state,
  q(x,t)  multiplier of the population density constraint,
  r(x,t)  multiplier of the backward value-field constraint,

which satisfy a backward ODE, a backward field equation and a forward
field equation respectively, mutually coupled.  Here they are computed as
the exact discrete transposes of the linearized forward solvers in `pde`,
so the resulting stationarity residual reproduces the derivative of the
discrete cost to solver precision; the recursions are consistent
discretizations of the continuous adjoint system.  Because the forward
system is itself a fixed point (the law path feeds back into every
coefficient), the adjoint system is solved by block sweeps iterated to a
fixed point: r forward given (q, p), then q backward given (r, p), then p
last, repeating until the fields settle.

In the frozen-common-noise regime the Ito-correction and martingale terms
of the costate equation vanish identically; the corresponding fields are
carried as exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .equilibrium import EquilibriumSolution, solve_fixed_point
from .measure import JointLaw
from .model import ModelSpec, u1_argmin_partials
from .pde import Grids, StepOperators, TimeGrid, fp_forward, hjb_backward

__all__ = [
    "AdjointBundle",
    "AdjointIterationError",
    "LQOracle",
    "solve_adjoints",
    "u0_stationarity_residual",
    "residual_to_gradient",
    "optimize_u0",
    "evaluate_j0",
    "integrate_x0",
    "solve_coupled_forward",
]


class AdjointIterationError(RuntimeError):
    def __init__(self, residual: float, rounds: int):
        self.residual = residual
        self.rounds = rounds
        super().__init__(
            f"adjoint block iteration did not reach tolerance: residual {residual:.3e} after {rounds} rounds"
        )


@dataclass
class AdjointBundle:
    """Adjoint trio on the solver grids.

    p has one value per time node; q and r are fields per (time, node).
    Terminal slices of p and q are reported via their closed terminal
    formulas (independent quadrature of the terminal costs); interior
    slices are the exact discrete multipliers.  r carries its initial
    condition r(.,0) = 0 exactly.
    """

    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    # Exact discrete multipliers at the final slice differ from the closed
    # terminal formulas by the terminal quadrature share of the running
    # terms; these corrections keep the residual assembly exact.
    terminal_extra_p: float = 0.0
    terminal_extra_q: np.ndarray | None = None

    @property
    def kp(self) -> np.ndarray:
        """Costate martingale integrand; zero in the frozen-noise regime."""
        return np.zeros_like(self.p)

    @property
    def kq(self) -> np.ndarray:
        """Field martingale integrand; zero in the frozen-noise regime."""
        return np.zeros_like(self.q)


# ---------------------------------------------------------------------------
# cost and state integration


def evaluate_j0(
    model: ModelSpec,
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    pi_path: list[JointLaw],
    timegrid: TimeGrid,
) -> float:
    """Major cost: per-interval quadrature of f0 plus terminal h0.

    Each interval contributes dt * f0 evaluated at the midpoint state, the
    interval's (piecewise constant) control, and the average of the two
    endpoint laws.  This is exact in the control, second order in the
    state and law arguments.
    """
    nt, dt = timegrid.steps, timegrid.dt
    total = 0.0
    for n in range(nt):
        xmid = 0.5 * (x0_path[n] + x0_path[n + 1])
        total += 0.5 * dt * float(model.f0(xmid, pi_path[n], u0_path[n]))
        total += 0.5 * dt * float(model.f0(xmid, pi_path[n + 1], u0_path[n]))
    total += float(model.h0(x0_path[nt], pi_path[nt]))
    if not np.isfinite(total):
        raise ValueError("major cost evaluated non-finite")
    return float(total)


def integrate_x0(
    model: ModelSpec,
    pi_path: list[JointLaw],
    u0_path: np.ndarray,
    xi0: float,
    timegrid: TimeGrid,
) -> tuple[np.ndarray, np.ndarray]:
    """Heun integration of the major state under its drift; returns the
    path and the predictor stages (needed by the adjoint tape)."""
    nt, dt = timegrid.steps, timegrid.dt
    x0 = np.empty(nt + 1)
    x_hat = np.empty(nt)
    x0[0] = xi0
    for n in range(nt):
        d0 = float(model.g0(x0[n], pi_path[n], u0_path[n]))
        xh = x0[n] + dt * d0
        d1 = float(model.g0(xh, pi_path[n + 1], u0_path[n]))
        x0[n + 1] = x0[n] + 0.5 * dt * (d0 + d1)
        x_hat[n] = xh
    return x0, x_hat


def solve_coupled_forward(
    model: ModelSpec,
    u0_path: np.ndarray,
    omega: np.ndarray,
    grids: Grids,
    xi0: float,
    eq_tol: float = 1e-10,
    damping: float = 0.5,
    eq_max_iter: int = 400,
    upwind_blend: float = 1.0,
    x0_tol: float = 1e-11,
    max_rounds: int = 60,
    warm: tuple[np.ndarray, list[JointLaw]] | None = None,
) -> tuple[np.ndarray, EquilibriumSolution]:
    """Mutually consistent major state path and population equilibrium.

    Alternates integrating the major state against the current law path
    with re-solving the equilibrium at the new state path, until the state
    path settles.  The returned equilibrium is solved at the final path.
    """
    nt = grids.time.steps
    if warm is not None:
        x0_path, pi = np.asarray(warm[0], dtype=float).copy(), warm[1]
    else:
        x0_path = np.full(nt + 1, float(xi0))
        pi = None
    eq = None
    for _ in range(max_rounds):
        eq = solve_fixed_point(
            model, x0_path, u0_path, omega, grids,
            tol=eq_tol, damping=damping, max_iter=eq_max_iter,
            pi_init=pi, upwind_blend=upwind_blend,
        )
        pi = eq.pi_path
        x0_new, _ = integrate_x0(model, eq.pi_path, u0_path, xi0, grids.time)
        delta = float(np.max(np.abs(x0_new - x0_path)))
        x0_path = x0_new
        if delta <= x0_tol:
            eq = solve_fixed_point(
                model, x0_path, u0_path, omega, grids,
                tol=eq_tol, damping=damping, max_iter=eq_max_iter,
                pi_init=pi, upwind_blend=upwind_blend,
            )
            return x0_path, eq
    raise RuntimeError("state/equilibrium consistency loop did not settle")


# ---------------------------------------------------------------------------
# forward tape


@dataclass
class _Tape:
    """Converged forward quantities and stage values for the adjoint sweeps."""

    model: ModelSpec
    grids: Grids
    ops: StepOperators
    laws: list[JointLaw]
    x0: np.ndarray
    u0: np.ndarray
    x_hat: np.ndarray
    m: np.ndarray
    m_hat: np.ndarray
    psi: np.ndarray
    dpsi: np.ndarray
    psi_hat: np.ndarray
    dp_hat: np.ndarray
    w_hat: np.ndarray
    v: np.ndarray
    G: np.ndarray          # g1 at (x, slice data, v)
    g1_hat: np.ndarray     # g1 at (x, slice data, w_hat), per step
    av: np.ndarray         # d(argmin)/d x0
    bv: np.ndarray         # d(argmin)/d u0
    cv: np.ndarray         # d(argmin)/d dpsi
    _cache: dict = field(default_factory=dict)

    # -- kernel evaluations -------------------------------------------------
    # Matrices are indexed [base node i, law atom j]; vectors over atoms j.

    def _atoms(self, n: int):
        xs = self.grids.space.nodes
        return xs[None, :], self.v[n][None, :]

    def kmat_g1(self, n: int, base_u1: np.ndarray) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_g1
        if k is None:
            return None
        xs = self.grids.space.nodes
        xi, u = self._atoms(n)
        return np.asarray(
            k(xs[:, None], self.x0[n], self.u0[n], self.laws[n], base_u1[:, None], xi, u), dtype=float
        )

    def kmat_f1(self, n: int, base_u1: np.ndarray) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_f1
        if k is None:
            return None
        xs = self.grids.space.nodes
        xi, u = self._atoms(n)
        return np.asarray(
            k(xs[:, None], self.x0[n], self.u0[n], self.laws[n], base_u1[:, None], xi, u), dtype=float
        )

    def kmat_h1(self, n: int) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_h1
        if k is None:
            return None
        xs = self.grids.space.nodes
        xi, u = self._atoms(n)
        return np.asarray(k(xs[:, None], self.x0[n], self.u0[n], self.laws[n], xi, u), dtype=float)

    def kvec_f0(self, n: int, base_x0: float, base_u0: float) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_f0
        if k is None:
            return None
        xi, u = self._atoms(n)
        return np.asarray(k(base_x0, self.laws[n], base_u0, xi[0], u[0]), dtype=float)

    def kvec_g0(self, n: int, base_x0: float, base_u0: float) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_g0
        if k is None:
            return None
        xi, u = self._atoms(n)
        return np.asarray(k(base_x0, self.laws[n], base_u0, xi[0], u[0]), dtype=float)

    def kvec_h0(self, n: int) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_h0
        if k is None:
            return None
        xi, u = self._atoms(n)
        return np.asarray(k(self.x0[n], self.laws[n], xi[0], u[0]), dtype=float)

    # control-coordinate derivatives of the kernels (for the feedback
    # component of law variations), by central differences in u
    def _du(self, build, n: int, eps: float = 1e-6):
        xs = self.grids.space.nodes
        up = self.v[n][None, :] + eps
        dn = self.v[n][None, :] - eps
        xi = xs[None, :]
        return (build(xi, up) - build(xi, dn)) / (2 * eps)

    def kmat_g1_du(self, n: int, base_u1: np.ndarray) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_g1
        if k is None:
            return None
        xs = self.grids.space.nodes
        return self._du(
            lambda xi, u: np.asarray(
                k(xs[:, None], self.x0[n], self.u0[n], self.laws[n], base_u1[:, None], xi, u), dtype=float
            ),
            n,
        )

    def kmat_f1_du(self, n: int, base_u1: np.ndarray) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_f1
        if k is None:
            return None
        xs = self.grids.space.nodes
        return self._du(
            lambda xi, u: np.asarray(
                k(xs[:, None], self.x0[n], self.u0[n], self.laws[n], base_u1[:, None], xi, u), dtype=float
            ),
            n,
        )

    def kmat_h1_du(self, n: int) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_h1
        if k is None:
            return None
        xs = self.grids.space.nodes
        return self._du(
            lambda xi, u: np.asarray(k(xs[:, None], self.x0[n], self.u0[n], self.laws[n], xi, u), dtype=float),
            n,
        )

    def kvec_f0_du(self, n: int, base_x0: float, base_u0: float, eps: float = 1e-6) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_f0
        if k is None:
            return None
        xs = self.grids.space.nodes
        return (
            np.asarray(k(base_x0, self.laws[n], base_u0, xs, self.v[n] + eps), dtype=float)
            - np.asarray(k(base_x0, self.laws[n], base_u0, xs, self.v[n] - eps), dtype=float)
        ) / (2 * eps)

    def kvec_g0_du(self, n: int, base_x0: float, base_u0: float, eps: float = 1e-6) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_g0
        if k is None:
            return None
        xs = self.grids.space.nodes
        return (
            np.asarray(k(base_x0, self.laws[n], base_u0, xs, self.v[n] + eps), dtype=float)
            - np.asarray(k(base_x0, self.laws[n], base_u0, xs, self.v[n] - eps), dtype=float)
        ) / (2 * eps)

    def kvec_h0_du(self, n: int, eps: float = 1e-6) -> np.ndarray | None:
        k = self.model.pi_kernels.dpi_h0
        if k is None:
            return None
        xs = self.grids.space.nodes
        return (
            np.asarray(k(self.x0[n], self.laws[n], xs, self.v[n] + eps), dtype=float)
            - np.asarray(k(self.x0[n], self.laws[n], xs, self.v[n] - eps), dtype=float)
        ) / (2 * eps)


def _record_tape(
    model: ModelSpec,
    eq: EquilibriumSolution,
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    grids: Grids,
    upwind_blend: float,
) -> _Tape:
    """Re-run one backward and one forward sweep at the converged law path
    and collect every stage quantity the adjoint recursion pairs against."""
    grid, tg = grids.space, grids.time
    nt, xs = tg.steps, grid.nodes
    ops = StepOperators(grid, tg, model, upwind_blend)
    laws = eq.pi_path
    u0 = np.asarray(u0_path, dtype=float).copy()
    x0 = np.asarray(x0_path, dtype=float)

    value = hjb_backward(model, laws, x0, u0, grids, ops=ops)
    density = fp_forward(model, laws, x0, u0, omega=eq.density.m[0], grids=grids, ops=ops, feedback=value.feedback)
    _, x_hat = integrate_x0(model, laws, u0, float(x0[0]), tg)

    v = value.feedback
    G = np.empty((nt + 1, grid.n))
    av = np.empty((nt + 1, grid.n))
    bv = np.empty((nt + 1, grid.n))
    cv = np.empty((nt + 1, grid.n))
    for n in range(nt + 1):
        G[n] = np.asarray(model.g1(xs, x0[n], u0[n], laws[n], v[n]), dtype=float)
        av[n], bv[n], cv[n] = u1_argmin_partials(model, xs, x0[n], u0[n], laws[n], value.dpsi[n])

    g1_hat = np.empty((nt, grid.n))
    dp_hat = np.empty((nt, grid.n))
    for n in range(nt):
        dp_hat[n] = ops.grad(value.stage_psi_hat[n])
        g1_hat[n] = np.asarray(model.g1(xs, x0[n], u0[n], laws[n], value.stage_w_hat[n]), dtype=float)

    return _Tape(
        model=model,
        grids=grids,
        ops=ops,
        laws=laws,
        x0=x0,
        u0=u0,
        x_hat=x_hat,
        m=density.m,
        m_hat=density.stage_m_hat,
        psi=value.psi,
        dpsi=value.dpsi,
        psi_hat=value.stage_psi_hat,
        dp_hat=dp_hat,
        w_hat=value.stage_w_hat,
        v=v,
        G=G,
        g1_hat=g1_hat,
        av=av,
        bv=bv,
        cv=cv,
    )


# ---------------------------------------------------------------------------
# per-step transposed chains


def _hjb_chain(tape: _Tape, j: int, psibar_j: np.ndarray):
    """Transpose of the backward value step producing slice j from j+1.

    Returns the contribution to the cotangent of psi[j+1] plus the weights
    habar (stage A, slice j+1 fields) and hbbar (stage B, slice j fields).
    The control slots of both stages drop out by the envelope property of
    the minimized Hamiltonian.
    """
    ops, dt = tape.ops, tape.grids.time.dt
    c = ops.solve_b_cn(psibar_j, trans=True)
    hbbar = 0.5 * dt * c
    psihatbar = ops.grad_t(hbbar * tape.g1_hat[j])
    e = ops.solve_b_pred(psihatbar, trans=True)
    habar = 0.5 * dt * c + dt * e
    psibar_jp1 = tape.ops.b_cn_rhs_t @ c + e + ops.grad_t(habar * tape.G[j + 1])
    return psibar_jp1, habar, hbbar


def _fp_chain(tape: _Tape, j: int, mbar_jp1: np.ndarray):
    """Transpose of the forward density step producing slice j+1 from j.

    Returns the contribution to the cotangent of m[j], plus the drift
    weights gbar_a (slice j) and gbar_b (slice j+1)."""
    ops, dt = tape.ops, tape.grids.time.dt
    b1 = ops.solve_bs_cn(mbar_jp1, trans=True)
    fbbar = -0.5 * dt * b1
    gbar_b, mhatbar = ops.adv_div_vjp(tape.G[j + 1], tape.m_hat[j], fbbar)
    e2 = ops.solve_bs_pred(mhatbar, trans=True)
    fabar = -0.5 * dt * b1 - dt * e2
    gbar_a, madd = ops.adv_div_vjp(tape.G[j], tape.m[j], fabar)
    mbar_j = tape.ops.bs_cn_rhs_t @ b1 + e2 + madd
    return mbar_j, gbar_a, gbar_b


def _x0_chain(tape: _Tape, j: int, pb: float):
    """Transpose of the Heun state step; returns the cotangent contribution
    to x0[j] and the two stage drift weights."""
    dt = tape.grids.time.dt
    pr = tape.model.partials
    d1bar = 0.5 * dt * pb
    xhbar = d1bar * float(pr.g0_x0(tape.x_hat[j], tape.laws[j + 1], tape.u0[j]))
    d0bar = 0.5 * dt * pb + dt * xhbar
    x0bar_j = pb + xhbar + d0bar * float(pr.g0_x0(tape.x0[j], tape.laws[j], tape.u0[j]))
    return x0bar_j, d0bar, d1bar


@dataclass
class _Weights:
    """Per-slice pairing weights produced by the transposed chains."""

    habar: np.ndarray   # (nt, nx), stage A of step j pairs fields at slice j+1
    hbbar: np.ndarray   # (nt, nx), stage B of step j pairs fields at slice j
    gbar_a: np.ndarray  # (nt, nx), drift weight at slice j
    gbar_b: np.ndarray  # (nt, nx), drift weight at slice j+1
    d0bar: np.ndarray   # (nt,), state-stage weight at slice j
    d1bar: np.ndarray   # (nt,), state-stage weight at slice j+1

    @classmethod
    def zeros(cls, nt: int, nx: int) -> "_Weights":
        return cls(
            habar=np.zeros((nt, nx)),
            hbbar=np.zeros((nt, nx)),
            gbar_a=np.zeros((nt, nx)),
            gbar_b=np.zeros((nt, nx)),
            d0bar=np.zeros(nt),
            d1bar=np.zeros(nt),
        )


def _law_channel_weights(tape: _Tape, n: int, w: _Weights, psibar_nt: np.ndarray):
    """All (weight, kernel-base) pairs pairing against the law at slice n.

    Yields tuples (weight, kind, extra) where kind selects the kernel and
    extra carries base-point data.  Weights are plain cotangents of the
    coefficient values."""
    nt = tape.grids.time.steps
    dt = tape.grids.time.dt
    out = []
    # running major cost: each adjacent interval pairs this slice's law
    # with half weight, evaluated at the interval's midpoint state
    if n < nt:
        out.append((0.5 * dt, "f0", (0.5 * (tape.x0[n] + tape.x0[n + 1]), tape.u0[n])))
    if n > 0:
        out.append((0.5 * dt, "f0", (0.5 * (tape.x0[n - 1] + tape.x0[n]), tape.u0[n - 1])))
    # state-drift stages
    if n < nt:
        out.append((w.d0bar[n], "g0", (tape.x0[n], tape.u0[n])))
    if n > 0:
        out.append((w.d1bar[n - 1], "g0", (tape.x_hat[n - 1], tape.u0[n - 1])))
    # density-drift stages
    if n < nt:
        out.append((w.gbar_a[n], "g1", tape.v[n]))
    if n > 0:
        out.append((w.gbar_b[n - 1], "g1", tape.v[n]))
    # value-equation stages
    if n > 0:
        out.append((w.habar[n - 1], "H1", (tape.v[n], tape.dpsi[n])))
    if n < nt:
        out.append((w.hbbar[n], "H1", (tape.w_hat[n], tape.dp_hat[n])))
    # terminal costs
    if n == nt:
        out.append((1.0, "h0", None))
        out.append((psibar_nt, "h1", None))
    return out


def _law_channel_mbar(tape: _Tape, n: int, w: _Weights, psibar_nt: np.ndarray) -> np.ndarray:
    """Density cotangent at slice n induced by every law consumer."""
    h = tape.grids.space.h
    nx = tape.grids.space.n
    add = np.zeros(nx)
    for weight, kind, extra in _law_channel_weights(tape, n, w, psibar_nt):
        if np.all(np.asarray(weight) == 0.0):
            continue
        if kind == "f0":
            kv = tape.kvec_f0(n, extra[0], extra[1])
            if kv is not None:
                add += float(weight) * h * kv
        elif kind == "g0":
            kv = tape.kvec_g0(n, extra[0], extra[1])
            if kv is not None:
                add += float(weight) * h * kv
        elif kind == "g1":
            km = tape.kmat_g1(n, extra)
            if km is not None:
                add += h * (np.asarray(weight) @ km)
        elif kind == "H1":
            base_u1, qw = extra
            kf = tape.kmat_f1(n, base_u1)
            kg = tape.kmat_g1(n, base_u1)
            wq = np.asarray(weight)
            if kf is not None:
                add += h * (wq @ kf)
            if kg is not None:
                add += h * ((wq * qw) @ kg)
        elif kind == "h0":
            kv = tape.kvec_h0(n)
            if kv is not None:
                add += float(weight) * h * kv
        elif kind == "h1":
            km = tape.kmat_h1(n)
            if km is not None:
                add += h * (np.asarray(weight) @ km)
    return add


def _law_channel_vbar(tape: _Tape, n: int, w: _Weights, psibar_nt: np.ndarray) -> np.ndarray:
    """Feedback cotangent at slice n: direct control slots of the density
    drift plus the control coordinate of every law pairing."""
    h = tape.grids.space.h
    xs = tape.grids.space.nodes
    nt = tape.grids.time.steps
    nx = tape.grids.space.n
    pr = tape.model.partials
    vbar = np.zeros(nx)
    # direct control slot of the density drift (both stages use v[n])
    g1u1 = np.asarray(pr.g1_u1(xs, tape.x0[n], tape.u0[n], tape.laws[n], tape.v[n]), dtype=float)
    if n < nt:
        vbar += w.gbar_a[n] * g1u1
    if n > 0:
        vbar += w.gbar_b[n - 1] * g1u1
    # control coordinate of kernel pairings, weighted by atom masses
    mass = tape.m[n] * h
    for weight, kind, extra in _law_channel_weights(tape, n, w, psibar_nt):
        if np.all(np.asarray(weight) == 0.0):
            continue
        if kind == "f0":
            kv = tape.kvec_f0_du(n, extra[0], extra[1])
            if kv is not None:
                vbar += float(weight) * mass * kv
        elif kind == "g0":
            kv = tape.kvec_g0_du(n, extra[0], extra[1])
            if kv is not None:
                vbar += float(weight) * mass * kv
        elif kind == "g1":
            km = tape.kmat_g1_du(n, extra)
            if km is not None:
                vbar += mass * (np.asarray(weight) @ km)
        elif kind == "H1":
            base_u1, qw = extra
            kf = tape.kmat_f1_du(n, base_u1)
            kg = tape.kmat_g1_du(n, base_u1)
            wq = np.asarray(weight)
            if kf is not None:
                vbar += mass * (wq @ kf)
            if kg is not None:
                vbar += mass * ((wq * qw) @ kg)
        elif kind == "h0":
            kv = tape.kvec_h0_du(n)
            if kv is not None:
                vbar += float(weight) * mass * kv
        elif kind == "h1":
            km = tape.kmat_h1_du(n)
            if km is not None:
                vbar += mass * (np.asarray(weight) @ km)
    return vbar


def _x0_slice_add(tape: _Tape, n: int, w: _Weights, psibar_nt: np.ndarray, vbar_n: np.ndarray) -> float:
    """Direct major-state cotangent contributions collected at slice n."""
    nt, dt = tape.grids.time.steps, tape.grids.time.dt
    xs = tape.grids.space.nodes
    pr = tape.model.partials
    law = tape.laws[n]
    add = 0.0
    # midpoint-state quadrature of the running cost: each adjacent interval
    # contributes half its f0_x0 through the midpoint state
    if n < nt:
        xmid = 0.5 * (tape.x0[n] + tape.x0[n + 1])
        add += 0.25 * dt * (
            float(pr.f0_x0(xmid, tape.laws[n], tape.u0[n]))
            + float(pr.f0_x0(xmid, tape.laws[n + 1], tape.u0[n]))
        )
    if n > 0:
        xmid = 0.5 * (tape.x0[n - 1] + tape.x0[n])
        add += 0.25 * dt * (
            float(pr.f0_x0(xmid, tape.laws[n - 1], tape.u0[n - 1]))
            + float(pr.f0_x0(xmid, tape.laws[n], tape.u0[n - 1]))
        )
    if n > 0:
        f1x = np.asarray(pr.f1_x0(xs, tape.x0[n], tape.u0[n], law, tape.v[n]), dtype=float)
        g1x = np.asarray(pr.g1_x0(xs, tape.x0[n], tape.u0[n], law, tape.v[n]), dtype=float)
        add += float(np.sum(w.habar[n - 1] * (f1x + tape.dpsi[n] * g1x)))
        add += float(np.sum(w.gbar_b[n - 1] * g1x))
    if n < nt:
        f1xh = np.asarray(pr.f1_x0(xs, tape.x0[n], tape.u0[n], law, tape.w_hat[n]), dtype=float)
        g1xh = np.asarray(pr.g1_x0(xs, tape.x0[n], tape.u0[n], law, tape.w_hat[n]), dtype=float)
        add += float(np.sum(w.hbbar[n] * (f1xh + tape.dp_hat[n] * g1xh)))
        g1x = np.asarray(pr.g1_x0(xs, tape.x0[n], tape.u0[n], law, tape.v[n]), dtype=float)
        add += float(np.sum(w.gbar_a[n] * g1x))
    if n == nt:
        add += float(pr.h0_x0(tape.x0[n], law))
        h1x = np.asarray(pr.h1_x0(xs, tape.x0[n], tape.u0[n], law), dtype=float)
        add += float(np.sum(psibar_nt * h1x))
    add += float(np.sum(tape.av[n] * vbar_n))
    return add


def _u0_slice_add(tape: _Tape, n: int, w: _Weights, psibar_nt: np.ndarray, vbar_n: np.ndarray) -> float:
    """Direct major-control cotangent contributions collected at slice n.

    The interval [t_n, t_{n+1}) owns the control value u0[n]; the terminal
    slice collects only the terminal-evaluation channels of the last
    interval's control."""
    nt, dt = tape.grids.time.steps, tape.grids.time.dt
    xs = tape.grids.space.nodes
    pr = tape.model.partials
    law = tape.laws[n]
    add = 0.0
    if n < nt:
        xmid = 0.5 * (tape.x0[n] + tape.x0[n + 1])
        add += 0.5 * dt * (
            float(pr.f0_u0(xmid, tape.laws[n], tape.u0[n]))
            + float(pr.f0_u0(xmid, tape.laws[n + 1], tape.u0[n]))
        )
    # both stages of the state step over [t_n, t_{n+1}) consume u0[n]
    if n < nt:
        add += w.d0bar[n] * float(pr.g0_u0(tape.x0[n], law, tape.u0[n]))
        add += w.d1bar[n] * float(pr.g0_u0(tape.x_hat[n], tape.laws[n + 1], tape.u0[n]))
    if n > 0:
        f1u = np.asarray(pr.f1_u0(xs, tape.x0[n], tape.u0[n], law, tape.v[n]), dtype=float)
        g1u = np.asarray(pr.g1_u0(xs, tape.x0[n], tape.u0[n], law, tape.v[n]), dtype=float)
        add += float(np.sum(w.habar[n - 1] * (f1u + tape.dpsi[n] * g1u)))
        add += float(np.sum(w.gbar_b[n - 1] * g1u))
    if n < nt:
        f1uh = np.asarray(pr.f1_u0(xs, tape.x0[n], tape.u0[n], law, tape.w_hat[n]), dtype=float)
        g1uh = np.asarray(pr.g1_u0(xs, tape.x0[n], tape.u0[n], law, tape.w_hat[n]), dtype=float)
        add += float(np.sum(w.hbbar[n] * (f1uh + tape.dp_hat[n] * g1uh)))
        g1u = np.asarray(pr.g1_u0(xs, tape.x0[n], tape.u0[n], law, tape.v[n]), dtype=float)
        add += float(np.sum(w.gbar_a[n] * g1u))
    if n == nt:
        eps = 1e-6
        h1p = np.asarray(tape.model.h1(xs, tape.x0[n], tape.u0[n] + eps, law), dtype=float)
        h1m = np.asarray(tape.model.h1(xs, tape.x0[n], tape.u0[n] - eps, law), dtype=float)
        add += float(np.sum(psibar_nt * (h1p - h1m) / (2 * eps)))
    add += float(np.sum(tape.bv[n] * vbar_n))
    return add


# ---------------------------------------------------------------------------
# block iteration


def solve_adjoints(
    model: ModelSpec,
    eq: EquilibriumSolution,
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    grids: Grids,
    inner_tol: float = 1e-10,
    inner_max_iter: int = 80,
    upwind_blend: float = 1.0,
) -> AdjointBundle:
    """Solve the coupled adjoint system at a converged equilibrium.

    Sweeps: the value-constraint multiplier (r) forward in time, the
    density multiplier (q) backward, the costate (p) last, iterating the
    three blocks until the fields change by less than inner_tol in sup
    norm.  Raises AdjointIterationError when the budget is exhausted.
    """
    if not eq.converged:
        raise ValueError("adjoint solve requires a converged equilibrium")
    tape = _record_tape(model, eq, x0_path, u0_path, grids, upwind_blend)
    grid, tg = grids.space, grids.time
    nt, nx, h = tg.steps, grid.n, grid.h

    psibar = np.zeros((nt + 1, nx))
    mbar = np.zeros((nt + 1, nx))
    x0bar = np.zeros(nt + 1)
    weights = _Weights.zeros(nt, nx)
    vbar = np.zeros((nt + 1, nx))

    residual = np.inf
    for rounds in range(1, inner_max_iter + 1):
        # r block: forward sweep, time-fresh, lagged cross-channels
        psibar_new = np.zeros_like(psibar)
        habar = np.zeros((nt, nx))
        hbbar = np.zeros((nt, nx))
        psibar_new[0] = tape.ops.grad_t(tape.cv[0] * vbar[0])
        for n in range(1, nt + 1):
            contrib, ha, hb = _hjb_chain(tape, n - 1, psibar_new[n - 1])
            habar[n - 1] = ha
            hbbar[n - 1] = hb
            psibar_new[n] = contrib + tape.ops.grad_t(tape.cv[n] * vbar[n])

        # q block: backward sweep with fresh value-side weights
        w_mix = _Weights(
            habar=habar, hbbar=hbbar,
            gbar_a=weights.gbar_a, gbar_b=weights.gbar_b,
            d0bar=weights.d0bar, d1bar=weights.d1bar,
        )
        mbar_new = np.zeros_like(mbar)
        gbar_a = np.zeros((nt, nx))
        gbar_b = np.zeros((nt, nx))
        mbar_new[nt] = _law_channel_mbar(tape, nt, w_mix, psibar_new[nt])
        for n in range(nt - 1, -1, -1):
            contrib, ga, gb = _fp_chain(tape, n, mbar_new[n + 1])
            gbar_a[n] = ga
            gbar_b[n] = gb
            w_n = _Weights(
                habar=habar, hbbar=hbbar,
                gbar_a=gbar_a, gbar_b=weights.gbar_b,
                d0bar=weights.d0bar, d1bar=weights.d1bar,
            )
            mbar_new[n] = contrib + _law_channel_mbar(tape, n, w_n, psibar_new[nt])

        # refresh feedback cotangents with this round's value/density weights
        w_fresh = _Weights(
            habar=habar, hbbar=hbbar, gbar_a=gbar_a, gbar_b=gbar_b,
            d0bar=weights.d0bar, d1bar=weights.d1bar,
        )
        vbar_new = np.zeros_like(vbar)
        for n in range(nt + 1):
            vbar_new[n] = _law_channel_vbar(tape, n, w_fresh, psibar_new[nt])

        # p block: backward scalar sweep with everything fresh
        x0bar_new = np.zeros_like(x0bar)
        d0bar = np.zeros(nt)
        d1bar = np.zeros(nt)
        x0bar_new[nt] = _x0_slice_add(tape, nt, w_fresh, psibar_new[nt], vbar_new[nt])
        for n in range(nt - 1, -1, -1):
            chain, d0b, d1b = _x0_chain(tape, n, x0bar_new[n + 1])
            d0bar[n] = d0b
            d1bar[n] = d1b
            x0bar_new[n] = chain + _x0_slice_add(tape, n, w_fresh, psibar_new[nt], vbar_new[n])

        residual = max(
            float(np.max(np.abs(psibar_new - psibar))),
            float(np.max(np.abs(mbar_new - mbar))),
            float(np.max(np.abs(x0bar_new - x0bar))),
        )
        psibar, mbar, x0bar, vbar = psibar_new, mbar_new, x0bar_new, vbar_new
        weights = _Weights(habar=habar, hbbar=hbbar, gbar_a=gbar_a, gbar_b=gbar_b, d0bar=d0bar, d1bar=d1bar)
        if residual <= inner_tol:
            break
    else:
        raise AdjointIterationError(residual, inner_max_iter)

    # reported fields: interior = exact multipliers; terminal slices of p
    # and q via their closed terminal formulas, with the exact terminal
    # quadrature shares kept as corrections; r starts at exactly zero
    p = x0bar.copy()
    q = mbar / h
    r = psibar / h
    r[0] = 0.0
    xs = grid.nodes
    pr = model.partials
    p[nt] = float(pr.h0_x0(tape.x0[nt], tape.laws[nt])) + h * float(
        np.sum(r[nt] * np.asarray(pr.h1_x0(xs, tape.x0[nt], tape.u0[nt], tape.laws[nt]), dtype=float))
    )
    kv_h0 = tape.kvec_h0(nt)
    km_h1 = tape.kmat_h1(nt)
    q_term = np.zeros(nx)
    if kv_h0 is not None:
        q_term += kv_h0
    if km_h1 is not None:
        q_term += h * (r[nt] @ km_h1)
    q[nt] = q_term
    return AdjointBundle(
        p=p,
        q=q,
        r=r,
        terminal_extra_p=float(x0bar[nt] - p[nt]),
        terminal_extra_q=(mbar[nt] - h * q[nt]),
    )


# ---------------------------------------------------------------------------
# stationarity residual and gradient


def _assemble_residual(tape: _Tape, psibar: np.ndarray, mbar: np.ndarray, x0bar: np.ndarray) -> np.ndarray:
    """Per-slice stationarity residual from adjoint fields.

    Recomputes the transposed chain weights once from the supplied fields
    and collects every major-control channel: the direct cost slot, the
    costate-weighted drift slot, the value-equation reaction (r against the
    control slot of the minimized Hamiltonian), the density-drift reaction
    (gradient-of-q weights against the drift control slot), and the
    feedback reaction of the optimal minor control.  The slice value is
    normalized by its quadrature weight so that it reads as the pointwise
    stationarity condition of the effective Hamiltonian.
    """
    nt, nx = tape.grids.time.steps, tape.grids.space.n
    dt = tape.grids.time.dt
    habar = np.zeros((nt, nx))
    hbbar = np.zeros((nt, nx))
    gbar_a = np.zeros((nt, nx))
    gbar_b = np.zeros((nt, nx))
    d0bar = np.zeros(nt)
    d1bar = np.zeros(nt)
    for j in range(nt):
        _, habar[j], hbbar[j] = _hjb_chain(tape, j, psibar[j])
        _, gbar_a[j], gbar_b[j] = _fp_chain(tape, j, mbar[j + 1])
        _, d0bar[j], d1bar[j] = _x0_chain(tape, j, x0bar[j + 1])
    w = _Weights(habar=habar, hbbar=hbbar, gbar_a=gbar_a, gbar_b=gbar_b, d0bar=d0bar, d1bar=d1bar)
    raw = np.empty(nt + 1)
    for n in range(nt + 1):
        vbar_n = _law_channel_vbar(tape, n, w, psibar[nt])
        raw[n] = _u0_slice_add(tape, n, w, psibar[nt], vbar_n)
    # interval k owns the channels of slice k plus, for the last interval,
    # the terminal-slice channels of its control value
    resid = np.empty(nt + 1)
    resid[:nt] = raw[:nt] / dt
    resid[nt - 1] += raw[nt] / dt
    resid[nt] = resid[nt - 1]
    return resid


def u0_stationarity_residual(
    model: ModelSpec,
    eq: EquilibriumSolution,
    bundle: AdjointBundle,
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    grids: Grids,
    upwind_blend: float = 1.0,
) -> np.ndarray:
    """Stationarity residual path of the major control.

    At an optimal control the sup over time is at the solver tolerance;
    paired with a control perturbation under the trapezoid quadrature it
    reproduces the derivative of the major cost.
    """
    tape = _record_tape(model, eq, x0_path, u0_path, grids, upwind_blend)
    h = grids.space.h
    psibar = h * bundle.r
    mbar = h * bundle.q
    x0bar = bundle.p.copy()
    if bundle.terminal_extra_q is not None:
        mbar = mbar.copy()
        mbar[-1] = mbar[-1] + bundle.terminal_extra_q
    x0bar[-1] += bundle.terminal_extra_p
    return _assemble_residual(tape, psibar, mbar, x0bar)


def residual_to_gradient(resid: np.ndarray, timegrid: TimeGrid) -> np.ndarray:
    """Map the residual path to the gradient with respect to the piecewise
    constant control values, one per interval."""
    return timegrid.dt * np.asarray(resid, dtype=float)[:-1]


def pair_residual(resid: np.ndarray, direction: np.ndarray, timegrid: TimeGrid) -> float:
    """Quadrature pairing of a residual path with a control direction."""
    return float(np.dot(residual_to_gradient(resid, timegrid), np.asarray(direction, dtype=float)))


# ---------------------------------------------------------------------------
# outer optimization


def optimize_u0(
    model: ModelSpec,
    omega: np.ndarray,
    grids: Grids,
    xi0: float,
    outer_tol: float = 1e-4,
    outer_max_iter: int = 60,
    step_init: float = 0.5,
    max_backtracks: int = 25,
    eq_tol: float = 1e-10,
    damping: float = 0.5,
    eq_max_iter: int = 400,
    upwind_blend: float = 1.0,
    inner_tol: float = 1e-10,
    inner_max_iter: int = 80,
    u0_init: np.ndarray | None = None,
    log=None,
):
    """Projected descent on the major control with backtracking.

    Each iteration solves the coupled forward system at the current
    control, assembles the adjoint stationarity residual, and steps against
    it, halving the step until the cost decreases.  Terminates when the sup
    residual falls below outer_tol, the iteration budget is exhausted, or
    no descent step is found.
    """
    nt = grids.time.steps
    lo, hi = model.control_box_major
    if u0_init is None:
        u0 = np.zeros(nt + 1)
    else:
        u0 = np.asarray(u0_init, dtype=float).copy()
        u0[nt] = u0[nt - 1]

    def forward(u, warm):
        return solve_coupled_forward(
            model, u, omega, grids, xi0,
            eq_tol=eq_tol, damping=damping, eq_max_iter=eq_max_iter,
            upwind_blend=upwind_blend, warm=warm,
        )

    x0_path, eq = forward(u0, None)
    j0 = evaluate_j0(model, x0_path, u0, eq.pi_path, grids.time)
    history = [j0]
    bundle = None
    resid = None
    for it in range(outer_max_iter):
        bundle = solve_adjoints(
            model, eq, x0_path, u0, grids,
            inner_tol=inner_tol, inner_max_iter=inner_max_iter, upwind_blend=upwind_blend,
        )
        resid = u0_stationarity_residual(model, eq, bundle, x0_path, u0, grids, upwind_blend)
        sup = float(np.max(np.abs(resid)))
        if log is not None:
            log(f"outer={it},J0={j0:.10f},sup_residual={sup:.3e}")
        if sup <= outer_tol:
            break
        step = step_init
        accepted = False
        for _ in range(max_backtracks):
            trial = u0.copy()
            trial[:nt] = np.clip(u0[:nt] - step * resid[:nt], lo, hi)
            trial[nt] = trial[nt - 1]
            x0_try, eq_try = forward(trial, (x0_path, eq.pi_path))
            j0_try = evaluate_j0(model, x0_try, trial, eq_try.pi_path, grids.time)
            if j0_try < j0:
                u0, x0_path, eq, j0 = trial, x0_try, eq_try, j0_try
                history.append(j0)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    return u0, x0_path, eq, bundle, history


# ---------------------------------------------------------------------------
# linear-quadratic oracle


@dataclass
class LQOracle:
    """Semi-explicit benchmark solution from coupled scalar ODEs.

    Integrates the minor Riccati equation, the affine value offset, and
    the mean-state consistency equation with a classical fourth-order
    one-step method on a refinement of the solver time grid, entirely
    independent of the grid solvers.
    """

    params: object
    horizon: float
    nfine: int
    xi0: float
    xbar0: float
    times: np.ndarray = field(init=False)
    P: np.ndarray = field(init=False)

    def __post_init__(self):
        self.times = np.linspace(0.0, self.horizon, self.nfine + 1)
        self.P = self._riccati_minor()

    # -- scalar Riccati, backward ------------------------------------------
    def _riccati_minor(self) -> np.ndarray:
        pr = self.params
        dtf = self.horizon / self.nfine
        P = np.empty(self.nfine + 1)
        P[-1] = pr.gamma1

        def f(p):
            return pr.b**2 * p**2 - 2.0 * pr.a * p - 1.0

        for k in range(self.nfine, 0, -1):
            p = P[k]
            k1 = f(p)
            k2 = f(p - 0.5 * dtf * k1)
            k3 = f(p - 0.5 * dtf * k2)
            k4 = f(p - dtf * k3)
            P[k - 1] = p - dtf / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(P)):
            raise ValueError("minor Riccati path blew up within the horizon")
        return P

    # -- coupled consistency system ------------------------------------------
    def solve_consistency(self, u0_of):
        """Joint (x0, xbar, k) paths for a given control rule.

        u0_of(t_index, x0, xbar) returns the control at a fine-grid node;
        vectorized over trailing array arguments.  Returns dict of fine
        paths.  The two forward equations and the backward offset equation
        are iterated to a fixed point (linear, converges geometrically).
        """
        pr = self.params
        nf, dtf = self.nfine, self.horizon / self.nfine
        P = self.P
        k = np.zeros(nf + 1)
        x0 = np.full(nf + 1, self.xi0, dtype=float)
        xb = np.full(nf + 1, self.xbar0, dtype=float)

        def interp(path, i, frac):
            if frac == 0.0:
                return path[i]
            if frac == 1.0:
                return path[i + 1]
            return 0.5 * (path[i] + path[i + 1])

        for _ in range(400):
            # backward offset: dk/dt = (b^2 P - a + P d b) k + (P d b P + rho) xb
            #                          + (eta - P c) x0 - P e u0
            k_new = np.empty(nf + 1)
            k_new[-1] = 0.0
            for i in range(nf, 0, -1):
                def fk(kv, frac):
                    t_i = i - 1
                    Pv = interp(P, t_i, frac)
                    xbv = interp(xb, t_i, frac)
                    x0v = interp(x0, t_i, frac)
                    u0v = u0_of(t_i, frac, x0v, xbv)
                    return (
                        (pr.b**2 * Pv - pr.a + Pv * pr.d * pr.b) * kv
                        + (Pv * pr.d * pr.b * Pv + pr.rho) * xbv
                        + (pr.eta - Pv * pr.c) * x0v
                        - Pv * pr.e * u0v
                    )

                kv = k_new[i]
                k1 = fk(kv, 1.0)
                k2 = fk(kv - 0.5 * dtf * k1, 0.5)
                k3 = fk(kv - 0.5 * dtf * k2, 0.5)
                k4 = fk(kv - dtf * k3, 0.0)
                k_new[i - 1] = kv - dtf / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

            # forward states:
            # dx0/dt = a0 x0 + b0 u0 + c0 xb
            # dxb/dt = a xb - (b + d) b (P xb + k) + c x0 + e u0
            x0_new = np.empty(nf + 1)
            xb_new = np.empty(nf + 1)
            x0_new[0], xb_new[0] = self.xi0, self.xbar0
            for i in range(nf):
                def fx(x0v, xbv, frac):
                    Pv = interp(P, i, frac)
                    kv = interp(k_new, i, frac)
                    u0v = u0_of(i, frac, x0v, xbv)
                    dx0 = pr.a0 * x0v + pr.b0 * u0v + pr.c0 * xbv
                    dxb = pr.a * xbv - (pr.b + pr.d) * pr.b * (Pv * xbv + kv) + pr.c * x0v + pr.e * u0v
                    return dx0, dxb

                a1_, b1_ = fx(x0_new[i], xb_new[i], 0.0)
                a2_, b2_ = fx(x0_new[i] + 0.5 * dtf * a1_, xb_new[i] + 0.5 * dtf * b1_, 0.5)
                a3_, b3_ = fx(x0_new[i] + 0.5 * dtf * a2_, xb_new[i] + 0.5 * dtf * b2_, 0.5)
                a4_, b4_ = fx(x0_new[i] + dtf * a3_, xb_new[i] + dtf * b3_, 1.0)
                x0_new[i + 1] = x0_new[i] + dtf / 6.0 * (a1_ + 2 * a2_ + 2 * a3_ + a4_)
                xb_new[i + 1] = xb_new[i] + dtf / 6.0 * (b1_ + 2 * b2_ + 2 * b3_ + b4_)

            delta = max(
                float(np.max(np.abs(k_new - k))),
                float(np.max(np.abs(x0_new - x0))),
                float(np.max(np.abs(xb_new - xb))),
            )
            k, x0, xb = k_new, x0_new, xb_new
            if delta <= 1e-13:
                break
        else:
            raise RuntimeError("oracle consistency iteration did not settle")

        ubar = -pr.b * (P * xb + k)
        return {"t": self.times, "P": P, "k": k, "x0": x0, "xbar": xb, "ubar": ubar}

    def consistency_residual(self, sol) -> float:
        """Midpoint residual of the mean-state equation along the fine path."""
        pr = self.params
        dtf = self.horizon / self.nfine
        xb, x0, k, P = sol["xbar"], sol["x0"], sol["k"], sol["P"]
        lhs = (xb[1:] - xb[:-1]) / dtf
        mid = lambda z: 0.5 * (z[1:] + z[:-1])
        u0m = sol.get("u0")
        u0m = mid(u0m) if u0m is not None else 0.0
        rhs = (
            pr.a * mid(xb)
            - (pr.b + pr.d) * pr.b * (mid(P) * mid(xb) + mid(k))
            + pr.c * mid(x0)
            + pr.e * u0m
        )
        return float(np.max(np.abs(lhs - rhs)))

    def for_control_path(self, u0_coarse: np.ndarray, solver_tg: TimeGrid):
        """Consistency solution under a piecewise-constant control path
        given on the solver grid (value per interval)."""
        nt = solver_tg.steps
        ratio = self.nfine // nt
        if ratio * nt != self.nfine:
            raise ValueError("oracle fine grid must refine the solver grid")
        u0_coarse = np.asarray(u0_coarse, dtype=float)

        def u0_of(i, frac, x0v, xbv):
            # fine interval i lives inside coarse interval i // ratio; the
            # stage at frac == 1.0 on the last fine step of a coarse cell
            # still belongs to that cell (left-continuous convention)
            idx = min(i // ratio, nt - 1)
            return u0_coarse[idx] + 0.0 * np.asarray(x0v)

        sol = self.solve_consistency(u0_of)
        fine_idx = np.clip((np.arange(self.nfine) // ratio), 0, nt - 1)
        u0_fine = np.empty(self.nfine + 1)
        u0_fine[:-1] = u0_coarse[fine_idx]
        u0_fine[-1] = u0_coarse[nt - 1]
        sol["u0"] = u0_fine
        sol["J0"] = self._j0_quadrature(sol)
        return sol

    def for_affine_feedback(self, theta1, theta2, theta3):
        """Consistency solution and cost for u0 = theta1 x0 + theta2 xbar + theta3.

        Vectorized over equally-shaped theta arrays (trailing dimension of
        the state arrays)."""
        th1 = np.atleast_1d(np.asarray(theta1, dtype=float))
        th2 = np.atleast_1d(np.asarray(theta2, dtype=float))
        th3 = np.atleast_1d(np.asarray(theta3, dtype=float))
        pr = self.params
        nf, dtf = self.nfine, self.horizon / self.nfine
        m = th1.shape[0]
        P = self.P
        k = np.zeros((nf + 1, m))
        x0 = np.full((nf + 1, m), self.xi0, dtype=float)
        xb = np.full((nf + 1, m), self.xbar0, dtype=float)

        def interp(path, i, frac):
            if frac == 0.0:
                return path[i]
            if frac == 1.0:
                return path[i + 1]
            return 0.5 * (path[i] + path[i + 1])

        for _ in range(400):
            k_new = np.empty_like(k)
            k_new[-1] = 0.0
            for i in range(nf, 0, -1):
                def fk(kv, frac):
                    Pv = interp(P, i - 1, frac)
                    xbv = interp(xb, i - 1, frac)
                    x0v = interp(x0, i - 1, frac)
                    u0v = th1 * x0v + th2 * xbv + th3
                    return (
                        (pr.b**2 * Pv - pr.a + Pv * pr.d * pr.b) * kv
                        + (Pv * pr.d * pr.b * Pv + pr.rho) * xbv
                        + (pr.eta - Pv * pr.c) * x0v
                        - Pv * pr.e * u0v
                    )

                kv = k_new[i]
                k1 = fk(kv, 1.0)
                k2 = fk(kv - 0.5 * dtf * k1, 0.5)
                k3 = fk(kv - 0.5 * dtf * k2, 0.5)
                k4 = fk(kv - dtf * k3, 0.0)
                k_new[i - 1] = kv - dtf / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

            x0_new = np.empty_like(x0)
            xb_new = np.empty_like(xb)
            x0_new[0], xb_new[0] = self.xi0, self.xbar0
            for i in range(nf):
                def fx(x0v, xbv, frac):
                    Pv = interp(P, i, frac)
                    kv = interp(k_new, i, frac)
                    u0v = th1 * x0v + th2 * xbv + th3
                    dx0 = pr.a0 * x0v + pr.b0 * u0v + pr.c0 * xbv
                    dxb = pr.a * xbv - (pr.b + pr.d) * pr.b * (Pv * xbv + kv) + pr.c * x0v + pr.e * u0v
                    return dx0, dxb

                a1_, b1_ = fx(x0_new[i], xb_new[i], 0.0)
                a2_, b2_ = fx(x0_new[i] + 0.5 * dtf * a1_, xb_new[i] + 0.5 * dtf * b1_, 0.5)
                a3_, b3_ = fx(x0_new[i] + 0.5 * dtf * a2_, xb_new[i] + 0.5 * dtf * b2_, 0.5)
                a4_, b4_ = fx(x0_new[i] + dtf * a3_, xb_new[i] + dtf * b3_, 1.0)
                x0_new[i + 1] = x0_new[i] + dtf / 6.0 * (a1_ + 2 * a2_ + 2 * a3_ + a4_)
                xb_new[i + 1] = xb_new[i] + dtf / 6.0 * (b1_ + 2 * b2_ + 2 * b3_ + b4_)

            delta = max(
                float(np.max(np.abs(k_new - k))),
                float(np.max(np.abs(x0_new - x0))),
                float(np.max(np.abs(xb_new - xb))),
            )
            k, x0, xb = k_new, x0_new, xb_new
            if delta <= 1e-12:
                break
        else:
            raise RuntimeError("affine-feedback consistency iteration did not settle")

        u0 = th1[None, :] * x0 + th2[None, :] * xb + th3[None, :]
        run = 0.5 * u0**2 + 0.5 * (x0 - pr.kappa * xb) ** 2
        w = np.ones(nf + 1)
        w[0] = w[-1] = 0.5
        j0 = dtf * (w[:, None] * run).sum(axis=0) + 0.5 * pr.gamma0 * x0[-1] ** 2
        return {"x0": x0, "xbar": xb, "k": k, "u0": u0, "J0": j0}

    def _j0_quadrature(self, sol) -> float:
        pr = self.params
        dtf = self.horizon / self.nfine
        run = 0.5 * sol["u0"] ** 2 + 0.5 * (sol["x0"] - pr.kappa * sol["xbar"]) ** 2
        w = np.ones(self.nfine + 1)
        w[0] = w[-1] = 0.5
        return float(dtf * np.sum(w * run) + 0.5 * pr.gamma0 * sol["x0"][-1] ** 2)

    # -- decoupled major problem ----------------------------------------------
    def decoupled_major_optimum(self):
        """Riccati solution of the isolated major problem (tracking target
        kappa*xbar with xbar from the uncontrolled consistency system)."""
        pr = self.params
        nf, dtf = self.nfine, self.horizon / self.nfine
        base = self.solve_consistency(lambda i, frac, a, b: 0.0 * np.asarray(a))
        z = pr.kappa * base["xbar"]

        P0 = np.empty(nf + 1)
        k0 = np.empty(nf + 1)
        s0 = np.empty(nf + 1)
        P0[-1] = pr.gamma0
        k0[-1] = 0.0
        s0[-1] = 0.0

        def interp(path, i, frac):
            if frac == 0.0:
                return path[i]
            if frac == 1.0:
                return path[i + 1]
            return 0.5 * (path[i] + path[i + 1])

        def fP(p):
            return pr.b0**2 * p**2 - 2.0 * pr.a0 * p - 1.0

        for i in range(nf, 0, -1):
            p = P0[i]
            k1 = fP(p)
            k2 = fP(p - 0.5 * dtf * k1)
            k3 = fP(p - 0.5 * dtf * k2)
            k4 = fP(p - dtf * k3)
            P0[i - 1] = p - dtf / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

            def fkv(kv, frac):
                return (pr.b0**2 * interp(P0, i - 1, frac) - pr.a0) * kv + interp(z, i - 1, frac)

            kv = k0[i]
            q1 = fkv(kv, 1.0)
            q2 = fkv(kv - 0.5 * dtf * q1, 0.5)
            q3 = fkv(kv - 0.5 * dtf * q2, 0.5)
            q4 = fkv(kv - dtf * q3, 0.0)
            k0[i - 1] = kv - dtf / 6.0 * (q1 + 2 * q2 + 2 * q3 + q4)

            def fsv(frac):
                return 0.5 * pr.b0**2 * interp(k0, i - 1, frac) ** 2 - 0.5 * interp(z, i - 1, frac) ** 2

            s0[i - 1] = s0[i] - dtf / 6.0 * (fsv(1.0) + 4 * fsv(0.5) + fsv(0.0))

        # closed-loop state and open-loop control
        x0 = np.empty(nf + 1)
        x0[0] = self.xi0
        for i in range(nf):
            def fx(xv, frac):
                return (pr.a0 - pr.b0**2 * interp(P0, i, frac)) * xv - pr.b0**2 * interp(k0, i, frac)

            a1_ = fx(x0[i], 0.0)
            a2_ = fx(x0[i] + 0.5 * dtf * a1_, 0.5)
            a3_ = fx(x0[i] + 0.5 * dtf * a2_, 0.5)
            a4_ = fx(x0[i] + dtf * a3_, 1.0)
            x0[i + 1] = x0[i] + dtf / 6.0 * (a1_ + 2 * a2_ + 2 * a3_ + a4_)

        u0 = -pr.b0 * (P0 * x0 + k0)
        j0 = 0.5 * P0[0] * self.xi0**2 + k0[0] * self.xi0 + s0[0]
        return {"t": self.times, "P0": P0, "k0": k0, "x0": x0, "u0": u0, "J0": j0, "xbar": base["xbar"]}

    def sample(self, path: np.ndarray, solver_tg: TimeGrid) -> np.ndarray:
        """Restrict a fine-grid path to the solver time nodes."""
        idx = np.linspace(0, self.nfine, solver_tg.steps + 1).astype(int)
        return np.asarray(path)[idx]
