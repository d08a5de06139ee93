"""Population equilibrium: fixed point of the best-response map.

Given the major player's state and control paths, one application of the
best-response map solves the backward value equation under a candidate law
path, extracts the optimal feedback, and propagates the density forward
under that feedback.  The equilibrium law path is a fixed point of this
map; it is found by damped Picard iteration on the (density, feedback)
pair, with the residual measured as the sup over time of the joint
transport distance between a law path and its image.

Non-convergence within the iteration budget is a reported outcome carried
by the returned object, not an exception.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .measure import JointLaw, w2_1d
from .model import ModelSpec
from .pde import DensityPath, Grids, StepOperators, ValuePath, fp_forward, hjb_backward

__all__ = ["EquilibriumSolution", "best_response_map", "solve_fixed_point", "initial_law_path"]


@dataclass
class EquilibriumSolution:
    pi_path: list[JointLaw]
    density: DensityPath
    value: ValuePath
    residual_history: list[float]
    iterations: int
    converged: bool
    wall_times: list[float] = field(default_factory=list)


def initial_law_path(
    model: ModelSpec,
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    omega: np.ndarray,
    grids: Grids,
    ops: StepOperators | None = None,
) -> list[JointLaw]:
    """Model-free starting guess: the initial density propagated with the
    control frozen at zero, feedback field identically zero."""
    grid, tg = grids.space, grids.time
    if ops is None:
        ops = StepOperators(grid, tg, model)
    xs, dt = grid.nodes, tg.dt
    zero = np.zeros(grid.n)
    m = np.asarray(omega, dtype=float)
    laws = [JointLaw(grid, m, zero.copy())]
    for n in range(tg.steps):
        law = laws[-1]
        g = np.asarray(model.g1(xs, x0_path[n], u0_path[n], law, zero), dtype=float)
        f_a = ops.adv_div(g, m)
        m_hat = ops.solve_bs_pred(m - dt * f_a)
        f_b = ops.adv_div(g, m_hat)
        m = ops.solve_bs_cn(ops.bs_cn_rhs @ m - 0.5 * dt * (f_a + f_b))
        m = np.maximum(m, 0.0)
        m = m / grid.quadrature(m)
        laws.append(JointLaw(grid, m, zero.copy()))
    return laws


def _best_response(
    model: ModelSpec,
    pi_path: list[JointLaw],
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    omega: np.ndarray,
    grids: Grids,
    ops: StepOperators,
) -> tuple[list[JointLaw], ValuePath, DensityPath]:
    value = hjb_backward(model, pi_path, x0_path, u0_path, grids, ops=ops)
    density = fp_forward(
        model, pi_path, x0_path, u0_path, omega, grids, ops=ops, feedback=value.feedback
    )
    grid = grids.space
    new_path = [
        JointLaw(grid, density.m[n], value.feedback[n]) for n in range(grids.time.steps + 1)
    ]
    return new_path, value, density


def best_response_map(
    model: ModelSpec,
    pi_path: list[JointLaw],
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    omega: np.ndarray,
    grids: Grids,
    upwind_blend: float = 1.0,
) -> list[JointLaw]:
    """One application of the best-response map: value sweep, feedback,
    density propagation, reassembled law path."""
    ops = StepOperators(grids.space, grids.time, model, upwind_blend)
    new_path, _, _ = _best_response(model, pi_path, x0_path, u0_path, omega, grids, ops)
    return new_path


def path_residual(a: list[JointLaw], b: list[JointLaw]) -> float:
    """Sup over time of the joint transport distance between two law paths."""
    return max(w2_1d(x, y) for x, y in zip(a, b))


def solve_fixed_point(
    model: ModelSpec,
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    omega: np.ndarray,
    grids: Grids,
    tol: float = 1e-8,
    damping: float = 0.5,
    max_iter: int = 100,
    pi_init: list[JointLaw] | None = None,
    upwind_blend: float = 1.0,
    log=None,
) -> EquilibriumSolution:
    """Damped Picard iteration for the equilibrium law path.

    The density and feedback components are mixed linearly with weight
    `damping` toward the best response (density renormalized after mixing).
    The returned law path is always the image of the final iterate, so the
    density/value fields and the law path are mutually consistent.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")

    grid, tg = grids.space, grids.time
    ops = StepOperators(grid, tg, model, upwind_blend)
    pi = pi_init if pi_init is not None else initial_law_path(model, x0_path, u0_path, omega, grids, ops)

    history: list[float] = []
    walls: list[float] = []
    iterations = 0
    converged = False
    t0 = time.perf_counter()
    pi_new, value, density = _best_response(model, pi_path=pi, x0_path=x0_path, u0_path=u0_path, omega=omega, grids=grids, ops=ops)
    for k in range(max_iter):
        res = path_residual(pi_new, pi)
        history.append(res)
        walls.append(time.perf_counter() - t0)
        if log is not None:
            log(f"iter={k},residual={res:.3e},wall_time={walls[-1]:.3f}")
        if res <= tol:
            converged = True
            break
        # damped update, then re-apply the map; the very first update takes
        # the full best response (the starting guess is model-free, mixing
        # toward it only delays the contraction)
        alpha = 1.0 if iterations == 0 else damping
        mixed = []
        for law, law_new in zip(pi, pi_new):
            m = (1.0 - alpha) * law.density + alpha * law_new.density
            m = np.maximum(m, 0.0)
            m = m / grid.quadrature(m)
            v = (1.0 - alpha) * law.feedback + alpha * law_new.feedback
            mixed.append(JointLaw(grid, m, v))
        pi = mixed
        iterations += 1
        pi_new, value, density = _best_response(model, pi, x0_path, u0_path, omega, grids, ops)

    return EquilibriumSolution(
        pi_path=pi_new,
        density=density,
        value=value,
        residual_history=history,
        iterations=iterations,
        converged=converged,
        wall_times=walls,
    )
