"""Monte Carlo layer: population simulation and consistency checks.

Simulates N minor agents under a grid feedback interpolated in space,
estimates costs, and measures how fast the empirical joint law of the
finite population approaches the solved equilibrium law.

Random number discipline: one master seed is expanded through
numpy's SeedSequence spawning.  Child 0 seeds the common-noise stream,
child 1 + k seeds scenario k; within a scenario the minor agents' noise is
one (steps x agents) standard-normal draw whose column j is agent j's
stream.  This layout is deterministic and independent of scheduling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .measure import EmpiricalJointLaw, JointLaw, grid_to_empirical, w2_1d
from .model import ModelSpec
from .pde import TimeGrid

__all__ = [
    "SimConfig",
    "SimulationError",
    "PopulationPaths",
    "simulate_population",
    "mc_cost",
    "empirical_consistency",
]


class SimulationError(RuntimeError):
    def __init__(self, step: int, what: str):
        self.step = step
        super().__init__(f"{what} at simulation step {step}")


@dataclass(frozen=True)
class SimConfig:
    n_agents: int
    n_paths: int = 1
    seed: int = 0
    n_steps: int = 200
    horizon: float = 1.0

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("need at least one agent")
        if self.n_steps < 1 or self.horizon <= 0:
            raise ValueError("invalid simulation time grid")

    @property
    def dt_sim(self) -> float:
        return self.horizon / self.n_steps


@dataclass
class PopulationPaths:
    """Simulated minor-agent states and controls, (steps+1, agents)."""

    states: np.ndarray
    controls: np.ndarray
    cfg: SimConfig
    clamp_fraction: float


def _interp_feedback(grid_nodes: np.ndarray, fb_slice: np.ndarray, x: np.ndarray) -> np.ndarray:
    # linear interpolation in x, constant extrapolation beyond the grid
    return np.interp(x, grid_nodes, fb_slice)


def simulate_population(
    model: ModelSpec,
    feedback: np.ndarray,
    pi_path: list[JointLaw],
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    cfg: SimConfig,
    path_index: int = 0,
) -> PopulationPaths:
    """Euler-Maruyama simulation of cfg.n_agents minor agents.

    The feedback, laws, and major paths live on the solver time grid; the
    simulation grid must refine it by an integer factor.  Initial states
    are drawn from the time-zero law.  More than 1% of feedback clamps
    (particles beyond the grid) raises a diagnostics warning.
    """
    solver_nt = len(pi_path) - 1
    if cfg.n_steps % solver_nt != 0:
        raise ValueError("simulation steps must be a multiple of the solver steps")
    ratio = cfg.n_steps // solver_nt
    grid = pi_path[0].grid
    nodes = grid.nodes
    dt = cfg.dt_sim

    ss = np.random.SeedSequence(cfg.seed)
    children = ss.spawn(1 + cfg.n_paths)
    rng = np.random.default_rng(children[1 + path_index])

    emp0 = grid_to_empirical(pi_path[0], cfg.n_agents, seed=int(rng.integers(2**32)))
    x = emp0.states.copy()
    noise = rng.standard_normal((cfg.n_steps, cfg.n_agents))

    states = np.empty((cfg.n_steps + 1, cfg.n_agents))
    controls = np.empty_like(states)
    states[0] = x
    clamps = 0
    for k in range(cfg.n_steps):
        sl = k // ratio
        u1 = _interp_feedback(nodes, feedback[sl], x)
        clamps += int(np.sum((x < nodes[0]) | (x > nodes[-1])))
        drift = np.asarray(model.g1(x, x0_path[sl], u0_path[sl], pi_path[sl], u1), dtype=float)
        sig = np.asarray(model.sigma1(x), dtype=float)
        controls[k] = u1
        x = x + dt * drift + np.sqrt(dt) * sig * noise[k]
        if not np.all(np.isfinite(x)):
            raise SimulationError(k, "non-finite state")
        states[k + 1] = x
    controls[-1] = _interp_feedback(nodes, feedback[solver_nt], x)
    clamp_fraction = clamps / (cfg.n_steps * cfg.n_agents)
    if clamp_fraction > 0.01:
        warnings.warn(f"feedback clamped for {clamp_fraction:.1%} of agent steps", RuntimeWarning)
    return PopulationPaths(states=states, controls=controls, cfg=cfg, clamp_fraction=clamp_fraction)


def mc_cost(
    model: ModelSpec,
    paths: PopulationPaths,
    pi_path: list[JointLaw],
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    which: str = "J1",
) -> tuple[float, float]:
    """Sample-mean cost estimate with its standard error.

    J1 averages the minor running-plus-terminal cost across agents.  J0 is
    deterministic per frozen common-noise path (the major state carries no
    sampled noise here), so its standard error is zero.
    """
    cfg = paths.cfg
    solver_nt = len(pi_path) - 1
    ratio = cfg.n_steps // solver_nt
    dt = cfg.dt_sim
    if which == "J0":
        tg = TimeGrid(cfg.horizon, solver_nt)
        from .major import evaluate_j0

        return evaluate_j0(model, x0_path, u0_path, pi_path, tg), 0.0
    if which != "J1":
        raise ValueError("which must be 'J1' or 'J0'")
    totals = np.zeros(cfg.n_agents)
    for k in range(cfg.n_steps):
        sl = k // ratio
        f = np.asarray(
            model.f1(paths.states[k], x0_path[sl], u0_path[sl], pi_path[sl], paths.controls[k]),
            dtype=float,
        )
        totals += dt * f
    totals += np.asarray(
        model.h1(paths.states[-1], x0_path[solver_nt], u0_path[solver_nt], pi_path[solver_nt]),
        dtype=float,
    )
    est = float(np.mean(totals))
    se = float(np.std(totals, ddof=1) / np.sqrt(cfg.n_agents)) if cfg.n_agents > 1 else 0.0
    return est, se


def empirical_consistency(
    model: ModelSpec,
    eq,
    x0_path: np.ndarray,
    u0_path: np.ndarray,
    n_list: list[int],
    seeds: list[int],
    n_steps: int | None = None,
    horizon: float | None = None,
) -> dict:
    """Transport distance between finite-population laws and the solved one.

    For each population size, runs one simulation per seed and measures the
    joint distance of the empirical (state, control) cloud to the
    equilibrium law at mid-horizon and at the terminal time.  Returns per-N
    medians and interquartile ranges of the two-time average.
    """
    pi_path = eq.pi_path
    solver_nt = len(pi_path) - 1
    nt_sim = n_steps if n_steps is not None else solver_nt
    T = horizon if horizon is not None else float(eq.value.timegrid.horizon)
    rows = []
    for n_agents in n_list:
        dists = []
        for seed in seeds:
            cfg = SimConfig(n_agents=n_agents, seed=seed, n_steps=nt_sim, horizon=T)
            paths = simulate_population(model, eq.value.feedback, pi_path, x0_path, u0_path, cfg)
            vals = []
            for frac in (0.5, 1.0):
                k = int(round(frac * nt_sim))
                sl = min(int(round(frac * solver_nt)), solver_nt)
                emp = EmpiricalJointLaw(paths.states[k], paths.controls[k])
                vals.append(w2_1d(emp, pi_path[sl]))
            dists.append(0.5 * (vals[0] + vals[1]))
        dists = np.asarray(dists)
        rows.append(
            {
                "n_agents": n_agents,
                "median_w2": float(np.median(dists)),
                "iqr": float(np.percentile(dists, 75) - np.percentile(dists, 25)),
                "seeds": len(seeds),
            }
        )
    return {"rows": rows}


def write_consistency_csv(path, table: dict) -> None:
    with open(path, "w") as f:
        f.write("N,median_w2,iqr,seeds\n")
        for row in table["rows"]:
            f.write(f"{row['n_agents']},{row['median_w2']:.17g},{row['iqr']:.17g},{row['seeds']}\n")


def write_trajectories_csv(path, paths: PopulationPaths) -> None:
    dt = paths.cfg.dt_sim
    with open(path, "w") as f:
        f.write("agent,t,x,u\n")
        for j in range(paths.cfg.n_agents):
            for k in range(paths.cfg.n_steps + 1):
                f.write(f"{j},{k * dt:.17g},{paths.states[k, j]:.17g},{paths.controls[k, j]:.17g}\n")
