"""Joint state-control laws and calculus on them.

The population of minor agents is summarized at each instant by the joint
law of the representative agent's (state, control) pair.  Because
equilibrium controls are Markovian feedback maps, the law is stored in
disintegrated form: a state density on a uniform grid together with a
feedback field giving the control attached to each state.  Empirical
(particle) laws provide the lift representation used to probe measure
derivatives by finite differences.

Conventions: all quadrature against a grid uses uniform node weights equal
to the grid spacing, and the product metric on state x control space is the
unweighted Euclidean one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Number of quantile sample points used to evaluate transport distances.
# All distances are computed on this common midpoint grid, so metric axioms
# (symmetry, triangle inequality) hold exactly for the sampled values.
_W2_QUANTILE_SAMPLES = 4096

_MASS_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """Uniform 1-D state grid on [lo, hi] with n nodes."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 3:
            raise ValueError(f"grid needs at least 3 nodes, got {self.n}")
        if not self.hi > self.lo:
            raise ValueError("grid upper bound must exceed lower bound")

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    def quadrature(self, values: np.ndarray) -> float:
        """Integrate node values with uniform weight h."""
        return float(self.h * np.sum(values, axis=-1))


def default_grid() -> Grid:
    """Reference grid: [-6, 6] with 241 nodes (h = 0.05)."""
    return Grid(-6.0, 6.0, 241)


@dataclass
class JointLaw:
    """Feedback-form joint law: state density m on a grid plus control field u(x).

    The conditional control law at state x is the point mass at feedback[x],
    so the joint measure is fully determined by (density, feedback).
    """

    grid: Grid
    density: np.ndarray
    feedback: np.ndarray

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=float)
        self.feedback = np.asarray(self.feedback, dtype=float)
        if self.density.shape != (self.grid.n,) or self.feedback.shape != (self.grid.n,):
            raise ValueError("density and feedback must match the grid")
        if np.any(self.density < -1e-12):
            raise ValueError("density has negative entries beyond clipping tolerance")
        self.density = np.maximum(self.density, 0.0)
        mass = self.grid.quadrature(self.density)
        if abs(mass - 1.0) > _MASS_TOL:
            raise ValueError(f"density mass {mass} deviates from 1 beyond {_MASS_TOL}")
        if not np.all(np.isfinite(self.feedback)):
            raise ValueError("feedback field must be finite")

    def copy(self) -> "JointLaw":
        return JointLaw(self.grid, self.density.copy(), self.feedback.copy())


@dataclass
class EmpiricalJointLaw:
    """Weighted particle cloud of (state, control) pairs, weights summing to 1."""

    states: np.ndarray
    controls: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.states = np.atleast_1d(np.asarray(self.states, dtype=float))
        self.controls = np.atleast_1d(np.asarray(self.controls, dtype=float))
        if self.weights is None:
            self.weights = np.full(self.states.shape, 1.0 / self.states.size)
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if self.states.size == 0:
            raise ValueError("empirical law needs at least one particle")
        if not (self.states.shape == self.controls.shape == self.weights.shape):
            raise ValueError("states, controls and weights must share a shape")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.controls))):
            raise ValueError("particle coordinates must be finite")

    def shifted(self, i: int, dx: float, du: float) -> "EmpiricalJointLaw":
        """Copy with particle i displaced by (dx, du)."""
        s = self.states.copy()
        c = self.controls.copy()
        s[i] += dx
        c[i] += du
        return EmpiricalJointLaw(s, c, self.weights.copy())


def point_mass(grid: Grid, x: float, u: float) -> JointLaw:
    """Grid law concentrating all mass on the node nearest x, with control u."""
    nodes = grid.nodes
    i = int(np.argmin(np.abs(nodes - x)))
    density = np.zeros(grid.n)
    density[i] = 1.0 / grid.h
    feedback = np.full(grid.n, float(u))
    return JointLaw(grid, density, feedback)


def gaussian_density(grid: Grid, mean: float, variance: float) -> np.ndarray:
    """Normal density sampled on the grid and renormalized to unit quadrature."""
    nodes = grid.nodes
    dens = np.exp(-((nodes - mean) ** 2) / (2.0 * variance))
    return dens / grid.quadrature(dens)


# ---------------------------------------------------------------------------
# moments


def mean_state(law) -> float:
    if isinstance(law, EmpiricalJointLaw):
        return float(np.sum(law.weights * law.states))
    return float(law.grid.quadrature(law.grid.nodes * law.density))


def mean_control(law) -> float:
    if isinstance(law, EmpiricalJointLaw):
        return float(np.sum(law.weights * law.controls))
    return float(law.grid.quadrature(law.feedback * law.density))


def second_moment(law) -> float:
    """M2: integral of |x|^2 + |u|^2 against the joint law."""
    if isinstance(law, EmpiricalJointLaw):
        return float(np.sum(law.weights * (law.states**2 + law.controls**2)))
    nodes = law.grid.nodes
    return float(law.grid.quadrature((nodes**2 + law.feedback**2) * law.density))


# ---------------------------------------------------------------------------
# transport distance


def _quantile_samples(law, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """State and control quantile values at probability levels s.

    Grid laws are read as piecewise-constant densities on cells of width h
    centered at the nodes, giving a continuous piecewise-linear CDF.
    Empirical laws use the step quantile function of the weighted atoms,
    with states sorted increasingly and controls riding the same order
    (the monotone coupling along the state transport).
    """
    if isinstance(law, EmpiricalJointLaw):
        order = np.argsort(law.states, kind="stable")
        xs = law.states[order]
        us = law.controls[order]
        cw = np.cumsum(law.weights[order])
        idx = np.minimum(np.searchsorted(cw, s, side="left"), xs.size - 1)
        return xs[idx], us[idx]

    grid = law.grid
    w = law.density * grid.h
    total = w.sum()
    if total <= 0:
        raise ValueError("law carries no mass")
    w = w / total
    cw = np.cumsum(w)
    idx = np.minimum(np.searchsorted(cw, s, side="left"), grid.n - 1)
    # invert the linear CDF piece of the selected cell
    prev = np.where(idx > 0, cw[idx - 1], 0.0)
    frac = np.where(w[idx] > 0, (s - prev) / np.where(w[idx] > 0, w[idx], 1.0), 0.5)
    frac = np.clip(frac, 0.0, 1.0)
    nodes = grid.nodes
    qx = nodes[idx] - 0.5 * grid.h + frac * grid.h
    qu = np.interp(qx, nodes, law.feedback)
    return qx, qu


def w2_1d(a, b) -> float:
    """Quadratic transport distance between two joint laws.

    Computed from the coupled quantile transport: both laws are pushed along
    their state quantile functions and the control coordinate rides the same
    coupling, which is the natural (and for feedback-form laws exact)
    monotone coupling of the 1-D state marginals.
    """
    s = (np.arange(_W2_QUANTILE_SAMPLES) + 0.5) / _W2_QUANTILE_SAMPLES
    qxa, qua = _quantile_samples(a, s)
    qxb, qub = _quantile_samples(b, s)
    cost = np.mean((qxa - qxb) ** 2 + (qua - qub) ** 2)
    return float(np.sqrt(max(cost, 0.0)))


# ---------------------------------------------------------------------------
# measure-derivative oracle


def lions_fd_oracle(F, emp: EmpiricalJointLaw, i: int, direction, eps: float) -> float:
    """Directional measure derivative of F at a particle, by central differences.

    Shifts particle i of the lift by +/- eps * direction and rescales by the
    particle weight, estimating the gradient-of-the-lift pairing
    D F(law)(x_i, u_i) . direction.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 0 <= i < emp.states.size:
        raise ValueError(f"particle index {i} out of range")
    dx, du = float(direction[0]), float(direction[1])
    up = F(emp.shifted(i, eps * dx, eps * du))
    dn = F(emp.shifted(i, -eps * dx, -eps * du))
    return float((up - dn) / (2.0 * eps * emp.weights[i]))


# ---------------------------------------------------------------------------
# representation conversion


def grid_to_empirical(law: JointLaw, n: int, seed: int) -> EmpiricalJointLaw:
    """Sample n particles from a grid law by inverse-CDF sampling."""
    if n < 1:
        raise ValueError("need at least one particle")
    rng = np.random.default_rng(seed)
    s = rng.random(n)
    xs, us = _quantile_samples(law, s)
    return EmpiricalJointLaw(xs, us, np.full(n, 1.0 / n))


def empirical_to_grid(emp: EmpiricalJointLaw, grid: Grid, bandwidth: float) -> JointLaw:
    """Kernel density estimate of the state marginal plus kernel regression
    of the control field, projected onto the grid."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    nodes = grid.nodes
    z = (nodes[:, None] - emp.states[None, :]) / bandwidth
    k = np.exp(-0.5 * z**2)
    wk = k * emp.weights[None, :]
    density = wk.sum(axis=1)
    total = grid.quadrature(density)
    if total <= 0:
        raise ValueError("particles carry no mass on the grid")
    density = density / total
    den = wk.sum(axis=1)
    num = (wk * emp.controls[None, :]).sum(axis=1)
    # Nadaraya-Watson regression; far outside the cloud fall back to the
    # control of the nearest particle to avoid 0/0.
    feedback = np.empty(grid.n)
    ok = den > 1e-290
    feedback[ok] = num[ok] / den[ok]
    if np.any(~ok):
        order = np.argsort(emp.states)
        xs, us = emp.states[order], emp.controls[order]
        idx = np.clip(np.searchsorted(xs, nodes[~ok]), 0, xs.size - 1)
        left = np.maximum(idx - 1, 0)
        pick = np.where(np.abs(xs[idx] - nodes[~ok]) < np.abs(xs[left] - nodes[~ok]), idx, left)
        feedback[~ok] = us[pick]
    return JointLaw(grid, density, feedback)


# ---------------------------------------------------------------------------
# export


def write_slice_csv(path, law: JointLaw) -> None:
    """Write one time slice as CSV with columns x,m,u at full precision."""
    with open(path, "w") as f:
        f.write("x,m,u\n")
        for x, m, u in zip(law.grid.nodes, law.density, law.feedback):
            f.write(f"{x:.17g},{m:.17g},{u:.17g}\n")
