"""Game definition: coefficient functions, their derivatives, and Hamiltonians.

A model bundles the drift/diffusion/cost coefficients of the dominating
player and the representative minor agent, the first-order partials used by
the adjoint system, and the linear measure-derivative kernels through which
the joint state-control law enters.  All coefficient callables must accept
numpy arrays in their state/control slots (vectorized evaluation); the law
argument is always a JointLaw.

Kernel convention: a kernel K for a coefficient F maps (base arguments,
evaluation point (xi, u)) to the linear functional derivative of F with
respect to the joint law, evaluated at (xi, u).  The measure gradient in a
coordinate direction is the corresponding evaluation-point derivative of K,
which is what the particle oracle in `measure` estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .measure import JointLaw, mean_control, mean_state

__all__ = [
    "CoefficientError",
    "Partials",
    "PiKernels",
    "ModelSpec",
    "LQParams",
    "make_lq_model",
    "minimize_h1",
    "minimize_h1_field",
    "eval_g1",
    "eval_g1_field",
    "eval_g0",
    "minimize_h0_classical",
    "minimize_h0_effective",
    "u1_argmin_partials",
    "kernel_eval_deriv",
]


class CoefficientError(ValueError):
    """A coefficient function produced a non-finite value."""

    def __init__(self, name: str, detail: str = ""):
        self.name = name
        super().__init__(f"coefficient '{name}' evaluated to a non-finite value {detail}".rstrip())


@dataclass
class Partials:
    """First-order partial derivatives of the model coefficients."""

    g0_x0: Callable
    g0_u0: Callable
    f0_x0: Callable
    f0_u0: Callable
    h0_x0: Callable
    g1_x0: Callable
    g1_u0: Callable
    g1_u1: Callable
    f1_x0: Callable
    f1_u0: Callable
    f1_u1: Callable
    h1_x0: Callable
    sigma0_x0: Callable
    sigma1_x1: Callable


@dataclass
class PiKernels:
    """Linear measure-derivative kernels; None means no law dependence.

    Signatures (eval point last):
      dpi_g0(x0, law, u0, xi, u) ; dpi_f0(x0, law, u0, xi, u)
      dpi_h0(x0, law, xi, u)
      dpi_g1(x1, x0, u0, law, u1, xi, u) ; dpi_f1 likewise
      dpi_h1(x1, x0, u0, law, xi, u)
    """

    dpi_g0: Optional[Callable] = None
    dpi_f0: Optional[Callable] = None
    dpi_h0: Optional[Callable] = None
    dpi_g1: Optional[Callable] = None
    dpi_f1: Optional[Callable] = None
    dpi_h1: Optional[Callable] = None


@dataclass
class ModelSpec:
    """Complete game definition at desk scale (scalar states and controls)."""

    g0: Callable
    sigma0: Callable
    g1: Callable
    sigma1: Callable
    f0: Callable
    f1: Callable
    h0: Callable
    h1: Callable
    partials: Partials
    pi_kernels: PiKernels = field(default_factory=PiKernels)
    control_box_minor: tuple[float, float] = (-8.0, 8.0)
    control_box_major: tuple[float, float] = (-8.0, 8.0)
    # Optional closed-form minimizers; when absent a safeguarded scalar
    # search is used on the compact control box.
    u1_argmin: Optional[Callable] = None  # (x1, x0, u0, law, dpsi) -> u1
    u0_argmin: Optional[Callable] = None  # (x0, law, p) -> u0

    def a1(self, x) -> np.ndarray:
        """Minor diffusion intensity 0.5 * sigma1(x)^2."""
        return 0.5 * np.asarray(self.sigma1(x), dtype=float) ** 2


# ---------------------------------------------------------------------------
# minor Hamiltonian


_PROBES = 33
_BISECT_ITERS = 60


def _running(model: ModelSpec, x, x0, u0, law, u1, dpsi):
    """f1 + dpsi * g1 with finiteness checks naming the offender."""
    f = np.asarray(model.f1(x, x0, u0, law, u1), dtype=float)
    if not np.all(np.isfinite(f)):
        raise CoefficientError("f1")
    g = np.asarray(model.g1(x, x0, u0, law, u1), dtype=float)
    if not np.all(np.isfinite(g)):
        raise CoefficientError("g1")
    return f + dpsi * g


def _running_du(model: ModelSpec, x, x0, u0, law, u1, dpsi):
    fu = np.asarray(model.partials.f1_u1(x, x0, u0, law, u1), dtype=float)
    gu = np.asarray(model.partials.g1_u1(x, x0, u0, law, u1), dtype=float)
    if not np.all(np.isfinite(fu)):
        raise CoefficientError("f1_u1")
    if not np.all(np.isfinite(gu)):
        raise CoefficientError("g1_u1")
    return fu + dpsi * gu


def minimize_h1_field(
    model: ModelSpec, x, x0: float, u0: float, law: JointLaw, dpsi
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise minimizer and value of the minor Hamiltonian over the grid.

    Vectorized over the state nodes.  Closed-form models short-circuit;
    otherwise a probe grid on the control box brackets the best candidate
    and derivative bisection polishes it.  Ties are broken toward the
    smaller control magnitude.
    """
    x = np.asarray(x, dtype=float)
    dpsi = np.asarray(dpsi, dtype=float)
    lo, hi = model.control_box_minor
    if model.u1_argmin is not None:
        u = np.clip(np.asarray(model.u1_argmin(x, x0, u0, law, dpsi), dtype=float), lo, hi)
        val = _running(model, x, x0, u0, law, u, dpsi)
        return np.broadcast_to(u, x.shape).astype(float), val

    probes = np.linspace(lo, hi, _PROBES)
    vals = np.stack([_running(model, x, x0, u0, law, np.full_like(x, p), dpsi) for p in probes])
    best = np.argmin(vals, axis=0)
    a = probes[np.maximum(best - 1, 0)]
    b = probes[np.minimum(best + 1, _PROBES - 1)]
    # bisect the stationarity equation inside the bracket; brackets whose
    # derivative does not change sign collapse onto the descending end
    da = _running_du(model, x, x0, u0, law, a, dpsi)
    db = _running_du(model, x, x0, u0, law, b, dpsi)
    a2 = np.where(db < 0, b, a)
    b2 = np.where(da > 0, a, b)
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (a2 + b2)
        dm = _running_du(model, x, x0, u0, law, mid, dpsi)
        neg = dm <= 0
        a2 = np.where(neg, mid, a2)
        b2 = np.where(neg, b2, mid)
    u_post = 0.5 * (a2 + b2)

    # candidates: bisection root, both box ends, best probe;
    # lowest value wins, exact ties broken toward smaller |u|
    cand = np.stack([u_post, np.full_like(u_post, lo), np.full_like(u_post, hi), probes[best]])
    cand_vals = np.stack([_running(model, x, x0, u0, law, c, dpsi) for c in cand])
    best_val = cand_vals.min(axis=0)
    is_best = cand_vals <= best_val + 1e-14
    masked_abs = np.where(is_best, np.abs(cand), np.inf)
    choice = np.argmin(masked_abs, axis=0)
    u_star = np.take_along_axis(cand, choice[None, ...], axis=0)[0]
    val = np.take_along_axis(cand_vals, choice[None, ...], axis=0)[0]
    return u_star, val


def minimize_h1(
    model: ModelSpec, x: float, x0: float, u0: float, law: JointLaw, dpsi: float
) -> tuple[float, float]:
    """Minimizer and value of f1 + dpsi * g1 over the minor control box."""
    if not np.isfinite(dpsi):
        raise ValueError("dpsi must be finite")
    u, val = minimize_h1_field(model, np.asarray([x]), x0, u0, law, np.asarray([dpsi]))
    return float(u[0]), float(val[0])


def eval_g1_field(model: ModelSpec, x, x0, u0, law: JointLaw, dpsi) -> np.ndarray:
    """Minor drift evaluated at the Hamiltonian-optimal control."""
    u, _ = minimize_h1_field(model, x, x0, u0, law, dpsi)
    g = np.asarray(model.g1(x, x0, u0, law, u), dtype=float)
    if not np.all(np.isfinite(g)):
        raise CoefficientError("g1")
    return g


def eval_g1(model: ModelSpec, x: float, x0: float, u0: float, law: JointLaw, dpsi: float) -> float:
    return float(eval_g1_field(model, np.asarray([x]), x0, u0, law, np.asarray([dpsi]))[0])


def u1_argmin_partials(
    model: ModelSpec, x, x0, u0, law: JointLaw, dpsi, eps: float = 1e-6
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sensitivities (d/dx0, d/du0, d/dq) of the optimal minor control.

    Computed by central differences on the argmin map; exact for models with
    a closed-form linear minimizer.  The measure sensitivity of the argmin
    is taken to vanish, which holds whenever f1_u1 and g1_u1 are free of the
    joint law (true for every bundled benchmark model).
    """
    x = np.asarray(x, dtype=float)
    dpsi = np.asarray(dpsi, dtype=float)

    def am(x0_, u0_, q_):
        u, _ = minimize_h1_field(model, x, x0_, u0_, law, q_)
        return u

    d_x0 = (am(x0 + eps, u0, dpsi) - am(x0 - eps, u0, dpsi)) / (2 * eps)
    d_u0 = (am(x0, u0 + eps, dpsi) - am(x0, u0 - eps, dpsi)) / (2 * eps)
    d_q = (am(x0, u0, dpsi + eps) - am(x0, u0, dpsi - eps)) / (2 * eps)
    return d_x0, d_u0, d_q


# ---------------------------------------------------------------------------
# major Hamiltonian


def _minimize_scalar_box(func, box, probes: int = 129, tol: float = 1e-11) -> float:
    """Probe grid plus bounded polish; smallest |u| wins exact ties."""
    from scipy.optimize import minimize_scalar

    lo, hi = box
    us = np.linspace(lo, hi, probes)
    vals = np.array([func(u) for u in us])
    if not np.all(np.isfinite(vals)):
        raise CoefficientError("major objective", "during control search")
    i = int(np.argmin(vals))
    a, b = us[max(i - 1, 0)], us[min(i + 1, probes - 1)]
    if a == b:
        return float(a)
    res = minimize_scalar(func, bounds=(a, b), method="bounded", options={"xatol": tol})
    cands = [(float(res.x), float(res.fun)), (float(us[i]), float(vals[i])), (lo, float(vals[0])), (hi, float(vals[-1]))]
    best = min(v for _, v in cands)
    return min((u for u, v in cands if v <= best + 1e-14), key=abs)


def minimize_h0_classical(model: ModelSpec, x0: float, law: JointLaw, p: float) -> tuple[float, float]:
    """Minimizer and value of f0 + p * g0 over the major control box."""
    lo, hi = model.control_box_major
    if model.u0_argmin is not None:
        u0 = float(np.clip(model.u0_argmin(x0, law, p), lo, hi))
    else:
        u0 = _minimize_scalar_box(lambda u: float(model.f0(x0, law, u) + p * model.g0(x0, law, u)), (lo, hi))
    val = float(model.f0(x0, law, u0) + p * model.g0(x0, law, u0))
    if not np.isfinite(val):
        raise CoefficientError("f0/g0", f"at u0={u0}")
    return u0, val


def eval_g0(model: ModelSpec, x0: float, law: JointLaw, p: float, u0: float | None = None) -> float:
    """Major drift at the optimal control (or at a supplied one)."""
    if u0 is None:
        u0, _ = minimize_h0_classical(model, x0, law, p)
    g = float(model.g0(x0, law, u0))
    if not np.isfinite(g):
        raise CoefficientError("g0")
    return g


def minimize_h0_effective(
    model: ModelSpec,
    x0: float,
    law: JointLaw,
    p: float,
    q_field: np.ndarray,
    r_field: np.ndarray,
    m: np.ndarray,
    dpsi_field: np.ndarray,
) -> tuple[float, float]:
    """Minimize the major Hamiltonian augmented with the population reaction.

    The objective is f0 + p g0 plus the field pairings of the minor
    Hamiltonian against r and of the optimal minor drift against the
    gradient of q weighted by the density.  All fields live on the law's
    grid and share its quadrature weights.
    """
    grid = law.grid
    xs = grid.nodes
    dq = gradient_field(np.asarray(q_field, dtype=float), grid.h)
    r = np.asarray(r_field, dtype=float)
    m = np.asarray(m, dtype=float)
    dpsi = np.asarray(dpsi_field, dtype=float)

    def objective(u0: float) -> float:
        u1, h1val = minimize_h1_field(model, xs, x0, u0, law, dpsi)
        g1v = np.asarray(model.g1(xs, x0, u0, law, u1), dtype=float)
        val = (
            float(model.f0(x0, law, u0))
            + p * float(model.g0(x0, law, u0))
            + grid.quadrature(r * h1val)
            + grid.quadrature(dq * g1v * m)
        )
        if not np.isfinite(val):
            raise CoefficientError("effective major objective", f"at u0={u0}")
        return val

    lo, hi = model.control_box_major
    u0_star = _minimize_scalar_box(objective, (lo, hi))
    return u0_star, objective(u0_star)


def gradient_field(values: np.ndarray, h: float) -> np.ndarray:
    """Spatial gradient: central interior, second-order one-sided at the ends."""
    v = np.asarray(values, dtype=float)
    out = np.empty_like(v)
    out[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2 * h)
    out[..., 0] = (-1.5 * v[..., 0] + 2.0 * v[..., 1] - 0.5 * v[..., 2]) / h
    out[..., -1] = (0.5 * v[..., -3] - 2.0 * v[..., -2] + 1.5 * v[..., -1]) / h
    return out


def kernel_eval_deriv(kernel, base_args: tuple, xi, u, coord: str, eps: float = 1e-6):
    """Evaluation-point derivative of a law kernel by central differences."""
    xi = np.asarray(xi, dtype=float)
    u = np.asarray(u, dtype=float)
    if coord == "state":
        return (kernel(*base_args, xi + eps, u) - kernel(*base_args, xi - eps, u)) / (2 * eps)
    if coord == "control":
        return (kernel(*base_args, xi, u + eps) - kernel(*base_args, xi, u - eps)) / (2 * eps)
    raise ValueError("coord must be 'state' or 'control'")


# ---------------------------------------------------------------------------
# linear-quadratic benchmark


@dataclass(frozen=True)
class LQParams:
    """Coefficients of the linear-quadratic benchmark game.

    Minor agent: dx1 = (a x1 + b u1 + c x0 + d ubar + e u0) dt + sigma1 dW1,
    running cost 0.5 u1^2 + 0.5 (x1 - rho xbar - eta x0)^2, terminal
    0.5 gamma1 x1^2.  Major agent: dx0 = (a0 x0 + b0 u0 + c0 xbar) dt with no
    own noise, running cost 0.5 u0^2 + 0.5 (x0 - kappa xbar)^2, terminal
    0.5 gamma0 x0^2.  xbar and ubar are the state and control means of the
    joint law.
    """

    a: float = -0.5
    b: float = 1.0
    c: float = 0.0
    d: float = 0.0
    e: float = 0.0
    rho: float = 0.0
    eta: float = 0.0
    sigma1: float = 0.7
    gamma1: float = 0.4
    a0: float = -0.3
    b0: float = 1.0
    c0: float = 0.0
    kappa: float = 0.0
    gamma0: float = 0.4

    def __post_init__(self):
        vals = [getattr(self, f) for f in self.__dataclass_fields__]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("LQ parameters must be finite")
        if self.b == 0.0:
            raise ValueError("minor control gain b must be nonzero")


def coupled_benchmark() -> LQParams:
    """Pinned coupled benchmark instance used across the verification suite."""
    return LQParams(
        a=-0.5, b=1.0, c=0.4, d=0.2, e=0.0, rho=0.5, eta=0.3,
        sigma1=0.7, gamma1=0.4, a0=-0.3, b0=1.0, c0=0.3, kappa=0.4, gamma0=0.4,
    )


def decoupled_benchmark() -> LQParams:
    """LQ instance with every population and major-minor coupling removed."""
    return LQParams(
        a=-0.5, b=1.0, c=0.0, d=0.0, e=0.0, rho=0.0, eta=0.0,
        sigma1=0.5, gamma1=0.4, a0=-0.4, b0=1.0, c0=0.0, kappa=0.0, gamma0=0.5,
    )


def make_lq_model(
    params: LQParams,
    control_box_minor: tuple[float, float] = (-8.0, 8.0),
    control_box_major: tuple[float, float] = (-8.0, 8.0),
) -> ModelSpec:
    """Assemble the linear-quadratic game with all analytic derivative fields."""
    pr = params

    def g0(x0, law, u0):
        return pr.a0 * x0 + pr.b0 * u0 + pr.c0 * mean_state(law)

    def g1(x1, x0, u0, law, u1):
        return pr.a * x1 + pr.b * u1 + pr.c * x0 + pr.d * mean_control(law) + pr.e * u0

    def f0(x0, law, u0):
        return 0.5 * u0**2 + 0.5 * (x0 - pr.kappa * mean_state(law)) ** 2

    def f1(x1, x0, u0, law, u1):
        track = x1 - pr.rho * mean_state(law) - pr.eta * x0
        return 0.5 * u1**2 + 0.5 * track**2

    def h0(x0, law):
        return 0.5 * pr.gamma0 * x0**2

    def h1(x1, x0, u0, law):
        return 0.5 * pr.gamma1 * x1**2

    partials = Partials(
        g0_x0=lambda x0, law, u0: pr.a0,
        g0_u0=lambda x0, law, u0: pr.b0,
        f0_x0=lambda x0, law, u0: x0 - pr.kappa * mean_state(law),
        f0_u0=lambda x0, law, u0: u0,
        h0_x0=lambda x0, law: pr.gamma0 * x0,
        g1_x0=lambda x1, x0, u0, law, u1: np.full_like(np.asarray(x1, dtype=float), pr.c),
        g1_u0=lambda x1, x0, u0, law, u1: np.full_like(np.asarray(x1, dtype=float), pr.e),
        g1_u1=lambda x1, x0, u0, law, u1: np.full_like(np.asarray(x1, dtype=float), pr.b),
        f1_x0=lambda x1, x0, u0, law, u1: -pr.eta * (x1 - pr.rho * mean_state(law) - pr.eta * x0),
        f1_u0=lambda x1, x0, u0, law, u1: np.zeros_like(np.asarray(x1, dtype=float)),
        f1_u1=lambda x1, x0, u0, law, u1: np.asarray(u1, dtype=float) + np.zeros_like(np.asarray(x1, dtype=float)),
        h1_x0=lambda x1, x0, u0, law: np.zeros_like(np.asarray(x1, dtype=float)),
        sigma0_x0=lambda x0: 0.0,
        sigma1_x1=lambda x1: np.zeros_like(np.asarray(x1, dtype=float)),
    )

    kernels = PiKernels(
        dpi_g0=(lambda x0, law, u0, xi, u: pr.c0 * np.asarray(xi, dtype=float)) if pr.c0 else None,
        dpi_f0=(
            lambda x0, law, u0, xi, u: -pr.kappa
            * (x0 - pr.kappa * mean_state(law))
            * np.asarray(xi, dtype=float)
        )
        if pr.kappa
        else None,
        dpi_h0=None,
        dpi_g1=(lambda x1, x0, u0, law, u1, xi, u: pr.d * np.asarray(u, dtype=float) + 0.0 * np.asarray(x1, dtype=float))
        if pr.d
        else None,
        dpi_f1=(
            lambda x1, x0, u0, law, u1, xi, u: -pr.rho
            * (np.asarray(x1, dtype=float) - pr.rho * mean_state(law) - pr.eta * x0)
            * np.asarray(xi, dtype=float)
        )
        if pr.rho
        else None,
        dpi_h1=None,
    )

    return ModelSpec(
        g0=g0,
        sigma0=lambda x0: 0.0,
        g1=g1,
        sigma1=lambda x1: pr.sigma1 + 0.0 * np.asarray(x1, dtype=float),
        f0=f0,
        f1=f1,
        h0=h0,
        h1=h1,
        partials=partials,
        pi_kernels=kernels,
        control_box_minor=control_box_minor,
        control_box_major=control_box_major,
        u1_argmin=lambda x1, x0, u0, law, dpsi: -pr.b * np.asarray(dpsi, dtype=float)
        + 0.0 * np.asarray(x1, dtype=float),
        u0_argmin=lambda x0, law, p: -pr.b0 * p,
    )
