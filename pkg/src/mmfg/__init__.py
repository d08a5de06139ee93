"""Solver and verification harness for major-minor mean field games
with joint state-control interaction."""

from .measure import (
    EmpiricalJointLaw,
    Grid,
    JointLaw,
    default_grid,
    empirical_to_grid,
    grid_to_empirical,
    lions_fd_oracle,
    mean_control,
    mean_state,
    point_mass,
    second_moment,
    w2_1d,
)
from .model import (
    LQParams,
    ModelSpec,
    Partials,
    PiKernels,
    coupled_benchmark,
    decoupled_benchmark,
    eval_g0,
    eval_g1,
    make_lq_model,
    minimize_h0_effective,
    minimize_h1,
)
from .pde import (
    DensityPath,
    Grids,
    TimeGrid,
    ValuePath,
    apply_a1,
    apply_a1_star,
    evaluate_j1,
    fp_forward,
    hjb_backward,
)
from .equilibrium import EquilibriumSolution, best_response_map, solve_fixed_point
from .major import (
    AdjointBundle,
    LQOracle,
    evaluate_j0,
    optimize_u0,
    solve_adjoints,
    u0_stationarity_residual,
)
from .simulate import SimConfig, empirical_consistency, mc_cost, simulate_population

__version__ = "0.1.0"
