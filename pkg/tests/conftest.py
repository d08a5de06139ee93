import numpy as np
import pytest

from mmfg.measure import Grid, gaussian_density
from mmfg.model import coupled_benchmark, decoupled_benchmark, make_lq_model
from mmfg.pde import Grids, TimeGrid
from mmfg.major import solve_coupled_forward


@pytest.fixture(scope="session")
def benchmark():
    """Pinned coupled benchmark: model, grids, initial density, and the
    state-consistent equilibrium at zero major control (solved tightly)."""
    params = coupled_benchmark()
    model = make_lq_model(params)
    grid = Grid(-4.0, 4.0, 161)
    tg = TimeGrid(1.0, 200)
    grids = Grids(grid, tg)
    omega = gaussian_density(grid, 0.3, 0.16)
    u0 = np.zeros(tg.steps + 1)
    x0_path, eq = solve_coupled_forward(
        model, u0, omega, grids, xi0=0.5, eq_tol=1e-11, damping=0.5, upwind_blend=0.0
    )
    return {
        "params": params,
        "model": model,
        "grids": grids,
        "omega": omega,
        "u0": u0,
        "x0_path": x0_path,
        "eq": eq,
        "xi0": 0.5,
        "upwind_blend": 0.0,
    }


@pytest.fixture(scope="session")
def decoupled():
    """Decoupled benchmark on a small grid (population plays no role)."""
    params = decoupled_benchmark()
    model = make_lq_model(params)
    grid = Grid(-3.0, 3.0, 121)
    tg = TimeGrid(1.0, 200)
    grids = Grids(grid, tg)
    omega = gaussian_density(grid, 0.3, 0.16)
    return {"params": params, "model": model, "grids": grids, "omega": omega, "xi0": 0.5}
