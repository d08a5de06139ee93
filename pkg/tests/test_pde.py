import numpy as np
import pytest

from mmfg.measure import Grid, JointLaw, gaussian_density, point_mass, w2_1d
from mmfg.model import LQParams, ModelSpec, Partials, make_lq_model
from mmfg.pde import (
    Grids,
    StepSizeError,
    TimeGrid,
    apply_a1,
    apply_a1_star,
    evaluate_j1,
    fp_forward,
    hjb_backward,
    value_for_feedback,
)


def _zf(x1, *args):
    return np.zeros_like(np.asarray(x1, dtype=float))


def drift_model(drift, sigma, f1=None, h1=None):
    """Minimal model with a prescribed autonomous drift and optimal control 0."""

    def g1(x1, x0, u0, law, u1):
        return drift(np.asarray(x1, dtype=float)) + 0.0 * np.asarray(u1, dtype=float)

    def f1_default(x1, x0, u0, law, u1):
        return 0.5 * np.asarray(u1, dtype=float) ** 2 + 0.0 * np.asarray(x1, dtype=float)

    partials = Partials(
        g0_x0=lambda *a: 0.0, g0_u0=lambda *a: 0.0, f0_x0=lambda *a: 0.0,
        f0_u0=lambda *a: 0.0, h0_x0=lambda *a: 0.0,
        g1_x0=_zf, g1_u0=_zf, g1_u1=_zf,
        f1_x0=_zf, f1_u0=_zf,
        f1_u1=lambda x1, x0, u0, law, u1: np.asarray(u1, dtype=float) + 0.0 * np.asarray(x1, dtype=float),
        h1_x0=_zf, sigma0_x0=lambda x0: 0.0, sigma1_x1=_zf,
    )
    return ModelSpec(
        g0=lambda *a: 0.0,
        sigma0=lambda x0: 0.0,
        g1=g1,
        sigma1=lambda x1: sigma + 0.0 * np.asarray(x1, dtype=float),
        f0=lambda *a: 0.0,
        f1=f1 if f1 is not None else f1_default,
        h0=lambda *a: 0.0,
        h1=h1 if h1 is not None else (lambda x1, x0, u0, law: 0.0 * np.asarray(x1, dtype=float)),
        partials=partials,
        u1_argmin=lambda x1, x0, u0, law, dpsi: np.zeros_like(np.asarray(x1, dtype=float)),
    )


def constant_paths(grid, tg, density, feedback=0.0):
    law = JointLaw(grid, density, np.full(grid.n, feedback))
    return [law] * (tg.steps + 1), np.zeros(tg.steps + 1), np.zeros(tg.steps + 1)


# ---------------------------------------------------------------------------
# elliptic operators


def test_a1_constant_field():
    g = Grid(-6, 6, 241)
    model = drift_model(lambda x: 0.0 * x, np.sqrt(2.0))
    assert np.max(np.abs(apply_a1(np.ones(g.n), g, model))) == 0.0


def test_a1_quadratic_exact():
    g = Grid(-6, 6, 241)
    model = drift_model(lambda x: 0.0 * x, np.sqrt(2.0))  # a1 = 1
    out = apply_a1(g.nodes**2, g, model)
    np.testing.assert_allclose(out, -2.0, atol=1e-10)


def test_a1_adjoint_identity():
    g = Grid(-6, 6, 241)
    model = drift_model(lambda x: 0.0 * x, np.sqrt(2.0))
    f = np.exp(-g.nodes**2) * np.sin(3 * g.nodes)
    w = np.exp(-0.5 * g.nodes**2) * np.cos(2 * g.nodes)
    lhs = g.quadrature(apply_a1(f, g, model) * w)
    rhs = g.quadrature(f * apply_a1_star(w, g, model))
    assert abs(lhs - rhs) <= 1e-8


def test_small_grid_rejected():
    with pytest.raises(ValueError):
        Grid(-1, 1, 2)


# ---------------------------------------------------------------------------
# forward density equation


def test_heat_kernel_variance():
    g = Grid(-7, 7, 281)
    tg = TimeGrid(0.5, 500)
    model = drift_model(lambda x: 0.0 * x, np.sqrt(2.0))  # a1 = 1
    omega = gaussian_density(g, 0.0, 0.25)
    pi, x0p, u0p = constant_paths(g, tg, omega)
    dp = fp_forward(model, pi, x0p, u0p, omega, Grids(g, tg), upwind_blend=1.0)
    m = dp.m[-1]
    var = g.quadrature(g.nodes**2 * m) - g.quadrature(g.nodes * m) ** 2
    assert var == pytest.approx(1.25, abs=2e-2)
    assert dp.max_mass_error <= 1e-10


def test_pure_transport_mean_shift():
    g = Grid(-6, 6, 241)
    tg = TimeGrid(0.5, 600)
    model = drift_model(lambda x: 1.0 + 0.0 * x, 0.0)
    omega = gaussian_density(g, 0.0, 0.25)
    pi, x0p, u0p = constant_paths(g, tg, omega)
    dp = fp_forward(model, pi, x0p, u0p, omega, Grids(g, tg), upwind_blend=1.0)
    mean = g.quadrature(g.nodes * dp.m[-1])
    assert abs(mean - 0.5) <= g.h


def test_ou_stationary_law():
    g = Grid(-5, 5, 201)
    tg = TimeGrid(4.0, 800)
    model = drift_model(lambda x: -x, 0.5)  # stationary N(0, 0.125)
    omega = gaussian_density(g, 1.0, 0.25)
    pi, x0p, u0p = constant_paths(g, tg, omega)
    dp = fp_forward(model, pi, x0p, u0p, omega, Grids(g, tg), upwind_blend=1.0)
    target = JointLaw(g, gaussian_density(g, 0.0, 0.125), np.zeros(g.n))
    got = JointLaw(g, dp.m[-1], np.zeros(g.n))
    assert w2_1d(got, target) <= 5e-2


def test_cfl_violation_reported():
    g = Grid(-6, 6, 241)
    tg = TimeGrid(0.5, 20)  # dt = 0.025, |G| = 6 at edges -> courant = 3
    model = drift_model(lambda x: x, 0.5)
    omega = gaussian_density(g, 0.0, 0.25)
    pi, x0p, u0p = constant_paths(g, tg, omega)
    with pytest.raises(StepSizeError) as exc:
        fp_forward(model, pi, x0p, u0p, omega, Grids(g, tg), upwind_blend=1.0)
    assert exc.value.step == 0


def test_fp_convergence_order():
    # transient OU solution is Gaussian with known mean/variance at all times
    theta, sigma = 1.0, 0.5
    T = 1.0
    var_inf = sigma**2 / (2 * theta)
    mean_T = 1.0 * np.exp(-theta * T)
    var_T = var_inf + (0.25 - var_inf) * np.exp(-2 * theta * T)
    errs = []
    for n in (201, 401, 801):
        g = Grid(-5, 5, n)
        tg = TimeGrid(T, 3200)
        model = drift_model(lambda x: -x, sigma)
        omega = gaussian_density(g, 1.0, 0.25)
        pi, x0p, u0p = constant_paths(g, tg, omega)
        dp = fp_forward(model, pi, x0p, u0p, omega, Grids(g, tg), upwind_blend=1.0)
        target = JointLaw(g, gaussian_density(g, mean_T, var_T), np.zeros(g.n))
        errs.append(w2_1d(JointLaw(g, dp.m[-1], np.zeros(g.n)), target))
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 0.9


# ---------------------------------------------------------------------------
# backward value equation


def _riccati_path(a, b, gamma1, a1, T, nfine):
    dtf = T / nfine
    P = np.empty(nfine + 1)
    s = np.empty(nfine + 1)
    P[-1], s[-1] = gamma1, 0.0

    def f(p):
        return b * b * p * p - 2 * a * p - 1.0

    for k in range(nfine, 0, -1):
        p = P[k]
        k1 = f(p)
        k2 = f(p - 0.5 * dtf * k1)
        k3 = f(p - 0.5 * dtf * k2)
        k4 = f(p - dtf * k3)
        P[k - 1] = p - dtf / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        s[k - 1] = s[k] - dtf / 6 * (-a1 * (P[k] + 4 * 0.5 * (P[k] + P[k - 1]) + P[k - 1]))
    return P, s


def test_linear_terminal_no_cost():
    # h1(x) = x, no running cost, no controlled drift: the field stays linear
    g = Grid(-3, 3, 121)
    tg = TimeGrid(0.5, 100)
    model = drift_model(lambda x: 0.0 * x, 0.5, h1=lambda x1, x0, u0, law: np.asarray(x1, dtype=float))
    model.f1 = lambda x1, x0, u0, law, u1: 0.0 * np.asarray(x1, dtype=float) + 0.0 * np.asarray(u1, dtype=float)
    omega = gaussian_density(g, 0.0, 0.25)
    pi, x0p, u0p = constant_paths(g, tg, omega)
    vp = hjb_backward(model, pi, x0p, u0p, Grids(g, tg))
    np.testing.assert_allclose(vp.psi, np.tile(g.nodes, (tg.steps + 1, 1)), atol=1e-10)


def test_pure_running_cost():
    g = Grid(-3, 3, 121)
    tg = TimeGrid(2.0, 200)
    model = drift_model(lambda x: 0.0 * x, 0.0,
                        f1=lambda x1, x0, u0, law, u1: np.ones_like(np.asarray(x1, dtype=float)) + 0.0 * np.asarray(u1, dtype=float))
    model.g1 = lambda x1, x0, u0, law, u1: 0.0 * np.asarray(x1, dtype=float) + 0.0 * np.asarray(u1, dtype=float)
    omega = gaussian_density(g, 0.0, 0.25)
    pi, x0p, u0p = constant_paths(g, tg, omega)
    vp = hjb_backward(model, pi, x0p, u0p, Grids(g, tg))
    expected = (tg.horizon - tg.times)[:, None] * np.ones(g.n)[None, :]
    np.testing.assert_allclose(vp.psi, expected, atol=1e-10)


def test_riccati_value_function():
    params = LQParams(a=-0.3, b=1.0, sigma1=0.5, gamma1=0.5)
    model = make_lq_model(params)
    g = Grid(-3, 3, 121)
    tg = TimeGrid(0.5, 500)
    law = point_mass(g, 0.0, 0.0)
    pi = [law] * (tg.steps + 1)
    vp = hjb_backward(model, pi, np.zeros(tg.steps + 1), np.zeros(tg.steps + 1), Grids(g, tg))
    nfine = 50_000
    P, S = _riccati_path(-0.3, 1.0, 0.5, 0.5 * 0.25, 0.5, nfine)
    idx = np.linspace(0, nfine, tg.steps + 1).astype(int)
    psi_oracle = 0.5 * P[idx][:, None] * g.nodes[None, :] ** 2 + S[idx][:, None]
    assert np.max(np.abs(vp.psi - psi_oracle)) <= 1e-3
    # terminal slice equals the terminal cost exactly
    np.testing.assert_array_equal(vp.psi[-1], 0.5 * 0.5 * g.nodes**2)


def test_running_cost_monotonicity():
    params = LQParams(a=-0.3, b=1.0, sigma1=0.5, gamma1=0.5)
    model_lo = make_lq_model(params)
    model_hi = make_lq_model(params)
    base_f1 = model_hi.f1
    model_hi.f1 = lambda *args: base_f1(*args) + 0.3
    g = Grid(-3, 3, 121)
    tg = TimeGrid(0.5, 200)
    law = point_mass(g, 0.0, 0.0)
    pi = [law] * (tg.steps + 1)
    zeros = np.zeros(tg.steps + 1)
    lo = hjb_backward(model_lo, pi, zeros, zeros, Grids(g, tg))
    hi = hjb_backward(model_hi, pi, zeros, zeros, Grids(g, tg))
    assert np.all(hi.psi >= lo.psi - 1e-12)


def test_hjb_convergence_order():
    # non-quadratic terminal cost; reference from a finer grid
    params = LQParams(a=-0.3, b=1.0, sigma1=0.5, gamma1=0.4)
    model = make_lq_model(params)
    base_h1 = model.h1
    model.h1 = lambda x1, x0, u0, law: base_h1(x1, x0, u0, law) + 0.2 * np.cos(2 * np.asarray(x1, dtype=float))
    tg = TimeGrid(0.25, 1000)
    zeros = np.zeros(tg.steps + 1)

    def solve(n):
        g = Grid(-3, 3, n)
        law = point_mass(g, 0.0, 0.0)
        return hjb_backward(model, [law] * (tg.steps + 1), zeros, zeros, Grids(g, tg))

    ref = solve(961)
    errs = []
    for n in (121, 241, 481):
        vp = solve(n)
        stride = (961 - 1) // (n - 1)
        errs.append(np.max(np.abs(vp.psi[0] - ref.psi[0][::stride])))
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 0.9


# ---------------------------------------------------------------------------
# representative-agent cost


def test_j1_zero_cost():
    g = Grid(-6, 6, 241)
    tg = TimeGrid(1.0, 50)
    model = drift_model(lambda x: 0.0 * x, 0.5)
    model.f1 = lambda x1, x0, u0, law, u1: 0.0 * np.asarray(x1, dtype=float) + 0.0 * np.asarray(u1, dtype=float)
    omega = gaussian_density(g, 0.0, 0.25)
    pi, x0p, u0p = constant_paths(g, tg, omega)
    dp = fp_forward(model, pi, x0p, u0p, omega, Grids(g, tg), upwind_blend=1.0)
    fb = np.zeros((tg.steps + 1, g.n))
    assert evaluate_j1(model, dp, pi, x0p, u0p, fb) == pytest.approx(0.0, abs=1e-14)


def test_j1_unit_running_cost():
    g = Grid(-6, 6, 241)
    tg = TimeGrid(2.0, 80)
    model = drift_model(lambda x: 0.0 * x, 0.5,
                        f1=lambda x1, x0, u0, law, u1: np.ones_like(np.asarray(x1, dtype=float)) + 0.0 * np.asarray(u1, dtype=float))
    omega = gaussian_density(g, 0.0, 0.25)
    pi, x0p, u0p = constant_paths(g, tg, omega)
    dp = fp_forward(model, pi, x0p, u0p, omega, Grids(g, tg), upwind_blend=1.0)
    fb = np.zeros((tg.steps + 1, g.n))
    assert evaluate_j1(model, dp, pi, x0p, u0p, fb) == pytest.approx(2.0, abs=1e-9)


def test_j1_duality_residual():
    """Derivative of the cost in a feedback direction matches the pairing of
    the first-order term against the density."""
    params = LQParams(a=-0.5, b=1.0, sigma1=0.6, gamma1=0.4)
    model = make_lq_model(params)
    g = Grid(-3, 3, 121)
    tg = TimeGrid(0.2, 1000)
    grids = Grids(g, tg)
    omega = gaussian_density(g, 0.2, 0.16)
    nt = tg.steps
    zeros = np.zeros(nt + 1)
    from mmfg.equilibrium import initial_law_path

    pi = initial_law_path(model, zeros, zeros, omega, grids)
    fb = np.tile(-0.3 * np.tanh(g.nodes), (nt + 1, 1))
    vp = value_for_feedback(model, pi, zeros, zeros, fb, grids)
    dp = fp_forward(model, pi, zeros, zeros, omega, grids, upwind_blend=0.0, feedback=fb)
    pert = np.tile(np.exp(-g.nodes**2) * np.cos(2 * g.nodes), (nt + 1, 1))
    eps = 1e-4

    def j1_of(f):
        d = fp_forward(model, pi, zeros, zeros, omega, grids, upwind_blend=0.0, feedback=f)
        return evaluate_j1(model, d, pi, zeros, zeros, f)

    fd = (j1_of(fb + eps * pert) - j1_of(fb - eps * pert)) / (2 * eps)
    w = np.ones(nt + 1)
    w[0] = w[-1] = 0.5
    pairing = 0.0
    for n in range(nt + 1):
        foc = fb[n] + vp.dpsi[n] * params.b  # f1_u1 + dpsi * g1_u1
        pairing += w[n] * tg.dt * g.quadrature(foc * pert[n] * dp.m[n])
    assert abs(fd - pairing) <= 1e-4


def test_value_path_martingale_field_zero(benchmark):
    vp = benchmark["eq"].value
    assert np.all(vp.kpsi == 0.0)
