"""Acceptance suite: every release criterion at its pinned tolerance.

Each test prints one PASS/FAIL line.  Oracles are independent of the code
paths they check: closed-form Gaussian evolutions, high-order ODE
integrations of the benchmark's Riccati/consistency system, particle
finite differences on the measure lift, and central finite differences of
the major cost.
"""

import filecmp
import time

import numpy as np
from scipy.integrate import solve_ivp

from mmfg.measure import (
    Grid,
    JointLaw,
    gaussian_density,
    grid_to_empirical,
    mean_state,
    point_mass,
    w2_1d,
)
from mmfg.model import LQParams, decoupled_benchmark, make_lq_model
from mmfg.pde import Grids, TimeGrid, fp_forward, hjb_backward
from mmfg.equilibrium import best_response_map, path_residual, solve_fixed_point
from mmfg.major import (
    LQOracle,
    evaluate_j0,
    optimize_u0,
    pair_residual,
    solve_adjoints,
    solve_coupled_forward,
    u0_stationarity_residual,
)
from mmfg.simulate import empirical_consistency
from mmfg.verifysuite import check_kernels_against_oracle

from test_pde import _riccati_path, constant_paths, drift_model


def report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {num:02d} {name}: {status} {detail}")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


# ---------------------------------------------------------------------------


def test_criterion_01_mass_conservation(benchmark):
    b = benchmark
    grid = b["grids"].space
    tg = TimeGrid(1.0, 2000)
    grids = Grids(grid, tg)
    feedback = -0.5 * grid.nodes
    laws = [JointLaw(grid, b["omega"], feedback)] * (tg.steps + 1)
    zeros = np.zeros(tg.steps + 1)
    t0 = time.perf_counter()
    dp = fp_forward(b["model"], laws, zeros + 0.4, zeros, b["omega"], grids, upwind_blend=0.0)
    wall = time.perf_counter() - t0
    ok = dp.max_mass_error <= 1e-10 and dp.clipped_mass <= 1e-6 and wall <= 10.0
    report(1, "density-mass-conservation", ok,
           f"(per-step mass error {dp.max_mass_error:.2e}, clipped {dp.clipped_mass:.2e}, {wall:.1f}s)")


def test_criterion_02_fp_oracles_and_order():
    t0 = time.perf_counter()
    # heat kernel: variance grows linearly at rate 2*a1
    g = Grid(-7, 7, 281)
    tg = TimeGrid(0.5, 500)
    model = drift_model(lambda x: 0.0 * x, np.sqrt(2.0))
    omega = gaussian_density(g, 0.0, 0.25)
    pi, x0p, u0p = constant_paths(g, tg, omega)
    dp = fp_forward(model, pi, x0p, u0p, omega, Grids(g, tg), upwind_blend=1.0)
    m = dp.m[-1]
    heat_err = abs(g.quadrature(g.nodes**2 * m) - g.quadrature(g.nodes * m) ** 2 - 1.25)

    # long-horizon relaxation to the stationary law (horizon long enough
    # that the genuine transient sits well below the tolerance)
    g2 = Grid(-5, 5, 201)
    tg2 = TimeGrid(6.0, 1200)
    model2 = drift_model(lambda x: -x, 0.5)
    omega2 = gaussian_density(g2, 1.0, 0.25)
    pi2, x0p2, u0p2 = constant_paths(g2, tg2, omega2)
    dp2 = fp_forward(model2, pi2, x0p2, u0p2, omega2, Grids(g2, tg2), upwind_blend=0.0)
    ou_err = w2_1d(JointLaw(g2, dp2.m[-1], np.zeros(g2.n)),
                   JointLaw(g2, gaussian_density(g2, 0.0, 0.125), np.zeros(g2.n)))

    # refinement order against the exact transient law
    theta, sigma, T = 1.0, 0.5, 1.0
    var_inf = sigma**2 / (2 * theta)
    mean_T = np.exp(-theta * T)
    var_T = var_inf + (0.25 - var_inf) * np.exp(-2 * theta * T)
    errs = []
    for n in (201, 401, 801):
        gr = Grid(-5, 5, n)
        tgr = TimeGrid(T, 3200)
        om = gaussian_density(gr, 1.0, 0.25)
        pir, x0r, u0r = constant_paths(gr, tgr, om)
        dpr = fp_forward(model2, pir, x0r, u0r, om, Grids(gr, tgr), upwind_blend=0.0)
        errs.append(w2_1d(JointLaw(gr, dpr.m[-1], np.zeros(gr.n)),
                          JointLaw(gr, gaussian_density(gr, mean_T, var_T), np.zeros(gr.n))))
    orders = [float(np.log2(errs[i] / errs[i + 1])) for i in range(2)]
    wall = time.perf_counter() - t0
    ok = heat_err <= 2e-2 and ou_err <= 2e-2 and min(orders) >= 0.9 and wall <= 60.0
    report(2, "density-analytic-oracles", ok,
           f"(heat {heat_err:.2e}, relaxation {ou_err:.2e}, orders {orders[0]:.2f}/{orders[1]:.2f}, {wall:.0f}s)")


def test_criterion_03_value_vs_riccati():
    params = LQParams(a=-0.3, b=1.0, sigma1=0.5, gamma1=0.5)
    model = make_lq_model(params)
    g = Grid(-3, 3, 121)
    tg = TimeGrid(0.5, 500)  # h = 0.05, dt = 1e-3
    grids = Grids(g, tg)
    law = point_mass(g, 0.0, 0.0)
    pi = [law] * (tg.steps + 1)
    zeros = np.zeros(tg.steps + 1)
    vp = hjb_backward(model, pi, zeros, zeros, grids)
    nfine = 50_000
    P, S = _riccati_path(-0.3, 1.0, 0.5, 0.5 * 0.25, 0.5, nfine)
    idx = np.linspace(0, nfine, tg.steps + 1).astype(int)
    psi_oracle = 0.5 * P[idx][:, None] * g.nodes[None, :] ** 2 + S[idx][:, None]
    sup_err = float(np.max(np.abs(vp.psi - psi_oracle)))

    omega = gaussian_density(g, 0.0, 0.16)
    dp = fp_forward(model, pi, zeros, zeros, omega, grids, ops=None, upwind_blend=0.0,
                    feedback=vp.feedback)
    worst = 0.0
    for n in range(0, tg.steps + 1, 25):
        mask = dp.m[n] > 1e-6
        foc = vp.feedback[n] + params.b * vp.dpsi[n]
        if np.any(mask):
            worst = max(worst, float(np.max(np.abs(foc[mask]))))
    ok = sup_err <= 1e-3 and worst <= 1e-5
    report(3, "value-vs-riccati", ok, f"(sup error {sup_err:.2e}, stationarity {worst:.2e})")


def test_criterion_04_equilibrium_fixed_point(benchmark):
    b = benchmark
    eq_cold = solve_fixed_point(b["model"], b["x0_path"], b["u0"], b["omega"], b["grids"],
                                tol=1e-5, damping=0.5, max_iter=50, upwind_blend=0.0)
    recheck = path_residual(
        best_response_map(b["model"], eq_cold.pi_path, b["x0_path"], b["u0"], b["omega"],
                          b["grids"], upwind_blend=0.0),
        eq_cold.pi_path,
    )
    grids = b["grids"]
    oracle = LQOracle(params=b["params"], horizon=grids.time.horizon, nfine=grids.time.steps * 100,
                      xi0=b["xi0"], xbar0=mean_state(b["eq"].pi_path[0]))
    sol = oracle.for_control_path(b["u0"][: grids.time.steps], grids.time)
    xbar = np.array([mean_state(l) for l in b["eq"].pi_path])
    mean_err = float(np.max(np.abs(xbar - oracle.sample(sol["xbar"], grids.time))))
    ok = (
        eq_cold.converged
        and eq_cold.iterations <= 50
        and eq_cold.residual_history[-1] <= 1e-4
        and recheck <= 1e-4
        and mean_err <= 2e-3
    )
    report(4, "equilibrium-fixed-point", ok,
           f"(iters {eq_cold.iterations}, residual {eq_cold.residual_history[-1]:.2e}, "
           f"recheck {recheck:.2e}, mean-path {mean_err:.2e})")


def test_criterion_05_adjoint_gradient_identity(benchmark):
    b = benchmark
    t0 = time.perf_counter()
    model, grids = b["model"], b["grids"]
    nt = grids.time.steps
    u0 = 0.1 * np.ones(nt + 1)
    u0[nt] = u0[nt - 1]
    x0p, eq = solve_coupled_forward(model, u0, b["omega"], grids, xi0=b["xi0"],
                                    eq_tol=1e-12, upwind_blend=0.0,
                                    warm=(b["x0_path"], b["eq"].pi_path))
    bundle = solve_adjoints(model, eq, x0p, u0, grids, inner_tol=1e-12, upwind_blend=0.0)
    resid = u0_stationarity_residual(model, eq, bundle, x0p, u0, grids, upwind_blend=0.0)

    def j0_of(u):
        xt, et = solve_coupled_forward(model, u, b["omega"], grids, xi0=b["xi0"], eq_tol=1e-13,
                                       upwind_blend=0.0, warm=(x0p, eq.pi_path), x0_tol=1e-13)
        return evaluate_j0(model, xt, u, et.pi_path, grids.time)

    rng = np.random.default_rng(2024)
    eps = 1e-4
    rels = []
    for _ in range(5):
        theta = rng.standard_normal(nt)
        up = u0.copy(); up[:nt] += eps * theta; up[nt] = up[nt - 1]
        dn = u0.copy(); dn[:nt] -= eps * theta; dn[nt] = dn[nt - 1]
        fd = (j0_of(up) - j0_of(dn)) / (2 * eps)
        pairing = pair_residual(resid, theta, grids.time)
        rels.append(abs(fd - pairing) / max(abs(fd), 1e-14))
    wall = time.perf_counter() - t0
    ok = max(rels) <= 1e-3 and wall <= 300.0
    report(5, "adjoint-gradient-identity", ok,
           f"(worst rel {max(rels):.2e} over 5 directions, {wall:.0f}s)")


def test_criterion_06_decoupled_degeneracy():
    params = decoupled_benchmark()
    model = make_lq_model(params)
    grid = Grid(-4.0, 4.0, 41)
    tg = TimeGrid(0.5, 20_000)
    grids = Grids(grid, tg)
    omega = gaussian_density(grid, 0.3, 0.16)
    nt = tg.steps
    u0 = 0.2 * np.ones(nt + 1)
    u0[nt] = u0[nt - 1]
    x0p, eq = solve_coupled_forward(model, u0, omega, grids, xi0=0.5, eq_tol=1e-11)
    bundle = solve_adjoints(model, eq, x0p, u0, grids, inner_tol=1e-12)
    ts = tg.times

    def rhs(t, p):
        return -(params.a0 * p + np.interp(t, ts, x0p))

    sol = solve_ivp(rhs, [tg.horizon, 0.0], [params.gamma0 * x0p[-1]], t_eval=ts[::-1],
                    rtol=1e-12, atol=1e-14)
    p_err = float(np.max(np.abs(bundle.p - sol.y[0][::-1])))
    q_sup = float(np.max(np.abs(bundle.q)))
    r_sup = float(np.max(np.abs(bundle.r)))
    ok = q_sup <= 1e-10 and r_sup <= 1e-10 and p_err <= 1e-5
    report(6, "decoupled-degeneracy", ok, f"(|q| {q_sup:.1e}, |r| {r_sup:.1e}, costate err {p_err:.2e})")


def test_criterion_07_major_optimization(decoupled, benchmark):
    # decoupled problem against its closed-form optimum
    d = decoupled
    nt = d["grids"].time.steps
    u0d, x0d, eqd, _, histd = optimize_u0(d["model"], d["omega"], d["grids"], xi0=d["xi0"],
                                          outer_tol=2e-4, outer_max_iter=60, eq_tol=1e-10)
    oracle_d = LQOracle(params=d["params"], horizon=d["grids"].time.horizon, nfine=nt * 100,
                        xi0=d["xi0"], xbar0=mean_state(eqd.pi_path[0]))
    dec = oracle_d.decoupled_major_optimum()
    u_mid = np.interp(d["grids"].time.times[:-1] + 0.5 * d["grids"].time.dt, oracle_d.times, dec["u0"])
    u_err = float(np.max(np.abs(u0d[:nt] - u_mid)))
    j_gap = abs(histd[-1] - dec["J0"])
    mono_d = all(b2 < a2 for a2, b2 in zip(histd, histd[1:]))

    # coupled benchmark against a dense affine-feedback family search
    b = benchmark
    grid = b["grids"].space
    tgc = TimeGrid(1.0, 100)
    gridsc = Grids(grid, tgc)
    u0c, x0c, eqc, _, histc = optimize_u0(b["model"], b["omega"], gridsc, xi0=b["xi0"],
                                          outer_tol=3e-4, outer_max_iter=40,
                                          eq_tol=1e-9, inner_tol=1e-9, upwind_blend=0.0)
    mono_c = all(b2 < a2 for a2, b2 in zip(histc, histc[1:]))
    oracle_c = LQOracle(params=b["params"], horizon=1.0, nfine=tgc.steps * 20,
                        xi0=b["xi0"], xbar0=mean_state(eqc.pi_path[0]))
    g1 = np.linspace(-1.2, 0.2, 15)
    g2 = np.linspace(-0.9, 0.3, 13)
    g3 = np.linspace(-0.4, 0.4, 9)
    best = None
    for _ in range(3):
        T1, T2, T3 = np.meshgrid(g1, g2, g3, indexing="ij")
        j0s = oracle_c.for_affine_feedback(T1.ravel(), T2.ravel(), T3.ravel())["J0"]
        i = int(np.argmin(j0s))
        best = (T1.ravel()[i], T2.ravel()[i], T3.ravel()[i], float(j0s[i]))
        w1, w2, w3 = g1[1] - g1[0], g2[1] - g2[0], g3[1] - g3[0]
        g1 = np.linspace(best[0] - w1, best[0] + w1, 9)
        g2 = np.linspace(best[1] - w2, best[1] + w2, 9)
        g3 = np.linspace(best[2] - w3, best[2] + w3, 9)
    rel_gap = abs(histc[-1] - best[3]) / abs(best[3])
    ok = u_err <= 5e-3 and j_gap <= 1e-3 and mono_d and mono_c and rel_gap <= 0.01
    report(7, "major-optimization", ok,
           f"(decoupled u0 err {u_err:.2e}, J0 gap {j_gap:.1e}; coupled family gap {rel_gap:.2e})")


def test_criterion_08_propagation_of_chaos(benchmark):
    b = benchmark
    table = empirical_consistency(b["model"], b["eq"], b["x0_path"], b["u0"],
                                  n_list=[50, 200, 800], seeds=list(range(20)))
    med = {r["n_agents"]: r["median_w2"] for r in table["rows"]}
    monotone = med[50] >= med[200] >= med[800]
    halved = med[800] <= 0.5 * med[50]

    # control experiment: iid draws from the solved law, no dynamics
    law = b["eq"].pi_path[b["grids"].time.steps // 2]
    sizes = [50, 200, 800]
    med_iid = []
    for n in sizes:
        d = [w2_1d(grid_to_empirical(law, n, seed=s), law) for s in range(20)]
        med_iid.append(float(np.median(d)))
    slope = float(np.polyfit(np.log(sizes), np.log(med_iid), 1)[0])
    ok = monotone and halved and -0.7 <= slope <= -0.3
    report(8, "propagation-of-chaos", ok,
           f"(medians {med[50]:.3f}/{med[200]:.3f}/{med[800]:.3f}, iid slope {slope:.2f})")


def test_criterion_09_lions_oracle_agreement(benchmark):
    worst = check_kernels_against_oracle(benchmark["model"], n_particles=256, eps=1e-5, rtol=1e-4)
    report(9, "measure-kernel-oracle", worst <= 1e-4, f"(worst rel {worst:.2e})")


def test_criterion_10_determinism(tmp_path):
    from mmfg.cli import main
    from test_cli import BENCH_CFG

    cfg = tmp_path / "bench.cfg"
    cfg.write_text(BENCH_CFG)
    pairs = []
    for cmd, names in (
        ("solve-equilibrium", ["residual_history.csv", "law_00000.csv", "law_00050.csv"]),
        ("simulate", ["trajectories.csv", "mc_cost.csv"]),
    ):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{cmd}-{tag}"
            rc = main([cmd, "--config", str(cfg), "--out", str(out), "--seed", "5", "--quiet"])
            assert rc == 0
            outs.append(out)
        pairs += [(outs[0] / n, outs[1] / n) for n in names]
    identical = all(filecmp.cmp(left, right, shallow=False) for left, right in pairs)
    report(10, "byte-identical-artifacts", identical, f"({len(pairs)} artifact pairs compared)")
