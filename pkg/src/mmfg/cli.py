"""Command-line driver: parse a run configuration, dispatch solver
pipelines, emit CSV artifacts and a reproducibility manifest.

Config format: flat key-value text with section headers.

    # comment lines and trailing comments are stripped
    [section]
    key = value

Values parse as int, then float, then bare string.  The normalized form
(sections and keys sorted, canonical value formatting) round-trips through
the parser unchanged.

Exit codes: 0 success, 1 usage/config error, 2 non-convergence,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .measure import Grid, gaussian_density, write_slice_csv
from .model import LQParams, make_lq_model
from .pde import Grids, TimeGrid, write_value_slice_csv
from .equilibrium import solve_fixed_point
from .major import LQOracle, optimize_u0, u0_stationarity_residual

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "format_config",
    "cmd_solve_equilibrium",
    "cmd_optimize_major",
    "cmd_simulate",
    "cmd_verify",
    "cmd_lq_oracle",
    "main",
]


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"config error{where}: {message}")


def _parse_value(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config(text: str) -> dict:
    """Parse the flat sectioned key-value format into nested dicts."""
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError("empty section name", lineno)
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if current is None:
            raise ConfigError("key outside of any section", lineno)
        key, _, val = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError("empty key", lineno)
        current[key] = _parse_value(val.strip())
    return sections


def format_config(sections: dict) -> str:
    """Canonical text form: sorted sections and keys, repr-exact floats."""
    out = []
    for name in sorted(sections):
        out.append(f"[{name}]")
        for key in sorted(sections[name]):
            val = sections[name][key]
            if isinstance(val, float):
                out.append(f"{key} = {val!r}")
            else:
                out.append(f"{key} = {val}")
        out.append("")
    return "\n".join(out)


class RunConfig:
    """Typed view over the parsed sections with validated accessors."""

    def __init__(self, sections: dict):
        self.sections = sections

    @classmethod
    def from_path(cls, path) -> "RunConfig":
        return cls(parse_config(Path(path).read_text()))

    def get(self, section: str, key: str, default=None):
        if section not in self.sections or key not in self.sections[section]:
            if default is None:
                raise ConfigError(f"missing [{section}] {key}")
            return default
        return self.sections[section][key]

    # -- assembled objects ---------------------------------------------------
    def grids(self) -> Grids:
        nodes = int(self.get("grid", "nodes", 161))
        if nodes < 3:
            raise ConfigError("[grid] nodes must be at least 3")
        grid = Grid(float(self.get("grid", "lo", -4.0)), float(self.get("grid", "hi", 4.0)), nodes)
        steps = int(self.get("time", "steps", 200))
        tg = TimeGrid(float(self.get("time", "horizon", 1.0)), steps)
        return Grids(grid, tg)

    def lq_params(self) -> LQParams:
        fields = {}
        sec = self.sections.get("model", {})
        for name in LQParams.__dataclass_fields__:
            if name in sec:
                fields[name] = float(sec[name])
        return LQParams(**fields)

    def model(self):
        name = str(self.get("model", "name", "lq"))
        if name == "lq":
            return make_lq_model(self.lq_params())
        if name == "lq_zero_cost":
            return _zero_cost_model(self.lq_params())
        if name == "lq_broken_kernel":
            return _broken_kernel_model(self.lq_params())
        raise ConfigError(f"unknown model '{name}'")

    def omega(self, grid: Grid) -> np.ndarray:
        mean = float(self.get("init", "mean", 0.3))
        var = float(self.get("init", "variance", 0.16))
        if var <= 0:
            raise ConfigError("[init] variance must be positive")
        return gaussian_density(grid, mean, var)

    def equilibrium_params(self) -> dict:
        tol = float(self.get("equilibrium", "tol", 1e-6))
        damping = float(self.get("equilibrium", "damping", 0.5))
        max_iter = int(self.get("equilibrium", "max_iter", 100))
        blend = float(self.get("equilibrium", "upwind_blend", 1.0))
        if tol <= 0 or not 0 < damping <= 1 or max_iter < 1:
            raise ConfigError("invalid [equilibrium] parameters")
        return {"tol": tol, "damping": damping, "max_iter": max_iter, "upwind_blend": blend}

    def major_params(self) -> dict:
        return {
            "outer_tol": float(self.get("major", "outer_tol", 3e-4)),
            "outer_max_iter": int(self.get("major", "outer_max_iter", 40)),
            "step_init": float(self.get("major", "step", 0.5)),
            "inner_tol": float(self.get("major", "inner_tol", 1e-9)),
            "inner_max_iter": int(self.get("major", "inner_max_iter", 80)),
        }


def _zero_cost_model(params: LQParams):
    """LQ dynamics with the major player's cost removed entirely."""
    model = make_lq_model(params)
    model.f0 = lambda x0, law, u0: 0.0
    model.h0 = lambda x0, law: 0.0
    model.partials.f0_x0 = lambda x0, law, u0: 0.0
    model.partials.f0_u0 = lambda x0, law, u0: 0.0
    model.partials.h0_x0 = lambda x0, law: 0.0
    model.pi_kernels.dpi_f0 = None
    model.pi_kernels.dpi_h0 = None
    model.u0_argmin = None
    return model


def _broken_kernel_model(params: LQParams):
    """Test fixture: correct dynamics with a deliberately wrong law kernel."""
    model = make_lq_model(params)
    good = model.pi_kernels.dpi_f1

    def bad(x1, x0, u0, law, u1, xi, u):
        base = good(x1, x0, u0, law, u1, xi, u) if good is not None else 0.0
        return base + 0.37 * np.asarray(xi, dtype=float) ** 2

    model.pi_kernels.dpi_f1 = bad
    return model


# ---------------------------------------------------------------------------
# artifact helpers


def _write_manifest(outdir: Path, command: str, cfg: RunConfig, seed, wall: float, artifacts: list[str]):
    import scipy

    manifest = {
        "command": command,
        "config": format_config(cfg.sections),
        "seed": seed,
        "versions": {"mmfg": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "wall_time_s": wall,
        "artifacts": sorted(artifacts),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _write_residual_history(path: Path, eq):
    # timings live in the diagnostics log, not in the reproducible artifact
    with open(path, "w") as f:
        f.write("iter,residual\n")
        for i, r in enumerate(eq.residual_history):
            f.write(f"{i},{r:.17g}\n")


def _write_law_slices(outdir: Path, pi_path, every: int) -> list[str]:
    names = []
    if every <= 0:
        return names
    for n in range(0, len(pi_path), every):
        name = f"law_{n:05d}.csv"
        write_slice_csv(outdir / name, pi_path[n])
        names.append(name)
    return names


def _fixed_paths(cfg: RunConfig, tg: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    x0c = float(cfg.get("equilibrium", "x0_const", 0.5))
    u0c = float(cfg.get("equilibrium", "u0_const", 0.0))
    return np.full(tg.steps + 1, x0c), np.full(tg.steps + 1, u0c)


# ---------------------------------------------------------------------------
# commands


def cmd_solve_equilibrium(cfg: RunConfig, outdir: Path, seed: int | None, quiet: bool) -> int:
    t0 = time.perf_counter()
    grids = cfg.grids()
    model = cfg.model()
    omega = cfg.omega(grids.space)
    x0_path, u0_path = _fixed_paths(cfg, grids.time)
    ep = cfg.equilibrium_params()
    log = None if quiet else (lambda s: print(s))
    eq = solve_fixed_point(model, x0_path, u0_path, omega, grids, log=log, **ep)

    artifacts = []
    _write_residual_history(outdir / "residual_history.csv", eq)
    artifacts.append("residual_history.csv")
    every = int(cfg.get("output", "slices", 0))
    artifacts += _write_law_slices(outdir, eq.pi_path, every)
    if every > 0:
        for n in range(0, grids.time.steps + 1, every):
            name = f"value_{n:05d}.csv"
            write_value_slice_csv(outdir / name, grids.space, eq.value.psi[n], eq.value.feedback[n])
            artifacts.append(name)
    _write_manifest(outdir, "solve-equilibrium", cfg, seed, time.perf_counter() - t0, artifacts)
    if not quiet:
        print(f"converged={eq.converged} iterations={eq.iterations} residual={eq.residual_history[-1]:.3e}")
    return 0 if eq.converged else 2


def cmd_optimize_major(cfg: RunConfig, outdir: Path, seed: int | None, quiet: bool) -> int:
    t0 = time.perf_counter()
    grids = cfg.grids()
    model = cfg.model()
    omega = cfg.omega(grids.space)
    ep = cfg.equilibrium_params()
    mp = cfg.major_params()
    xi0 = float(cfg.get("init", "x0", 0.5))
    log = None if quiet else (lambda s: print(s))
    u0, x0_path, eq, bundle, history = optimize_u0(
        model, omega, grids, xi0=xi0,
        eq_tol=ep["tol"], damping=ep["damping"], eq_max_iter=ep["max_iter"],
        upwind_blend=ep["upwind_blend"], log=log, **mp,
    )
    if bundle is not None:
        resid = u0_stationarity_residual(model, eq, bundle, x0_path, u0, grids, ep["upwind_blend"])
        p_path = bundle.p
    else:
        # a zero-iteration run reports the baseline cost only
        resid = np.zeros(grids.time.steps + 1)
        p_path = np.zeros(grids.time.steps + 1)
    artifacts = []
    with open(outdir / "control.csv", "w") as f:
        f.write("t,u0,residual,p\n")
        for n, t in enumerate(grids.time.times):
            f.write(f"{t:.17g},{u0[n]:.17g},{resid[n]:.17g},{p_path[n]:.17g}\n")
    artifacts.append("control.csv")
    with open(outdir / "j0_history.csv", "w") as f:
        f.write("iter,j0\n")
        for i, j in enumerate(history):
            f.write(f"{i},{j:.17g}\n")
    artifacts.append("j0_history.csv")
    every = int(cfg.get("output", "slices", 0))
    artifacts += _write_law_slices(outdir, eq.pi_path, every)
    if every > 0 and bundle is not None:
        for n in range(0, grids.time.steps + 1, every):
            for name, fieldvals in (("q", bundle.q[n]), ("r", bundle.r[n])):
                fn = f"{name}_{n:05d}.csv"
                with open(outdir / fn, "w") as f:
                    f.write(f"x,{name}\n")
                    for x, val in zip(grids.space.nodes, fieldvals):
                        f.write(f"{x:.17g},{val:.17g}\n")
                artifacts.append(fn)
    _write_manifest(outdir, "optimize-major", cfg, seed, time.perf_counter() - t0, artifacts)
    sup = float(np.max(np.abs(resid)))
    if not quiet:
        print(f"J0={history[-1]:.10g} sup_residual={sup:.3e} outer_iters={len(history) - 1}")
    return 0 if sup <= mp["outer_tol"] or mp["outer_max_iter"] == 0 else 2


def cmd_simulate(cfg: RunConfig, outdir: Path, seed: int | None, quiet: bool) -> int:
    from .simulate import SimConfig, simulate_population, write_trajectories_csv, mc_cost

    t0 = time.perf_counter()
    grids = cfg.grids()
    model = cfg.model()
    omega = cfg.omega(grids.space)
    x0_path, u0_path = _fixed_paths(cfg, grids.time)
    ep = cfg.equilibrium_params()
    eq = solve_fixed_point(model, x0_path, u0_path, omega, grids, **ep)
    if not eq.converged:
        return 2
    simcfg = SimConfig(
        n_agents=int(cfg.get("simulate", "n_agents", 1000)),
        n_paths=int(cfg.get("simulate", "n_paths", 1)),
        seed=int(seed if seed is not None else cfg.get("simulate", "seed", 0)),
        n_steps=int(cfg.get("simulate", "n_steps", grids.time.steps)),
        horizon=grids.time.horizon,
    )
    paths = simulate_population(model, eq.value.feedback, eq.pi_path, x0_path, u0_path, simcfg)
    write_trajectories_csv(outdir / "trajectories.csv", paths)
    j1, se = mc_cost(model, paths, eq.pi_path, x0_path, u0_path, which="J1")
    with open(outdir / "mc_cost.csv", "w") as f:
        f.write("which,estimate,se\n")
        f.write(f"J1,{j1:.17g},{se:.17g}\n")
    _write_manifest(
        outdir, "simulate", cfg, simcfg.seed, time.perf_counter() - t0, ["trajectories.csv", "mc_cost.csv"]
    )
    if not quiet:
        print(f"J1={j1:.6g} (se {se:.2g}), clamp fraction {paths.clamp_fraction:.2%}")
    return 0


def cmd_lq_oracle(cfg: RunConfig, outdir: Path, seed: int | None, quiet: bool) -> int:
    t0 = time.perf_counter()
    grids = cfg.grids()
    params = cfg.lq_params()
    mean = float(cfg.get("init", "mean", 0.3))
    xi0 = float(cfg.get("init", "x0", 0.5))
    nt = grids.time.steps
    oracle = LQOracle(params=params, horizon=grids.time.horizon, nfine=nt * 100, xi0=xi0, xbar0=mean)
    u0c = float(cfg.get("equilibrium", "u0_const", 0.0))
    sol = oracle.for_control_path(np.full(nt, u0c), grids.time)
    with open(outdir / "oracle.csv", "w") as f:
        f.write("t,P,k,x0,xbar,ubar\n")
        idx = np.linspace(0, oracle.nfine, nt + 1).astype(int)
        for i in idx:
            f.write(
                f"{oracle.times[i]:.17g},{sol['P'][i]:.17g},{sol['k'][i]:.17g},"
                f"{sol['x0'][i]:.17g},{sol['xbar'][i]:.17g},{sol['ubar'][i]:.17g}\n"
            )
    _write_manifest(outdir, "lq-oracle", cfg, seed, time.perf_counter() - t0, ["oracle.csv"])
    if not quiet:
        print(f"oracle J0={sol['J0']:.10g} consistency residual={oracle.consistency_residual(sol):.2e}")
    return 0


# ---------------------------------------------------------------------------
# verification suite


def _verify_checks(cfg: RunConfig, quiet: bool):
    """Yield (name, callable) pairs; callables return None (pass), a string
    warning, or raise AssertionError on failure."""
    from . import verifysuite

    return verifysuite.build_checks(cfg)


def cmd_verify(cfg: RunConfig, outdir: Path, seed: int | None, quiet: bool) -> int:
    failures = []
    for name, check in _verify_checks(cfg, quiet):
        try:
            note = check()
        except Exception as exc:
            print(f"FAIL {name}: {exc}")
            failures.append(name)
            continue
        if note:
            print(f"WARN {name}: {note}")
        else:
            print(f"PASS {name}")
    if failures:
        print(f"first failing check: {failures[0]}", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mmfg", description=__doc__)
    parser.add_argument("command", choices=["solve-equilibrium", "optimize-major", "simulate", "verify", "lq-oracle"])
    parser.add_argument("--config", required=True, help="path to the run configuration")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    try:
        cfg = RunConfig.from_path(args.config)
    except FileNotFoundError:
        print(f"config not found: {args.config}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 1

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    dispatch = {
        "solve-equilibrium": cmd_solve_equilibrium,
        "optimize-major": cmd_optimize_major,
        "simulate": cmd_simulate,
        "verify": cmd_verify,
        "lq-oracle": cmd_lq_oracle,
    }
    try:
        return dispatch[args.command](cfg, outdir, args.seed, args.quiet)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
