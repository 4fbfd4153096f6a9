"""Command-line front end.

Every subcommand reads one flat ``key = value`` config (all keys optional),
writes its files into ``<out>/<subcommand>-<config hash>-seed<seed>/`` and
prints one summary line per result row.  Exit status is 0 on success and
otherwise the category code of the error: 2 config, 3 solver, 4 budget,
5 data, 6 simulation, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import shutil
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, config
from . import report as rep
from .config import param
from .diffusion import SimParams, estimate_velocity_direct, simulate_path, write_paths_csv
from .einstein import (
    ExperimentConfig,
    exit_time_check,
    fk_crosscheck,
    girsanov_check,
    rate_experiment,
)
from .elliptic import (
    CubeGrid,
    DiscreteField,
    homogenization_error,
    homogenized_matrix,
    negative_sobolev_norm,
    resolvent_residual,
    solve_clock_resolvent,
    solve_corrector,
    solve_velocity_resolvent,
)
from .environment import EnvParams, build_environment, mean_clock_weight, validate_environment
from .errors import ConfigError, DataError, EinrelError
from .renewal import (
    RegenParams,
    block_diagnostics,
    collect_blocks,
    estimate_clock_rate,
    estimate_velocity_renewal,
    write_blocks_csv,
)


@dataclass(frozen=True)
class RunParams:
    """Keys used by single subcommands."""

    sample_extent: float = param(10.0, "gen-env: half-side of the sampled square", "length")
    sample_n: int = param(41, "gen-env: sample points per axis")
    validate_samples: int = param(10000, "validate-env: random sample points")
    grid_level: int = param(3, "corrector/homogenize: cube level M (side 3^M)")
    corrector_p: tuple[float, ...] = param((1.0, 0.0), "corrector: slope vector p")
    compare_coarser: bool = param(True, "homogenize: also solve one level coarser")
    res_m: int = param(2, "resolvent/fk-check: scale m")
    res_h: int = param(1, "resolvent/fk-check: buffer h")
    rho: float = param(1.0, "resolvent/fk-check: rho >= 1")
    fk_paths: int = param(2000, "fk-check: Monte Carlo paths")
    mc_lam: float = param(0.1, "exit-check/girsanov-check: tilt lambda")
    exit_m: int = param(2, "exit-check: scale m")
    exit_h: tuple[int, ...] = param((0, 1, 2), "exit-check: buffer grid, subset of {0, 1, 2}")
    kappa: float = param(1.0, "exit-check: Laplace multiplier kappa")
    exit_paths: int = param(1000, "exit-check: paths per h")
    exit_pde: bool = param(False, "exit-check: also solve the Dirichlet problem for each h")
    lam_prime: float = param(0.12, "girsanov-check: second tilt lambda'")
    girsanov_t: float = param(50.0, "girsanov-check: time horizon t", "time")
    functional: str = param("position", "girsanov-check: position | clock")
    girsanov_paths: int = param(2000, "girsanov-check: paths per tilt")
    mc_dt: float = param(0.01, "exit/fk/girsanov: Euler-Maruyama step", "time")


CLASSES = (EnvParams, SimParams, RegenParams, ExperimentConfig, RunParams)
COMMANDS = ("gen-env", "validate-env", "simulate", "corrector", "homogenize", "resolvent", "regen",
            "fk-check", "exit-check", "girsanov-check", "einstein-rate")


class RunContext:
    """Resolved configuration plus the run directory and its written files."""

    def __init__(self, command, mapping, out, seed, jobs, quiet):
        self.command = command
        self.mapping = dict(mapping)
        self.jobs = jobs
        self.quiet = quiet
        self.env_params = config.build(EnvParams, mapping)
        self.exp = config.build(ExperimentConfig, mapping)
        self.run = config.build(RunParams, mapping)
        self.regen = config.build(RegenParams, mapping)
        if seed is not None:
            if command == "einstein-rate":
                self.exp = dataclasses.replace(self.exp, exp_seed=seed)
            else:
                self.env_params = dataclasses.replace(self.env_params, seed=seed)
        self.seed = self.exp.exp_seed if command == "einstein-rate" else self.env_params.seed
        self.resolved = {}
        for obj in (self.env_params, self.exp, self.run, self.regen):
            self.resolved.update(config.to_mapping(obj))
        if any(k in mapping for k in config.keys_of(SimParams)) or command in ("simulate", "regen"):
            self.sim = config.build(SimParams, mapping)
            self.resolved.update(config.to_mapping(self.sim))
        h = rep.config_hash({"command": command, **self.resolved})
        self.dir = Path(out) / f"{command}-{h}-seed{self.seed}"
        self.created_dir = False
        self.files: list[Path] = []

    def open(self):
        if not self.dir.exists():
            self.dir.mkdir(parents=True)
            self.created_dir = True
        self.write("config.cfg", config.dump(self.resolved))

    def path(self, name) -> Path:
        p = self.dir / name
        self.files.append(p)
        return p

    def write(self, name, text):
        return rep.write_text(self.path(name), text)

    def json(self, name, body):
        return self.write(name, rep.json_text(self.command, body))

    def say(self, line):
        if not self.quiet:
            print(line)

    def cleanup(self):
        for p in self.files:
            for q in (p, p.with_name(p.name + ".part")):
                if q.exists():
                    q.unlink()
        if self.created_dir and self.dir.exists():
            shutil.rmtree(self.dir, ignore_errors=True)


def _fmt(v):
    return np.array2string(np.asarray(v, dtype=float), precision=6, separator=", ")


# commands ---------------------------------------------------------------


def cmd_gen_env(ctx):
    env = build_environment(ctx.env_params)
    r = ctx.run
    ax = np.linspace(-r.sample_extent, r.sample_extent, r.sample_n)
    d = env.d
    pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), -1).reshape(-1, d)
    s = env.sample(pts)
    rows = []
    for i in range(len(pts)):
        row = {f"x_{k + 1}": float(pts[i, k]) for k in range(d)}
        for a in range(d):
            for b in range(a, d):
                row[f"a_{a + 1}{b + 1}"] = float(s.a[i, a, b])
        row["V"] = float(s.V[i])
        row["clock_weight"] = float(s.clock_weight[i])
        rows.append(row)
    ctx.write("environment.cfg", config.dump(ctx.env_params.to_mapping()))
    ctx.write("field_samples.csv", rep.csv_text(rows))
    info = env.describe()
    info.update(lipschitz_bounds=ctx.env_params.lipschitz_bounds(), eigen_bounds=ctx.env_params.eigen_bounds(),
                lambda_tilde=env.lambda_tilde)
    ctx.json("environment.json", info)
    ctx.say(f"environment seed={ctx.env_params.seed} kind={ctx.env_params.field_kind} "
            f"samples={len(pts)} V in [{s.V.min():.4f}, {s.V.max():.4f}]")


def cmd_validate_env(ctx):
    env = build_environment(ctx.env_params)
    v = validate_environment(env, ctx.run.validate_samples, seed=ctx.env_params.seed)
    ctx.json("validation.json", v.to_dict())
    ctx.say(f"validation samples={v.n_samples} eig=[{v.eig_min:.4f}, {v.eig_max:.4f}] max|V|={v.max_abs_v:.4f} "
            f"dq_a={v.max_dq_a:.4f} dq_V={v.max_dq_v:.4f} passed={v.passed}")
    if not v.passed:
        raise DataError(f"environment violates: {', '.join(v.violations)}")


def cmd_simulate(ctx):
    env = build_environment(ctx.env_params)
    sim = ctx.sim
    paths = [simulate_path(env, sim, path_id=p) for p in range(sim.n_paths)]
    write_paths_csv(ctx.path("paths.csv"), paths)
    rows = []
    for p in paths:
        row = {"path_id": p.path_id, "steps": len(p.clock) - 1, "exit_index": p.exit_index}
        row.update({f"y_{i + 1}": float(v) for i, v in enumerate(p.positions[-1])})
        row["clock"] = float(p.clock[-1])
        rows.append(row)
        ctx.say(f"path {p.path_id}: Y(end)={_fmt(p.positions[-1])} A(end)={p.clock[-1]:.6f}")
    body = {"paths": rows}
    if sim.lam > 0 and sim.horizon >= 10 * sim.lam ** -2 and sim.cube_level is None:
        v, se = estimate_velocity_direct(env, sim, ctx.jobs)
        body["velocity_direct"] = {"estimate": v, "std_error": se}
        ctx.say(f"direct velocity {_fmt(v)} +- {_fmt(se)}")
    ctx.json("simulation.json", body)


def _grid(ctx, level):
    return CubeGrid.for_spacing(level, ctx.exp.grid_spacing, ctx.env_params.d)


def cmd_corrector(ctx):
    env = build_environment(ctx.env_params)
    grid = _grid(ctx, ctx.run.grid_level)
    p = np.asarray(ctx.run.corrector_p, dtype=float)
    if len(p) != env.d:
        raise ConfigError(f"corrector_p needs {env.d} entries")
    w, r = solve_corrector(env, grid, p, ctx.exp.solver_tol, ctx.exp.preconditioner)
    w.to_csv(ctx.path("corrector.csv"))
    ctx.json("corrector.json", {"M": grid.M, "N": grid.N, "h": grid.h, "p": p, "solve": r.to_dict(),
                                "value_at_origin": float(w.at_origin())})
    ctx.say(f"corrector M={grid.M} N={grid.N} iterations={r.iterations} residual={r.relative_residual:.3e}")


def cmd_homogenize(ctx):
    env = build_environment(ctx.env_params)
    grid = _grid(ctx, ctx.run.grid_level)
    res = homogenized_matrix(env, grid, ctx.exp.solver_tol, ctx.exp.preconditioner, ctx.run.compare_coarser)
    ctx.json("homogenized.json", {"M": grid.M, "N": grid.N, "h": grid.h, **res.to_dict()})
    ctx.say(f"a_bar = {_fmt(res.matrix).replace(chr(10), '')} asymmetry={res.asymmetry:.2e}")


def cmd_resolvent(ctx):
    env = build_environment(ctx.env_params)
    r = ctx.run
    grid = _grid(ctx, r.res_m + r.res_h)
    hom = homogenized_matrix(env, _grid(ctx, ctx.exp.hom_level), ctx.exp.solver_tol, ctx.exp.preconditioner,
                             compare_coarser=False)
    w_bar, w_se = mean_clock_weight(env, ctx.exp.clock_samples, seed=ctx.env_params.seed)
    u, reps = solve_velocity_resolvent(env, grid, r.res_m, r.res_h, r.rho, hom.matrix, ctx.exp.solver_tol,
                                       ctx.exp.preconditioner)
    q, qrep = solve_clock_resolvent(env, grid, r.res_m, r.res_h, r.rho, w_bar, ctx.exp.solver_tol,
                                    ctx.exp.preconditioner)
    pts = grid.coords().reshape(grid.n_nodes, grid.d)
    centred = DiscreteField(grid, (env.clock_weight(pts) - w_bar).reshape(grid.shape))
    U = homogenization_error(u, hom.matrix, r.res_m)
    u.to_csv(ctx.path("velocity_resolvent.csv"))
    q.to_csv(ctx.path("clock_resolvent.csv"))
    body = {
        "m": r.res_m, "h": r.res_h, "rho": r.rho, "lam": r.rho * 3.0 ** -r.res_m, "N": grid.N, "h_grid": grid.h,
        "a_bar": hom.matrix, "mean_weight": w_bar, "mean_weight_se": w_se,
        "u_origin": u.at_origin(), "U_m": U, "q_origin": float(q.at_origin()),
        "residual": resolvent_residual(env, u, r.res_m, r.res_h, r.rho),
        "negative_sobolev_centred_weight": negative_sobolev_norm(centred),
        "solves": [x.to_dict() for x in reps + [qrep]],
    }
    ctx.json("resolvent.json", body)
    ctx.say(f"m={r.res_m} h={r.res_h} rho={r.rho:g}: U_m(0)={_fmt(U)} q_m(0)={float(q.at_origin()):.6g}")


def cmd_regen(ctx):
    env = build_environment(ctx.env_params)
    blocks = collect_blocks(env, ctx.sim, ctx.regen, ctx.jobs)
    write_blocks_csv(ctx.path("blocks.csv"), blocks)
    ell, ell_se = estimate_velocity_renewal(blocks)
    eta, eta_se = estimate_clock_rate(blocks)
    acc, tested = blocks.acceptance()
    diag = block_diagnostics(blocks, env.lambda_ellipticity, minimum=100)
    ctx.json("regeneration.json", {"velocity": ell, "velocity_se": ell_se, "clock_rate": eta,
                                   "clock_rate_se": eta_se, "acceptance": acc, "candidates": tested,
                                   "diagnostics": diag.to_dict()})
    ctx.say(f"blocks={len(blocks.usable())} l={_fmt(ell)} +- {_fmt(ell_se)} eta={eta:.6f} +- {eta_se:.6f} "
            f"acceptance={acc:.4f}")


def cmd_fk_check(ctx):
    env = build_environment(ctx.env_params)
    r = ctx.run
    hom = homogenized_matrix(env, _grid(ctx, ctx.exp.hom_level), ctx.exp.solver_tol, ctx.exp.preconditioner,
                             compare_coarser=False)
    res = fk_crosscheck(env, r.res_m, r.res_h, r.rho, r.fk_paths, grid=_grid(ctx, r.res_m + r.res_h),
                        a_bar=hom.matrix, dt=r.mc_dt, sim_seed=ctx.env_params.seed, tol=ctx.exp.solver_tol,
                        jobs=ctx.jobs)
    ctx.json("fk_check.json", res.to_dict())
    ctx.say(f"pde={_fmt(res.pde_value)} mc={_fmt(res.mc_value)} +- {_fmt(res.mc_std_error)} passed={res.passed}")


def cmd_exit_check(ctx):
    env = build_environment(ctx.env_params)
    r = ctx.run
    t = exit_time_check(env, r.mc_lam, r.exit_m, r.exit_h, r.kappa, r.exit_paths, dt=r.mc_dt,
                        sim_seed=ctx.env_params.seed, with_pde=r.exit_pde, jobs=ctx.jobs)
    ctx.json("exit_check.json", t.to_dict())
    ctx.write("exit_check.csv", rep.csv_text([row.__dict__ for row in t.rows]))
    for row in t.rows:
        ctx.say(f"h={row.h}: E[exp(-c tau)]={row.estimate:.6f} +- {row.std_error:.6f}"
                + ("" if row.pde_value is None else f" pde={row.pde_value:.6f}"))
    ctx.say(f"slope in 3^h: {t.slope:.6f}")


def cmd_girsanov_check(ctx):
    env = build_environment(ctx.env_params)
    r = ctx.run
    g = girsanov_check(env, r.mc_lam, r.lam_prime, r.girsanov_t, r.functional, r.girsanov_paths, dt=r.mc_dt,
                       sim_seed=ctx.env_params.seed, jobs=ctx.jobs)
    ctx.json("girsanov_check.json", g.to_dict())
    ctx.say(f"lhs={g.lhs:.6g} rhs={g.rhs:.6g} sigma={g.sigma:.3g} C={g.constant:.4g} verdict={g.verdict}")


def cmd_einstein_rate(ctx):
    ctx.env_params.validate()
    report = rate_experiment(ctx.exp, ctx.env_params, ctx.regen, ctx.jobs)
    body = report.to_dict()
    ctx.json("report.json", body)
    ctx.write("report.csv", rep.csv_text(report.rows))
    ctx.write("loglog.txt", rep.loglog_text([r["lam"] for r in report.rows], [r["error_norm"] for r in report.rows]))
    rep.plot_rate(ctx.path("rate.png"), body)
    for row in report.rows:
        ctx.say(f"seed={row['seed']} lam={row['lam']:g} |error|={row['error_norm']:.4g} +- "
                f"{row['error_norm_se']:.2g} blocks={row['n_blocks']}")
    f = report.pooled_fit
    if f.degenerate:
        ctx.say(f"fit degenerate: {f.note}")
    else:
        ctx.say(f"pooled beta={f.beta:.4f} CI95=[{f.ci95[0]:.4f}, {f.ci95[1]:.4f}] split_agree={report.split_agree}")


HANDLERS = {
    "gen-env": cmd_gen_env, "validate-env": cmd_validate_env, "simulate": cmd_simulate,
    "corrector": cmd_corrector, "homogenize": cmd_homogenize, "resolvent": cmd_resolvent,
    "regen": cmd_regen, "fk-check": cmd_fk_check, "exit-check": cmd_exit_check,
    "girsanov-check": cmd_girsanov_check, "einstein-rate": cmd_einstein_rate,
}


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (flat 'key = value' file, '#' comments):\n" + config.describe(CLASSES)
    epilog += ("\n\nexit status: 0 ok, 1 other, 2 config, 3 solver, 4 budget, 5 data, 6 simulation."
               "\n--seed replaces 'seed' (environment), or 'exp_seed' for einstein-rate.")
    p = argparse.ArgumentParser(prog="einrel", description="Einstein-relation numerics for tilted diffusions "
                                "in random environments.", epilog=epilog,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="config file path")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--quiet", action="store_true", help="suppress summary lines")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    ctx = None
    try:
        mapping = config.read(args.config) if args.config else {}
        config.check_known(mapping, CLASSES)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        ctx = RunContext(args.command, mapping, args.out, args.seed, args.jobs, args.quiet)
        ctx.open()
        HANDLERS[args.command](ctx)
        if not args.quiet:
            print(f"output: {ctx.dir}")
        return 0
    except EinrelError as e:
        if ctx is not None:
            ctx.cleanup()
        print(f"einrel: {e.category} error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # unexpected: keep the traceback
        if ctx is not None:
            ctx.cleanup()
        traceback.print_exc()
        print(f"einrel: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
