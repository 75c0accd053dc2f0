"""Command-line driver: convergence studies, vesicle runs, solver benchmarks.

Configuration is INI-style (configparser) with sections [geometry],
[discretization], [flow], [tolerances], [vesicles], [timestepping],
[flags], [output], [sweep], [bench]; every key has a documented default
and the common ones can be overridden by flags. Numeric CSV fields are
written with 17 significant digits so repeated runs are bit-identical.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, fds
from . import periodize as pz
from . import vesicle as vs
from .errors import (ConfigError, GeometryError, NearFieldError,
                     NumericalError, SingularityError)
from .geometry import ClosedCurve, build_wall_geometry
from .kernels import KernelContext
from .linalg import gmres

TEST_POINTS = np.array([[0.8, 3.2, 4.8], [0.0, 0.0, 0.0]])


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class SimConfig:
    shape: str = "flat"
    shape_params: dict = field(default_factory=lambda: {"h": 1.0})
    d: float = 2.0 * np.pi
    n_wall: int = 500
    n_side: int = 32
    n_proxy: int = 128
    proxy_radius: float | None = None
    mu: float = 0.7
    p_drive: float | None = None       # default 2*alpha*mu*d with alpha = 0.2
    fds_eps: float = 1e-10
    gmres_tol: float = 1e-10
    pinv_tol: float = 1e-8
    n_max: int = 45
    vesicle_count: int = 0
    vesicle_m: int = 64
    vesicle_radius: float = 0.3
    vesicle_aspect: float = 1.0
    vesicle_kappa_b: float = 1.0
    vesicle_y_offset: float = 0.0
    vesicle_stagger: float = 0.0
    dt: float = 5e-3
    steps: int = 100
    use_alc: bool = True
    use_area_fix: bool = True
    use_reparam: bool = True
    picard_init: bool = False
    out_dir: str = "out"
    cache_dir: str | None = None
    sweep_n: list[int] = field(default_factory=list)
    sweep_k: list[int] = field(default_factory=list)
    bench_n: list[int] = field(default_factory=lambda: [500, 1000, 2000, 4000])
    bench_dense_max: int = 4000
    bench_gmres: bool = False

    def resolved_p_drive(self) -> float:
        if self.p_drive is not None:
            return self.p_drive
        return 2.0 * 0.2 * self.mu * self.d

    def validate(self) -> None:
        if self.mu <= 0:
            raise ConfigError("flow.mu must be positive")
        if self.d <= 0:
            raise ConfigError("geometry.d must be positive")
        for name in ("n_wall", "n_side", "n_proxy", "vesicle_m", "steps", "n_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.dt <= 0:
            raise ConfigError("timestepping.dt must be positive")
        for name in ("fds_eps", "gmres_tol", "pinv_tol"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.vesicle_count < 0:
            raise ConfigError("vesicles.count must be >= 0")


_SHAPE_PARAM_KEYS = {"h", "a", "k", "s", "a1", "a2"}


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.replace(",", " ").split()]


def load_config(path: str | None, overrides: argparse.Namespace) -> SimConfig:
    cfg = SimConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path!r}")
        try:
            _apply_ini(cfg, parser)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    _apply_flags(cfg, overrides)
    cfg.validate()
    return cfg


def _apply_ini(cfg: SimConfig, parser: configparser.ConfigParser) -> None:
    g = parser["geometry"] if parser.has_section("geometry") else {}
    if "shape" in g:
        cfg.shape = g["shape"]
    if "d" in g:
        cfg.d = float(g["d"])
    cfg.shape_params = {k: float(v) if k != "k" else int(v)
                        for k, v in g.items() if k in _SHAPE_PARAM_KEYS}
    if not cfg.shape_params and cfg.shape == "flat":
        cfg.shape_params = {"h": 1.0}
    dd = parser["discretization"] if parser.has_section("discretization") else {}
    for key, attr, conv in (("n_wall", "n_wall", int), ("n_side", "n_side", int),
                            ("n_proxy", "n_proxy", int),
                            ("proxy_radius", "proxy_radius", float)):
        if key in dd:
            setattr(cfg, attr, conv(dd[key]))
    fl = parser["flow"] if parser.has_section("flow") else {}
    if "mu" in fl:
        cfg.mu = float(fl["mu"])
    if "p_drive" in fl:
        cfg.p_drive = float(fl["p_drive"])
    tol = parser["tolerances"] if parser.has_section("tolerances") else {}
    for key in ("fds_eps", "gmres_tol", "pinv_tol"):
        if key in tol:
            setattr(cfg, key, float(tol[key]))
    if "n_max" in tol:
        cfg.n_max = int(tol["n_max"])
    v = parser["vesicles"] if parser.has_section("vesicles") else {}
    for key, attr, conv in (("count", "vesicle_count", int),
                            ("m", "vesicle_m", int),
                            ("radius", "vesicle_radius", float),
                            ("aspect", "vesicle_aspect", float),
                            ("kappa_b", "vesicle_kappa_b", float),
                            ("y_offset", "vesicle_y_offset", float),
                            ("stagger", "vesicle_stagger", float)):
        if key in v:
            setattr(cfg, attr, conv(v[key]))
    ts = parser["timestepping"] if parser.has_section("timestepping") else {}
    if "dt" in ts:
        cfg.dt = float(ts["dt"])
    if "steps" in ts:
        cfg.steps = int(ts["steps"])
    flg = parser["flags"] if parser.has_section("flags") else {}
    for key, attr in (("alc", "use_alc"), ("area_fix", "use_area_fix"),
                      ("reparam", "use_reparam"), ("picard_init", "picard_init")):
        if key in flg:
            cfg_val = flg[key].strip().lower()
            if cfg_val not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"flags.{key}: boolean expected, got {flg[key]!r}")
            setattr(cfg, attr, cfg_val in ("true", "1", "yes"))
    out = parser["output"] if parser.has_section("output") else {}
    if "dir" in out:
        cfg.out_dir = out["dir"]
    if "cache_dir" in out:
        cfg.cache_dir = out["cache_dir"]
    sw = parser["sweep"] if parser.has_section("sweep") else {}
    if "n_list" in sw:
        cfg.sweep_n = _parse_int_list(sw["n_list"])
    if "k_list" in sw:
        cfg.sweep_k = _parse_int_list(sw["k_list"])
    bn = parser["bench"] if parser.has_section("bench") else {}
    if "n_list" in bn:
        cfg.bench_n = _parse_int_list(bn["n_list"])
    if "dense_max" in bn:
        cfg.bench_dense_max = int(bn["dense_max"])
    if "gmres_compare" in bn:
        cfg.bench_gmres = bn["gmres_compare"].strip().lower() in ("true", "1", "yes")


def _apply_flags(cfg: SimConfig, ns: argparse.Namespace) -> None:
    if getattr(ns, "geometry", None):
        cfg.shape = ns.geometry
    if getattr(ns, "n_wall", None):
        cfg.n_wall = ns.n_wall
    if getattr(ns, "n_side", None):
        cfg.n_side = ns.n_side
    if getattr(ns, "n_proxy", None):
        cfg.n_proxy = ns.n_proxy
    if getattr(ns, "dt", None):
        cfg.dt = ns.dt
    if getattr(ns, "steps", None):
        cfg.steps = ns.steps
    if getattr(ns, "tol", None):
        cfg.fds_eps = ns.tol
    if getattr(ns, "out", None):
        cfg.out_dir = ns.out
    if getattr(ns, "no_alc", False):
        cfg.use_alc = False
    if getattr(ns, "no_area_fix", False):
        cfg.use_area_fix = False
    if getattr(ns, "no_reparam", False):
        cfg.use_reparam = False
    if getattr(ns, "dense_oracle", False):
        cfg.bench_gmres = True


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _build_channel(cfg: SimConfig, n_wall: int | None = None,
                   n_side: int | None = None, n_proxy: int | None = None):
    walls = build_wall_geometry(cfg.shape, n_wall or cfg.n_wall,
                                n_side or cfg.n_side, d=cfg.d,
                                **cfg.shape_params)
    proxy = pz.build_proxy_basis(walls, n_proxy or cfg.n_proxy,
                                 radius=cfg.proxy_radius)
    return walls, proxy


def _field_errors(walls, proxy, tau, c, ctx, p_drive):
    """Velocity and pressure errors at the reference interior points, and the
    periodic pressure-drop error measured at a matched side pair."""
    alpha = pz.poiseuille_alpha(p_drive, ctx, walls.period)
    u, p = pz.eval_flow(walls, proxy, tau, c, TEST_POINTS, ctx)
    ue = pz.poiseuille_velocity(TEST_POINTS, alpha)
    pe = pz.poiseuille_pressure(TEST_POINTS, alpha, ctx)
    umax = abs(alpha) * float(np.max(walls.upper.nodes[1] ** 2))
    err_u = float(np.max(np.hypot(*(u - ue))) / umax)
    shift = p[0] - pe[0]
    err_p = float(np.max(np.abs(p - pe - shift)) / abs(p_drive))
    pair = np.array([[0.1, 0.1 + walls.period], [0.0, 0.0]])
    _, pp = pz.eval_flow(walls, proxy, tau, c, pair, ctx)
    err_drop = float(abs((pp[1] - pp[0]) - p_drive) / abs(p_drive))
    return err_u, err_p, err_drop


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# empty-pipe: periodization convergence study
# ---------------------------------------------------------------------------

def cmd_empty_pipe(cfg: SimConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    ctx = KernelContext(mu=cfg.mu)
    p_drive = cfg.resolved_p_drive()
    rows = []
    sweeps: list[tuple[int, int, int]] = []
    if cfg.sweep_n:
        sweeps += [(n, cfg.n_side, cfg.n_proxy) for n in cfg.sweep_n]
    if cfg.sweep_k:
        sweeps += [(cfg.n_wall, k, 4 * k) for k in cfg.sweep_k]
    if not sweeps:
        sweeps = [(cfg.n_wall, cfg.n_side, cfg.n_proxy)]
    for n, k, m in sweeps:
        walls, proxy = _build_channel(cfg, n_wall=n, n_side=k, n_proxy=m)
        solver = fds.precompute(walls, proxy, ctx, eps=cfg.fds_eps,
                                n_max=cfg.n_max, pinv_tol=cfg.pinv_tol)
        data = pz.poiseuille_data(walls, ctx, p_drive)
        tau, c = solver.solve(data)
        err_u, err_p, err_drop = _field_errors(walls, proxy, tau, c, ctx, p_drive)
        rows.append((n, k, m, err_u, err_p, err_drop))
        print(f"N={n} K={k} M={m}: err_u={err_u:.3e} err_p={err_p:.3e} "
              f"drop={err_drop:.3e}")
    csv_path = os.path.join(cfg.out_dir, "empty_pipe.csv")
    lines = ["# periflow empty-pipe convergence, schema v1",
             "N,K,M,err_u,err_p"]
    for n, k, m, eu, ep, _ in rows:
        lines.append(f"{n},{k},{m},{_fmt(eu)},{_fmt(ep)}")
    _atomic_write(csv_path, "\n".join(lines) + "\n")
    summary = {
        "version": __version__,
        "shape": cfg.shape,
        "p_drive": p_drive,
        "rows": [{"N": n, "K": k, "M": m, "err_u": eu, "err_p": ep,
                  "err_drop": ed} for n, k, m, eu, ep, ed in rows],
    }
    _atomic_write(os.path.join(cfg.out_dir, "empty_pipe_summary.json"),
                  json.dumps(summary, indent=2))
    return 0


# ---------------------------------------------------------------------------
# simulate: vesicle suspension run
# ---------------------------------------------------------------------------

def place_vesicles(cfg: SimConfig, walls) -> list[vs.VesicleState]:
    states = []
    d = cfg.d
    for i in range(cfg.vesicle_count):
        cx = (i + 0.5) * d / max(cfg.vesicle_count, 1)
        cy = cfg.vesicle_y_offset + cfg.vesicle_stagger * (1 if i % 2 else -1)
        r = cfg.vesicle_radius
        a_ax = r * cfg.vesicle_aspect
        curve = ClosedCurve.ellipse(a_ax, r, cfg.vesicle_m, center=(cx, cy))
        states.append(vs.VesicleState.from_curve(curve, kappa_b=cfg.vesicle_kappa_b))
    return states


def _channel_solver(cfg: SimConfig, walls, proxy, ctx):
    if cfg.cache_dir:
        os.makedirs(cfg.cache_dir, exist_ok=True)
        key = fds.solver_cache_key(walls, proxy, cfg.fds_eps)
        path = os.path.join(cfg.cache_dir, f"solver_{key}.npz")
        if os.path.exists(path):
            try:
                return fds.load_solver(path, walls, proxy, ctx)
            except ValueError:
                pass
        solver = fds.precompute(walls, proxy, ctx, eps=cfg.fds_eps,
                                n_max=cfg.n_max, pinv_tol=cfg.pinv_tol)
        fds.save_solver(solver, path)
        return solver
    return fds.precompute(walls, proxy, ctx, eps=cfg.fds_eps,
                          n_max=cfg.n_max, pinv_tol=cfg.pinv_tol)


def cmd_simulate(cfg: SimConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    ctx = KernelContext(mu=cfg.mu)
    p_drive = cfg.resolved_p_drive()
    walls, proxy = _build_channel(cfg)
    t_pre0 = time.perf_counter()
    solver = _channel_solver(cfg, walls, proxy, ctx)
    t_pre = time.perf_counter() - t_pre0

    states = place_vesicles(cfg, walls)
    options = vs.StepOptions(dt=cfg.dt, gmres_tol=cfg.gmres_tol,
                             use_alc=cfg.use_alc, use_area_fix=cfg.use_area_fix,
                             use_reparam=cfg.use_reparam)
    stepper = vs.VesicleStepper(ctx, options, walls=walls, channel_solver=solver,
                                proxy=proxy, p_drive=p_drive)
    if cfg.picard_init and states:
        states = stepper.picard_tension_init(states)

    ves_path = os.path.join(cfg.out_dir, "vesicles.csv")
    rec_path = os.path.join(cfg.out_dir, "records.jsonl")
    records = []
    with open(ves_path, "w") as ves_fh, open(rec_path, "w") as rec_fh:
        ves_fh.write("# periflow simulate states, schema v1\n")
        ves_fh.write("step,vesicle,node,x1,x2,sigma\n")
        _write_states(ves_fh, 0, states)
        for step_idx in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            if states:
                states, rep = stepper.step(states)
                record = {
                    "step": step_idx,
                    "wall_seconds": time.perf_counter() - t0,
                    "gmres_iterations": rep.gmres_iterations,
                    "gmres_residual": rep.gmres_residual,
                    "inextensibility_residual": rep.inextensibility_residual,
                    "perimeter_error": rep.arclength_error_post,
                    "area_error": rep.area_error_post,
                    "max_velocity_strain": rep.max_velocity_strain,
                    "phase_seconds": rep.phase_seconds,
                }
            else:
                data = pz.poiseuille_data(walls, ctx, p_drive)
                t1 = time.perf_counter()
                tau, c = solver.solve(data)
                t_solve = time.perf_counter() - t1
                u, _ = pz.eval_flow(walls, proxy, tau, c, TEST_POINTS, ctx)
                record = {
                    "step": step_idx,
                    "wall_seconds": time.perf_counter() - t0,
                    "probe_velocity": [float(x) for x in u.ravel()],
                    "phase_seconds": {"solve_tau_c": t_solve},
                }
            _write_states(ves_fh, step_idx, states)
            rec_fh.write(json.dumps(record) + "\n")
            rec_fh.flush()
            os.fsync(rec_fh.fileno())
            records.append(record)

    manifest = {
        "version": __version__,
        "config": {k: (v if not isinstance(v, dict) else dict(v))
                   for k, v in vars(cfg).items()},
        "p_drive": p_drive,
        "precompute_seconds": t_pre,
        "steps": records,
        "summary": _run_summary(records),
    }
    _atomic_write(os.path.join(cfg.out_dir, "manifest.json"),
                  json.dumps(manifest, indent=2, default=float))
    return 0


def _write_states(fh, step_idx: int, states) -> None:
    for vi, s in enumerate(states):
        for j in range(s.m):
            fh.write(f"{step_idx},{vi},{j},{_fmt(s.curve.nodes[0, j])},"
                     f"{_fmt(s.curve.nodes[1, j])},{_fmt(s.sigma[j])}\n")


def _run_summary(records: list[dict]) -> dict:
    if not records:
        return {}
    out = {"n_steps": len(records),
           "total_seconds": float(sum(r["wall_seconds"] for r in records))}
    if "perimeter_error" in records[-1]:
        out["max_perimeter_error"] = float(max(r["perimeter_error"]
                                               for r in records))
        out["max_area_error"] = float(max(r["area_error"] for r in records))
        solve_frac = [sum(v for k, v in r["phase_seconds"].items()
                          if k == "solve_tau_c") / r["wall_seconds"]
                      for r in records]
        out["els_apply_fraction_max"] = float(max(solve_frac))
    return out


# ---------------------------------------------------------------------------
# fds-bench: solver scaling study
# ---------------------------------------------------------------------------

def cmd_fds_bench(cfg: SimConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    ctx = KernelContext(mu=cfg.mu)
    p_drive = cfg.resolved_p_drive()
    rows = []
    for n in cfg.bench_n:
        walls, proxy = _build_channel(cfg, n_wall=n)
        data = pz.poiseuille_data(walls, ctx, p_drive)
        t0 = time.perf_counter()
        solver = fds.precompute(walls, proxy, ctx, eps=cfg.fds_eps,
                                n_max=cfg.n_max, pinv_tol=cfg.pinv_tol)
        t_pre = time.perf_counter() - t0
        solver.solve(data)  # warm caches before timing
        reps = 3
        t0 = time.perf_counter()
        for _ in range(reps):
            tau, c = solver.solve(data)
        t_solve = (time.perf_counter() - t0) / reps
        alpha = pz.poiseuille_alpha(p_drive, ctx, walls.period)
        pt = np.array([[0.8], [0.0]])
        u, _ = pz.eval_flow(walls, proxy, tau, c, pt, ctx)
        err = float(np.max(np.abs(u - pz.poiseuille_velocity(pt, alpha))))

        t_lu = t_gm = float("nan")
        if n <= cfg.bench_dense_max:
            import scipy.linalg
            blocks = pz.assemble_els(walls, proxy, ctx)
            lu = scipy.linalg.lu_factor(blocks.a)
            v = data.stacked_v()
            t0 = time.perf_counter()
            for _ in range(reps):
                scipy.linalg.lu_solve(lu, v)
            t_lu = (time.perf_counter() - t0) / reps
            if cfg.bench_gmres:
                t0 = time.perf_counter()
                _, iters, _ = gmres(lambda x: blocks.a @ x, v, tol=1e-12,
                                    max_iter=400)
                t_gm = time.perf_counter() - t0
            del blocks, lu
        rows.append((n, t_pre, t_solve, err, t_lu, t_gm))
        print(f"N={n}: T_pre={t_pre:.3f}s T_solve={t_solve*1e3:.2f}ms "
              f"E={err:.3e} T_lu={t_lu*1e3 if t_lu == t_lu else float('nan'):.2f}ms")
    lines = ["# periflow fds-bench, schema v1",
             "N,T_pre,T_solve,E,T_lu_solve,T_gmres"]
    for row in rows:
        lines.append(",".join([str(row[0])] + [_fmt(x) for x in row[1:]]))
    _atomic_write(os.path.join(cfg.out_dir, "fds_bench.csv"),
                  "\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="periflow",
        description="Pressure-driven Stokes flow in smooth periodic channels "
                    "with an inextensible-vesicle suspension")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("empty-pipe", "periodization convergence study"),
                            ("simulate", "vesicle suspension time stepping"),
                            ("fds-bench", "fast direct solver scaling table")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--geometry", help="wall shape name "
                                          "(flat, sine, pinch, serpentine)")
        p.add_argument("--n-wall", type=int, help="nodes per wall")
        p.add_argument("--n-side", type=int, help="side collocation nodes")
        p.add_argument("--n-proxy", type=int, help="proxy sources")
        p.add_argument("--dt", type=float, help="time step")
        p.add_argument("--steps", type=int, help="number of steps")
        p.add_argument("--tol", type=float, help="fast-solver tolerance")
        p.add_argument("--out", help="output directory")
        p.add_argument("--dense-oracle", action="store_true",
                       help="enable dense cross-check columns")
        p.add_argument("--no-alc", action="store_true",
                       help="disable the arc-length corrected constraint")
        p.add_argument("--no-area-fix", action="store_true",
                       help="disable the per-step area correction")
        p.add_argument("--no-reparam", action="store_true",
                       help="disable per-step reparameterization")
    return parser


_COMMANDS = {
    "empty-pipe": cmd_empty_pipe,
    "simulate": cmd_simulate,
    "fds-bench": cmd_fds_bench,
}


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("PERIFLOW_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = load_config(ns.config, ns)
        return _COMMANDS[ns.command](cfg)
    except (ConfigError, GeometryError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, NearFieldError, SingularityError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
