"""Command-line front end.

Each subcommand reads a YAML config (``--config``), applies flag
overrides, writes its data files into ``--out-dir`` and finishes with a
``manifest.json`` that echoes the config and lists every output with its
SHA-256 checksum.  Exit codes: 0 success, 1 runtime failure, 2 config
error, 3 success with a truncation warning.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from . import __version__
from .bandstructure import (
    LatticeProblem,
    build_wannier,
    write_band_csv,
    write_wannier_csv,
    solve_bloch,
)
from .config import ConfigError, RunConfig, apply_overrides, dump_yaml, load_yaml
from .io import sha256_file, write_csv, write_json
from .mcwf import (
    TRUNCATION_THRESHOLD,
    TrajectoryConfig,
    ValidationOracle,
    branch_occupancy,
    integrate_master_equation,
    joint_distribution,
    run_ensemble,
    run_trajectory,
    time_window_average,
    trajectory_seeds,
)
from .meanfield import (
    BandCache,
    HarmonicModel,
    MeanFieldState,
    WannierModel,
    classify_stability,
    field_steady_state,
    integrate_meanfield,
    solve_selfconsistent_harmonic,
    solve_selfconsistent_wannier,
    stability_matrix,
    stationary_particle_state,
    trace_contour,
    write_branches_csv,
    write_branches_json,
    write_contour_csv,
)
from .model import HilbertGeometry, ModelParams

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_TRUNCATION = 3

THREADS_ENV = "CAVITYLATTICE_THREADS"


class RunContext:
    """Collects output files and warnings for the manifest."""

    def __init__(self, config: RunConfig, command: str, out_dir: Path):
        self.config = config
        self.command = command
        self.out_dir = out_dir
        self.outputs: list[Path] = []
        self.truncation: list[str] = []
        self.seeds: dict[str, list[int]] = {}
        self.started = time.perf_counter()
        self.started_at = datetime.now(timezone.utc).isoformat()

    def path(self, name: str) -> Path:
        path = self.out_dir / name
        self.outputs.append(path)
        return path

    def write_manifest(self) -> Path:
        manifest = {
            "schema_version": 1,
            "command": self.command,
            "code_version": __version__,
            "config": self.config.to_dict(),
            "seeds": self.seeds,
            "started_at": self.started_at,
            "wall_time_s": time.perf_counter() - self.started,
            "truncation_warnings": self.truncation,
            "outputs": [
                {"path": p.name, "sha256": sha256_file(p)} for p in self.outputs
            ],
        }
        return write_json(self.out_dir / "manifest.json", manifest)


def _params(config: RunConfig, delta_c: float | None = None) -> ModelParams:
    p = config.physics
    return ModelParams(p.eta, p.delta_c if delta_c is None else delta_c, p.u0, p.kappa)


def _geometry(config: RunConfig) -> HilbertGeometry:
    g = config.geometry
    return HilbertGeometry(g.n_ph_max, g.j_max, g.even_parity_only)


def _tag(value: float) -> str:
    return format(value, "g").replace("-", "m").replace(".", "p")


def _cache(config: RunConfig, max_band: int) -> BandCache:
    p = config.physics
    return BandCache(p.u0, max(p.eta**2 / p.kappa**2, 1.0), max_band, n_points=config.scan.cache_points)


# subcommands ---------------------------------------------------------------------

def cmd_bands(ctx: RunContext) -> None:
    b = ctx.config.bands
    rows = []
    for depth in b.depths:
        problem = LatticeProblem(depth, b.cutoff, b.q_grid)
        for sol in solve_bloch(problem, b.max_band):
            write_band_csv(ctx.path(f"bands_V{_tag(depth)}_m{sol.m}.csv"), sol)
            rows.append((depth, sol.m, sol.bunching, sol.band_avg_energy, sol.bound, depth == 0.0))
        if depth == 0.0:
            continue
        for m in b.wannier_bands:
            band = build_wannier(problem, m, b.window_periods)
            write_wannier_csv(ctx.path(f"wannier_V{_tag(depth)}_m{m}.csv"), band)
    write_csv(ctx.path("bunching.csv"), ["depth", "m", "b", "band_avg_energy", "bound", "free"], rows)


def _model(config: RunConfig) -> BandCache | None:
    s = config.scan
    if s.model == "harmonic":
        return None
    return _cache(config, max(s.index + 2, max(s.bands, default=0), 8))


def _branches(config: RunConfig, delta_c: float, index: int, cache):
    params = _params(config, delta_c)
    if config.scan.model == "harmonic":
        return solve_selfconsistent_harmonic(index, params)
    return solve_selfconsistent_wannier(index, params, cache)


def cmd_contour(ctx: RunContext) -> None:
    c, s = ctx.config, ctx.config.scan
    p = c.physics
    cache = _model(c)
    points = trace_contour(s.index, s.model, p.eta, p.u0, p.kappa, s.n_samples, cache=cache)
    write_contour_csv(ctx.path(f"contour_{s.model}_{s.index}.csv"), points)


def cmd_roots(ctx: RunContext) -> None:
    c = ctx.config
    cache = _model(c)
    branches = []
    for dc in c.detunings():
        branches.extend(_branches(c, dc, c.scan.index, cache))
    write_branches_csv(ctx.path("roots.csv"), branches)
    write_branches_json(ctx.path("roots.json"), branches)


def cmd_stability(ctx: RunContext) -> None:
    c = ctx.config
    cache = _model(c)
    rows = []
    for dc in c.detunings():
        params = _params(c, dc)
        for br in _branches(c, dc, c.scan.index, cache):
            model = HarmonicModel(br.m, params.u0).raw if br.model == "harmonic" else WannierModel(br.m, cache).exact
            a = stability_matrix(params, br, model)
            rep = classify_stability(a, params, br)
            ev = rep.eigenvalues
            rows.append((br.model, br.m, dc, br.n_mean, br.b, br.delta_eff, rep.slope, rep.determinant,
                         a.trace.real, ev[0].real, ev[0].imag, ev[1].real, ev[1].imag,
                         rep.by_eigenvalues, rep.by_determinant, rep.by_slope, rep.stable, rep.marginal))
    header = ["model", "m", "delta_c", "n", "b", "delta_eff", "slope", "det", "trace",
              "eig0_re", "eig0_im", "eig1_re", "eig1_im", "stable_eig", "stable_det", "stable_slope",
              "stable", "marginal"]
    write_csv(ctx.path("stability.csv"), header, rows)


def cmd_meanfield(ctx: RunContext) -> None:
    c = ctx.config
    mf = c.meanfield
    cache = _model(c)
    for dc in c.detunings():
        params = _params(c, dc)
        branches = _branches(c, dc, c.scan.index, cache)
        if not branches:
            continue
        br = branches[min(mf.branch, len(branches) - 1)]
        psi = stationary_particle_state(mf.j_max, params.u0 * br.n_mean, br.m)
        alpha = field_steady_state(params, br.b) * (1.0 + mf.perturbation)
        series = integrate_meanfield(MeanFieldState(alpha, psi), params, mf.t_final, mf.sample_dt)
        rows = zip(series.times, series.alpha.real, series.alpha.imag, series.n_mean, series.bunching)
        write_csv(ctx.path(f"meanfield_dc{_tag(dc)}.csv"), ["t", "alpha_re", "alpha_im", "n", "b"], rows)


def _trajectory_config(config: RunConfig, delta_c: float | None = None, seed: int | None = None) -> TrajectoryConfig:
    mc = config.mcwf
    return TrajectoryConfig(
        geometry=_geometry(config), params=_params(config, delta_c), n0=mc.n0, j0=mc.j0,
        t_final=mc.t_final, sample_dt=mc.sample_dt, seed=config.seed if seed is None else seed,
        tol=mc.tol, joint_times=tuple(mc.joint_times), shift=mc.shift,
    )


def cmd_mcwf(ctx: RunContext) -> None:
    c = ctx.config
    rec = run_trajectory(_trajectory_config(c))
    ctx.seeds["trajectory"] = [rec.seed]
    rows = zip(rec.times, rec.n_mean, rec.e_kin, rec.bunching, rec.alpha.real, rec.alpha.imag,
               rec.odd_weight, rec.boundary_weight)
    write_csv(ctx.path("trajectory.csv"),
              ["t", "n", "e_kin", "b", "alpha_re", "alpha_im", "odd_weight", "boundary_weight"], rows)
    payload = {"seed": rec.seed, "jump_times": rec.jump_times, "n_steps": rec.n_steps,
               "max_boundary_weight": rec.max_boundary_weight,
               "joint": [{"t": t, "p": m} for t, m in zip(rec.joint_times, rec.joint)]}
    write_json(ctx.path("trajectory.json"), payload)
    if rec.truncation_warning:
        ctx.truncation.append(f"boundary weight {rec.max_boundary_weight:.3e} > {TRUNCATION_THRESHOLD}")


def cmd_ensemble(ctx: RunContext) -> None:
    c = ctx.config
    mc = c.mcwf
    window_rows = []
    for dc in c.detunings():
        cfg = _trajectory_config(c, dc)
        stats = run_ensemble(cfg, mc.trajectories, base_seed=c.seed, workers=c.threads)
        ctx.seeds[f"delta_c={dc:g}"] = list(stats.seeds)
        rows = zip(stats.times, stats.n_mean, stats.n_sem, stats.e_kin, stats.e_kin_sem)
        write_csv(ctx.path(f"ensemble_dc{_tag(dc)}.csv"), ["t", "n", "n_sem", "e_kin", "e_kin_sem"], rows)
        if stats.joint_times.size:
            joint = [{"t": t, "p": joint_distribution(stats, t)} for t in stats.joint_times]
            write_json(ctx.path(f"joint_dc{_tag(dc)}.json"), {"delta_c": dc, "joint": joint})
        if mc.window:
            e = time_window_average(stats, tuple(mc.window), "e_kin")
            n = time_window_average(stats, tuple(mc.window), "n_mean")
            window_rows.append((dc, e.mean, e.sem, n.mean, n.sem, e.samples))
        if stats.truncated_count:
            ctx.truncation.append(f"delta_c={dc:g}: {stats.truncated_count} trajectories above the boundary threshold")
    if window_rows:
        write_csv(ctx.path("window_averages.csv"),
                  ["delta_c", "e_kin", "e_kin_sem", "n", "n_sem", "samples"], window_rows)


def cmd_oracle(ctx: RunContext) -> None:
    c = ctx.config
    cfg = _trajectory_config(c)
    geometry = cfg.geometry
    if geometry.dim > 400:
        raise ConfigError(f"oracle geometry dimension {geometry.dim} exceeds 400")
    stats = run_ensemble(cfg, c.mcwf.trajectories, base_seed=c.seed, workers=c.threads)
    ctx.seeds["ensemble"] = list(stats.seeds)
    oracle = integrate_master_equation(ValidationOracle.pure(cfg.initial_state()), cfg.params,
                                       cfg.t_final, cfg.sample_dt)
    rows = zip(stats.times, stats.n_mean, stats.n_sem, oracle.n_mean, stats.e_kin, stats.e_kin_sem, oracle.e_kin)
    write_csv(ctx.path("oracle_comparison.csv"),
              ["t", "n_mcwf", "n_sem", "n_oracle", "e_kin_mcwf", "e_kin_sem", "e_kin_oracle"], rows)

    def zmax(mean, sem, ref):
        dev = np.abs(mean - ref)
        scale = np.where(sem > 0, sem, np.inf)
        z = np.where(dev > 1e-9, dev / scale, 0.0)
        return float(np.max(z))

    report = {
        "trajectories": stats.count,
        "max_z_n": zmax(stats.n_mean, stats.n_sem, oracle.n_mean),
        "max_z_e_kin": zmax(stats.e_kin, stats.e_kin_sem, oracle.e_kin),
        "max_abs_dev_n": float(np.max(np.abs(stats.n_mean - oracle.n_mean))),
        "max_abs_dev_e_kin": float(np.max(np.abs(stats.e_kin - oracle.e_kin))),
    }
    write_json(ctx.path("oracle_report.json"), report)


def cmd_occupancy(ctx: RunContext) -> None:
    c = ctx.config
    params = _params(c)
    cache = _cache(c, max(max(c.scan.bands, default=0), 8))
    branches = []
    for m in c.scan.bands:
        branches.extend(b for b in solve_selfconsistent_wannier(m, params, cache) if b.stable)
    seeds = trajectory_seeds(c.seed, c.mcwf.trajectories)
    ctx.seeds["trajectories"] = seeds
    series = []
    truncated = 0
    for s in seeds:
        rec = run_trajectory(_trajectory_config(c, seed=s))
        series.append(rec.n_mean)
        truncated += rec.truncation_warning
    occupancy = branch_occupancy(np.concatenate(series), branches, c.mcwf.tolerance_band)
    payload = {
        "branches": [b.to_dict() for b in branches],
        "occupancy": {("transit" if k == "transit" else f"branch_{k}"): v for k, v in occupancy.items()},
    }
    write_json(ctx.path("occupancy.json"), payload)
    if truncated:
        ctx.truncation.append(f"{truncated} trajectories above the boundary threshold")


COMMANDS: dict[str, tuple[Callable[[RunContext], None], str]] = {
    "bands": (cmd_bands, "band energies, Wannier samples and b_m tables"),
    "contour": (cmd_contour, "self-consistent photon-number contour"),
    "roots": (cmd_roots, "self-consistent roots for each detuning"),
    "stability": (cmd_stability, "stability matrices and verdicts for each root"),
    "meanfield": (cmd_meanfield, "coupled field/particle dynamics from a root"),
    "mcwf": (cmd_mcwf, "one quantum-jump trajectory"),
    "ensemble": (cmd_ensemble, "trajectory ensembles for each detuning"),
    "oracle": (cmd_oracle, "ensemble versus density-matrix integration on a small system"),
    "occupancy": (cmd_occupancy, "time spent near each stable branch"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cavitylattice", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="base random seed")
        p.add_argument("--out-dir", type=Path, help="directory for data files and the manifest")
        p.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
        p.add_argument("--eta", type=float)
        p.add_argument("--delta-c", type=float, dest="delta_c")
        p.add_argument("--u0", type=float)
        p.add_argument("--kappa", type=float)
        p.add_argument("--trajectories", type=int)
        p.add_argument("--t-final", type=float, dest="t_final")
        p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then the thread-count env var (if the file leaves it unset), then flags."""
    config = load_yaml(args.config) if args.config else RunConfig()
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV) and not _sets_threads(args.config):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    overrides = {
        "seed": args.seed,
        "threads": threads,
        "out_dir": str(args.out_dir) if args.out_dir else None,
        "physics.eta": args.eta,
        "physics.delta_c": args.delta_c,
        "physics.u0": args.u0,
        "physics.kappa": args.kappa,
        "mcwf.trajectories": args.trajectories,
        "mcwf.t_final": args.t_final,
    }
    return apply_overrides(config, overrides)


def _sets_threads(path: Path | None) -> bool:
    if path is None:
        return False
    data = yaml.safe_load(Path(path).read_text())
    return isinstance(data, dict) and "threads" in data


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dump_config:
        sys.stdout.write(dump_yaml(config))
        return EXIT_OK
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(config, args.command, out_dir)
    handler = COMMANDS[args.command][0]
    try:
        handler(ctx)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # surfaced as a runtime failure with a message
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    ctx.write_manifest()
    for warning in ctx.truncation:
        print(f"truncation warning: {warning}", file=sys.stderr)
    return EXIT_TRUNCATION if ctx.truncation else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
