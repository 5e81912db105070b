"""Command line entry point: ``lemonmap <verb> [options]``."""
from __future__ import annotations

import json
import logging
import sys
import traceback
from pathlib import Path

import click
from threadpoolctl import threadpool_limits

from . import io
from .config import CLI_STAGES, ConfigError, PipelineConfig, load_config


def _config(path, seed, out, stage, threads, session=None) -> PipelineConfig:
    try:
        cfg = load_config(path) if path else PipelineConfig()
    except ConfigError as exc:
        raise click.BadParameter(str(exc), param_hint="--config") from None
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["out"] = str(out)
    if stage is not None:
        changes["stage"] = CLI_STAGES[stage]
    if threads is not None:
        changes["threads"] = threads
    if session is not None:
        changes["session_dir"] = str(session)
    cfg = cfg.with_run(**changes) if changes else cfg
    threadpool_limits(cfg.run.threads)  # BLAS pools; the driver itself is single-threaded
    return cfg


def _fail(out: Path | None, exc: Exception) -> None:
    err = {"error": type(exc).__name__, "message": str(exc)}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "error.json", {**err, "traceback": traceback.format_exc()})
    click.echo(json.dumps(err), err=True)
    sys.exit(1)


common = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                 help="TOML configuration file."),
    click.option("--seed", type=int, default=None, help="Simulation and RANSAC seed."),
    click.option("--out", type=click.Path(file_okay=False), default=None,
                 help="Output directory."),
    click.option("--threads", type=click.IntRange(min=1), default=None,
                 help="Cap on worker threads."),
]


def with_common(f):
    for opt in reversed(common):
        f = opt(f)
    return f


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose: int) -> None:
    """Multi-session point-cloud map merging."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@with_common
def simulate(config_path, seed, out, threads):
    """Write a simulated multi-robot session directory."""
    from .pipeline import save_session
    from .sim import generate_session

    cfg = _config(config_path, seed, out, None, threads)
    dest = Path(cfg.run.out)
    try:
        bundle = generate_session(cfg.sim.session_spec(cfg.run.seed))
        save_session(bundle, dest)
    except (ValueError, OSError) as exc:
        _fail(dest, exc)
    click.echo(f"wrote {len(bundle.keys())} poses, {len(bundle.loops)} loop candidates to {dest}")


@main.command()
@with_common
@click.option("--stage", type=click.Choice(sorted(CLI_STAGES)), default=None,
              help="Last stage to run.")
@click.option("--session", type=click.Path(exists=True, file_okay=False), default=None,
              help="Session directory (default: simulate from the config).")
@click.option("--ablate", is_flag=True, help="Report all three ablation variants.")
@click.option("--resume", is_flag=True, help="Reuse loops and FPGO artifacts in --out.")
def merge(config_path, seed, out, threads, stage, session, ablate, resume):
    """Run the merging pipeline and write its artifacts."""
    from .pipeline import VARIANTS, run_pipeline

    cfg = _config(config_path, seed, out, "all" if ablate else stage, threads, session)
    dest = Path(cfg.run.out)
    try:
        res = run_pipeline(cfg, out_dir=dest, resume=resume)
    except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        _fail(dest, exc)
    if ablate:
        click.echo(res.table())
    else:
        last = [v for v in VARIANTS if v in res.reports][-1]
        click.echo(res.reports[last].dumps())


@main.command()
@with_common
@click.option("--stage", type=click.Choice(sorted(CLI_STAGES)), default=None)
@click.option("--session", type=click.Path(exists=True, file_okay=False), default=None)
def ablate(config_path, seed, out, threads, stage, session):
    """FPGO / FPGO + BA / full pipeline from one simulation."""
    from .pipeline import run_pipeline

    cfg = _config(config_path, seed, out, "all", threads, session)
    dest = Path(cfg.run.out)
    try:
        res = run_pipeline(cfg, out_dir=dest)
    except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        _fail(dest, exc)
    click.echo(res.table())


@main.command()
@click.option("--session", type=click.Path(exists=True, file_okay=False), required=True,
              help="Session directory holding ground truth.")
@click.option("--traj", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory of robot_<id>.tum trajectories.")
@click.option("--map-metrics/--no-map-metrics", default=True)
@click.option("--json", "as_json", is_flag=True)
def evaluate(session, traj, map_metrics, as_json):
    """Score trajectories against a session's ground truth."""
    from .metrics import evaluate as score, format_table
    from .pipeline import _read_trajectories, load_session

    try:
        bundle = load_session(session)
        est = _read_trajectories(Path(traj))
        gt = {k: bundle.gt_pose(k) for k in bundle.keys()}
        scans = {k: bundle.scan(k) for k in bundle.keys()} if map_metrics else None
        rep = score(est, gt, scans, bundle.world, label=Path(traj).name)
    except (ValueError, KeyError, OSError) as exc:
        _fail(None, exc)
    click.echo(rep.dumps() if as_json else format_table([rep]))


@main.command()
@click.option("--instances", type=int, default=20, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def lemmas(instances, as_json):
    """Run the continuity, cost-model, covariance-ordering and regime checks."""
    from .lemmas import run_all

    res = run_all(instances)
    if as_json:
        click.echo(json.dumps(res, indent=2, sort_keys=True, default=float))
    else:
        for name, r in res.items():
            click.echo(f"{name:<12} {'PASS' if r['passed'] else 'FAIL'}")
    if not all(r["passed"] for r in res.values()):
        sys.exit(1)


if __name__ == "__main__":  # pragma: no cover
    main()
