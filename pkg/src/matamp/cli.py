"""Command-line interface: calibration, single recoveries, convergence
profiles, phase-transition sweeps, logit fits, universality comparisons,
and report export. All experiment output lands under --out-dir; every run
is reproducible from its recorded seeds."""

from __future__ import annotations

import json
import math
import os

import click

from .calibration import (
    CalibrationCache,
    CalibrationConfig,
    calibrate_lambda_star,
    delta_it,
    lambda_star,
)
from .config import config_hash, resolve_config
from .harness import (
    ExperimentStore,
    convergence_profile,
    deltas_around,
    fit_logit,
    sweep_grid,
    universality_compare,
)
from .measurement import sample_instance
from .reports import export_report
from .solvers import SOLVERS, SolverOptions

SOLVER_NAMES = tuple(SOLVERS)


def _solver_options(settings, record_trajectory=False, stop_on_success=True):
    return SolverOptions(
        max_iters=settings["max_iters"],
        success_tol=settings["success_tol"],
        stall_window=settings["stall_window"],
        stall_rel_change=settings["stall_rel_change"],
        stall_sigma_factor=settings["stall_sigma_factor"],
        stall_detection=settings["stall_detection"] and not record_trajectory,
        record_trajectory=record_trajectory,
        stop_on_success=stop_on_success,
    )


def _cal_cfg(settings):
    return CalibrationConfig(
        n_cal=settings["n_cal"],
        reps=settings["cal_reps"],
        mu_cal=settings["mu_cal"],
        grid_points=settings["cal_grid_points"],
        seed=settings["cal_seed"],
    )


def _cal_cache(out_dir):
    return CalibrationCache(os.path.join(out_dir, "calibration_cache.jsonl"))


def _anchor_for(solver, rho, beta, settings, out_dir):
    """Suspected transition: the information bound for amp_opt/niht, the
    calibrated soft-threshold minimax MSE for amp_svst/apg."""
    if solver in ("amp_opt", "niht"):
        return delta_it(rho, beta), None
    result = lambda_star(rho, beta, cfg=_cal_cfg(settings), cache=_cal_cache(out_dir))
    return result.delta_nnm, result.lambda_star


@click.group()
@click.option("--seed", type=int, default=None, help="Master seed for all derived randomness.")
@click.option("--workers", type=int, default=None, help="Parallel trial workers.")
@click.option("--out-dir", type=click.Path(), default="runs", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Plain-text key = value settings file.")
@click.pass_context
def main(ctx, seed, workers, out_dir, config_path):
    """Low-rank matrix recovery experiments: AMP-SVST, AMP-OPT, NIHT, APG."""
    settings = resolve_config(config_path, {"master_seed": seed, "workers": workers})
    ctx.obj = {
        "settings": settings,
        "out_dir": out_dir,
        "workers": settings["workers"],
        "seed": settings["master_seed"],
    }


@main.command()
@click.option("--rho", type=float, required=True)
@click.option("--beta", type=float, required=True)
@click.pass_context
def calibrate(ctx, rho, beta):
    """Calibrate the minimax soft threshold and transition estimate."""
    cfg = _cal_cfg(ctx.obj["settings"])
    cache = _cal_cache(ctx.obj["out_dir"])
    result = calibrate_lambda_star(rho, beta, cfg=cfg, cache=cache)
    click.echo(f"rho={rho} beta={beta}  n_cal={cfg.n_cal} reps={cfg.reps}")
    click.echo(f"lambda_star = {result.lambda_star:.6f} (normalized units)")
    click.echo(f"delta_nnm   = {result.delta_nnm:.6f} +/- {result.stderr:.6f}")
    click.echo(f"delta_it    = {delta_it(rho, beta):.6f}")
    if result.multimodal_warning:
        click.echo("warning: calibration curve has competing local minima")


@main.command()
@click.option("--solver", type=click.Choice(SOLVER_NAMES), required=True)
@click.option("--m-rows", "m_rows", type=int, required=True)
@click.option("--n-cols", "n_cols", type=int, required=True)
@click.option("--rank", type=int, required=True)
@click.option("--n-meas", type=int, default=None, help="Measurement count (or use --delta).")
@click.option("--delta", type=float, default=None, help="Undersampling ratio; n = ceil(delta*M*N).")
@click.pass_context
def recover(ctx, solver, m_rows, n_cols, rank, n_meas, delta):
    """Run one seeded recovery and print its trace."""
    settings = ctx.obj["settings"]
    if n_meas is None:
        if delta is None:
            raise click.UsageError("provide --n-meas or --delta")
        n_meas = math.ceil(delta * m_rows * n_cols)
    problem = sample_instance(
        m_rows, n_cols, rank, n_meas, settings["mu"], settings["ensemble"],
        ctx.obj["seed"], mode=settings["operator_mode"],
    )
    opts = _solver_options(settings)
    if solver == "amp_svst":
        mdim, ndim = min(m_rows, n_cols), max(m_rows, n_cols)
        _, lam = _anchor_for("amp_svst", rank / mdim, mdim / ndim, settings, ctx.obj["out_dir"])
        trace = SOLVERS[solver](problem, opts=opts, lambda_star=lam)
    else:
        trace = SOLVERS[solver](problem, opts=opts)
    click.echo(
        f"{solver}: success={trace.success} iterations={trace.iterations_run} "
        f"final_rel_error={trace.relative_errors[-1]:.3e} wall={trace.wall_time:.2f}s"
    )
    errs = trace.relative_errors
    for t in range(0, len(errs), max(len(errs) // 20, 1)):
        click.echo(f"  t={t:5d}  rel_error={errs[t]:.6e}")
    click.echo(f"  t={len(errs) - 1:5d}  rel_error={errs[-1]:.6e}")


@main.command()
@click.option("--solver", type=click.Choice(SOLVER_NAMES), required=True)
@click.option("--n-dim", type=int, required=True, help="N (columns); M = round(beta*N).")
@click.option("--beta", type=float, default=1.0, show_default=True)
@click.option("--rho", type=float, required=True)
@click.option("--delta", type=float, default=None,
              help="Undersampling; default anchor + 0.1 (far-from-transition profile).")
@click.option("--trials", type=int, default=None)
@click.option("--iters", type=int, default=1000, show_default=True)
@click.option("--experiment-id", default=None)
@click.pass_context
def converge(ctx, solver, n_dim, beta, rho, delta, trials, iters, experiment_id):
    """Average convergence profile over the better half of many trials."""
    settings = ctx.obj["settings"]
    trials = trials or settings["trials"]
    anchor, lam = _anchor_for(solver, rho, beta, settings, ctx.obj["out_dir"])
    if delta is None:
        delta = anchor + 0.1
    M = int(round(beta * n_dim))
    r = int(math.ceil(rho * M))
    n = int(math.ceil(delta * M * n_dim))
    experiment_id = experiment_id or f"converge_{solver}_N{n_dim}_rho{rho}_beta{beta}"
    store = ExperimentStore(ctx.obj["out_dir"], experiment_id)
    store.write_manifest(
        {"command": "converge", "solver": solver, "N": n_dim, "beta": beta, "rho": rho,
         "delta": delta, "trials": trials, "iters": iters,
         "settings_hash": config_hash(settings)},
        ctx.obj["seed"],
    )
    profile = convergence_profile(
        solver, M, n_dim, r, n,
        trials=trials, max_iters=iters, master_seed=ctx.obj["seed"],
        ensemble=settings["ensemble"], mu=settings["mu"],
        workers=ctx.obj["workers"], lambda_star=lam,
        experiment_id=experiment_id, store=store,
    )
    click.echo(
        f"{solver} at delta={delta:.3f}: {profile.n_success}/{trials} successes; "
        f"mean rel error at t={iters}: {profile.mean_curve[-1]:.3e}"
        + (" (low confidence)" if profile.low_confidence else "")
    )
    written = export_report(store, sections=("convergence",))
    for paths in written.values():
        for path in paths:
            click.echo(f"wrote {path}")


@main.command()
@click.option("--solver", type=click.Choice(SOLVER_NAMES), required=True)
@click.option("--n-dim", type=int, required=True)
@click.option("--beta", type=float, default=1.0, show_default=True)
@click.option("--rho", type=float, required=True)
@click.option("--delta-center", default="auto", show_default=True,
              help="Grid center; 'auto' uses the solver's suspected transition.")
@click.option("--window", type=float, default=None, help="Half-width of the delta grid.")
@click.option("--step", type=float, default=None)
@click.option("--trials", type=int, default=None)
@click.option("--experiment-id", default=None)
@click.pass_context
def sweep(ctx, solver, n_dim, beta, rho, delta_center, window, step, trials, experiment_id):
    """Success-probability sweep over a window of undersampling ratios."""
    settings = ctx.obj["settings"]
    trials = trials or settings["trials"]
    window = window if window is not None else settings["delta_window"]
    step = step if step is not None else settings["delta_step"]
    anchor, lam = _anchor_for(solver, rho, beta, settings, ctx.obj["out_dir"])
    center = anchor if delta_center == "auto" else float(delta_center)
    deltas = deltas_around(center, window, step)
    experiment_id = experiment_id or f"sweep_{solver}_N{n_dim}_rho{rho}_beta{beta}"
    store = ExperimentStore(ctx.obj["out_dir"], experiment_id)
    store.write_manifest(
        {"command": "sweep", "solver": solver, "N": n_dim, "beta": beta, "rho": rho,
         "deltas": deltas, "trials": trials, "settings_hash": config_hash(settings)},
        ctx.obj["seed"],
    )
    records = sweep_grid(
        solver, n_dim, beta, rho, deltas,
        trials=trials, master_seed=ctx.obj["seed"], store=store,
        options=_solver_options(settings), ensemble=settings["ensemble"],
        mu=settings["mu"], workers=ctx.obj["workers"], lambda_star=lam,
        experiment_id=experiment_id,
    )
    fit = fit_logit(records, center)
    store.append_fit(fit)
    for delta, (succ, tot) in sorted(fit.pi_hat_by_delta.items()):
        click.echo(f"  delta={delta:.4f}  pi_hat={succ}/{tot} = {succ / tot:.2f}")
    click.echo(f"anchor delta*={center:.4f}  fitted delta_hat={fit.delta_hat:.4f}"
               + ("  [separated]" if fit.separated else ""))


@main.command()
@click.option("--experiment-id", required=True)
@click.option("--anchor", type=float, required=True, help="delta* used in the fit.")
@click.option("--solver", default=None, help="Restrict to one solver.")
@click.option("--ensemble", default=None, help="Restrict to one ensemble.")
@click.pass_context
def fit(ctx, experiment_id, anchor, solver, ensemble):
    """Fit the logit transition model on stored sweep records."""
    store = ExperimentStore(ctx.obj["out_dir"], experiment_id)
    records = store.load_records()
    if solver:
        records = [rec for rec in records if rec.solver_name == solver]
    if ensemble:
        records = [rec for rec in records if rec.ensemble == ensemble]
    result = fit_logit(records, anchor)
    store.append_fit(result)
    click.echo(
        f"{result.solver_name}/{result.ensemble}: a={result.a:.3f} b={result.b:.3f} "
        f"delta_hat={result.delta_hat:.4f} (stderr {result.stderr_delta_hat:.4f})"
        + ("  [separated]" if result.separated else "")
    )
    if result.monotonicity_flags:
        click.echo(f"warning: pi_hat monotonicity violations at {result.monotonicity_flags}")


@main.command()
@click.option("--solver", type=click.Choice(("amp_svst", "amp_opt")), required=True)
@click.option("--n-dim", type=int, required=True)
@click.option("--beta", type=float, default=1.0, show_default=True)
@click.option("--rho", type=float, required=True)
@click.option("--ensembles", default="gaussian,rademacher,student_t6", show_default=True)
@click.option("--trials", type=int, default=None)
@click.option("--experiment-id", default=None)
@click.pass_context
def universality(ctx, solver, n_dim, beta, rho, ensembles, trials, experiment_id):
    """Compare fitted transitions across measurement ensembles."""
    settings = ctx.obj["settings"]
    trials = trials or settings["trials"]
    ensemble_list = [e.strip() for e in ensembles.split(",") if e.strip()]
    anchor, lam = _anchor_for(solver, rho, beta, settings, ctx.obj["out_dir"])
    deltas = deltas_around(anchor, settings["delta_window"], settings["delta_step"])
    experiment_id = experiment_id or f"universality_{solver}_N{n_dim}_rho{rho}_beta{beta}"
    store = ExperimentStore(ctx.obj["out_dir"], experiment_id)
    store.write_manifest(
        {"command": "universality", "solver": solver, "N": n_dim, "beta": beta,
         "rho": rho, "deltas": deltas, "ensembles": ensemble_list, "trials": trials,
         "settings_hash": config_hash(settings)},
        ctx.obj["seed"],
    )
    fits = universality_compare(
        solver, rho, beta, n_dim, ensemble_list,
        trials=trials, deltas=deltas, master_seed=ctx.obj["seed"],
        delta_star_anchor=anchor, store=store,
        options=_solver_options(settings), workers=ctx.obj["workers"],
        lambda_star=lam, experiment_id=experiment_id,
    )
    for ensemble, result in fits.items():
        click.echo(f"  {ensemble:12s} delta_hat={result.delta_hat:.4f}"
                   + ("  [separated]" if result.separated else ""))


@main.command()
@click.option("--experiment-id", required=True)
@click.option("--formats", default="csv,jsonl", show_default=True)
@click.pass_context
def report(ctx, experiment_id, formats):
    """Export delimited tables, JSONL records, and figures for an experiment."""
    store = ExperimentStore(ctx.obj["out_dir"], experiment_id)
    fmt = tuple(f.strip() for f in formats.split(",") if f.strip())
    written = export_report(
        store, formats=fmt,
        cal_cfg=_cal_cfg(ctx.obj["settings"]),
        cal_cache=_cal_cache(ctx.obj["out_dir"]),
    )
    for section, paths in written.items():
        for path in paths:
            click.echo(f"wrote {path}")
    click.echo(json.dumps({k: len(v) for k, v in written.items()}))


if __name__ == "__main__":
    main()
