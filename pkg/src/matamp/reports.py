"""Plot-ready exports of stored experiments: success-probability tables
with logit overlays, transition-location tables against the theoretical
curves, and convergence profiles. Each table is written as delimited text
and as structured JSONL records, with a rendered figure alongside.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .calibration import CalibrationConfig, delta_it, lambda_star
from .errors import NotFound
from .harness import average_better_half, fit_logit

_FLOAT_FMT = "%.17g"


def _fmt(value):
    if isinstance(value, float):
        return _FLOAT_FMT % value
    return str(value)


def _write_table(rows, header, base_path, formats):
    paths = []
    if "csv" in formats:
        path = base_path + ".csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        paths.append(path)
    if "jsonl" in formats:
        path = base_path + ".jsonl"
        with open(path, "w") as fh:
            for row in rows:
                fh.write(json.dumps(dict(zip(header, row))) + "\n")
        paths.append(path)
    return paths


def read_table(path):
    """Parse a report CSV back into typed rows (round-trip counterpart of
    the writer)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = []
        for raw in reader:
            row = []
            for cell in raw:
                try:
                    value = int(cell)
                except ValueError:
                    try:
                        value = float(cell)
                    except ValueError:
                        value = cell
                row.append(value)
            rows.append(row)
    return header, rows


def _group_records(records):
    groups = defaultdict(list)
    for rec in records:
        groups[(rec.solver_name, rec.ensemble, rec.M, rec.N, rec.r)].append(rec)
    return groups


def _logistic(a, b, x):
    return 1.0 / (1.0 + math.exp(-(a + b * x)))


ALL_SECTIONS = ("success_rates", "phase_transition", "convergence")


def export_report(
    store,
    formats=("csv", "jsonl"),
    cal_cfg=None,
    cal_cache=None,
    sections=ALL_SECTIONS,
):
    """Emit report tables and figures for one stored experiment.

    Returns the mapping table-name -> list of written file paths. An
    experiment that exists but holds no records yet yields header-only
    tables; an unknown experiment id raises NotFound.
    """
    records = store.load_records()
    out_dir = store.out_dir
    prefix = os.path.join(out_dir, store.experiment_id)
    written = {}
    if not records:
        if not (
            os.path.exists(store.records_path) or os.path.exists(store.manifest_path)
        ):
            raise NotFound(f"unknown experiment {store.experiment_id!r}")
        for section, header in (
            ("success_rates", ["solver_name", "ensemble", "N", "M", "r", "n", "delta",
                               "trials", "successes", "pi_hat", "logit_pi"]),
            ("phase_transition", ["rho", "beta", "N", "delta_hat_amp_opt",
                                  "delta_hat_amp_svst", "delta_hat_niht",
                                  "delta_hat_apg", "delta_it", "delta_nnm"]),
            ("convergence", ["solver_name", "t", "mean_rel_error"]),
        ):
            if section in sections:
                written[section] = _write_table([], header, f"{prefix}_{section}", formats)
        return written

    groups = _group_records(records)
    fits = {}
    for key, recs in groups.items():
        deltas = sorted({rec.delta for rec in recs})
        anchor = float(np.mean(deltas))
        fits[key] = fit_logit(recs, anchor)

    if "success_rates" in sections:
        rows = []
        for key in sorted(groups):
            solver, ensemble, M, N, r = key
            fit = fits[key]
            for delta, (succ, tot) in sorted(fit.pi_hat_by_delta.items()):
                if fit.separated or not np.isfinite(fit.b):
                    overlay = math.nan
                else:
                    overlay = _logistic(fit.a, fit.b, delta - fit.delta_star_anchor)
                rows.append(
                    [solver, ensemble, N, M, r, int(round(delta * M * N)), float(delta),
                     tot, succ, succ / tot, overlay]
                )
        header = [
            "solver_name", "ensemble", "N", "M", "r", "n", "delta",
            "trials", "successes", "pi_hat", "logit_pi",
        ]
        written["success_rates"] = _write_table(rows, header, prefix + "_success_rates", formats)
        _plot_success_rates(groups, fits, prefix + "_success_rates.png")
        written["success_rates"].append(prefix + "_success_rates.png")

    if "phase_transition" in sections:
        pt_rows = []
        by_rho = defaultdict(dict)
        for key, fit in fits.items():
            by_rho[(fit.rho, fit.beta, fit.N)][key[0]] = fit
        cal_cfg = cal_cfg or CalibrationConfig()
        for (rho, beta, N), solver_fits in sorted(by_rho.items()):
            nnm = lambda_star(rho, beta, cfg=cal_cfg, cache=cal_cache).delta_nnm
            pt_rows.append(
                [
                    rho, beta, N,
                    _fit_delta(solver_fits, "amp_opt"),
                    _fit_delta(solver_fits, "amp_svst"),
                    _fit_delta(solver_fits, "niht"),
                    _fit_delta(solver_fits, "apg"),
                    delta_it(rho, beta),
                    nnm,
                ]
            )
        pt_header = [
            "rho", "beta", "N", "delta_hat_amp_opt", "delta_hat_amp_svst",
            "delta_hat_niht", "delta_hat_apg", "delta_it", "delta_nnm",
        ]
        written["phase_transition"] = _write_table(pt_rows, pt_header, prefix + "_phase_transition", formats)
        _plot_phase_transition(pt_rows, prefix + "_phase_transition.png")
        written["phase_transition"].append(prefix + "_phase_transition.png")

    if "convergence" not in sections:
        return written

    conv_rows = []
    curves = {}
    for key, recs in groups.items():
        with_traj = [rec for rec in recs if rec.rel_error_trajectory]
        if not with_traj:
            continue
        solver = key[0]
        mean_curve = average_better_half(
            [rec.rel_error_trajectory for rec in with_traj]
        )
        curves[solver] = mean_curve
        for t, value in enumerate(mean_curve):
            conv_rows.append([solver, t, float(value)])
    if conv_rows:
        conv_header = ["solver_name", "t", "mean_rel_error"]
        written["convergence"] = _write_table(conv_rows, conv_header, prefix + "_convergence", formats)
        _plot_convergence(curves, prefix + "_convergence.png")
        written["convergence"].append(prefix + "_convergence.png")

    return written


def _fit_delta(solver_fits, name):
    fit = solver_fits.get(name)
    return fit.delta_hat if fit is not None else math.nan


def _plot_success_rates(groups, fits, path):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in sorted(groups):
        solver, ensemble, M, N, r = key
        fit = fits[key]
        deltas = np.array(sorted(fit.pi_hat_by_delta))
        pi = np.array([fit.pi_hat_by_delta[d][0] / fit.pi_hat_by_delta[d][1] for d in deltas])
        label = f"{solver}/{ensemble}"
        pts = ax.plot(deltas, pi, "o", ms=4, label=label)
        if not fit.separated and np.isfinite(fit.b):
            grid = np.linspace(deltas.min(), deltas.max(), 200)
            curve = 1.0 / (1.0 + np.exp(-(fit.a + fit.b * (grid - fit.delta_star_anchor))))
            ax.plot(grid, curve, "-", color=pts[0].get_color(), lw=1)
    ax.set_xlabel(r"undersampling $\delta = n/(MN)$")
    ax.set_ylabel("empirical success probability")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _plot_phase_transition(pt_rows, path):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    rows = sorted(pt_rows)
    rhos = [row[0] for row in rows]
    series = {
        "amp_opt": [row[3] for row in rows],
        "amp_svst": [row[4] for row in rows],
        "niht": [row[5] for row in rows],
        "apg": [row[6] for row in rows],
    }
    markers = {"amp_opt": "o", "amp_svst": "s", "niht": "^", "apg": "v"}
    for name, values in series.items():
        if all(math.isnan(v) for v in values):
            continue
        ax.plot(rhos, values, markers[name] + "-", label=f"{name} (fitted)")
    if rhos:
        beta = rows[0][1]
        grid = np.linspace(min(rhos) * 0.5, max(rhos) * 1.2, 100)
        ax.plot(grid, [delta_it(g, beta) for g in grid], "k--", lw=1, label="info bound")
        ax.plot(rhos, [row[8] for row in rows], "k:", lw=1.5, label="soft-threshold minimax")
    ax.set_xlabel(r"rank fraction $\rho = r/M$")
    ax.set_ylabel(r"transition location $\hat\delta$")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _plot_convergence(curves, path):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for solver, curve in sorted(curves.items()):
        ax.semilogy(np.maximum(curve, 1e-18), label=solver)
    ax.set_xlabel("iteration $t$")
    ax.set_ylabel(r"mean relative error $\bar\Delta_t$")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
