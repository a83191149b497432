import json
import math

import numpy as np
import pytest

from matamp.errors import InvalidInput
from matamp.harness import (
    ExperimentStore,
    PhaseTransitionFit,
    TrialRecord,
    TrialSpec,
    average_better_half,
    convergence_profile,
    deltas_around,
    fit_logit,
    log_linear_fit,
    run_trial,
    sweep_grid,
    universality_compare,
)
from matamp.measurement import mix_seed
from matamp.solvers import SolverOptions

FAST_OPTS = SolverOptions(max_iters=60, success_tol=1e-3)


def tiny_spec(seed=0, solver="amp_opt", n=None, options=FAST_OPTS, **kw):
    # 12x12 rank-2 problem, determined unless n is given
    return TrialSpec(
        solver_name=solver, M=12, N=12, r=2, n=n or 144, seed=seed,
        options=options, experiment_id="tiny", **kw,
    )


def synthetic_record(delta, success, seed, solver="amp_opt", M=50, N=50, r=10):
    return TrialRecord(
        experiment_id="synthetic", solver_name=solver, M=M, N=N, r=r,
        n=int(round(delta * M * N)), ensemble="gaussian", seed=seed,
        success=success, iterations_to_success=10 if success else 4000,
        final_rel_error=1e-5 if success else 0.5,
        rel_error_trajectory=None, sigma_hat_trajectory=None, wall_time=0.1,
    )


class TestRunTrial:
    def test_deterministic_modulo_wall_time(self):
        a = run_trial(tiny_spec(seed=3))
        b = run_trial(tiny_spec(seed=3))
        da, db = a.__dict__.copy(), b.__dict__.copy()
        da.pop("wall_time"), db.pop("wall_time")
        assert da == db

    def test_determined_system_succeeds(self):
        rec = run_trial(tiny_spec(seed=1))
        assert rec.success
        assert rec.iterations_to_success < 60
        assert rec.final_rel_error < 1e-3

    def test_unknown_solver(self):
        with pytest.raises(InvalidInput):
            run_trial(tiny_spec(solver="cg"))

    def test_trajectory_recording_and_stride(self):
        opts = SolverOptions(max_iters=30, record_trajectory=True,
                             stop_on_success=False, stall_detection=False)
        rec = run_trial(tiny_spec(seed=2, options=opts, trajectory_stride=7))
        assert rec.rel_error_trajectory is not None
        assert rec.sigma_hat_trajectory is not None
        full = run_trial(tiny_spec(seed=2, options=opts))
        assert rec.rel_error_trajectory[-1] == full.rel_error_trajectory[-1]
        assert len(rec.rel_error_trajectory) < len(full.rel_error_trajectory)

    def test_json_round_trip(self):
        rec = run_trial(tiny_spec(seed=4))
        again = TrialRecord.from_json(rec.to_json())
        assert again == rec


class TestAverageBetterHalf:
    def test_identical_trajectories_are_a_noop(self):
        traj = [1.0, 0.1, 0.01]
        mean = average_better_half([traj, traj, traj, traj])
        np.testing.assert_allclose(mean, traj)

    def test_discards_worst_half(self):
        good = [1.0, 1e-8]
        bad = [1.0, 0.9]
        mean = average_better_half([bad, good, good, bad])
        np.testing.assert_allclose(mean, good)

    def test_pads_short_trajectories(self):
        mean = average_better_half([[1.0, 0.5, 0.25], [1.0, 0.2]], keep=2)
        np.testing.assert_allclose(mean, [1.0, 0.35, 0.225])


class TestConvergenceProfile:
    def test_mean_matches_manual_average(self, tmp_path):
        store = ExperimentStore(tmp_path, "profile")
        result = convergence_profile(
            "amp_opt", 12, 12, 2, 144, trials=4, max_iters=40,
            master_seed=7, store=store,
        )
        assert result.kept == 2
        trajs = np.array([r.rel_error_trajectory for r in result.records])
        order = np.argsort(trajs[:, -1], kind="stable")[:2]
        np.testing.assert_allclose(result.mean_curve, trajs[order].mean(axis=0))
        assert not result.low_confidence
        assert len(store.load_records()) == 4

    def test_requires_even_trials(self):
        with pytest.raises(InvalidInput):
            convergence_profile("amp_opt", 12, 12, 2, 144, trials=3,
                                max_iters=10, master_seed=0)

    def test_low_confidence_flag(self):
        # far below the information bound nothing converges
        result = convergence_profile(
            "amp_opt", 12, 12, 4, 40, trials=2, max_iters=30, master_seed=1,
        )
        assert result.n_success == 0
        assert result.low_confidence
        assert result.mean_curve.shape == (31,)


class TestSweepGrid:
    def grid_kwargs(self, store=None, trials=2):
        return dict(
            trials=trials, master_seed=11, store=store,
            options=SolverOptions(max_iters=50), experiment_id="sweep-test",
        )

    def test_runs_all_points_and_persists(self, tmp_path):
        store = ExperimentStore(tmp_path, "sweep-test")
        records = sweep_grid("amp_opt", 12, 1.0, 1 / 6, [0.7, 0.95],
                             **self.grid_kwargs(store))
        assert len(records) == 4
        assert len(store.load_records()) == 4
        assert {rec.n for rec in records} == {101, 137}

    def test_resume_after_partial_run_matches_uninterrupted(self, tmp_path):
        full_store = ExperimentStore(tmp_path / "full", "sweep-test")
        full = sweep_grid("amp_opt", 12, 1.0, 1 / 6, [0.7, 0.95],
                          **self.grid_kwargs(full_store))

        crash_store = ExperimentStore(tmp_path / "crash", "sweep-test")
        sweep_grid("amp_opt", 12, 1.0, 1 / 6, [0.7, 0.95],
                   **self.grid_kwargs(crash_store))
        # simulate a crash that lost the last two records
        lines = open(crash_store.records_path).readlines()
        with open(crash_store.records_path, "w") as fh:
            fh.writelines(lines[:2])
        resumed = sweep_grid("amp_opt", 12, 1.0, 1 / 6, [0.7, 0.95],
                             **self.grid_kwargs(crash_store))

        def canon(records):
            out = []
            for rec in sorted(records, key=lambda r: r.key()):
                d = rec.__dict__.copy()
                d.pop("wall_time")
                out.append(d)
            return out

        assert canon(resumed) == canon(full)

    def test_completed_pairs_skipped(self, tmp_path):
        store = ExperimentStore(tmp_path, "sweep-test")
        sweep_grid("amp_opt", 12, 1.0, 1 / 6, [0.7], **self.grid_kwargs(store))
        before = open(store.records_path).read()
        sweep_grid("amp_opt", 12, 1.0, 1 / 6, [0.7], **self.grid_kwargs(store))
        assert open(store.records_path).read() == before

    def test_empty_grid(self):
        assert sweep_grid("amp_opt", 12, 1.0, 1 / 6, [], trials=2, master_seed=0) == []

    def test_manifest_guards_grid_changes(self, tmp_path):
        store = ExperimentStore(tmp_path, "exp")
        store.write_manifest({"deltas": [0.1]}, master_seed=1)
        with pytest.raises(InvalidInput):
            store.write_manifest({"deltas": [0.2]}, master_seed=1)

    def test_parallel_workers_match_serial(self, tmp_path):
        serial = sweep_grid("amp_opt", 12, 1.0, 1 / 6, [0.8],
                            trials=4, master_seed=5, workers=1)
        parallel = sweep_grid("amp_opt", 12, 1.0, 1 / 6, [0.8],
                              trials=4, master_seed=5, workers=2)
        key = lambda r: r.seed
        for a, b in zip(sorted(serial, key=key), sorted(parallel, key=key)):
            assert a.success == b.success
            assert a.final_rel_error == b.final_rel_error


class TestDeltasAround:
    def test_default_window(self):
        grid = deltas_around(0.36)
        assert len(grid) == 11
        assert grid[0] == pytest.approx(0.31)
        assert grid[-1] == pytest.approx(0.41)


class TestFitLogit:
    def test_symmetric_counts_pin_the_anchor(self):
        anchor = 0.36
        records = []
        for delta, successes in [(0.34, 5), (0.36, 25), (0.38, 45)]:
            records += [synthetic_record(delta, s < successes, seed=s) for s in range(50)]
        fit = fit_logit(records, anchor)
        assert not fit.separated
        assert abs(fit.a) < 1e-6
        assert fit.delta_hat == pytest.approx(anchor, abs=1e-8)
        assert fit.b > 0

    def test_all_successes_flagged_separated(self):
        records = [synthetic_record(0.4, True, s) for s in range(20)]
        fit = fit_logit(records, 0.36)
        assert fit.separated
        assert math.isnan(fit.delta_hat)

    def test_pure_split_uses_midpoint(self):
        records = [synthetic_record(0.30, False, s) for s in range(10)]
        records += [synthetic_record(0.40, True, s) for s in range(10)]
        fit = fit_logit(records, 0.36)
        assert fit.separated
        assert fit.delta_hat == pytest.approx(0.35)

    def test_generate_and_refit_recovers_coefficients(self):
        rng = np.random.default_rng(0)
        a_true, b_true, anchor = 0.8, 150.0, 0.5
        records = []
        for delta in deltas_around(anchor, 0.05, 0.01):
            p = 1 / (1 + math.exp(-(a_true + b_true * (delta - anchor))))
            wins = rng.binomial(1, p, size=400)
            records += [synthetic_record(delta, bool(w), seed=i)
                        for i, w in enumerate(wins)]
        fit = fit_logit(records, anchor)
        assert fit.a == pytest.approx(a_true, abs=2 * fit.stderr_a)
        assert fit.b == pytest.approx(b_true, abs=2 * fit.stderr_b)

    def test_consistency_of_transition_estimate(self):
        rng = np.random.default_rng(1)
        a_true, b_true, anchor = 1.2, 200.0, 0.5
        true_inflection = anchor - a_true / b_true
        records = []
        for delta in deltas_around(anchor, 0.05, 0.01):
            p = 1 / (1 + math.exp(-(a_true + b_true * (delta - anchor))))
            wins = rng.binomial(1, p, size=2000)
            records += [synthetic_record(delta, bool(w), seed=i)
                        for i, w in enumerate(wins)]
        fit = fit_logit(records, anchor)
        assert abs(fit.delta_hat - true_inflection) < 0.002

    def test_monotonicity_violation_flagged(self):
        records = []
        for delta, successes in [(0.34, 2), (0.36, 40), (0.38, 10), (0.40, 48)]:
            records += [synthetic_record(delta, s < successes, seed=s) for s in range(50)]
        fit = fit_logit(records, 0.36)
        assert 0.38 in fit.monotonicity_flags

    def test_json_round_trip(self):
        records = []
        for delta, successes in [(0.34, 5), (0.36, 25), (0.38, 45)]:
            records += [synthetic_record(delta, s < successes, seed=s) for s in range(50)]
        fit = fit_logit(records, 0.36)
        again = PhaseTransitionFit.from_json(fit.to_json())
        assert again.delta_hat == fit.delta_hat
        assert again.pi_hat_by_delta == fit.pi_hat_by_delta

    def test_rejects_mixed_grids(self):
        records = [synthetic_record(0.4, True, 0, r=10),
                   synthetic_record(0.4, True, 1, r=12)]
        with pytest.raises(InvalidInput):
            fit_logit(records, 0.36)


class TestUniversalityCompare:
    def test_per_ensemble_fits_on_shared_grid(self, tmp_path):
        store = ExperimentStore(tmp_path, "uni")
        fits = universality_compare(
            "amp_opt", 1 / 6, 1.0, 12, ["gaussian", "rademacher"],
            trials=2, deltas=[0.7, 0.95], master_seed=3,
            delta_star_anchor=0.8, store=store,
            options=SolverOptions(max_iters=50), experiment_id="uni",
        )
        assert set(fits) == {"gaussian", "rademacher"}
        assert len(store.load_fits()) == 2
        for fit in fits.values():
            assert set(fit.pi_hat_by_delta) == {101 / 144, 137 / 144}

    def test_single_ensemble_degenerate_comparison(self):
        fits = universality_compare(
            "amp_opt", 1 / 6, 1.0, 12, ["gaussian"],
            trials=2, deltas=[0.9], master_seed=4,
            delta_star_anchor=0.9, options=SolverOptions(max_iters=50),
        )
        assert list(fits) == ["gaussian"]


class TestLogLinearFit:
    def test_exact_exponential(self):
        t = np.arange(200)
        deltas = np.exp(-0.05 * t)
        slope, r2 = log_linear_fit(deltas, floor=1e-30)
        assert slope == pytest.approx(-0.05, rel=1e-10)
        assert r2 == pytest.approx(1.0, abs=1e-12)

    def test_ignores_post_floor_plateau(self):
        t = np.arange(400)
        deltas = np.maximum(np.exp(-0.2 * t), 1e-14)
        slope, r2 = log_linear_fit(deltas, floor=1e-13)
        assert slope == pytest.approx(-0.2, rel=1e-6)
        assert r2 > 0.999

    def test_too_short_input(self):
        slope, r2 = log_linear_fit([1.0, 0.5], floor=1e-13)
        assert math.isnan(slope)
