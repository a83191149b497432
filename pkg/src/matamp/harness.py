"""Monte-Carlo experiment orchestration.

Trials are independent work items, each fully determined by a seed derived
from (master seed, grid point tag, trial index); a bounded process pool
executes them and a single writer appends results to an append-only JSONL
record store. Because trials are deterministic and completed (point, seed)
pairs are skipped on restart, an interrupted sweep resumed later produces
the identical final record set.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__ as _pkg_version
from .errors import InvalidInput, NotFound
from .measurement import mix_seed, sample_instance
from .solvers import SOLVERS, SolverOptions, profile_options

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrialSpec:
    """Everything needed to reproduce one Monte-Carlo trial."""

    solver_name: str
    M: int
    N: int
    r: int
    n: int
    seed: int
    ensemble: str = "gaussian"
    mu: float = 100.0
    options: SolverOptions = field(default_factory=SolverOptions)
    lambda_star: float | None = None  # amp_svst only
    experiment_id: str = ""
    trajectory_stride: int = 1
    operator_mode: str = "auto"

    def key(self):
        return (self.solver_name, self.M, self.N, self.r, self.n, self.ensemble, self.seed)


@dataclass
class TrialRecord:
    """One Monte-Carlo run's outcome."""

    experiment_id: str
    solver_name: str
    M: int
    N: int
    r: int
    n: int
    ensemble: str
    seed: int
    success: bool
    iterations_to_success: int
    final_rel_error: float
    rel_error_trajectory: list | None
    sigma_hat_trajectory: list | None
    wall_time: float
    diverged: bool = False
    stalled: bool = False
    schema_version: int = SCHEMA_VERSION

    def key(self):
        return (self.solver_name, self.M, self.N, self.r, self.n, self.ensemble, self.seed)

    @property
    def delta(self):
        return self.n / (self.M * self.N)

    def to_json(self):
        return json.dumps(asdict(self))

    @staticmethod
    def from_json(line):
        data = json.loads(line)
        data.pop("schema_version_extra", None)
        return TrialRecord(**data)


def _subsample(values, stride):
    values = list(np.asarray(values, dtype=float))
    if stride <= 1 or len(values) <= 2:
        return values
    out = values[::stride]
    if not np.isclose(out[-1], values[-1]) or (len(values) - 1) % stride != 0:
        out.append(values[-1])
    return out


def run_trial(spec):
    """Generate the instance for `spec`, run its solver, and record the
    outcome. Deterministic given the spec."""
    if spec.solver_name not in SOLVERS:
        raise InvalidInput(f"unknown solver {spec.solver_name!r}")
    problem = sample_instance(
        spec.M, spec.N, spec.r, spec.n, spec.mu, spec.ensemble, spec.seed,
        mode=spec.operator_mode,
    )
    if spec.solver_name == "amp_svst":
        trace = SOLVERS["amp_svst"](problem, opts=spec.options, lambda_star=spec.lambda_star)
    else:
        trace = SOLVERS[spec.solver_name](problem, opts=spec.options)

    tol = spec.options.success_tol
    errors = trace.relative_errors
    if trace.success:
        iters_to_success = int(np.argmax(errors < tol))
    else:
        iters_to_success = spec.options.max_iters
    record_traj = spec.options.record_trajectory
    sigma_traj = None
    if record_traj and trace.sigma_hats is not None:
        sigma_traj = _subsample(trace.sigma_hats, spec.trajectory_stride)
    return TrialRecord(
        experiment_id=spec.experiment_id,
        solver_name=spec.solver_name,
        M=spec.M,
        N=spec.N,
        r=spec.r,
        n=spec.n,
        ensemble=spec.ensemble,
        seed=spec.seed,
        success=bool(trace.success),
        iterations_to_success=iters_to_success,
        final_rel_error=float(errors[-1]),
        rel_error_trajectory=_subsample(errors, spec.trajectory_stride) if record_traj else None,
        sigma_hat_trajectory=sigma_traj,
        wall_time=trace.wall_time,
        diverged=trace.diverged,
        stalled=trace.stalled,
    )


def execute_trials(specs, workers=1):
    """Run trials serially or on a bounded process pool, yielding records
    as they complete (order not guaranteed with workers > 1)."""
    specs = list(specs)
    if workers <= 1 or len(specs) <= 1:
        for spec in specs:
            yield run_trial(spec)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_trial, spec) for spec in specs]
        for fut in as_completed(futures):
            yield fut.result()


class ExperimentStore:
    """Crash-safe flat store: one JSONL records file, one JSONL fits file,
    and a manifest per experiment."""

    def __init__(self, out_dir, experiment_id):
        self.out_dir = str(out_dir)
        self.experiment_id = str(experiment_id)
        os.makedirs(self.out_dir, exist_ok=True)
        base = os.path.join(self.out_dir, self.experiment_id)
        self.records_path = base + "_records.jsonl"
        self.fits_path = base + "_fits.jsonl"
        self.manifest_path = base + "_manifest.json"

    def append_record(self, record):
        with open(self.records_path, "a") as fh:
            fh.write(record.to_json() + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def load_records(self):
        if not os.path.exists(self.records_path):
            return []
        out = []
        with open(self.records_path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(TrialRecord.from_json(line))
        return out

    def completed_keys(self):
        return {rec.key() for rec in self.load_records()}

    def append_fit(self, fit):
        with open(self.fits_path, "a") as fh:
            fh.write(fit.to_json() + "\n")
            fh.flush()

    def load_fits(self):
        if not os.path.exists(self.fits_path):
            return []
        out = []
        with open(self.fits_path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(PhaseTransitionFit.from_json(line))
        return out

    def write_manifest(self, config, master_seed):
        """Create the manifest, or verify the stored one matches on resume."""
        payload = json.dumps(config, sort_keys=True, default=str)
        cfg_hash = _stable_hash(payload)
        if os.path.exists(self.manifest_path):
            existing = self.read_manifest()
            if existing["config_hash"] != cfg_hash:
                raise InvalidInput(
                    "experiment config changed since the stored manifest; "
                    "use a fresh experiment id to change the grid"
                )
            return existing
        manifest = {
            "experiment_id": self.experiment_id,
            "schema_version": SCHEMA_VERSION,
            "created_at": time.time(),
            "master_seed": master_seed,
            "config": json.loads(payload),
            "config_hash": cfg_hash,
            "package_version": _pkg_version,
        }
        with open(self.manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2)
        return manifest

    def read_manifest(self):
        if not os.path.exists(self.manifest_path):
            raise NotFound(f"no manifest for experiment {self.experiment_id!r}")
        with open(self.manifest_path) as fh:
            return json.load(fh)


def _stable_hash(payload):
    import hashlib

    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def average_better_half(trajectories, keep=None):
    """Discard the trajectories with the largest final error and average the
    rest pointwise (the typical-successful-run curve). Shorter trajectories
    are padded with their last value."""
    trajs = list(trajectories)
    if not trajs:
        raise InvalidInput("no trajectories to average")
    length = max(len(t) for t in trajs)
    padded = np.empty((len(trajs), length))
    for i, t in enumerate(trajs):
        t = np.asarray(t, dtype=float)
        padded[i, : t.size] = t
        padded[i, t.size :] = t[-1]
    if keep is None:
        keep = max(len(trajs) // 2, 1)
    order = np.argsort(padded[:, -1], kind="stable")[:keep]
    return padded[order].mean(axis=0)


@dataclass
class ProfileResult:
    """Typical-successful-run convergence curve: the B/2 trials with the
    largest final error are discarded and the rest averaged pointwise."""

    solver_name: str
    mean_curve: np.ndarray
    kept: int
    n_success: int
    low_confidence: bool
    records: list


def convergence_profile(
    solver_name,
    M,
    N,
    r,
    n,
    *,
    trials,
    max_iters,
    master_seed,
    ensemble="gaussian",
    mu=100.0,
    workers=1,
    lambda_star=None,
    experiment_id="",
    store=None,
):
    """Run `trials` full-length trajectories and average the better half.

    Completed trials already present in the store are not rerun.
    """
    if trials < 2 or trials % 2 != 0:
        raise InvalidInput("trials must be an even number >= 2")
    opts = profile_options(max_iters)
    specs = [
        TrialSpec(
            solver_name=solver_name,
            M=M,
            N=N,
            r=r,
            n=n,
            seed=mix_seed(master_seed, f"{solver_name}|{ensemble}|profile", b),
            ensemble=ensemble,
            mu=mu,
            options=opts,
            lambda_star=lambda_star,
            experiment_id=experiment_id,
        )
        for b in range(trials)
    ]
    done = {}
    if store is not None:
        wanted = {spec.key() for spec in specs}
        for rec in store.load_records():
            if rec.key() in wanted and rec.rel_error_trajectory:
                done[rec.key()] = rec
    records = list(done.values())
    for rec in execute_trials(
        [spec for spec in specs if spec.key() not in done], workers=workers
    ):
        records.append(rec)
        if store is not None:
            store.append_record(rec)
    records.sort(key=lambda rec: rec.seed)

    mean_curve = average_better_half(
        [rec.rel_error_trajectory for rec in records], keep=trials // 2
    )
    n_success = sum(rec.success for rec in records)
    return ProfileResult(
        solver_name=solver_name,
        mean_curve=mean_curve,
        kept=trials // 2,
        n_success=n_success,
        low_confidence=n_success < trials // 2,
        records=records,
    )


def deltas_around(anchor, window=0.05, step=0.01):
    """The sweep grid anchor +/- window in equal steps (inclusive)."""
    count = int(round(2 * window / step)) + 1
    return [round(anchor - window + i * step, 10) for i in range(count)]


def sweep_grid(
    solver_name,
    N,
    beta,
    rho,
    deltas,
    *,
    trials,
    master_seed,
    store=None,
    options=None,
    ensemble="gaussian",
    mu=100.0,
    workers=1,
    lambda_star=None,
    experiment_id="",
):
    """Run `trials` seeded recoveries at every undersampling value in
    `deltas` (n = ceil(delta * M * N)), persisting each record on
    completion. Already-persisted (point, seed) pairs are skipped, making
    interrupted sweeps resumable."""
    if trials < 1:
        raise InvalidInput("trials must be >= 1")
    options = options or SolverOptions()
    M = int(round(beta * N))
    r = int(math.ceil(rho * M))
    specs = []
    for di, delta in enumerate(deltas):
        n = int(math.ceil(delta * M * N))
        for b in range(trials):
            specs.append(
                TrialSpec(
                    solver_name=solver_name,
                    M=M,
                    N=N,
                    r=r,
                    n=n,
                    seed=mix_seed(master_seed, f"{solver_name}|{ensemble}|delta{di}", b),
                    ensemble=ensemble,
                    mu=mu,
                    options=options,
                    lambda_star=lambda_star,
                    experiment_id=experiment_id,
                )
            )
    grid_keys = {spec.key() for spec in specs}

    done = {}
    if store is not None:
        for rec in store.load_records():
            if rec.key() in grid_keys:
                done[rec.key()] = rec
    pending = [spec for spec in specs if spec.key() not in done]

    records = list(done.values())
    for rec in execute_trials(pending, workers=workers):
        records.append(rec)
        if store is not None:
            store.append_record(rec)
    records.sort(key=lambda rec: (rec.n, rec.seed))
    return records


@dataclass
class PhaseTransitionFit:
    """Binomial logit fit log(pi/(1-pi)) = a + b (delta - delta_star) and
    the implied transition estimate delta_hat = delta_star - a/b."""

    rho: float
    beta: float
    N: int
    solver_name: str
    ensemble: str
    delta_star_anchor: float
    a: float
    b: float
    delta_hat: float
    pi_hat_by_delta: dict
    stderr_a: float
    stderr_b: float
    stderr_delta_hat: float
    separated: bool = False
    monotonicity_flags: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_json(self):
        data = asdict(self)
        data["pi_hat_by_delta"] = [
            [delta, succ, tot] for delta, (succ, tot) in sorted(self.pi_hat_by_delta.items())
        ]
        return json.dumps(data)

    @staticmethod
    def from_json(line):
        data = json.loads(line)
        data["pi_hat_by_delta"] = {
            row[0]: (row[1], row[2]) for row in data["pi_hat_by_delta"]
        }
        return PhaseTransitionFit(**data)


def _irls_logit(x, successes, totals, max_iter=100, tol=1e-10):
    """Maximum-likelihood binomial logit via iteratively reweighted least
    squares. Returns (a, b, covariance)."""
    x = np.asarray(x, dtype=float)
    k = np.asarray(successes, dtype=float)
    m = np.asarray(totals, dtype=float)
    X = np.column_stack([np.ones_like(x), x])
    # Initialize from clipped empirical logits.
    p0 = np.clip(k / m, 0.02, 0.98)
    coef, *_ = np.linalg.lstsq(X, np.log(p0 / (1.0 - p0)), rcond=None)
    for _ in range(max_iter):
        eta = X @ coef
        p = 1.0 / (1.0 + np.exp(-eta))
        w = m * p * (1.0 - p)
        if np.all(w < 1e-12):
            break
        XtWX = X.T @ (X * w[:, None])
        grad = X.T @ (k - m * p)
        try:
            step = np.linalg.solve(XtWX, grad)
        except np.linalg.LinAlgError:
            break
        coef = coef + step
        if np.max(np.abs(step)) < tol * (1.0 + np.max(np.abs(coef))):
            break
        if np.max(np.abs(coef)) > 1e8:  # runaway fit (quasi-separation)
            break
    eta = X @ coef
    p = 1.0 / (1.0 + np.exp(-eta))
    w = m * p * (1.0 - p)
    XtWX = X.T @ (X * w[:, None])
    try:
        cov = np.linalg.inv(XtWX)
    except np.linalg.LinAlgError:
        cov = np.full((2, 2), np.nan)
    return float(coef[0]), float(coef[1]), cov


def fit_logit(records, delta_star_anchor):
    """Fit the success-probability logit for one (rho, beta, N) sweep.

    Complete separation (pure failures below pure successes with no mixed
    point) has no finite MLE; the fit falls back to the midpoint of the gap
    and is flagged. Monotonicity violations of pi_hat in delta larger than
    two binomial standard errors are flagged, not silently accepted.
    """
    records = list(records)
    if not records:
        raise InvalidInput("no records to fit")
    first = records[0]
    M, N = first.M, first.N
    by_delta: dict[float, list[int]] = {}
    for rec in records:
        if (rec.M, rec.N, rec.r) != (first.M, first.N, first.r):
            raise InvalidInput("fit_logit expects records from a single grid point set")
        cell = by_delta.setdefault(rec.delta, [0, 0])
        cell[0] += int(rec.success)
        cell[1] += 1

    deltas = np.array(sorted(by_delta))
    succ = np.array([by_delta[d][0] for d in deltas], dtype=float)
    tot = np.array([by_delta[d][1] for d in deltas], dtype=float)
    pi_hat = succ / tot
    pi_map = {float(d): (int(s), int(t)) for d, s, t in zip(deltas, succ, tot)}

    rho = first.r / M
    beta = M / N
    meta = dict(
        rho=rho,
        beta=beta,
        N=N,
        solver_name=first.solver_name,
        ensemble=first.ensemble,
        delta_star_anchor=float(delta_star_anchor),
        pi_hat_by_delta=pi_map,
    )

    # Monotonicity screen: drops bigger than twice the summed binomial
    # standard errors are suspicious at B >= 50 per point.
    flags = []
    se = np.sqrt(np.maximum(pi_hat * (1.0 - pi_hat), 1e-12) / tot)
    for j in range(len(deltas) - 1):
        if pi_hat[j + 1] < pi_hat[j] - 2.0 * (se[j] + se[j + 1]):
            flags.append(float(deltas[j + 1]))

    mixed = np.any((succ > 0) & (succ < tot))
    if not mixed:
        pure_fail = deltas[succ == 0]
        pure_succ = deltas[succ == tot]
        ordered = (
            pure_fail.size
            and pure_succ.size
            and pure_fail.max() < pure_succ.min()
        )
        if not pure_fail.size or not pure_succ.size or ordered:
            if pure_fail.size and pure_succ.size:
                delta_hat = 0.5 * (pure_fail.max() + pure_succ.min())
            else:
                delta_hat = math.nan
            return PhaseTransitionFit(
                a=math.nan,
                b=math.nan,
                delta_hat=float(delta_hat),
                stderr_a=math.nan,
                stderr_b=math.nan,
                stderr_delta_hat=math.nan,
                separated=True,
                monotonicity_flags=flags,
                **meta,
            )

    a, b, cov = _irls_logit(deltas - delta_star_anchor, succ, tot)
    stderr_a = float(np.sqrt(cov[0, 0])) if np.isfinite(cov[0, 0]) else math.nan
    stderr_b = float(np.sqrt(cov[1, 1])) if np.isfinite(cov[1, 1]) else math.nan
    if b > 0:
        delta_hat = delta_star_anchor - a / b
        var_ratio = (
            cov[0, 0] / b**2
            + (a**2) * cov[1, 1] / b**4
            - 2.0 * a * cov[0, 1] / b**3
        )
        stderr_delta_hat = float(np.sqrt(var_ratio)) if var_ratio > 0 else math.nan
    else:
        delta_hat = math.nan
        stderr_delta_hat = math.nan
    return PhaseTransitionFit(
        a=a,
        b=b,
        delta_hat=float(delta_hat),
        stderr_a=stderr_a,
        stderr_b=stderr_b,
        stderr_delta_hat=stderr_delta_hat,
        separated=False,
        monotonicity_flags=flags,
        **meta,
    )


def universality_compare(
    solver_name,
    rho,
    beta,
    N,
    ensembles,
    *,
    trials,
    deltas,
    master_seed,
    delta_star_anchor,
    store=None,
    options=None,
    workers=1,
    lambda_star=None,
    experiment_id="",
):
    """One sweep plus logit fit per measurement ensemble on a shared grid."""
    fits = {}
    for ensemble in ensembles:
        records = sweep_grid(
            solver_name,
            N,
            beta,
            rho,
            deltas,
            trials=trials,
            master_seed=master_seed,
            store=store,
            options=options,
            ensemble=ensemble,
            mu=100.0,
            workers=workers,
            lambda_star=lambda_star,
            experiment_id=experiment_id,
        )
        fits[ensemble] = fit_logit(records, delta_star_anchor)
        if store is not None:
            store.append_fit(fits[ensemble])
    return fits


def log_linear_fit(deltas, floor=1e-13, tail_fraction=0.6):
    """Least-squares slope and R^2 of log(delta_t) over the last
    `tail_fraction` of the decaying range (up to the first iterate at or
    below `floor`, i.e. machine precision)."""
    d = np.asarray(deltas, dtype=float)
    below = np.nonzero(d <= floor)[0]
    end = int(below[0]) if below.size else int(np.argmin(d))
    if end < 5:
        return math.nan, 0.0
    start = int(math.floor(end * (1.0 - tail_fraction)))
    t = np.arange(start, end + 1)
    y = np.log(np.maximum(d[start : end + 1], 1e-300))
    slope, intercept = np.polyfit(t, y, 1)
    fitted = slope * t + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return float(slope), float(r2)
