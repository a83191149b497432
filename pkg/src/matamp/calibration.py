"""Theoretical curves and Monte-Carlo-calibrated constants.

`delta_it` and `mse_lower_bound` are closed forms. The soft-threshold
minimax quantities lambda_star(rho, beta) and delta_nnm(rho, beta) have no
closed form available here, so they are calibrated numerically: the
worst case is taken at the degenerate-spectrum configuration with a large
signal scale (least favorable for soft thresholding), the noise is unit
variance, and thresholds are expressed in normalized units (the applied
threshold is lambda * sqrt(N)). The AMP engine uses the identical
convention, so the calibrated constants transfer directly.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidInput
from .measurement import mix_seed, rng_from_seed, sample_stiefel
from .spectral import apply_shrinker

CACHE_SCHEMA_VERSION = 1


def delta_it(rho, beta):
    """Information-theoretic undersampling bound rho * (1 + beta - beta*rho)."""
    if not 0.0 <= rho <= 1.0:
        raise InvalidInput(f"rho={rho} out of [0, 1]")
    if not 0.0 < beta <= 1.0:
        raise InvalidInput(f"beta={beta} out of (0, 1]")
    return rho * (1.0 + beta - beta * rho)


def mse_lower_bound(r, M, N):
    """Finite-size minimax MSE lower bound r/M + r/N - (r^2 + r)/(M N).

    Converges to delta_it(r/M, M/N) in the proportional-growth limit.
    """
    if not 1 <= r <= min(M, N):
        raise InvalidInput(f"rank r={r} out of range for {M}x{N}")
    return r / M + r / N - (r * r + r) / (M * N)


@dataclass(frozen=True)
class CalibrationConfig:
    """Monte-Carlo calibration sizes; defaults balance finite-N bias
    against desk-scale runtime."""

    n_cal: int = 300
    reps: int = 20
    mu_cal: float = 1000.0
    grid_points: int = 80
    grid_max_factor: float = 4.0  # grid spans [0, factor * (1 + sqrt(beta))]
    golden_rel_tol: float = 1e-3
    seed: int = 1729

    def cfg_hash(self):
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class CalibrationResult:
    """Tuned threshold and estimated minimax MSE for one (rho, beta)."""

    rho: float
    beta: float
    lambda_star: float
    delta_nnm: float
    stderr: float
    lambdas: np.ndarray | None
    mse_curve: np.ndarray | None
    config: CalibrationConfig
    multimodal_warning: bool = False

    def to_cache_record(self):
        return {
            "schema_version": CACHE_SCHEMA_VERSION,
            "rho": self.rho,
            "beta": self.beta,
            "cfg_hash": self.config.cfg_hash(),
            "lambda_star": self.lambda_star,
            "delta_nnm": self.delta_nnm,
            "stderr": self.stderr,
            "multimodal_warning": self.multimodal_warning,
            "timestamp": time.time(),
        }


class CalibrationCache:
    """Append-only JSONL store of calibration results keyed by
    (rho, beta, cfg hash)."""

    def __init__(self, path):
        self.path = str(path)

    def lookup(self, rho, beta, cfg):
        if not os.path.exists(self.path):
            return None
        key = (float(rho), float(beta), cfg.cfg_hash())
        hit = None
        with open(self.path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if (rec["rho"], rec["beta"], rec["cfg_hash"]) == key:
                    hit = rec
        if hit is None:
            return None
        return CalibrationResult(
            rho=hit["rho"],
            beta=hit["beta"],
            lambda_star=hit["lambda_star"],
            delta_nnm=hit["delta_nnm"],
            stderr=hit["stderr"],
            lambdas=None,
            mse_curve=None,
            config=cfg,
            multimodal_warning=hit.get("multimodal_warning", False),
        )

    def append(self, result):
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(result.to_cache_record()) + "\n")
            fh.flush()


def _cal_dims(rho, beta, cfg):
    N = cfg.n_cal
    M = math.ceil(beta * N)
    r = math.ceil(rho * M)
    return M, N, r


def _sample_denoising_problem(rho, beta, cfg, rep):
    """One (X, Y) pair: degenerate-spectrum signal plus unit white noise."""
    M, N, r = _cal_dims(rho, beta, cfg)
    rep_seed = mix_seed(cfg.seed, "calibration", rep)
    U = sample_stiefel(M, r, mix_seed(rep_seed, "u"))
    V = sample_stiefel(N, r, mix_seed(rep_seed, "v"))
    X = cfg.mu_cal * (U @ V.T) if r > 0 else np.zeros((M, N))
    Z = rng_from_seed(mix_seed(rep_seed, "z")).standard_normal((M, N))
    return X, X + Z


def empirical_worst_case_mse(eta, rho, beta, cfg=None):
    """Monte-Carlo per-coordinate MSE of eta at the least-favorable
    (degenerate, large-scale) configuration, unit-noise domain."""
    cfg = cfg or CalibrationConfig()
    M, N, _ = _cal_dims(rho, beta, cfg)
    total = 0.0
    for rep in range(cfg.reps):
        X, Y = _sample_denoising_problem(rho, beta, cfg, rep)
        total += float(np.sum((apply_shrinker(Y, eta) - X) ** 2)) / (M * N)
    return total / cfg.reps


def _frozen_soft_summaries(rho, beta, cfg):
    """Per-rep SVD summaries enabling the soft-threshold MSE at any level
    from a single decomposition: singular values s, signal correlations
    c_i = u_i' X v_i, and the signal energy."""
    M, N, r = _cal_dims(rho, beta, cfg)
    summaries = []
    for rep in range(cfg.reps):
        rep_seed = mix_seed(cfg.seed, "calibration", rep)
        U = sample_stiefel(M, r, mix_seed(rep_seed, "u"))
        V = sample_stiefel(N, r, mix_seed(rep_seed, "v"))
        Z = rng_from_seed(mix_seed(rep_seed, "z")).standard_normal((M, N))
        Y = cfg.mu_cal * (U @ V.T) + Z if r > 0 else Z
        Uy, s, Vyt = np.linalg.svd(Y, full_matrices=False)
        if r > 0:
            c = cfg.mu_cal * np.sum((Uy.T @ U) * (Vyt @ V), axis=1)
        else:
            c = np.zeros_like(s)
        summaries.append((s, c, cfg.mu_cal**2 * r))
    return summaries, M, N


def _soft_mse_per_rep(summaries, M, N, threshold):
    out = np.empty(len(summaries))
    for k, (s, c, energy) in enumerate(summaries):
        kept = np.maximum(s - threshold, 0.0)
        out[k] = (np.sum(kept * kept) - 2.0 * np.sum(kept * c) + energy) / (M * N)
    return out


def _golden_min(f, lo, hi, rel_tol):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > rel_tol * max(abs(b), 1e-12):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def calibrate_lambda_star(rho, beta, cfg=None, cache=None):
    """Grid search plus golden-section refinement of the normalized soft
    threshold minimizing the Monte-Carlo worst-case MSE; the minimized value
    estimates delta_nnm(rho, beta).

    Monte-Carlo samples are frozen before the search, so the objective is a
    deterministic smooth function of the threshold and the refinement is
    well posed. Results are cached by (rho, beta, cfg hash) when a cache is
    supplied.
    """
    cfg = cfg or CalibrationConfig()
    if cache is not None:
        hit = cache.lookup(rho, beta, cfg)
        if hit is not None:
            return hit

    summaries, M, N = _frozen_soft_summaries(rho, beta, cfg)
    sqrt_n = math.sqrt(cfg.n_cal)
    grid_max = cfg.grid_max_factor * (1.0 + math.sqrt(beta))
    lambdas = np.linspace(0.0, grid_max, cfg.grid_points)

    def mean_mse(lam_norm):
        return float(np.mean(_soft_mse_per_rep(summaries, M, N, lam_norm * sqrt_n)))

    curve = np.array([mean_mse(lam) for lam in lambdas])
    i_min = int(np.argmin(curve))
    if 0 < i_min < len(lambdas) - 1:
        lam_star, val = _golden_min(
            mean_mse, lambdas[i_min - 1], lambdas[i_min + 1], cfg.golden_rel_tol
        )
    else:
        lam_star, val = float(lambdas[i_min]), float(curve[i_min])

    per_rep = _soft_mse_per_rep(summaries, M, N, lam_star * sqrt_n)
    stderr = float(np.std(per_rep, ddof=1) / math.sqrt(len(per_rep))) if len(per_rep) > 1 else 0.0

    # Flag calibration curves with a second competitive local minimum.
    interior = np.arange(1, len(curve) - 1)
    local_min = interior[
        (curve[interior] < curve[interior - 1]) & (curve[interior] < curve[interior + 1])
    ]
    competitive = [i for i in local_min if curve[i] < val + 2.0 * max(stderr, 1e-12)]
    multimodal = len(competitive) > 1 and (max(competitive) - min(competitive)) > 2

    result = CalibrationResult(
        rho=float(rho),
        beta=float(beta),
        lambda_star=float(lam_star),
        delta_nnm=float(val),
        stderr=stderr,
        lambdas=lambdas,
        mse_curve=curve,
        config=cfg,
        multimodal_warning=bool(multimodal),
    )
    if cache is not None:
        cache.append(result)
    return result


_MEMO: dict[tuple, CalibrationResult] = {}


def lambda_star(rho, beta, cfg=None, cache=None):
    """Memoized calibration lookup used by the AMP-SVST solver."""
    cfg = cfg or CalibrationConfig()
    key = (float(rho), float(beta), cfg.cfg_hash())
    if key not in _MEMO:
        _MEMO[key] = calibrate_lambda_star(rho, beta, cfg=cfg, cache=cache)
    return _MEMO[key]


def delta_nnm_bias_probe(rho, beta, n_cals=(150, 300, 600), cfg=None):
    """Re-run the calibration at several dimensions to expose the finite-N
    bias of the delta_nnm estimate."""
    base = cfg or CalibrationConfig()
    out = {}
    for n_cal in n_cals:
        probe_cfg = CalibrationConfig(
            n_cal=n_cal,
            reps=base.reps,
            mu_cal=base.mu_cal,
            grid_points=base.grid_points,
            grid_max_factor=base.grid_max_factor,
            golden_rel_tol=base.golden_rel_tol,
            seed=base.seed,
        )
        out[n_cal] = calibrate_lambda_star(rho, beta, cfg=probe_cfg)
    return out
