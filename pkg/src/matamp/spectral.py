"""Thin SVD, application of scalar shrinkers to singular values, the
divergence of a singular-value shrinker, and rank-r hard projection.

Orientation convention: `divergence` requires M <= N because its dimension
term is (N - M) * sum(eta(s)/s); callers with M > N operate on the transpose
(the divergence is invariant under it). `apply_shrinker` and `thin_svd`
accept either orientation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

# Pairs closer than GAP_TOL_FACTOR * s1^2 in squared singular value use the
# analytic limit of the pairwise divergence term; values below
# ZERO_TOL_FACTOR * s1 are treated as zero and use the derivative at 0+.
GAP_TOL_FACTOR = 1e-10
ZERO_TOL_FACTOR = 1e-12


@dataclass(frozen=True)
class SpectralDecomposition:
    """Thin SVD W = left_basis @ diag(values) @ right_basis.T with
    nonincreasing nonnegative values and orthonormal bases."""

    left_basis: np.ndarray
    values: np.ndarray
    right_basis: np.ndarray


def thin_svd(W):
    """Thin singular value decomposition of a finite real matrix."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or min(W.shape) < 1:
        raise InvalidInput(f"expected a 2-d matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise InvalidInput("matrix contains non-finite entries")
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    return SpectralDecomposition(U, s, Vt.T)


def reconstruct(decomp, values=None):
    """Rebuild the matrix from a decomposition, optionally with new values."""
    s = decomp.values if values is None else values
    return (decomp.left_basis * s) @ decomp.right_basis.T


def apply_shrinker(W, eta):
    """Apply the scalar map eta to each singular value of W."""
    d = thin_svd(W)
    return reconstruct(d, eta.value(d.values))


def hard_rank_projection(W, r):
    """Keep the r largest singular values of W and zero the rest."""
    W = np.asarray(W, dtype=float)
    if not 0 <= r <= min(W.shape):
        raise InvalidInput(f"rank r={r} out of range for shape {W.shape}")
    if r == 0:
        return np.zeros_like(W)
    d = thin_svd(W)
    kept = d.values.copy()
    kept[r:] = 0.0
    return reconstruct(d, kept)


def divergence(W, eta):
    """Divergence (Jacobian trace) of W -> apply_shrinker(W, eta) at W.

    Three summands: sum of eta'(s_i); the symmetrized pairwise term
    2 * sum_{i<j} (eta(s_i) s_i - eta(s_j) s_j) / (s_i^2 - s_j^2); and the
    dimension term (N - M) * sum of eta(s_i)/s_i. Near-degenerate pairs and
    vanishing singular values are handled by their analytic limits.
    """
    W = np.asarray(W, dtype=float)
    M, N = W.shape
    if M > N:
        raise InvalidInput("divergence requires M <= N; pass the transpose")
    if not np.all(np.isfinite(W)):
        raise InvalidInput("matrix contains non-finite entries")
    s = np.linalg.svd(W, compute_uv=False)
    return divergence_from_values(s, eta, M, N)


def divergence_from_values(values, eta, m_rows, n_cols):
    """Divergence from precomputed singular values (enables SVD reuse).

    `values` must be the thin-SVD spectrum of an m_rows x n_cols matrix with
    m_rows <= n_cols.
    """
    if m_rows > n_cols:
        raise InvalidInput("divergence requires m_rows <= n_cols")
    s = np.asarray(values, dtype=float)
    s1 = float(s[0]) if s.size else 0.0
    deriv_at_zero = float(eta.derivative(0.0))
    if s1 == 0.0:
        # Zero matrix: every term collapses to the derivative at 0+.
        return deriv_at_zero * m_rows * n_cols

    zero_tol = ZERO_TOL_FACTOR * s1
    gap_tol = GAP_TOL_FACTOR * s1 * s1

    eta_s = np.asarray(eta.value(s), dtype=float)
    total = float(np.sum(eta.derivative(s)))

    k = s.size
    if k > 1:
        i_idx, j_idx = np.triu_indices(k, 1)
        d2 = s[i_idx] ** 2 - s[j_idx] ** 2
        nd = eta_s[i_idx] * s[i_idx] - eta_s[j_idx] * s[j_idx]
        degenerate = np.abs(d2) < gap_tol
        terms = np.zeros_like(d2)
        ok = ~degenerate
        terms[ok] = nd[ok] / d2[ok]
        if np.any(degenerate):
            sbar = 0.5 * (s[i_idx] + s[j_idx])[degenerate]
            lim = np.full_like(sbar, deriv_at_zero)
            big = sbar >= zero_tol
            if np.any(big):
                sb = sbar[big]
                lim[big] = (
                    np.asarray(eta.derivative(sb)) * sb + np.asarray(eta.value(sb))
                ) / (2.0 * sb)
            terms[degenerate] = lim
        total += 2.0 * float(np.sum(terms))

    if n_cols != m_rows:
        ratio = np.full_like(s, deriv_at_zero)
        big = s >= zero_tol
        ratio[big] = eta_s[big] / s[big]
        total += (n_cols - m_rows) * float(np.sum(ratio))
    return total


def numerical_divergence_oracle(W, eta, h=None, probes=None, seed=0):
    """Finite-difference estimate of the divergence of W -> eta(W).

    With probes >= W.size (the default) the Jacobian trace is computed
    exactly by central differences of every matrix entry. Smaller probe
    counts use the randomized estimator E[g . (eta(W+hg) - eta(W-hg))]/(2h)
    over i.i.d. sign matrices g. Independent of `divergence` by construction;
    serves as its test oracle.
    """
    W = np.asarray(W, dtype=float)
    M, N = W.shape
    if h is None:
        norm = float(np.linalg.norm(W))
        h = 1e-6 * norm if norm > 0 else 1e-6
    if probes is None or probes >= M * N:
        total = 0.0
        E = np.zeros_like(W)
        for i in range(M):
            for j in range(N):
                E[i, j] = h
                plus = apply_shrinker(W + E, eta)
                minus = apply_shrinker(W - E, eta)
                total += (plus[i, j] - minus[i, j]) / (2.0 * h)
                E[i, j] = 0.0
        return total
    rng = np.random.default_rng(seed)
    acc = 0.0
    for _ in range(probes):
        g = rng.integers(0, 2, size=(M, N)) * 2.0 - 1.0
        diff = apply_shrinker(W + h * g, eta) - apply_shrinker(W - h * g, eta)
        acc += float(np.sum(g * diff)) / (2.0 * h)
    return acc / probes
