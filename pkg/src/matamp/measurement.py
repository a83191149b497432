"""Random linear measurement operators R^{MxN} -> R^n with adjoint, three
entry ensembles, and low-rank problem-instance generation.

Everything is regenerated from 64-bit seeds: operators and instances are
pure functions of (seed, dimensions, ensemble), so records never store raw
matrices. Child seeds come from `mix_seed`, a SplitMix64-style mixer over
(parent seed, role tag, index), which lets parallel workers derive
independent streams without coordination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

ENSEMBLES = ("gaussian", "rademacher", "student_t6")

# Rows are generated in fixed-size blocks from a single PCG64 stream so that
# dense storage and on-the-fly (implicit) regeneration are bit-identical.
ROW_BLOCK = 256

# Above this many stored entries sample_operator(mode="auto") switches to
# implicit row regeneration (approx. 1.2 GB of float64).
DENSE_ENTRY_LIMIT = 150_000_000

_MASK64 = (1 << 64) - 1


def mix_seed(parent, tag, index=0):
    """Derive a child seed from (parent, role tag, index).

    FNV-1a absorbs the tag bytes, then a SplitMix64 finalizer mixes in the
    index. Deterministic and stable across processes.
    """
    z = (int(parent) ^ 0x9E3779B97F4A7C15) & _MASK64
    for b in str(tag).encode("utf8"):
        z = ((z ^ b) * 0x100000001B3) & _MASK64
    z = (z + 0x9E3779B97F4A7C15 * (int(index) + 1)) & _MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z


def rng_from_seed(seed):
    return np.random.Generator(np.random.PCG64(int(seed)))


def _draw_rows(rng, ensemble, count, width, n_meas):
    """One block of operator rows, entries i.i.d. mean 0 variance 1/n."""
    if ensemble == "gaussian":
        return rng.standard_normal((count, width)) / math.sqrt(n_meas)
    if ensemble == "rademacher":
        signs = np.where(rng.random((count, width)) < 0.5, 1.0, -1.0)
        return signs / math.sqrt(n_meas)
    if ensemble == "student_t6":
        # Var(t_6) = 6/4 = 1.5, so scale by 1/sqrt(1.5 n).
        return rng.standard_t(6, size=(count, width)) / math.sqrt(1.5 * n_meas)
    raise InvalidInput(f"unknown ensemble {ensemble!r}")


def iter_row_blocks(seed, ensemble, n_meas, width):
    """Yield (start, block) pairs covering all n_meas operator rows in order."""
    rng = rng_from_seed(seed)
    start = 0
    while start < n_meas:
        count = min(ROW_BLOCK, n_meas - start)
        yield start, _draw_rows(rng, ensemble, count, width, n_meas)
        start += count


@dataclass(frozen=True)
class MeasurementOperator:
    """Linear map R^{MxN} -> R^n; row i of the (possibly implicit) storage
    is the C-order vectorization of the i-th measurement matrix."""

    m_rows: int
    n_cols: int
    n_meas: int
    ensemble: str
    seed: int
    storage: np.ndarray | None  # n_meas x (m_rows * n_cols), None if implicit

    @property
    def mode(self):
        return "dense" if self.storage is not None else "implicit"

    def apply(self, X):
        """Forward measurements y_i = <vec(A_i), vec(X)>."""
        X = np.asarray(X, dtype=float)
        if X.shape != (self.m_rows, self.n_cols):
            raise InvalidInput(
                f"expected {self.m_rows}x{self.n_cols} matrix, got {X.shape}"
            )
        x = X.ravel()
        if self.storage is not None:
            return self.storage @ x
        y = np.empty(self.n_meas)
        for start, block in iter_row_blocks(
            self.seed, self.ensemble, self.n_meas, x.size
        ):
            y[start : start + block.shape[0]] = block @ x
        return y

    def adjoint(self, z):
        """Adjoint map sum_i z_i A_i, satisfying <A X, z> = <X, A* z>_F."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_meas,):
            raise InvalidInput(f"expected length-{self.n_meas} vector, got {z.shape}")
        if self.storage is not None:
            return (self.storage.T @ z).reshape(self.m_rows, self.n_cols)
        w = np.zeros(self.m_rows * self.n_cols)
        for start, block in iter_row_blocks(
            self.seed, self.ensemble, self.n_meas, w.size
        ):
            w += block.T @ z[start : start + block.shape[0]]
        return w.reshape(self.m_rows, self.n_cols)

    def transposed(self):
        """The operator acting on transposed matrices (rows vec(A_i^T))."""
        if self.storage is None:
            raise InvalidInput("implicit operators do not support transposition")
        rows = self.storage.reshape(self.n_meas, self.m_rows, self.n_cols)
        storage_t = np.ascontiguousarray(
            rows.transpose(0, 2, 1).reshape(self.n_meas, -1)
        )
        return MeasurementOperator(
            self.n_cols, self.m_rows, self.n_meas, self.ensemble, self.seed, storage_t
        )


def sample_operator(m_rows, n_cols, n_meas, ensemble, seed, mode="dense"):
    """Draw a measurement operator with i.i.d. variance-1/n entries.

    mode is "dense" (materialize n x MN storage), "implicit" (regenerate
    rows from the seed on every apply/adjoint), or "auto" (dense unless the
    storage would exceed DENSE_ENTRY_LIMIT entries). Dense and implicit
    operators with the same seed produce identical measurements.
    """
    if m_rows < 1 or n_cols < 1 or n_meas < 1:
        raise InvalidInput("dimensions must be >= 1")
    if ensemble not in ENSEMBLES:
        raise InvalidInput(f"unknown ensemble {ensemble!r}; choose from {ENSEMBLES}")
    if mode == "auto":
        mode = "dense" if n_meas * m_rows * n_cols <= DENSE_ENTRY_LIMIT else "implicit"
    if mode not in ("dense", "implicit"):
        raise InvalidInput(f"unknown mode {mode!r}")
    storage = None
    if mode == "dense":
        width = m_rows * n_cols
        storage = np.empty((n_meas, width))
        for start, block in iter_row_blocks(seed, ensemble, n_meas, width):
            storage[start : start + block.shape[0]] = block
    return MeasurementOperator(m_rows, n_cols, n_meas, ensemble, int(seed), storage)


def sample_stiefel(dim, r, seed):
    """Haar-uniform dim x r matrix with orthonormal columns.

    QR of a Gaussian matrix with the R diagonal signs forced positive; the
    sign fix is what makes the distribution rotation invariant.
    """
    if r > dim:
        raise InvalidInput(f"r={r} exceeds dim={dim}")
    if r < 0:
        raise InvalidInput("r must be >= 0")
    if r == 0:
        return np.zeros((dim, 0))
    G = rng_from_seed(seed).standard_normal((dim, r))
    Q, R = np.linalg.qr(G)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


@dataclass(frozen=True)
class ProblemInstance:
    """Ground truth X_true = mu * U V' (degenerate spectrum: all r nonzero
    singular values equal mu), the measurement operator, and y = A(X_true)."""

    X_true: np.ndarray
    operator: MeasurementOperator
    y: np.ndarray
    M: int
    N: int
    r: int
    n: int
    mu: float
    seed: int

    def to_record(self):
        """Self-describing record; instances regenerate from seeds."""
        return {
            "M": self.M,
            "N": self.N,
            "r": self.r,
            "n": self.n,
            "mu": self.mu,
            "ensemble": self.operator.ensemble,
            "seed": self.seed,
            "operator_seed": self.operator.seed,
            "mode": self.operator.mode,
        }

    @staticmethod
    def from_record(record):
        return sample_instance(
            record["M"],
            record["N"],
            record["r"],
            record["n"],
            record["mu"],
            record["ensemble"],
            record["seed"],
            mode=record.get("mode", "dense"),
        )

    def transposed(self):
        """The equivalent problem on X^T (used when M > N)."""
        return ProblemInstance(
            np.ascontiguousarray(self.X_true.T),
            self.operator.transposed(),
            self.y,
            self.N,
            self.M,
            self.r,
            self.n,
            self.mu,
            self.seed,
        )


def sample_instance(M, N, r, n, mu, ensemble, seed, mode="dense"):
    """Generate a recovery problem: X = mu * U V' with Haar U, V, then
    y = A(X) under a fresh operator. Operator and signal seeds are derived
    deterministically from the instance seed."""
    if not 0 <= r <= min(M, N):
        raise InvalidInput(f"rank r={r} out of range for {M}x{N}")
    if n < 1:
        raise InvalidInput("n must be >= 1")
    op = sample_operator(M, N, n, ensemble, mix_seed(seed, "operator"), mode=mode)
    U = sample_stiefel(M, r, mix_seed(seed, "signal_u"))
    V = sample_stiefel(N, r, mix_seed(seed, "signal_v"))
    X = mu * (U @ V.T) if r > 0 else np.zeros((M, N))
    y = op.apply(X)
    return ProblemInstance(X, op, y, M, N, r, n, float(mu), int(seed))
