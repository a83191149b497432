"""Scalar singular-value shrinkers: soft thresholding, the spiked-model
optimal shrinker, its dimension-calibrated variant, and the noise-scaled
family used inside the AMP engine.

All maps act entrywise on nonnegative singular values. Each shrinker also
exposes its (weak) derivative, which the divergence computation needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

KINDS = ("soft", "spiked", "opt", "hard", "identity")


def soft_threshold(y, lam):
    """Soft thresholding (y - lam)_+ and its weak derivative 1{y > lam}.

    Returns a (value, derivative) pair; both broadcast over array input.
    """
    if lam <= 0:
        raise InvalidInput("soft threshold requires lam > 0")
    y = np.asarray(y, dtype=float)
    value = np.maximum(y - lam, 0.0)
    deriv = (y > lam).astype(float)
    return value, deriv


def spiked_shrinker(y, beta):
    """Optimal shrinker for the unit-noise spiked model.

    Maps y to sqrt((y^2 - beta - 1)^2 - 4*beta) / y above the bulk edge
    1 + sqrt(beta), and to 0 at or below it. Continuous at the edge, where
    the radicand vanishes.
    """
    _check_beta(beta)
    y = np.asarray(y, dtype=float)
    t = y * y - beta - 1.0
    rad = t * t - 4.0 * beta
    above = y > 1.0 + math.sqrt(beta)
    safe_y = np.where(above, y, 1.0)
    out = np.where(above, np.sqrt(np.maximum(rad, 0.0)) / safe_y, 0.0)
    return out if out.ndim else float(out)


def spiked_derivative(y, beta):
    """Derivative of `spiked_shrinker` for y strictly above the bulk edge.

    Equals -g/y^2 + 2*(y^2 - beta - 1)/g with g the shrinker's radicand
    square root. Defined as 0 on the flat region y <= 1 + sqrt(beta); the
    derivative diverges as y approaches the edge from above, which is the
    shrinker's genuine non-Lipschitz behavior, not an artifact.
    """
    _check_beta(beta)
    y = np.asarray(y, dtype=float)
    t = y * y - beta - 1.0
    rad = t * t - 4.0 * beta
    above = (y > 1.0 + math.sqrt(beta)) & (rad > 0.0)
    g = np.sqrt(np.where(above, rad, 1.0))
    safe_y = np.where(above, y, 1.0)
    out = np.where(above, -g / (safe_y * safe_y) + 2.0 * t / g, 0.0)
    return out if out.ndim else float(out)


def alpha_constant(rho, beta):
    """Calibration constant (sqrt(1 - beta*rho) + sqrt(beta - beta*rho)) / (1 + sqrt(beta))."""
    _check_beta(beta)
    if not 0.0 <= rho <= 1.0 or beta * rho > 1.0:
        raise InvalidInput(f"rank fraction rho={rho} out of range")
    return (math.sqrt(1.0 - beta * rho) + math.sqrt(beta - beta * rho)) / (
        1.0 + math.sqrt(beta)
    )


def opt_shrinker(sigma, n_dim, alpha, beta):
    """Dimension-calibrated spiked shrinker and its derivative.

    Evaluates a*sqrt(N) * spiked_shrinker(sigma / (a*sqrt(N))); by the chain
    rule the derivative is spiked_derivative at the rescaled argument (the
    a*sqrt(N) factors cancel). Returns a (value, derivative) pair.
    """
    if n_dim < 1:
        raise InvalidInput("n_dim must be >= 1")
    if not 0.0 < alpha <= 1.0:
        raise InvalidInput(f"alpha={alpha} out of (0, 1]")
    scale = alpha * math.sqrt(n_dim)
    x = np.asarray(sigma, dtype=float) / scale
    return scale * spiked_shrinker(x, beta), spiked_derivative(x, beta)


def _check_beta(beta):
    if not 0.0 < beta <= 1.0:
        raise InvalidInput(f"aspect ratio beta={beta} out of (0, 1]")


@dataclass(frozen=True)
class ShrinkerSpec:
    """A scalar shrinker with its derivative and the metadata the divergence
    formula needs.

    Use the constructors (`soft`, `spiked`, `opt`, `hard`, `identity`) rather
    than instantiating directly.
    """

    kind: str
    lam: float | None = None
    beta: float | None = None
    alpha: float | None = None
    n_dim: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown shrinker kind {self.kind!r}")
        if self.kind in ("soft", "hard") and (self.lam is None or self.lam <= 0):
            raise InvalidInput("soft/hard shrinkers require lam > 0")
        if self.kind in ("spiked", "opt"):
            _check_beta(self.beta)
        if self.kind == "opt":
            if self.alpha is None or not 0.0 < self.alpha <= 1.0:
                raise InvalidInput("opt shrinker requires alpha in (0, 1]")
            if self.n_dim is None or self.n_dim < 1:
                raise InvalidInput("opt shrinker requires n_dim >= 1")

    @staticmethod
    def soft(lam):
        return ShrinkerSpec("soft", lam=float(lam))

    @staticmethod
    def spiked(beta):
        return ShrinkerSpec("spiked", beta=float(beta))

    @staticmethod
    def opt(n_dim, alpha, beta):
        return ShrinkerSpec("opt", beta=float(beta), alpha=float(alpha), n_dim=int(n_dim))

    @staticmethod
    def hard(lam):
        return ShrinkerSpec("hard", lam=float(lam))

    @staticmethod
    def identity():
        return ShrinkerSpec("identity")

    def value(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "soft":
            return soft_threshold(y, self.lam)[0]
        if self.kind == "spiked":
            return np.asarray(spiked_shrinker(y, self.beta))
        if self.kind == "opt":
            return np.asarray(opt_shrinker(y, self.n_dim, self.alpha, self.beta)[0])
        if self.kind == "hard":
            return np.where(y > self.lam, y, 0.0)
        return y.copy()

    def derivative(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "soft":
            return soft_threshold(y, self.lam)[1]
        if self.kind == "spiked":
            return np.asarray(spiked_derivative(y, self.beta))
        if self.kind == "opt":
            return np.asarray(opt_shrinker(y, self.n_dim, self.alpha, self.beta)[1])
        if self.kind == "hard":
            return (y > self.lam).astype(float)
        return np.ones_like(y)


@dataclass(frozen=True)
class ScaledShrinker:
    """The noise-scaled map y -> sigma * eta(y / sigma).

    Its derivative at y is eta'(y / sigma); positive homogeneity means the
    scaled family inherits eta(y) <= y and monotonicity pointwise.
    """

    base: ShrinkerSpec
    sigma: float

    def value(self, y):
        y = np.asarray(y, dtype=float)
        return self.sigma * self.base.value(y / self.sigma)

    def derivative(self, y):
        y = np.asarray(y, dtype=float)
        return self.base.derivative(y / self.sigma)


def scaled_family(eta, sigma_hat):
    """Build the noise-scaled shrinker y -> sigma_hat * eta(y / sigma_hat)."""
    if sigma_hat <= 0:
        raise InvalidInput("sigma_hat must be positive")
    return ScaledShrinker(eta, float(sigma_hat))
