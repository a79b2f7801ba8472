"""Gaussian and triangular-factor primitives.

Covariances are carried as unconstrained vectors that map to lower-triangular
Cholesky factors: off-diagonal entries pass through unchanged, diagonal
entries go through the positive map

    psi(x) = (x + sqrt(x^2 + 4*gamma)) / 2,   gamma > 0,

which behaves like x for large positive x and like -gamma/x for large
negative x, decaying to zero much more slowly than exp or softplus. Sampling
and density evaluation share the same standard-normal noise so that the
log-density at the sample never needs a triangular solve:

    x = mean + L @ eps   =>   log q(x) = -||eps||^2/2 - sum(log diag L) - d/2 log(2 pi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import MalformedParamsError
from .rng import RngStream

LOG_2PI = float(np.log(2.0 * np.pi))


def diag_transform(x, gamma: float = 1.0):
    """psi(x) = (x + sqrt(x^2 + 4 gamma)) / 2; positive, increasing, psi(x)psi(-x) = gamma.

    The negative branch uses the conjugate form 2 gamma / (sqrt(x^2+4g) - x),
    which avoids the cancellation the direct formula hits for large -x.
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(x * x + 4.0 * gamma)
    denom = np.where(x >= 0.0, 1.0, s - x)
    return np.where(x >= 0.0, 0.5 * (x + s), 2.0 * gamma / denom)


def diag_transform_grad(x, gamma: float = 1.0):
    """d psi / d x = (1 + x / sqrt(x^2 + 4 gamma)) / 2, always in (0, 1)."""
    x = np.asarray(x, dtype=float)
    s = np.sqrt(x * x + 4.0 * gamma)
    denom = np.where(x >= 0.0, 1.0, s - x)
    return np.where(x >= 0.0, 0.5 * (1.0 + x / s), 2.0 * gamma / (s * denom))


def diag_transform_inv(y, gamma: float = 1.0):
    """Inverse of psi on y > 0:  x = y - gamma / y."""
    y = np.asarray(y, dtype=float)
    return y - gamma / y


def tril_size(dim: int) -> int:
    return dim * (dim + 1) // 2


def packed_diag_indices(dim: int) -> np.ndarray:
    """Positions of the diagonal entries inside the row-major packed vector."""
    k = np.arange(dim)
    return k * (k + 3) // 2


@dataclass
class UnconstrainedChol:
    """Unconstrained parameter vector for one lower-triangular factor.

    ``raw`` is packed row-major: (0,0), (1,0), (1,1), (2,0), ...
    """

    raw: np.ndarray
    dim: int
    gamma: float = 1.0

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        if self.raw.shape != (tril_size(self.dim),):
            raise MalformedParamsError(
                f"raw has shape {self.raw.shape}, expected ({tril_size(self.dim)},) for dim {self.dim}"
            )
        if self.gamma <= 0:
            raise MalformedParamsError("gamma must be positive")


def tril_map(u: UnconstrainedChol) -> np.ndarray:
    """Realize the lower-triangular factor with strictly positive diagonal."""
    d = u.dim
    L = np.zeros((d, d))
    rows, cols = np.tril_indices(d)
    L[rows, cols] = u.raw
    dpos = packed_diag_indices(d)
    L[np.arange(d), np.arange(d)] = diag_transform(u.raw[dpos], u.gamma)
    return L


def tril_unmap(L: np.ndarray, gamma: float = 1.0) -> UnconstrainedChol:
    """Invert tril_map for a factor with positive diagonal."""
    d = L.shape[0]
    if L.shape != (d, d):
        raise MalformedParamsError("tril_unmap expects a square matrix")
    if np.any(np.diag(L) <= 0):
        raise MalformedParamsError("tril_unmap requires a strictly positive diagonal")
    rows, cols = np.tril_indices(d)
    raw = L[rows, cols].copy()
    dpos = packed_diag_indices(d)
    raw[dpos] = diag_transform_inv(np.diag(L), gamma)
    return UnconstrainedChol(raw, d, gamma)


def tril_map_backward(u: UnconstrainedChol, grad_L: np.ndarray) -> np.ndarray:
    """Pull a gradient on the realized factor back to the raw vector.

    Off-diagonal entries chain with factor 1, diagonal entries with psi'.
    Only the lower triangle of ``grad_L`` is read.
    """
    d = u.dim
    rows, cols = np.tril_indices(d)
    graw = grad_L[rows, cols].copy()
    dpos = packed_diag_indices(d)
    graw[dpos] *= diag_transform_grad(u.raw[dpos], u.gamma)
    return graw


@dataclass
class GaussianSpec:
    """Multivariate normal factor: mean plus unconstrained Cholesky vector."""

    mean: np.ndarray
    chol: UnconstrainedChol

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        if self.mean.shape != (self.chol.dim,):
            raise MalformedParamsError(
                f"mean has shape {self.mean.shape}, chol dim is {self.chol.dim}"
            )

    @property
    def dim(self) -> int:
        return self.chol.dim

    def cov(self) -> np.ndarray:
        L = tril_map(self.chol)
        return L @ L.T


def standard_spec(dim: int, gamma: float = 1.0) -> GaussianSpec:
    """N(0, I): zero mean and zero raw vector (psi(0) = sqrt(gamma))."""
    return GaussianSpec(np.zeros(dim), UnconstrainedChol(np.zeros(tril_size(dim)), dim, gamma))


def spec_from_moments(mean: np.ndarray, cov: np.ndarray, gamma: float = 1.0) -> GaussianSpec:
    """Build a spec whose realized covariance equals ``cov`` (via Cholesky)."""
    L = np.linalg.cholesky(cov)
    return GaussianSpec(np.asarray(mean, dtype=float), tril_unmap(L, gamma))


def mvn_draw(spec: GaussianSpec, eps: np.ndarray):
    """Deterministic reparameterized draw from given noise.

    Returns (sample, logpdf, L). The logpdf reuses ``eps`` directly, so no
    solve is performed and the value is exact at the sample.
    """
    L = tril_map(spec.chol)
    x = spec.mean + L @ eps
    logq = -0.5 * float(eps @ eps) - float(np.sum(np.log(np.diag(L)))) - 0.5 * spec.dim * LOG_2PI
    return x, logq, L


def mvn_sample(spec: GaussianSpec, rng: RngStream):
    """One reparameterized sample with its log-density."""
    eps = rng.normal(spec.dim)
    x, logq, _ = mvn_draw(spec, eps)
    return x, logq


def mvn_logpdf(spec: GaussianSpec, x: np.ndarray) -> float:
    """Exact log-density at an arbitrary point (triangular solve)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.dim,):
        raise MalformedParamsError(f"x has shape {x.shape}, expected ({spec.dim},)")
    L = tril_map(spec.chol)
    t = solve_triangular(L, x - spec.mean, lower=True)
    return -0.5 * float(t @ t) - float(np.sum(np.log(np.diag(L)))) - 0.5 * spec.dim * LOG_2PI


def gaussian_entropy(spec: GaussianSpec) -> float:
    L = tril_map(spec.chol)
    return 0.5 * spec.dim * (1.0 + LOG_2PI) + float(np.sum(np.log(np.diag(L))))
