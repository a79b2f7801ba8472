"""Concrete hierarchical targets exposed through a black-box interface.

Every model is a bundle of callables over a global latent theta and
per-branch locals z_i:

    log_prior(theta)                      log p(theta)
    log_branch(theta, z_i, data_i)        log p(z_i, y_i | theta, x_i)
    log_obs(theta, z_i, data_i)           log p(y_i | theta, z_i, x_i)

plus matching analytic gradients. Estimators only ever touch this surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .data import BranchData, BranchDataset
from .errors import InvalidDataError
from .gaussmath import (
    LOG_2PI,
    GaussianSpec,
    UnconstrainedChol,
    diag_transform_grad,
    packed_diag_indices,
    spec_from_moments,
    tril_map,
    tril_size,
)
from .rng import RngStream


@dataclass
class HbdModel:
    """Two-level hierarchical target with analytic gradients."""

    global_dim: int
    local_dim: int
    symmetric: bool
    log_prior: Callable
    log_prior_grad: Callable        # theta -> (value, grad)
    log_branch: Callable            # (theta, z, BranchData) -> value
    log_branch_grad: Callable       # (theta, z, BranchData) -> (value, g_theta, g_z)
    log_obs: Callable               # (theta, z, BranchData) -> value


@dataclass
class SyntheticConfig:
    dim: int                 # theta and z_i dimension (covariates share it)
    n_branches: int
    obs_per_branch: tuple    # n_i, length n_branches

    def __post_init__(self):
        self.obs_per_branch = tuple(int(v) for v in self.obs_per_branch)
        if self.n_branches <= 0:
            raise InvalidDataError("n_branches must be positive")
        if len(self.obs_per_branch) != self.n_branches:
            raise InvalidDataError("obs_per_branch must have length n_branches")
        if any(n <= 0 for n in self.obs_per_branch):
            raise InvalidDataError("each branch needs at least one observation")


# ---------------------------------------------------------------------------
# Synthetic hierarchical regression:
#   theta ~ N(0, I),  z_i ~ N(theta, I),  y_ij ~ N(x_ij' z_i, 1)


def synthetic_model(D: int, N: int, n) -> HbdModel:
    """Hierarchical linear regression with unit covariances throughout."""
    SyntheticConfig(D, N, tuple(n))  # shape validation only

    def log_prior(theta):
        return -0.5 * float(theta @ theta) - 0.5 * D * LOG_2PI

    def log_prior_grad(theta):
        return log_prior(theta), -theta

    def log_branch(theta, z, d: BranchData):
        r = z - theta
        resid = d.y - d.x @ z
        return (-0.5 * float(r @ r) - 0.5 * float(resid @ resid)
                - 0.5 * (D + d.n) * LOG_2PI)

    def log_branch_grad(theta, z, d: BranchData):
        r = z - theta
        resid = d.y - d.x @ z
        val = (-0.5 * float(r @ r) - 0.5 * float(resid @ resid)
               - 0.5 * (D + d.n) * LOG_2PI)
        return val, r, -r + d.x.T @ resid

    def log_obs(theta, z, d: BranchData):
        resid = d.y - d.x @ z
        return -0.5 * float(resid @ resid) - 0.5 * d.n * LOG_2PI

    return HbdModel(D, D, True, log_prior, log_prior_grad,
                    log_branch, log_branch_grad, log_obs)


@dataclass
class SyntheticLatents:
    theta: np.ndarray
    z: np.ndarray  # (N, D)


def synthetic_forward_sample(config: SyntheticConfig, rng: RngStream):
    """Forward-sample a dataset; covariates are i.i.d. standard normal."""
    D = config.dim
    gen = rng.generator()
    theta = gen.standard_normal(D)
    branches = []
    zs = np.empty((config.n_branches, D))
    for i, n_i in enumerate(config.obs_per_branch):
        z = theta + gen.standard_normal(D)
        x = gen.standard_normal((n_i, D))
        y = x @ z + gen.standard_normal(n_i)
        zs[i] = z
        branches.append(BranchData(x, y))
    dataset = BranchDataset(branches, D, has_covariates=True)
    return dataset, SyntheticLatents(theta, zs)


@dataclass
class SyntheticOracle:
    """Closed-form posterior and marginal likelihood for the synthetic model."""

    posterior_global: GaussianSpec
    posterior_local: Callable     # (theta, i) -> GaussianSpec
    log_marginal: float


def synthetic_oracle(data: BranchDataset) -> SyntheticOracle:
    """Exact posterior over theta, conditionals over z_i, and log p(y | x).

    With X_i the (n_i, D) covariate matrix of branch i:
      theta | y, x   Gaussian with precision I + sum_i X_i' (I + X_i X_i')^{-1} X_i
      z_i | theta    N((I + X_i'X_i)^{-1} (X_i'y_i + theta), (I + X_i'X_i)^{-1})
      y | x          N(0, S) with S_ii = I + 2 X_i X_i' and S_ij = X_i X_j'.

    The marginal materializes the dense (sum n_i)^2 covariance: O((sum n_i)^3),
    intended for desk-scale checks only.
    """
    D = data.covariate_dim
    N = data.n_branches
    if any(b.x.shape[1] != D for b in data.branches):
        raise InvalidDataError("branches disagree on covariate dimension")

    prec = np.eye(D)
    lin = np.zeros(D)
    for b in data.branches:
        C = np.eye(b.n) + b.x @ b.x.T
        cf = cho_factor(C, lower=True)
        CinvX = cho_solve(cf, b.x)
        prec += b.x.T @ CinvX
        lin += CinvX.T @ b.y
    cov_theta = np.linalg.inv(prec)
    cov_theta = 0.5 * (cov_theta + cov_theta.T)
    mean_theta = cov_theta @ lin
    posterior_global = spec_from_moments(mean_theta, cov_theta)

    local_cov = []
    local_lin = []
    for b in data.branches:
        P = np.eye(D) + b.x.T @ b.x
        Pc = np.linalg.inv(P)
        Pc = 0.5 * (Pc + Pc.T)
        local_cov.append(Pc)
        local_lin.append(b.x.T @ b.y)

    def posterior_local(theta, i):
        mean = local_cov[i] @ (local_lin[i] + theta)
        return spec_from_moments(mean, local_cov[i])

    sizes = [b.n for b in data.branches]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    M = int(offsets[-1])
    S = np.zeros((M, M))
    for i, bi in enumerate(data.branches):
        si = slice(offsets[i], offsets[i + 1])
        S[si, si] = np.eye(bi.n) + 2.0 * bi.x @ bi.x.T
        for j in range(i + 1, N):
            bj = data.branches[j]
            sj = slice(offsets[j], offsets[j + 1])
            block = bi.x @ bj.x.T
            S[si, sj] = block
            S[sj, si] = block.T
    y_all = np.concatenate([b.y for b in data.branches])
    Ls = np.linalg.cholesky(S)
    t = solve_triangular(Ls, y_all, lower=True)
    log_marginal = (-0.5 * float(t @ t) - float(np.sum(np.log(np.diag(Ls))))
                    - 0.5 * M * LOG_2PI)
    return SyntheticOracle(posterior_global, posterior_local, log_marginal)


# ---------------------------------------------------------------------------
# Bernoulli preference model:
#   theta = [theta_mu, theta_sigma],  z_i ~ N(theta_mu, Sigma(theta)),
#   y_ij ~ Bernoulli(sigmoid(x_ij' z_i)),  Sigma(theta) = tril(theta_sigma)' tril(theta_sigma)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def preference_global_dim(D: int) -> int:
    return D + tril_size(D)


def preference_model(D: int, N: int | None = None, n=None, gamma: float = 1.0) -> HbdModel:
    """Binary preference model with a latent covariance emitted by theta.

    theta stacks a D-dim location with the packed D(D+1)/2 factor vector;
    the factor realizes through the same diagonal map as variational
    factors (gamma defaults to 1). Observations must be 0/1.
    """
    gdim = preference_global_dim(D)
    dpos = packed_diag_indices(D)

    def _check_binary(y):
        if y.size and not np.all((y == 0.0) | (y == 1.0)):
            raise InvalidDataError("preference model requires binary observations")

    def log_prior(theta):
        return -0.5 * float(theta @ theta) - 0.5 * gdim * LOG_2PI

    def log_prior_grad(theta):
        return log_prior(theta), -theta

    def _local_parts(theta, z):
        # log N(z | mu, L'L) and its gradients; Sigma^{-1} r via two solves.
        mu = theta[:D]
        raw = theta[D:]
        Lfac = tril_map(UnconstrainedChol(raw, D, gamma))
        r = z - mu
        t = solve_triangular(Lfac, r, lower=True, trans="T")  # L' t = r
        u = solve_triangular(Lfac, t, lower=True)             # L u = t  =>  u = Sigma^{-1} r
        val = -0.5 * float(t @ t) - float(np.sum(np.log(np.diag(Lfac)))) - 0.5 * D * LOG_2PI
        return val, mu, raw, Lfac, u

    def _local_grad_raw(Lfac, u, raw):
        gL = np.tril((Lfac @ np.outer(u, u)))
        gL[np.arange(D), np.arange(D)] -= 1.0 / np.diag(Lfac)
        rows, cols = np.tril_indices(D)
        graw = gL[rows, cols]
        graw[dpos] *= diag_transform_grad(raw[dpos], gamma)
        return graw

    def _obs_term(z, d: BranchData):
        # einsum keeps each logit independent of the number of rows, and the
        # sorted sum fixes the float reduction order, so the value is exactly
        # invariant to permuting the observations within the branch.
        eta = np.einsum("ij,j->i", d.x, z)
        per_obs = d.y * eta - _softplus(eta)
        return float(np.sum(np.sort(per_obs))), eta

    def log_branch(theta, z, d: BranchData):
        _check_binary(d.y)
        val, _, _, _, _ = _local_parts(theta, z)
        obs, _ = _obs_term(z, d)
        return val + obs

    def log_branch_grad(theta, z, d: BranchData):
        _check_binary(d.y)
        val, _, raw, Lfac, u = _local_parts(theta, z)
        obs, eta = _obs_term(z, d)
        resid = d.y - _sigmoid(eta)
        g_theta = np.concatenate([u, _local_grad_raw(Lfac, u, raw)])
        g_z = -u + d.x.T @ resid
        return val + obs, g_theta, g_z

    def log_obs(theta, z, d: BranchData):
        _check_binary(d.y)
        return _obs_term(z, d)[0]

    return HbdModel(gdim, D, True, log_prior, log_prior_grad,
                    log_branch, log_branch_grad, log_obs)


@dataclass
class PreferenceConfig:
    dim: int                 # covariate / z dimension
    n_branches: int
    obs_per_branch: tuple
    gamma: float = 1.0

    def __post_init__(self):
        self.obs_per_branch = tuple(int(v) for v in self.obs_per_branch)
        if self.n_branches <= 0:
            raise InvalidDataError("n_branches must be positive")
        if len(self.obs_per_branch) != self.n_branches:
            raise InvalidDataError("obs_per_branch must have length n_branches")


def preference_forward_sample(config: PreferenceConfig, rng: RngStream):
    """Forward-sample preference data; covariates i.i.d. standard normal."""
    D = config.dim
    gen = rng.generator()
    theta = gen.standard_normal(preference_global_dim(D))
    Lfac = tril_map(UnconstrainedChol(theta[D:], D, config.gamma))
    branches = []
    zs = np.empty((config.n_branches, D))
    for i, n_i in enumerate(config.obs_per_branch):
        # z ~ N(mu, L'L): draw via the upper factor L'.
        z = theta[:D] + Lfac.T @ gen.standard_normal(D)
        x = gen.standard_normal((n_i, D))
        y = (gen.random(n_i) < _sigmoid(x @ z)).astype(float)
        zs[i] = z
        branches.append(BranchData(x, y))
    dataset = BranchDataset(branches, D, has_covariates=True)
    return dataset, SyntheticLatents(theta, zs)
