"""Density-estimation head: soft GMM memberships, batch GMM fit and likelihood losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from pedenet.numerics import MLP, Tensor, as_tensor, cast, cholesky_logdet_and_solve, diagonal, logsumexp, softmax
from pedenet.numerics.tensor import log, matmul, swap_last, transpose

DENOM_EPS = 1e-12
LOG_2PI = math.log(2.0 * math.pi)

NORMALIZERS = ("standard", "printed")
OBJECTIVES = ("mean_nll", "log_mean")


class DeNetwork(MLP):
    """Z -> 128 -> 64 -> 32 -> K logits."""

    def __init__(self, n_components: int = 5, embed_dim: int = 64, hidden: tuple[int, ...] = (128, 64, 32)):
        super().__init__("de", [embed_dim, *hidden, n_components])
        self.n_components = n_components


@dataclass
class GmmParams:
    phi: Tensor  # (K,)
    mu: Tensor  # (K, Z)
    sigma: Tensor  # (K, Z, Z)

    @property
    def n_components(self) -> int:
        return self.phi.shape[0]

    def detached(self) -> "GmmParams":
        return GmmParams(self.phi.detach(), self.mu.detach(), self.sigma.detach())

    def arrays(self) -> dict[str, np.ndarray]:
        return {"phi": self.phi.data.copy(), "mu": self.mu.data.copy(), "sigma": self.sigma.data.copy()}

    @classmethod
    def from_arrays(cls, phi, mu, sigma) -> "GmmParams":
        return cls(as_tensor(np.asarray(phi, dtype=np.float64)), as_tensor(np.asarray(mu, dtype=np.float64)),
                   as_tensor(np.asarray(sigma, dtype=np.float64)))


def membership(net: DeNetwork, params: dict[str, Tensor], z: Tensor) -> Tensor:
    """gamma = softmax(DEN(z)), shape (N, K)."""
    return softmax(net(params, z), axis=-1)


def estimate_gmm(z: Tensor, gamma: Tensor) -> GmmParams:
    """Membership-weighted mixture weights, means and (1/N_k-weighted) covariances."""
    n = z.shape[0]
    nk = gamma.sum(axis=0)  # (K,)
    phi = nk * (1.0 / n)
    denom = nk + DENOM_EPS
    mu = matmul(transpose(gamma), z) / denom.reshape(-1, 1)  # (K, Z)
    diff = z.reshape(n, 1, -1) - mu.reshape(1, *mu.shape)  # (N, K, Z)
    diff_k = transpose(diff, (1, 0, 2))  # (K, N, Z)
    weighted = diff_k * transpose(gamma).reshape(gamma.shape[1], n, 1)
    sigma = matmul(swap_last(weighted), diff_k) / denom.reshape(-1, 1, 1)  # (K, Z, Z)
    return GmmParams(phi, mu, sigma)


def component_log_densities(z: Tensor, params: GmmParams, normalizer: str = "standard", cov_eps: float = 0.0) -> Tensor:
    """log(phi_k N(z_i | mu_k, sigma_k)) for every pair, shape (K, N)."""
    if normalizer not in NORMALIZERS:
        raise ValueError(f"normalizer must be one of {NORMALIZERS}")
    z = as_tensor(z)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    n, dim = z.shape
    k = params.n_components
    sigma = params.sigma
    if cov_eps:
        sigma = sigma + np.eye(dim, dtype=sigma.dtype) * cov_eps
    diff = z.reshape(1, n, dim) - params.mu.reshape(k, 1, dim)  # (K, N, Z)
    rhs = swap_last(diff)  # (K, Z, N)
    logdet, sol = cholesky_logdet_and_solve(sigma, rhs)
    maha = (rhs * sol).sum(axis=1)  # (K, N)
    const = dim * LOG_2PI if normalizer == "standard" else LOG_2PI
    log_norm = (logdet + const) * -0.5  # (K,)
    return log(params.phi).reshape(k, 1) + log_norm.reshape(k, 1) - maha * 0.5


def log_likelihood(z, params: GmmParams, normalizer: str = "standard", cov_eps: float = 0.0) -> Tensor:
    """log P(z_i) for a batch (N, Z) -> (N,), evaluated with log-sum-exp over components."""
    return logsumexp(component_log_densities(z, params, normalizer, cov_eps), axis=0)


def likelihood(z, params: GmmParams, normalizer: str = "standard", cov_eps: float = 0.0) -> float:
    """Mixture density P(z) for a single embedding."""
    z = np.asarray(as_tensor(z).data)
    if z.ndim != 1:
        raise ValueError("likelihood takes a single embedding; use log_likelihood for batches")
    return float(np.exp(log_likelihood(Tensor(z[None]), params, normalizer, cov_eps).data[0]))


def den_loss_from_log_likelihood(logp: Tensor, objective: str = "mean_nll") -> Tensor:
    if objective == "mean_nll":
        return logp.mean() * -1.0
    if objective == "log_mean":
        # literal -(1/N) log sum_i P(z_i)
        return logsumexp(logp, axis=0) * (-1.0 / logp.shape[0])
    raise ValueError(f"objective must be one of {OBJECTIVES}")


def den_loss(
    net: DeNetwork,
    params: dict[str, Tensor],
    z_batch: Tensor,
    objective: str = "mean_nll",
    normalizer: str = "standard",
    cov_eps: float = 0.0,
) -> tuple[Tensor, GmmParams]:
    """Fit the batch GMM from the DE memberships and return (L_DEN, fitted params).

    The mixture statistics are evaluated in float64 whatever the network dtype.
    """
    if z_batch.shape[0] < 2:
        raise ValueError("den_loss needs at least two embeddings")
    gamma = cast(membership(net, params, z_batch), np.float64)
    z64 = cast(z_batch, np.float64)
    gmm = estimate_gmm(z64, gamma)
    logp = log_likelihood(z64, gmm, normalizer, cov_eps)
    return den_loss_from_log_likelihood(logp, objective), gmm


def reg_loss(params: GmmParams) -> Tensor:
    """Sum over components and dimensions of 1 / sigma_k[z, z]."""
    return (1.0 / diagonal(params.sigma)).sum()
