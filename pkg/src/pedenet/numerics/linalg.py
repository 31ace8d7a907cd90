"""Cholesky-based log-determinant and linear solve for covariance matrices."""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve

from pedenet.errors import InvalidArgumentError, SingularMatrixError
from pedenet.numerics.tensor import Tensor, as_tensor, make_result

JITTER_START = 1e-6
JITTER_DOUBLINGS = 6


def _jittered_cholesky(s: np.ndarray, component: int) -> tuple[np.ndarray, float]:
    """Cholesky of ``s``; on failure retry with eps*I, eps = 1e-6 doubled up to 6 times."""
    try:
        return np.linalg.cholesky(s), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(s.shape[-1], dtype=s.dtype)
    eps = JITTER_START
    for _ in range(JITTER_DOUBLINGS + 1):
        try:
            return np.linalg.cholesky(s + eps * eye), eps
        except np.linalg.LinAlgError:
            eps *= 2.0
    raise SingularMatrixError(component, eps / 2.0)


def cholesky_logdet_and_solve(sigma, rhs) -> tuple[Tensor, Tensor]:
    """Return (log det sigma, sigma^-1 rhs), both differentiable.

    ``sigma`` is (Z, Z) or a stack (B, Z, Z). ``rhs`` is a vector (..., Z) or
    a matrix of columns (..., Z, M) with the same leading batch shape. The
    input is symmetrized before factorization, so the gradient w.r.t.
    ``sigma`` is symmetric.
    """
    sigma = as_tensor(sigma)
    rhs = as_tensor(rhs, dtype=sigma.dtype)
    if sigma.ndim not in (2, 3) or sigma.shape[-1] != sigma.shape[-2]:
        raise InvalidArgumentError(f"sigma must be (Z,Z) or (B,Z,Z), got {sigma.shape}")
    batched = sigma.ndim == 3
    vector_rhs = rhs.ndim == sigma.ndim - 1
    z = sigma.shape[-1]
    s = sigma.data if batched else sigma.data[None]
    r = rhs.data if batched else rhs.data[None]
    if vector_rhs:
        r = r[..., None]
    if r.shape[:2] != (s.shape[0], z):
        raise InvalidArgumentError(f"rhs shape {rhs.shape} incompatible with sigma {sigma.shape}")
    s = 0.5 * (s + np.swapaxes(s, -1, -2))

    eye = np.eye(z, dtype=s.dtype)
    logdets = np.empty(s.shape[0], dtype=s.dtype)
    sols = np.empty(r.shape, dtype=s.dtype)
    invs = np.empty(s.shape, dtype=s.dtype)
    for b in range(s.shape[0]):
        chol, _ = _jittered_cholesky(s[b], b)
        logdets[b] = 2.0 * np.sum(np.log(np.diagonal(chol)))
        sols[b] = cho_solve((chol, True), r[b])
        invs[b] = cho_solve((chol, True), eye)

    def _shape_sigma_grad(gs: np.ndarray) -> np.ndarray:
        gs = 0.5 * (gs + np.swapaxes(gs, -1, -2))
        return gs if batched else gs[0]

    logdet_out = logdets if batched else logdets[0]

    def logdet_backward(g):
        g = np.reshape(g, (-1, 1, 1))
        return (_shape_sigma_grad(g * invs),)

    sol_out = sols[..., 0] if vector_rhs else sols
    if not batched:
        sol_out = sol_out[0]

    def solve_backward(g):
        g = g if batched else g[None]
        if vector_rhs:
            g = g[..., None]
        grhs = invs @ g
        gsig = -grhs @ np.swapaxes(sols, -1, -2)
        out_rhs = grhs[..., 0] if vector_rhs else grhs
        if not batched:
            out_rhs = out_rhs[0]
        return _shape_sigma_grad(gsig), out_rhs

    logdet = make_result(np.asarray(logdet_out), (sigma,), logdet_backward)
    solution = make_result(sol_out, (sigma, rhs), solve_backward)
    return logdet, solution
