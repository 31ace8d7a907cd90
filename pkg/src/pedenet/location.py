"""Location-prediction head: which of the eight neighbours a second patch came from."""
from __future__ import annotations

import numpy as np

from pedenet.numerics import MLP, Tensor, as_tensor, clamp_min, softmax
from pedenet.numerics.tensor import log

N_LOCATIONS = 8
PROB_FLOOR = 1e-12


class LpNetwork(MLP):
    """Z -> 128 -> 128 -> 8 logits; the softmax is applied in ``predict_location``."""

    def __init__(self, embed_dim: int = 64, hidden: tuple[int, ...] = (128, 128)):
        super().__init__("lp", [embed_dim, *hidden, N_LOCATIONS])


def predict_location(net: LpNetwork, params: dict[str, Tensor], z: Tensor, z_prime: Tensor) -> Tensor:
    """Probability over the eight relative positions of ``z_prime``'s patch w.r.t. ``z``'s.

    Accepts single embeddings (Z,) or batches (N, Z).
    """
    z, z_prime = as_tensor(z), as_tensor(z_prime)
    single = z.ndim == 1
    diff = z - z_prime
    if single:
        diff = diff.reshape(1, -1)
    probs = softmax(net(params, diff), axis=-1)
    return probs.reshape(N_LOCATIONS) if single else probs


def _one_hot_like(labels, l_hat: Tensor) -> np.ndarray:
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if labels.shape == l_hat.shape:
        return labels.astype(l_hat.dtype)
    out = np.zeros(l_hat.shape, dtype=l_hat.dtype)
    if l_hat.ndim == 1:
        out[int(labels)] = 1.0
    else:
        out[np.arange(len(labels)), labels.astype(np.int64)] = 1.0
    return out


def lp_loss(l_hat: Tensor, labels) -> Tensor:
    """Cross-entropy -log l_hat[true], averaged over the batch when l_hat is (N, 8).

    ``labels`` may be one-hot rows or integer class indices.
    """
    l_hat = as_tensor(l_hat)
    onehot = _one_hot_like(labels, l_hat)
    picked = (l_hat * onehot).sum(axis=-1)
    nll = log(clamp_min(picked, PROB_FLOOR)) * -1.0
    return nll.mean() if nll.ndim else nll
