"""Slow, loop-based reference implementations used as test oracles.

Nothing here shares code with the package beyond reading parameter arrays.
"""
import math

import numpy as np


def gauss_jordan(matrix):
    """(determinant, inverse) of a square list-of-lists via partial pivoting."""
    n = len(matrix)
    a = [list(map(float, row)) + [1.0 if i == j else 0.0 for j in range(n)] for i, row in enumerate(matrix)]
    det = 1.0
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs(a[r][col]))
        if a[pivot][col] == 0.0:
            return 0.0, None
        if pivot != col:
            a[col], a[pivot] = a[pivot], a[col]
            det = -det
        p = a[col][col]
        det *= p
        a[col] = [v / p for v in a[col]]
        for r in range(n):
            if r != col and a[r][col] != 0.0:
                factor = a[r][col]
                a[r] = [v - factor * w for v, w in zip(a[r], a[col])]
    return det, [row[n:] for row in a]


def leaky(v, slope=0.1):
    return v if v > 0 else slope * v


def mlp_forward(weights, biases, x, slope=0.1):
    """Dense layers with leaky ReLU between them; weights[l][i][j] maps input i to output j."""
    h = list(map(float, x))
    for layer, (w, b) in enumerate(zip(weights, biases)):
        out = [float(b[j]) + sum(h[i] * float(w[i][j]) for i in range(len(h))) for j in range(len(b))]
        h = out if layer == len(weights) - 1 else [leaky(v, slope) for v in out]
    return h


def softmax(values):
    m = max(values)
    e = [math.exp(v - m) for v in values]
    s = sum(e)
    return [v / s for v in e]


def gmm_fit(z, gamma):
    """Membership-weighted phi, mu, sigma with the 1e-12 denominator guard."""
    n, k, dim = len(z), len(gamma[0]), len(z[0])
    phi, mu, sigma = [], [], []
    for c in range(k):
        nk = sum(gamma[i][c] for i in range(n))
        phi.append(nk / n)
        m = [sum(gamma[i][c] * z[i][d] for i in range(n)) / (nk + 1e-12) for d in range(dim)]
        s = [[sum(gamma[i][c] * (z[i][a] - m[a]) * (z[i][b] - m[b]) for i in range(n)) / (nk + 1e-12)
              for b in range(dim)] for a in range(dim)]
        mu.append(m)
        sigma.append(s)
    return phi, mu, sigma


def mixture_density(x, phi, mu, sigma):
    """Sum_k phi_k N(x | mu_k, sigma_k) with the standard (2 pi)^(Z/2) |sigma|^(1/2) normaliser."""
    dim = len(x)
    total = 0.0
    for p, m, s in zip(phi, mu, sigma):
        det, inv = gauss_jordan(s)
        diff = [x[d] - m[d] for d in range(dim)]
        maha = sum(diff[a] * inv[a][b] * diff[b] for a in range(dim) for b in range(dim))
        total += p * math.exp(-0.5 * maha) / ((2 * math.pi) ** (dim / 2) * math.sqrt(det))
    return total


def den_loss_oracle(weights, biases, z, slope=0.1):
    """Memberships from the MLP, batch GMM fit, then mean negative log-likelihood."""
    gamma = [softmax(mlp_forward(weights, biases, zi, slope)) for zi in z]
    phi, mu, sigma = gmm_fit(z, gamma)
    return -sum(math.log(mixture_density(zi, phi, mu, sigma)) for zi in z) / len(z)


def auroc_pairs(scores, labels):
    """Fraction of (positive, negative) pairs ordered correctly, ties counting one half."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def linear_scan(query, rows):
    """Minimum Euclidean distance by direct differences."""
    diff = np.asarray(rows) - np.asarray(query)
    return float(np.sqrt(np.sum(diff * diff, axis=1)).min())
