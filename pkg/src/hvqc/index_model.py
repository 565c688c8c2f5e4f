"""Categorical distributions over codebook indices, induced by Gaussian fields.

Each spatial cell carries a Gaussian ``N(mu, Sigma)`` in embedding space; the
probability of codebook entry ``e_k`` is the softmax of the negative halved
squared Mahalanobis distance:

    p[k] = exp(-0.5 * (e_k - mu)^T Sigma^{-1} (e_k - mu)) / Z

The isotropic special case ``Sigma = sigma^2 I`` reduces to
``p[k] proportional to exp(-||e_k - mu||^2 / (2 sigma^2))``.

Probabilities are floored at ``P_FLOOR`` and renormalized here, inside the
model, so the training objective and the entropy coder see identical tables.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .codebook import Codebook

# Scale floor for predicted standard deviations.
SIGMA_MIN = 1e-3

# Probability floor; matches one count at 16-bit coder precision.
P_FLOOR = 2.0 ** -16

_CHUNK = 512


def mahalanobis_sq(anchor: np.ndarray, mu: np.ndarray, cov: np.ndarray) -> float:
    """Squared Mahalanobis distance ``(a - mu)^T cov^{-1} (a - mu)``.

    Solved through the Cholesky factor; the covariance is never inverted
    explicitly.  Raises ``ValueError`` if ``cov`` is not symmetric positive
    definite.
    """
    a = np.asarray(anchor, dtype=np.float64).reshape(-1)
    m = np.asarray(mu, dtype=np.float64).reshape(-1)
    C = np.asarray(cov, dtype=np.float64)
    if C.shape != (a.size, a.size):
        raise ValueError(f"cov shape {C.shape} does not match dimension {a.size}")
    L = _chol(C)
    z = solve_triangular(L, a - m, lower=True)
    return float(np.dot(z, z))


def categorical_isotropic(
    cb: Codebook,
    mu: np.ndarray,
    sigma: np.ndarray | float,
    p_floor: float = P_FLOOR,
) -> np.ndarray:
    """Index probabilities for ``Sigma = sigma^2 I`` at every cell.

    ``mu`` is ``(D, H, W)``; ``sigma`` is ``(H, W)`` or scalar, each value
    >= ``SIGMA_MIN``.  Returns ``(K, H, W)`` probabilities.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 3 or mu.shape[0] != cb.D:
        raise ValueError(f"mu must be (D={cb.D}, H, W), got {mu.shape}")
    _, H, W = mu.shape
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (H, W))
    if not np.all(np.isfinite(sig)) or np.any(sig < SIGMA_MIN):
        raise ValueError(f"sigma must be finite and >= {SIGMA_MIN}")
    if not np.all(np.isfinite(mu)):
        raise ValueError("mu must be finite")

    N = H * W
    mu_flat = mu.reshape(cb.D, N).T  # (N, D)
    sig_flat = sig.reshape(N)
    e = cb.entries  # (K, D)
    out = np.empty((N, cb.K), dtype=np.float64)
    for s in range(0, N, _CHUNK):
        blk = slice(s, min(s + _CHUNK, N))
        # Divide each coordinate by sigma before squaring: identical operation
        # order to the Cholesky solve in the general path, so the two agree to
        # rounding error.
        z = (e[None, :, :] - mu_flat[blk, None, :]) / sig_flat[blk, None, None]
        d2 = np.einsum("nkd,nkd->nk", z, z)
        out[blk] = _softmax_neg_half(d2, p_floor)
    return out.T.reshape(cb.K, H, W)


def categorical_general(
    cb: Codebook,
    mu: np.ndarray,
    cov: np.ndarray,
    p_floor: float = P_FLOOR,
) -> np.ndarray:
    """Index probabilities under a full per-cell covariance.

    ``mu`` is ``(D, H, W)``; ``cov`` is ``(H, W, D, D)``, each matrix
    symmetric positive definite (symmetry checked to 1e-9).  Returns
    ``(K, H, W)`` probabilities.
    """
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if mu.ndim != 3 or mu.shape[0] != cb.D:
        raise ValueError(f"mu must be (D={cb.D}, H, W), got {mu.shape}")
    _, H, W = mu.shape
    if cov.shape != (H, W, cb.D, cb.D):
        raise ValueError(f"cov must be (H, W, {cb.D}, {cb.D}), got {cov.shape}")
    if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(cov)):
        raise ValueError("mu and cov must be finite")

    e = cb.entries  # (K, D)
    out = np.empty((cb.K, H, W), dtype=np.float64)
    for i in range(H):
        for j in range(W):
            C = cov[i, j]
            if np.max(np.abs(C - C.T)) > 1e-9:
                raise ValueError(f"covariance at ({i}, {j}) is not symmetric")
            L = _chol(C)
            z = solve_triangular(L, (e - mu[:, i, j]).T, lower=True)  # (D, K)
            d2 = np.einsum("dk,dk->k", z, z)
            out[:, i, j] = _softmax_neg_half(d2[None, :], p_floor)[0]
    return out


def cross_entropy_rate(indices: np.ndarray, probs: np.ndarray) -> float:
    """Total coded bits ``sum(-log2 p[selected])`` over a grid.

    ``indices`` is ``(H, W)``; ``probs`` is ``(K, H, W)``.
    """
    idx = np.asarray(indices)
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 3 or idx.shape != p.shape[1:]:
        raise ValueError(f"shape mismatch: indices {idx.shape}, probs {p.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= p.shape[0]):
        raise IndexError("index out of range for probability table")
    H, W = idx.shape
    sel = p[idx.reshape(-1), np.repeat(np.arange(H), W), np.tile(np.arange(W), H)]
    if np.any(sel <= 0.0):
        raise ValueError("selected symbol has zero probability")
    return float(-np.sum(np.log2(sel)))


def shannon_entropy(probs: np.ndarray) -> float:
    """Total entropy in bits, summed over cells: ``sum_cells sum_k -p log2 p``."""
    p = np.asarray(probs, dtype=np.float64)
    plogp = np.where(p > 0.0, p * np.log2(np.maximum(p, 1e-300)), 0.0)
    return float(-np.sum(plogp))


def _chol(C: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc


def _softmax_neg_half(d2: np.ndarray, p_floor: float) -> np.ndarray:
    """Row-wise ``softmax(-d2/2)`` with max-subtraction, floored and renormalized."""
    logits = -0.5 * d2
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    if p_floor > 0.0:
        p = np.maximum(p, p_floor)
        p /= p.sum(axis=1, keepdims=True)
    return p
