"""Synthetic sources with known statistics: AR(1) fields, mosaics, Markov rows.

The AR(1) construction is separable: white noise filtered first along rows,
then along columns, with stationary initialization, so the field has unit
variance and autocorrelation ``rho^|di| * rho^|dj|`` where
``rho = exp(-1 / corr_len)``.
"""

from __future__ import annotations

import numpy as np


def ar1_rho(corr_len: float) -> float:
    return float(np.exp(-1.0 / corr_len))


def _ar1_filter_rows(w: np.ndarray, rho: float) -> np.ndarray:
    """Filter white noise along the last axis into a stationary AR(1) chain."""
    out = np.empty_like(w)
    out[..., 0] = w[..., 0]
    c = np.sqrt(1.0 - rho * rho)
    for t in range(1, w.shape[-1]):
        out[..., t] = rho * out[..., t - 1] + c * w[..., t]
    return out


def ar1_field(shape: tuple[int, int], corr_len: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gauss-Markov field of the given (H, W) shape."""
    rho = ar1_rho(corr_len)
    w = rng.standard_normal(shape)
    x = _ar1_filter_rows(w, rho)
    x = _ar1_filter_rows(x.T, rho).T
    return x


def ar1_feature_grid(
    depth: int, shape: tuple[int, int], corr_len: float, rng: np.random.Generator
) -> np.ndarray:
    """(D, H, W) stack of independent AR(1) fields."""
    return np.stack([ar1_field(shape, corr_len, rng) for _ in range(depth)])


def ar1_image(shape: tuple[int, int], corr_len: float, rng: np.random.Generator) -> np.ndarray:
    """(3, H, W) image in [0, 1] rendered from two correlated fields."""
    a = ar1_field(shape, corr_len, rng)
    b = ar1_field(shape, corr_len, rng)
    chans = [0.5 + 0.18 * a, 0.5 + 0.12 * a + 0.10 * b, 0.5 - 0.15 * b]
    return np.clip(np.stack(chans), 0.0, 1.0)


def mosaic_image(
    shape: tuple[int, int],
    rng: np.random.Generator,
    patch: int = 16,
    palette: np.ndarray | None = None,
) -> np.ndarray:
    """(3, H, W) image of constant color patches drawn from a small palette."""
    H, W = shape
    if palette is None:
        palette = np.array(
            [[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.15, 0.2, 0.9], [0.85, 0.85, 0.1]]
        )
    bh = (H + patch - 1) // patch
    bw = (W + patch - 1) // patch
    choice = rng.integers(0, len(palette), size=(bh, bw))
    blocks = palette[choice]  # (bh, bw, 3)
    img = np.repeat(np.repeat(blocks, patch, axis=0), patch, axis=1)[:H, :W]
    return img.transpose(2, 0, 1).copy()


def cyclic_transition(K: int, fanout: int) -> np.ndarray:
    """Transition matrix: from state s, uniform over {s, s+1, .., s+fanout-1 mod K}.

    Conditional entropy is exactly log2(fanout); the stationary distribution
    is uniform.
    """
    if not 1 <= fanout <= K:
        raise ValueError("fanout must be in [1, K]")
    T = np.zeros((K, K))
    for s in range(K):
        for d in range(fanout):
            T[s, (s + d) % K] = 1.0 / fanout
    return T


def transition_entropy(T: np.ndarray) -> float:
    """Conditional entropy in bits under the uniform stationary distribution."""
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(T > 0, -T * np.log2(np.where(T > 0, T, 1.0)), 0.0)
    return float(h.sum(axis=1).mean())


def markov_row_indices(
    shape: tuple[int, int], T: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """(H, W) index grid; each row is an independent first-order Markov chain.

    The first symbol of each row is uniform; subsequent symbols follow ``T``.
    """
    H, W = shape
    K = T.shape[0]
    cum = np.cumsum(T, axis=1)
    grid = np.empty((H, W), dtype=np.int64)
    grid[:, 0] = rng.integers(0, K, size=H)
    u = rng.random(size=(H, W))
    for t in range(1, W):
        prev = grid[:, t - 1]
        grid[:, t] = (cum[prev] > u[:, t, None]).argmax(axis=1)
    return grid


def uniform_indices(shape: tuple[int, int], K: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, K, size=shape)
