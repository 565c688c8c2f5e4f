"""Classical entropy-coding baselines over index grids.

Three strategies, all raster-scan and losslessly invertible:

* static: one global frequency table, serialized ahead of the payload;
* adaptive order-N (N in 0..3): per-context counts with Laplace smoothing,
  context = previously decoded neighbors (left; +top; +top-left), updated
  after every symbol;
* hyper: externally supplied per-cell PMFs (no adaptation here).

``bits_per_index`` always measures the coded payload only; stream framing
(static table header, symbol counts) is accounted by the container.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .range_coder import PRECISION, RangeDecoder, RangeEncoder, quantize_pmf

# Context token for neighbors outside the grid.
BOUNDARY = -1

DEFAULT_ALPHA = 1.0

_LOG2_TOTAL = float(PRECISION)


@dataclass
class CodingStats:
    """Per-stream accounting used by benchmarks and coder-gap checks."""

    n_symbols: int
    payload_bytes: int
    ideal_bits: float  # sum of -log2(freq/2^16) over the tables actually used

    @property
    def realized_bits(self) -> int:
        return 8 * self.payload_bytes

    @property
    def bits_per_index(self) -> float:
        return self.realized_bits / self.n_symbols if self.n_symbols else 0.0


class AdaptiveContextModel:
    """Counts-based conditional model over contexts of decoded neighbors.

    Context tables are stored sparsely by context tuple; an unseen context
    falls back to the all-zero count vector, i.e. the uniform smoothed PMF.
    ``digest`` is a rolling hash advanced on every update so encoder and
    decoder traces can be compared step by step.
    """

    def __init__(self, num_symbols: int, order: int, alpha: float = DEFAULT_ALPHA):
        if not 0 <= order <= 3:
            raise ValueError("order must be in 0..3")
        if num_symbols < 2:
            raise ValueError("need at least two symbols")
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.K = num_symbols
        self.order = order
        self.alpha = alpha
        self._counts: dict[tuple[int, ...], np.ndarray] = {}
        self.digest = 0

    def context(self, grid: np.ndarray, i: int, j: int) -> tuple[int, ...]:
        """Neighbor tuple at (i, j): left, top, top-left, truncated to order."""
        if self.order == 0:
            return ()
        left = int(grid[i, j - 1]) if j > 0 else BOUNDARY
        if self.order == 1:
            return (left,)
        top = int(grid[i - 1, j]) if i > 0 else BOUNDARY
        if self.order == 2:
            return (left, top)
        tl = int(grid[i - 1, j - 1]) if i > 0 and j > 0 else BOUNDARY
        return (left, top, tl)

    def pmf(self, ctx: tuple[int, ...]) -> np.ndarray:
        counts = self._counts.get(ctx)
        if counts is None:
            return np.full(self.K, 1.0 / self.K)
        smoothed = counts + self.alpha
        return smoothed / smoothed.sum()

    def update(self, ctx: tuple[int, ...], symbol: int) -> None:
        counts = self._counts.get(ctx)
        if counts is None:
            counts = np.zeros(self.K, dtype=np.float64)
            self._counts[ctx] = counts
        counts[symbol] += 1.0
        self.digest = hash((self.digest, ctx, symbol))


def code_indices_context(
    grid: np.ndarray,
    order: int,
    num_symbols: int,
    alpha: float = DEFAULT_ALPHA,
    trace_out: list | None = None,
) -> tuple[bytes, float]:
    """Adaptively code a grid; returns (payload bytes, bits per index)."""
    data, stats = code_indices_context_stats(grid, order, num_symbols, alpha, trace_out)
    return data, stats.bits_per_index


def code_indices_context_stats(
    grid: np.ndarray,
    order: int,
    num_symbols: int,
    alpha: float = DEFAULT_ALPHA,
    trace_out: list | None = None,
) -> tuple[bytes, CodingStats]:
    grid = _check_grid(grid, num_symbols)
    model = AdaptiveContextModel(num_symbols, order, alpha)
    enc = RangeEncoder()
    ideal = 0.0
    H, W = grid.shape
    for i in range(H):
        for j in range(W):
            ctx = model.context(grid, i, j)
            cdf = quantize_pmf(model.pmf(ctx))
            s = int(grid[i, j])
            enc.encode(cdf, s)
            ideal += _LOG2_TOTAL - float(np.log2(int(cdf[s + 1]) - int(cdf[s])))
            model.update(ctx, s)
            if trace_out is not None:
                trace_out.append(model.digest)
    data = enc.finish()
    return data, CodingStats(H * W, len(data), ideal)


def decode_indices_context(
    data: bytes,
    shape: tuple[int, int],
    order: int,
    num_symbols: int,
    alpha: float = DEFAULT_ALPHA,
    trace_out: list | None = None,
) -> np.ndarray:
    """Invert code_indices_context; reproduces the encoder's model state."""
    model = AdaptiveContextModel(num_symbols, order, alpha)
    dec = RangeDecoder(data)
    H, W = shape
    grid = np.zeros((H, W), dtype=np.int64)
    for i in range(H):
        for j in range(W):
            ctx = model.context(grid, i, j)
            cdf = quantize_pmf(model.pmf(ctx))
            s = dec.decode(cdf)
            grid[i, j] = s
            model.update(ctx, s)
            if trace_out is not None:
                trace_out.append(model.digest)
    return grid


def code_indices_static(grid: np.ndarray, table: np.ndarray) -> tuple[bytes, float]:
    data, stats = code_indices_static_stats(grid, table)
    return data, stats.bits_per_index


def code_indices_static_stats(grid: np.ndarray, table: np.ndarray) -> tuple[bytes, CodingStats]:
    """One shared table for every cell; the quantized table leads the stream as K u16."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 1 or table.size < 2:
        raise ValueError("table must be a 1-D frequency vector with K >= 2")
    if np.any(table <= 0):
        raise ValueError("table frequencies must be positive")
    grid = _check_grid(grid, table.size)
    cdf = quantize_pmf(table / table.sum())
    freq = np.diff(cdf.astype(np.int64))
    header = freq.astype("<u2").tobytes()
    syms = grid.reshape(-1).tolist()
    enc = RangeEncoder()
    enc.encode_many(syms, cdf)
    payload = enc.finish()
    ideal = _ideal_bits_fixed(freq, grid)
    stats = CodingStats(grid.size, len(payload), ideal)
    return header + payload, stats


def decode_indices_static(
    data: bytes, shape: tuple[int, int], num_symbols: int
) -> np.ndarray:
    header_len = 2 * num_symbols
    if len(data) < header_len:
        raise ValueError("static stream shorter than its frequency table")
    freq = np.frombuffer(data, dtype="<u2", count=num_symbols).astype(np.int64)
    cdf = np.zeros(num_symbols + 1, dtype=np.uint32)
    np.cumsum(freq, out=cdf[1:])
    n = shape[0] * shape[1]
    syms = RangeDecoder(data[header_len:]).decode_many(cdf, n)
    return np.asarray(syms, dtype=np.int64).reshape(shape)


def code_indices_hyper(grid: np.ndarray, probs: np.ndarray) -> tuple[bytes, float]:
    data, stats = code_indices_hyper_stats(grid, probs)
    return data, stats.bits_per_index


def code_indices_hyper_stats(grid: np.ndarray, probs: np.ndarray) -> tuple[bytes, CodingStats]:
    """Code each cell under its own externally supplied PMF (model-driven path)."""
    grid, probs = _check_grid_probs(grid, probs)
    enc = RangeEncoder()
    ideal = 0.0
    H, W = grid.shape
    for i in range(H):
        for j in range(W):
            cdf = quantize_pmf(probs[:, i, j])
            s = int(grid[i, j])
            enc.encode(cdf, s)
            ideal += _LOG2_TOTAL - float(np.log2(int(cdf[s + 1]) - int(cdf[s])))
    data = enc.finish()
    return data, CodingStats(H * W, len(data), ideal)


def decode_indices_hyper(data: bytes, probs: np.ndarray) -> np.ndarray:
    """Invert code_indices_hyper given the same per-cell PMFs."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError("probs must be (K, H, W)")
    _, H, W = probs.shape
    dec = RangeDecoder(data)
    grid = np.empty((H, W), dtype=np.int64)
    for i in range(H):
        for j in range(W):
            grid[i, j] = dec.decode(quantize_pmf(probs[:, i, j]))
    return grid


def _check_grid(grid: np.ndarray, K: int) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError("grid must be a nonempty (H, W) array")
    if not np.issubdtype(grid.dtype, np.integer):
        raise ValueError("grid must hold integers")
    if grid.min() < 0 or grid.max() >= K:
        raise ValueError(f"indices out of range for alphabet size {K}")
    return grid


def _check_grid_probs(grid: np.ndarray, probs: np.ndarray):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError("probs must be (K, H, W)")
    grid = _check_grid(grid, probs.shape[0])
    if grid.shape != probs.shape[1:]:
        raise ValueError(f"grid {grid.shape} does not match probs {probs.shape}")
    return grid, probs


def _ideal_bits_fixed(freq: np.ndarray, grid: np.ndarray) -> float:
    counts = np.bincount(grid.reshape(-1), minlength=freq.size)
    return float(np.sum(counts * (_LOG2_TOTAL - np.log2(freq))))
