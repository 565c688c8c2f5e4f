"""Shared vector-quantization codebook: nearest-neighbour assignment and storage.

A codebook is a ``(K, D)`` table of embedding vectors shared by every
granularity of the feature pyramid.  Feature grids are stored channel-first
as ``(D, H, W)`` float arrays; index grids are ``(H, W)`` integer arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CODEBOOK_MAGIC = b"VQCB"

# Commitment weight for the codebook regularizer (stop-gradient form).
DEFAULT_BETA = 0.25

# Cells processed per chunk when scanning the codebook; bounds the size of the
# (chunk, K, D) distance workspace.
_CHUNK = 512


class CodebookFormatError(ValueError):
    """Raised when codebook bytes do not parse as a valid table."""


@dataclass(frozen=True)
class Codebook:
    """Immutable ``(K, D)`` table of embedding vectors (float64 in memory)."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2:
            raise ValueError(f"entries must be 2-D (K, D), got shape {e.shape}")
        if e.shape[0] < 2:
            raise ValueError("codebook needs at least two entries")
        if e.shape[1] < 1:
            raise ValueError("embedding dimension must be >= 1")
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook entries must be finite")
        e = e.copy()
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def D(self) -> int:
        return self.entries.shape[1]

    def snapped(self) -> "Codebook":
        """Entries rounded through float32, matching on-disk precision.

        Encoder and decoder must agree on entry values exactly, so anything
        that was (or will be) persisted is snapped before coding.
        """
        return Codebook(self.entries.astype(np.float32).astype(np.float64))


def quantize(features: np.ndarray, cb: Codebook) -> np.ndarray:
    """Map a ``(D, H, W)`` feature grid to its ``(H, W)`` nearest-index grid.

    Distances are accumulated in double precision and ties resolve to the
    smallest index, so assignment is platform-stable.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise ValueError(f"features must be (D, H, W), got shape {f.shape}")
    if f.shape[0] != cb.D:
        raise ValueError(f"feature dim {f.shape[0]} != codebook dim {cb.D}")
    _, H, W = f.shape
    flat = f.reshape(cb.D, H * W).T  # (N, D)
    out = np.empty(H * W, dtype=np.int64)
    e = cb.entries  # (K, D)
    for start in range(0, flat.shape[0], _CHUNK):
        block = flat[start : start + _CHUNK]  # (n, D)
        diff = block[:, None, :] - e[None, :, :]  # (n, K, D)
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        # argmin returns the first (smallest-index) minimiser.
        out[start : start + block.shape[0]] = np.argmin(d2, axis=1)
    return out.reshape(H, W)


def dequantize(indices: np.ndarray, cb: Codebook) -> np.ndarray:
    """Look up an ``(H, W)`` index grid, returning the ``(D, H, W)`` embedding grid."""
    idx = np.asarray(indices)
    if idx.ndim != 2:
        raise ValueError(f"indices must be (H, W), got shape {idx.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= cb.K):
        raise IndexError(f"index out of range for codebook with K={cb.K}")
    return cb.entries[idx].transpose(2, 0, 1).copy()


def commitment_loss(
    features: np.ndarray, quantized: np.ndarray, beta: float = DEFAULT_BETA
) -> float:
    """Two-term VQ regularizer ``||sg[y] - e||^2 + beta * ||sg[e] - y||^2``.

    This returns the scalar value only; the training tape re-expresses the
    same quantity with explicit stop-gradients so each term pulls on a single
    operand.
    """
    y = np.asarray(features, dtype=np.float64)
    e = np.asarray(quantized, dtype=np.float64)
    if y.shape != e.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {e.shape}")
    sq = float(np.sum((y - e) ** 2))
    return sq + beta * sq


def save_codebook(path: str | Path, cb: Codebook) -> None:
    Path(path).write_bytes(codebook_to_bytes(cb))


def load_codebook(path: str | Path) -> Codebook:
    return codebook_from_bytes(Path(path).read_bytes())


def codebook_to_bytes(cb: Codebook) -> bytes:
    """Serialize as magic, u32 K, u32 D, then K*D float32 little-endian."""
    header = CODEBOOK_MAGIC + struct.pack("<II", cb.K, cb.D)
    body = cb.entries.astype("<f4").tobytes(order="C")
    return header + body


def codebook_from_bytes(data: bytes) -> Codebook:
    if len(data) < 12:
        raise CodebookFormatError("codebook blob shorter than header")
    if data[:4] != CODEBOOK_MAGIC:
        raise CodebookFormatError(f"bad magic {data[:4]!r}")
    K, D = struct.unpack("<II", data[4:12])
    want = 12 + 4 * K * D
    if len(data) != want:
        raise CodebookFormatError(f"expected {want} bytes for K={K} D={D}, got {len(data)}")
    entries = np.frombuffer(data, dtype="<f4", offset=12).reshape(K, D)
    return Codebook(entries.astype(np.float64))
