"""Wire format: routing masks, masked entropy streams, and the container.

A compressed image is one container: a fixed header, a losslessly coded
routing-mask segment, and per-granularity hyper-latent and index streams.
Routing masks assign every finest-grid region to exactly one of three
granularities (coarse / medium / fine); only cells active at a granularity
are entropy-coded there.

All multi-byte integers are little-endian.  The header carries a CRC-32 over
everything after the checksum field, so any single corrupted byte is detected
before stream decoding starts.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .context_coders import CodingStats, code_indices_context, decode_indices_context
from .range_coder import RangeDecoder, RangeEncoder, quantize_pmf

MAGIC = b"HVQC"
VERSION = 1

# Image-pixel stride of each granularity's index grid, coarse to fine.
GRANULARITY_STRIDES = (16, 8, 4)

# A coarse block is this many fine-grid cells on a side.
_COARSE_OVER_FINE = 4

_LOG2_TOTAL = 16.0  # -log2(freq/2^16) = 16 - log2(freq)


class ContainerFormatError(ValueError):
    """Base class for malformed containers."""


class ContainerMagicError(ContainerFormatError):
    pass


class ContainerVersionError(ContainerFormatError):
    pass


class ContainerTruncatedError(ContainerFormatError):
    pass


class ContainerDimensionError(ContainerFormatError):
    pass


class ContainerChecksumError(ContainerFormatError):
    pass


# -- routing masks ---------------------------------------------------------


def upsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-replicate a binary grid by ``factor`` in both directions."""
    return np.kron(mask, np.ones((factor, factor), dtype=mask.dtype))


@dataclass(frozen=True)
class RoutingMask:
    """Binary activity grids, one per granularity.

    ``m_c`` is (Hc, Wc) at the coarse grid, ``m_m`` twice that, ``m_f`` four
    times.  Upsampled to the fine grid they must partition it: every fine
    cell is claimed by exactly one granularity.
    """

    m_c: np.ndarray
    m_m: np.ndarray
    m_f: np.ndarray

    def __post_init__(self):
        for name, m in (("m_c", self.m_c), ("m_m", self.m_m), ("m_f", self.m_f)):
            if m.ndim != 2 or not np.all((m == 0) | (m == 1)):
                raise ValueError(f"{name} must be a binary 2-D grid")
        hc, wc = self.m_c.shape
        if self.m_m.shape != (2 * hc, 2 * wc) or self.m_f.shape != (4 * hc, 4 * wc):
            raise ValueError(
                f"mask shapes disagree: {self.m_c.shape}, {self.m_m.shape}, {self.m_f.shape}"
            )
        total = upsample_mask(self.m_c, 4) + upsample_mask(self.m_m, 2) + self.m_f
        if not np.all(total == 1):
            raise ValueError("masks do not partition the fine grid")

    @property
    def masks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.m_c, self.m_m, self.m_f)

    def active_counts(self) -> tuple[int, int, int]:
        return (int(self.m_c.sum()), int(self.m_m.sum()), int(self.m_f.sum()))

    def ternary(self) -> np.ndarray:
        """(Hc, Wc) block labels: 0 = coarse, 1 = medium, 2 = fine."""
        hc, wc = self.m_c.shape
        med = self.m_m.reshape(hc, 2, wc, 2).max(axis=(1, 3)).astype(np.int64)
        fin = self.m_f.reshape(hc, 4, wc, 4).max(axis=(1, 3)).astype(np.int64)
        return med + 2 * fin


def mask_from_ternary(tern: np.ndarray) -> RoutingMask:
    """Rebuild the three binary grids from per-block labels."""
    tern = np.asarray(tern)
    if tern.ndim != 2 or not np.all((tern >= 0) & (tern <= 2)):
        raise ValueError("ternary mask labels must be 0, 1 or 2")
    return RoutingMask(
        m_c=(tern == 0).astype(np.uint8),
        m_m=upsample_mask((tern == 1).astype(np.uint8), 2),
        m_f=upsample_mask((tern == 2).astype(np.uint8), 4),
    )


def allocate_masks(
    features: np.ndarray, ratios: tuple[float, float, float] = (0.3, 0.3, 0.4)
) -> RoutingMask:
    """Assign granularities by local feature variance, smoothest first.

    ``features`` is the fine-grid (D, Hf, Wf) feature stack with Hf, Wf
    divisible by 4.  Blocks are ranked by the variance of all feature values
    in their 4x4 fine-cell footprint (ascending, raster order breaking ties);
    the lowest floor(rho_c * N) become coarse, the next floor(rho_m * N)
    medium, the rest fine.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise ValueError(f"features must be (D, Hf, Wf), got {f.shape}")
    rc, rm, rf = (float(r) for r in ratios)
    if rc < 0 or rm < 0 or rf < 0 or abs(rc + rm + rf - 1.0) > 1e-6:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    D, Hf, Wf = f.shape
    if Hf % _COARSE_OVER_FINE or Wf % _COARSE_OVER_FINE:
        raise ValueError(f"fine grid {Hf}x{Wf} not divisible by {_COARSE_OVER_FINE}")
    hc, wc = Hf // _COARSE_OVER_FINE, Wf // _COARSE_OVER_FINE
    blocks = f.reshape(D, hc, _COARSE_OVER_FINE, wc, _COARSE_OVER_FINE)
    var = blocks.transpose(1, 3, 0, 2, 4).reshape(hc, wc, -1).var(axis=2)
    n = hc * wc
    n_c = int(np.floor(rc * n))
    n_m = int(np.floor(rm * n))
    order = np.argsort(var.ravel(), kind="stable")
    tern = np.full(n, 2, dtype=np.int64)
    tern[order[:n_c]] = 0
    tern[order[n_c : n_c + n_m]] = 1
    return mask_from_ternary(tern.reshape(hc, wc))


def pack_masks(m: RoutingMask) -> bytes:
    """One ternary symbol per coarse block, adaptive order-0 coded."""
    return code_indices_context(m.ternary(), 0, 3)[0]


def unpack_masks(data: bytes, coarse_shape: tuple[int, int]) -> RoutingMask:
    """Inverse of ``pack_masks`` given the coarse-grid shape."""
    tern = decode_indices_context(data, coarse_shape, 0, 3)
    return mask_from_ternary(tern)


# -- masked entropy streams ------------------------------------------------


def _check_mask_grid(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(values)
    m = np.asarray(mask)
    if v.shape != m.shape or v.ndim != 2:
        raise ValueError(f"values {v.shape} and mask {m.shape} must be equal 2-D shapes")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    return v, m


def encode_masked_symbols(
    values: np.ndarray, probs: np.ndarray, mask: np.ndarray
) -> tuple[bytes, CodingStats]:
    """Entropy-code ``values[mask == 1]`` in raster order, per-cell tables.

    ``probs`` is (K, H, W); exactly popcount(mask) symbols are coded.
    """
    v, m = _check_mask_grid(values, mask)
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 3 or p.shape[1:] != v.shape:
        raise ValueError(f"probs {p.shape} does not match grid {v.shape}")
    if not m.any():
        return b"", CodingStats(0, 0, 0.0)
    enc = RangeEncoder()
    ideal = 0.0
    n = 0
    for i, j in zip(*np.nonzero(m)):
        cdf = quantize_pmf(p[:, i, j])
        s = int(v[i, j])
        enc.encode(cdf, s)
        ideal += _LOG2_TOTAL - float(np.log2(int(cdf[s + 1]) - int(cdf[s])))
        n += 1
    data = enc.finish()
    return data, CodingStats(n, len(data), ideal)


def decode_masked_symbols(
    data: bytes, probs: np.ndarray, mask: np.ndarray, fill: int = 0
) -> np.ndarray:
    """Inverse of ``encode_masked_symbols``; inactive cells take ``fill``."""
    m = np.asarray(mask)
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 3 or p.shape[1:] != m.shape:
        raise ValueError(f"probs {p.shape} does not match mask {m.shape}")
    out = np.full(m.shape, fill, dtype=np.int64)
    dec = RangeDecoder(data)
    for i, j in zip(*np.nonzero(m)):
        out[i, j] = dec.decode(quantize_pmf(p[:, i, j]))
    return out


def z_active_mask(index_mask: np.ndarray, stride: int = 4) -> np.ndarray:
    """Hyper-cell activity: active iff any index cell in its footprint is.

    ``index_mask`` is the (H_g, W_g) activity grid of one granularity; the
    result is (ceil(H_g/stride), ceil(W_g/stride)).
    """
    m = np.asarray(index_mask)
    if m.ndim != 2:
        raise ValueError("index mask must be 2-D")
    H, W = m.shape
    h, w = -(-H // stride), -(-W // stride)
    padded = np.zeros((h * stride, w * stride), dtype=m.dtype)
    padded[:H, :W] = m
    return padded.reshape(h, stride, w, stride).max(axis=(1, 3)).astype(np.uint8)


def encode_z_stream(
    zq: np.ndarray, tables: np.ndarray, zmask: np.ndarray, z_max: int
) -> tuple[bytes, CodingStats]:
    """Code active hyper-latent cells channel-major with per-channel tables.

    ``zq`` is (C, h, w) integers in [-z_max, z_max]; ``tables`` is the (C, A)
    per-channel pmf with A = 2*z_max + 1; ``zmask`` the (h, w) activity grid.
    """
    z = np.asarray(zq)
    t = np.asarray(tables, dtype=np.float64)
    m = np.asarray(zmask)
    if z.ndim != 3 or m.shape != z.shape[1:]:
        raise ValueError(f"latent {z.shape} and mask {m.shape} disagree")
    if t.shape != (z.shape[0], 2 * z_max + 1):
        raise ValueError(f"tables must be ({z.shape[0]}, {2 * z_max + 1}), got {t.shape}")
    if z.size and (z.min() < -z_max or z.max() > z_max):
        raise ValueError("latent value outside alphabet")
    if not m.any():
        return b"", CodingStats(0, 0, 0.0)
    enc = RangeEncoder()
    ideal = 0.0
    n = 0
    active = np.nonzero(m)
    for c in range(z.shape[0]):
        cdf = quantize_pmf(t[c])
        syms = (z[c][active] + z_max).tolist()
        enc.encode_many(syms, cdf)
        freqs = np.diff(cdf.astype(np.int64))
        ideal += float(np.sum(_LOG2_TOTAL - np.log2(freqs[syms]))) if syms else 0.0
        n += len(syms)
    data = enc.finish()
    return data, CodingStats(n, len(data), ideal)


def decode_z_stream(
    data: bytes, tables: np.ndarray, zmask: np.ndarray, z_max: int
) -> np.ndarray:
    """Inverse of ``encode_z_stream``; inactive cells come back as 0."""
    t = np.asarray(tables, dtype=np.float64)
    m = np.asarray(zmask)
    C = t.shape[0]
    out = np.zeros((C, m.shape[0], m.shape[1]), dtype=np.int32)
    active = np.nonzero(m)
    count = len(active[0])
    dec = RangeDecoder(data)
    for c in range(C):
        if count:
            syms = dec.decode_many(quantize_pmf(t[c]), count)
            out[c][active] = np.asarray(syms, dtype=np.int32) - z_max
    return out


# -- container -------------------------------------------------------------


@dataclass(frozen=True)
class GranularityStreams:
    """Length-prefixed payloads of one granularity."""

    z_count: int
    z_bytes: bytes
    y_count: int
    y_bytes: bytes


@dataclass(frozen=True)
class ContainerParts:
    height: int
    width: int
    padded_height: int
    padded_width: int
    codebook_size: int
    depth: int
    hyper_channels: int
    hyper_hidden: int
    hyper_stride: int
    hyper_z_max: int
    mask_bytes: bytes
    streams: tuple[GranularityStreams, GranularityStreams, GranularityStreams]

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ContainerDimensionError("image dimensions must be positive")
        if self.padded_height < self.height or self.padded_width < self.width:
            raise ContainerDimensionError("padded dimensions smaller than image")
        s = GRANULARITY_STRIDES[0]
        if self.padded_height % s or self.padded_width % s:
            raise ContainerDimensionError(f"padded dimensions must be multiples of {s}")
        if self.padded_height - self.height >= s or self.padded_width - self.width >= s:
            raise ContainerDimensionError("padding exceeds one coarse stride")
        if self.codebook_size < 2 or self.depth < 1:
            raise ContainerDimensionError("codebook must have K >= 2, D >= 1")
        if len(self.streams) != 3:
            raise ContainerDimensionError("expected exactly three granularity streams")

    def coarse_shape(self) -> tuple[int, int]:
        s = GRANULARITY_STRIDES[0]
        return (self.padded_height // s, self.padded_width // s)

    def total_bytes(self) -> int:
        return len(serialize(self))

    def bpp(self) -> float:
        return 8.0 * self.total_bytes() / (self.height * self.width)


# Fixed header: magic(4) version(2) crc(4), then
# H, W, Hp, Wp, K as u32 and D, C, hidden, stride, z_max, flags as u16.
_FIXED_HEADER_LEN = 10 + 5 * 4 + 6 * 2


def serialize(parts: ContainerParts) -> bytes:
    """Container bytes; the CRC covers everything after the checksum field."""
    body = [
        struct.pack(
            "<IIII I HHHHH H",
            parts.height, parts.width, parts.padded_height, parts.padded_width,
            parts.codebook_size, parts.depth,
            parts.hyper_channels, parts.hyper_hidden, parts.hyper_stride,
            parts.hyper_z_max, 0,
        ),
        struct.pack("<I", len(parts.mask_bytes)),
        parts.mask_bytes,
    ]
    for st in parts.streams:
        body.append(struct.pack("<II", st.z_count, len(st.z_bytes)))
        body.append(st.z_bytes)
        body.append(struct.pack("<II", st.y_count, len(st.y_bytes)))
        body.append(st.y_bytes)
    payload = b"".join(body)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return MAGIC + struct.pack("<HI", VERSION, crc) + payload


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.off = offset

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise ContainerTruncatedError(f"container ends inside {what}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]


def deserialize(data: bytes) -> ContainerParts:
    """Parse and validate a container; every defect raises a named error."""
    if len(data) < 10:
        raise ContainerTruncatedError(f"container of {len(data)} bytes has no header")
    if data[:4] != MAGIC:
        raise ContainerMagicError(f"bad magic {data[:4]!r}")
    version, crc = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise ContainerVersionError(f"unsupported container version {version}")
    # Walk the structure first so truncation is reported as truncation; the
    # checksum then covers whatever parsed cleanly.
    r = _Reader(data, 10)
    H, W, Hp, Wp, K = (r.u32(f) for f in ("height", "width", "padded height", "padded width", "K"))
    D = r.u16("depth")
    C = r.u16("hyper channels")
    hidden = r.u16("hyper hidden")
    stride = r.u16("hyper stride")
    z_max = r.u16("hyper z_max")
    flags = r.u16("flags")
    mask_bytes = r.take(r.u32("mask segment length"), "mask segment")
    streams = []
    for g in range(3):
        z_count = r.u32(f"granularity {g} latent count")
        z_bytes = r.take(r.u32(f"granularity {g} latent length"), f"granularity {g} latent stream")
        y_count = r.u32(f"granularity {g} index count")
        y_bytes = r.take(r.u32(f"granularity {g} index length"), f"granularity {g} index stream")
        streams.append(GranularityStreams(z_count, z_bytes, y_count, y_bytes))
    if r.off != len(data):
        raise ContainerTruncatedError(f"{len(data) - r.off} trailing bytes after last stream")
    if zlib.crc32(data[10:]) & 0xFFFFFFFF != crc:
        raise ContainerChecksumError("checksum mismatch: container is corrupt")
    if flags != 0:
        raise ContainerVersionError(f"unknown flag bits 0x{flags:04x}")
    return ContainerParts(
        height=H, width=W, padded_height=Hp, padded_width=Wp,
        codebook_size=K, depth=D,
        hyper_channels=C, hyper_hidden=hidden, hyper_stride=stride, hyper_z_max=z_max,
        mask_bytes=mask_bytes, streams=tuple(streams),
    )


def layout(data: bytes) -> list[tuple[str, int, int]]:
    """(name, offset, size) for every segment; validates while walking."""
    parts = deserialize(data)
    rows = [("header", 0, _FIXED_HEADER_LEN)]
    off = _FIXED_HEADER_LEN
    rows.append(("mask-length", off, 4)); off += 4
    rows.append(("mask", off, len(parts.mask_bytes))); off += len(parts.mask_bytes)
    for name, st in zip(("coarse", "medium", "fine"), parts.streams):
        rows.append((f"{name}-latent-length", off, 8)); off += 8
        rows.append((f"{name}-latent", off, len(st.z_bytes))); off += len(st.z_bytes)
        rows.append((f"{name}-index-length", off, 8)); off += 8
        rows.append((f"{name}-index", off, len(st.y_bytes))); off += len(st.y_bytes)
    return rows
