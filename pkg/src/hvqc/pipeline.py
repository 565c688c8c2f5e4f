"""End-to-end image codec built on the index-entropy machinery.

A small multi-resolution convolutional coder turns an RGB image into three
feature grids at 1/16, 1/8 and 1/4 of the image resolution, each vector-
quantized against a shared codebook.  A routing mask picks exactly one
granularity per region; the routed indices are entropy-coded under the
hyper-latent Gaussian model and packed, together with the latent and mask
streams, into a self-contained byte container.

Training runs in three stages: reconstruction with a straight-through
quantizer (A), rate-only entropy modelling on frozen features (B), and joint
fine-tuning of everything at a reduced learning rate (C).
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Adam,
    Var,
    conv2d,
    exp,
    log,
    matmul,
    pick,
    relu,
    reshape,
    sumv,
    take_axis,
    transpose,
    upsample2,
)
from .bitstream import (
    ContainerDimensionError,
    ContainerParts,
    GranularityStreams,
    RoutingMask,
    allocate_masks,
    decode_masked_symbols,
    decode_z_stream,
    deserialize,
    encode_masked_symbols,
    encode_z_stream,
    layout,
    pack_masks,
    serialize,
    unpack_masks,
    z_active_mask,
)
from .codebook import Codebook, dequantize, quantize
from .context_coders import CodingStats
from .hyperprior import (
    HyperConfig,
    HyperParams,
    TrainingDivergedError,
    hyper_analysis,
    hyper_synthesis,
    init_hyper_params,
    quantize_infer,
    quantize_train,
    train_stage_b,
    z_coder_pmf,
    z_rate,
)
from .index_model import categorical_isotropic

__all__ = [
    "CoderCheckpointError",
    "CurveRow",
    "DecodeResult",
    "EncodeResult",
    "GRANULARITY_NAMES",
    "GRANULARITY_STRIDES",
    "ModelMismatchError",
    "RdWeights",
    "ToyCoderConfig",
    "ToyCoderParams",
    "TrainConfig",
    "TrainResult",
    "decode_image",
    "encode_image",
    "fuse_embeddings",
    "init_toy_params",
    "load_coder_params",
    "rate_report",
    "save_coder_params",
    "toy_decode",
    "toy_encode",
    "train_stage_a",
    "train_stage_c",
    "train_stages",
]

GRANULARITY_NAMES = ("coarse", "medium", "fine")
GRANULARITY_STRIDES = (16, 8, 4)

_LN2 = float(np.log(2.0))
_BETA = 0.25  # weight of the feature-to-entry pull inside the VQ term

CODER_MAGIC = b"VQTC"
CODER_VERSION = 1


class ModelMismatchError(ValueError):
    """Container header disagrees with the supplied model parameters."""


class CoderCheckpointError(ValueError):
    """Raised when coder-parameter bytes do not parse."""


def _thread_cap() -> int:
    """Worker cap for the per-granularity stages, from ``HVQC_THREADS``."""
    try:
        return max(1, int(os.environ.get("HVQC_THREADS", "1")))
    except ValueError:
        return 1


def _map_granularities(fn, items):
    """Apply ``fn`` to the three per-granularity work items.

    Runs in a small thread pool when ``HVQC_THREADS`` allows; results are
    always assembled in granularity order, so the output is identical either
    way.
    """
    cap = min(_thread_cap(), len(items))
    if cap <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=cap) as pool:
        return list(pool.map(fn, items))


# -- toy multi-resolution coder --------------------------------------------


@dataclass(frozen=True)
class ToyCoderConfig:
    """Shape of the image coder: feature depth D and conv width."""

    depth: int
    hidden: int = 16

    def __post_init__(self):
        if self.depth < 1 or self.hidden < 1:
            raise ValueError("depth and hidden must be positive")


# Layer names in checkpoint order.  enc* halve resolution (2x2 kernels,
# stride 2); head_* project the trunk to D channels at each granularity;
# dec* map the fused D-channel map back to RGB via two nearest upsamplings.
_TOY_LAYER_ORDER = (
    "enc0_w", "enc0_b", "enc1_w", "enc1_b", "enc2_w", "enc2_b", "enc3_w", "enc3_b",
    "head_f_w", "head_f_b", "head_m_w", "head_m_b", "head_c_w", "head_c_b",
    "dec0_w", "dec0_b", "dec1_w", "dec1_b", "dec2_w", "dec2_b",
)


def _toy_layer_shapes(cfg: ToyCoderConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.depth, cfg.hidden
    return {
        "enc0_w": (h, 3, 2, 2), "enc0_b": (h,),
        "enc1_w": (h, h, 2, 2), "enc1_b": (h,),
        "enc2_w": (h, h, 2, 2), "enc2_b": (h,),
        "enc3_w": (h, h, 2, 2), "enc3_b": (h,),
        "head_f_w": (d, h, 1, 1), "head_f_b": (d,),
        "head_m_w": (d, h, 1, 1), "head_m_b": (d,),
        "head_c_w": (d, h, 1, 1), "head_c_b": (d,),
        "dec0_w": (h, d, 1, 1), "dec0_b": (h,),
        "dec1_w": (h, h, 3, 3), "dec1_b": (h,),
        "dec2_w": (3, h, 3, 3), "dec2_b": (3,),
    }


class ToyCoderParams:
    """Named trainable tensors of the image coder."""

    def __init__(self, cfg: ToyCoderConfig, layers: dict[str, Var]):
        shapes = _toy_layer_shapes(cfg)
        missing = set(shapes) - set(layers)
        extra = set(layers) - set(shapes)
        if missing or extra:
            raise ValueError(f"layer set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, want in shapes.items():
            got = layers[name].data.shape
            if got != want:
                raise ValueError(f"layer {name}: shape {got}, expected {want}")
            if not np.all(np.isfinite(layers[name].data)):
                raise ValueError(f"layer {name} contains non-finite values")
        self.cfg = cfg
        self.layers = {name: layers[name] for name in _TOY_LAYER_ORDER}

    def variables(self) -> list[Var]:
        return list(self.layers.values())

    def copy(self) -> "ToyCoderParams":
        return ToyCoderParams(self.cfg, {k: Var(v.data.copy()) for k, v in self.layers.items()})

    def snap_f32(self) -> None:
        """Round every tensor through float32 in place (checkpoint precision)."""
        for v in self.layers.values():
            v.data = v.data.astype(np.float32).astype(np.float64)


def init_toy_params(cfg: ToyCoderConfig, rng: np.random.Generator) -> ToyCoderParams:
    """He-scaled normal init for conv weights; zero biases."""
    layers: dict[str, Var] = {}
    for name, shape in _toy_layer_shapes(cfg).items():
        if name.endswith("_w"):
            fan_in = int(np.prod(shape[1:]))
            layers[name] = Var(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
        else:
            layers[name] = Var(np.zeros(shape))
    return ToyCoderParams(cfg, layers)


def toy_encode(x: np.ndarray | Var, p: ToyCoderParams) -> tuple[Var, Var, Var]:
    """(3, H, W) image -> feature grids at strides 16, 8 and 4.

    H and W must be multiples of 16 (pad first).  The 2x2/stride-2 conv
    stack gives every feature cell a receptive field of exactly its own
    footprint, so block-aligned content never bleeds across cells.
    """
    v = x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))
    if v.data.ndim != 3 or v.data.shape[0] != 3:
        raise ValueError(f"image must be (3, H, W), got {v.data.shape}")
    H, W = v.data.shape[1:]
    if H % 16 or W % 16:
        raise ValueError(f"image sides must be multiples of 16, got {H}x{W}")
    L = p.layers
    t = reshape(v, (1,) + v.data.shape)
    t = relu(conv2d(t, L["enc0_w"], L["enc0_b"], stride=2))
    t = relu(conv2d(t, L["enc1_w"], L["enc1_b"], stride=2))
    y_f = conv2d(t, L["head_f_w"], L["head_f_b"])
    t = relu(conv2d(t, L["enc2_w"], L["enc2_b"], stride=2))
    y_m = conv2d(t, L["head_m_w"], L["head_m_b"])
    t = relu(conv2d(t, L["enc3_w"], L["enc3_b"], stride=2))
    y_c = conv2d(t, L["head_c_w"], L["head_c_b"])
    return y_c, y_m, y_f


def toy_decode(fused: Var, p: ToyCoderParams) -> Var:
    """Fused (1, D, H/4, W/4) embedding map -> (1, 3, H, W) reconstruction."""
    L = p.layers
    t = relu(conv2d(fused, L["dec0_w"], L["dec0_b"]))
    t = relu(conv2d(upsample2(t), L["dec1_w"], L["dec1_b"], pad=1))
    return conv2d(upsample2(t), L["dec2_w"], L["dec2_b"], pad=1)


def fuse_embeddings(
    emb_c: Var | np.ndarray,
    emb_m: Var | np.ndarray,
    emb_f: Var | np.ndarray,
    masks: RoutingMask,
) -> Var:
    """Mask-gated sum of the three embedding maps at the fine resolution.

    Coarse and medium maps are nearest-upsampled by 4 and 2; because the
    binary masks partition the fine grid, every cell receives exactly one
    granularity's embedding.
    """
    vs = []
    for e, m, name in zip((emb_c, emb_m, emb_f), masks.masks, GRANULARITY_NAMES):
        v = e if isinstance(e, Var) else Var(np.asarray(e, dtype=np.float64))
        if v.data.ndim == 3:
            v = reshape(v, (1,) + v.data.shape)
        if v.data.shape[2:] != m.shape:
            raise ValueError(f"{name} embedding {v.data.shape[2:]} does not match mask {m.shape}")
        vs.append(v)
    up_c = upsample2(upsample2(vs[0]))
    up_m = upsample2(vs[1])
    hf, wf = masks.m_f.shape
    mc = np.repeat(np.repeat(masks.m_c, 4, axis=0), 4, axis=1).astype(np.float64)
    mm = np.repeat(np.repeat(masks.m_m, 2, axis=0), 2, axis=1).astype(np.float64)
    if up_c.data.shape[2:] != (hf, wf):
        raise ValueError("granularity grids are not 4:2:1 multiples of each other")
    return up_c * mc + up_m * mm + vs[2] * masks.m_f.astype(np.float64)


# -- coder checkpoint I/O --------------------------------------------------


def save_coder_params(path, p: ToyCoderParams) -> None:
    """Write coder parameters: magic, u16 version, then (name, shape, f32)."""
    chunks = [CODER_MAGIC, struct.pack("<HH", CODER_VERSION, len(p.layers))]
    for name, v in p.layers.items():
        raw = name.encode("ascii")
        arr = v.data.astype("<f4")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_coder_params(path) -> ToyCoderParams:
    """Read a coder checkpoint; layer shapes determine the config."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != CODER_MAGIC:
        raise CoderCheckpointError("not a coder checkpoint (bad magic)")
    version, n_layers = struct.unpack_from("<HH", data, 4)
    if version != CODER_VERSION:
        raise CoderCheckpointError(f"unsupported coder checkpoint version {version}")
    off = 8
    raw_layers: dict[str, np.ndarray] = {}
    try:
        for _ in range(n_layers):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("ascii")
            off += name_len
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off)
            if arr.size != count:
                raise ValueError("layer data ends early")
            off += 4 * count
            raw_layers[name] = arr.reshape(shape).astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CoderCheckpointError(f"truncated or corrupt coder checkpoint: {exc}") from exc
    if off != len(data):
        raise CoderCheckpointError(f"{len(data) - off} trailing bytes after layer table")
    if "enc0_w" not in raw_layers or raw_layers["enc0_w"].ndim != 4:
        raise CoderCheckpointError("missing or malformed layer enc0_w")
    if "head_f_w" not in raw_layers or raw_layers["head_f_w"].ndim != 4:
        raise CoderCheckpointError("missing or malformed layer head_f_w")
    cfg = ToyCoderConfig(
        depth=raw_layers["head_f_w"].shape[0], hidden=raw_layers["enc0_w"].shape[0]
    )
    try:
        return ToyCoderParams(cfg, {k: Var(v) for k, v in raw_layers.items()})
    except ValueError as exc:
        raise CoderCheckpointError(str(exc)) from exc


# -- encode / decode -------------------------------------------------------


def _pad_image(x: np.ndarray) -> np.ndarray:
    """Reflect-pad (3, H, W) up to multiples of 16 (edge pad if too small)."""
    _, H, W = x.shape
    ph, pw = (-H) % 16, (-W) % 16
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if H > ph and W > pw else "edge"
    return np.pad(x, ((0, 0), (0, ph), (0, pw)), mode=mode)


def _check_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"image must be (3, H, W), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return x


@dataclass(frozen=True)
class EncodeResult:
    """Container bytes plus the encoder-side state used to produce them."""

    data: bytes
    parts: ContainerParts
    indices: tuple[np.ndarray, np.ndarray, np.ndarray]
    masks: RoutingMask
    stats: dict[str, CodingStats]


@dataclass(frozen=True)
class DecodeResult:
    """Reconstruction plus the decoded symbol state (for exactness checks)."""

    x_hat: np.ndarray
    indices: tuple[np.ndarray, np.ndarray, np.ndarray]
    masks: RoutingMask
    parts: ContainerParts


def encode_image(
    x: np.ndarray,
    coder: ToyCoderParams,
    cb: Codebook,
    hyper: HyperParams,
    ratios: tuple[float, float, float] = (0.3, 0.3, 0.4),
) -> EncodeResult:
    """Compress an RGB image in [0, 1] into a self-contained container.

    Deterministic: the same inputs always yield the same bytes.  Latent
    cells whose index footprint is entirely un-routed are zeroed and skipped
    by the coder; the decoder reproduces the same zeros, so both sides build
    identical probability tables.
    """
    x = _check_image(x)
    H, W = x.shape[1:]
    xp = _pad_image(x)
    ys = [v.data[0] for v in toy_encode(xp, coder)]
    masks = allocate_masks(ys[2], ratios)
    tables = z_coder_pmf(hyper)

    def one(args):
        y, m_g = args
        idx = quantize(y, cb)
        z = hyper_analysis(y, hyper).data[0]
        zq, _ = quantize_infer(z, hyper.cfg.z_max)
        zmask = z_active_mask(m_g, hyper.cfg.stride)
        zq[:, zmask == 0] = 0
        z_bytes, z_stats = encode_z_stream(zq, tables, zmask, hyper.cfg.z_max)
        mu, sig = hyper_synthesis(zq.astype(np.float64), hyper, idx.shape)
        probs = categorical_isotropic(cb, mu.data[0], sig.data[0, 0])
        y_bytes, y_stats = encode_masked_symbols(idx, probs, m_g)
        return idx, GranularityStreams(z_stats.n_symbols, z_bytes, y_stats.n_symbols, y_bytes), z_stats, y_stats

    results = _map_granularities(one, list(zip(ys, masks.masks)))
    indices = tuple(r[0] for r in results)
    streams = tuple(r[1] for r in results)
    stats = {}
    for name, r in zip(GRANULARITY_NAMES, results):
        stats[f"z_{name}"] = r[2]
        stats[f"y_{name}"] = r[3]
    parts = ContainerParts(
        height=H,
        width=W,
        padded_height=xp.shape[1],
        padded_width=xp.shape[2],
        codebook_size=cb.K,
        depth=cb.D,
        hyper_channels=hyper.cfg.channels,
        hyper_hidden=hyper.cfg.hidden,
        hyper_stride=hyper.cfg.stride,
        hyper_z_max=hyper.cfg.z_max,
        mask_bytes=pack_masks(masks),
        streams=streams,
    )
    return EncodeResult(serialize(parts), parts, indices, masks, stats)


def _check_models(parts: ContainerParts, coder: ToyCoderParams, cb: Codebook, hyper: HyperParams):
    if parts.codebook_size != cb.K or parts.depth != cb.D:
        raise ModelMismatchError(
            f"container expects codebook K={parts.codebook_size}, D={parts.depth}; "
            f"got K={cb.K}, D={cb.D}"
        )
    c = hyper.cfg
    if (parts.hyper_channels, parts.hyper_hidden, parts.hyper_stride, parts.hyper_z_max) != (
        c.channels, c.hidden, c.stride, c.z_max,
    ):
        raise ModelMismatchError("container hyper-model dimensions do not match the checkpoint")
    if coder.cfg.depth != cb.D or c.depth != cb.D:
        raise ModelMismatchError("coder, codebook and hyper model disagree on feature depth")


def decode_image(
    data: bytes, coder: ToyCoderParams, cb: Codebook, hyper: HyperParams
) -> DecodeResult:
    """Rebuild the image from container bytes.

    The index grids recovered here are bit-exact copies of the encoder's:
    only the feature-to-pixel mapping is lossy.
    """
    parts = deserialize(data)
    _check_models(parts, coder, cb, hyper)
    masks = unpack_masks(parts.mask_bytes, parts.coarse_shape())
    tables = z_coder_pmf(hyper)

    def one(args):
        st, m_g, stride = args
        grid_hw = (parts.padded_height // stride, parts.padded_width // stride)
        zmask = z_active_mask(m_g, hyper.cfg.stride)
        want_z = hyper.cfg.channels * int(zmask.sum())
        if st.z_count != want_z or st.y_count != int(m_g.sum()):
            raise ContainerDimensionError(
                f"stream symbol counts ({st.z_count}, {st.y_count}) do not match "
                f"the routing mask ({want_z}, {int(m_g.sum())})"
            )
        zq = decode_z_stream(st.z_bytes, tables, zmask, parts.hyper_z_max)
        mu, sig = hyper_synthesis(zq.astype(np.float64), hyper, grid_hw)
        probs = categorical_isotropic(cb, mu.data[0], sig.data[0, 0])
        idx = decode_masked_symbols(st.y_bytes, probs, m_g, fill=0)
        return idx, dequantize(idx, cb)

    results = _map_granularities(
        one, list(zip(parts.streams, masks.masks, GRANULARITY_STRIDES))
    )
    indices = tuple(r[0] for r in results)
    fused = fuse_embeddings(results[0][1], results[1][1], results[2][1], masks)
    xp_hat = toy_decode(fused, coder).data[0]
    x_hat = np.clip(xp_hat[:, : parts.height, : parts.width], 0.0, 1.0)
    return DecodeResult(x_hat, indices, masks, parts)


def rate_report(data: bytes, x: np.ndarray | None = None, x_hat: np.ndarray | None = None) -> dict:
    """Per-segment bit accounting plus distortion metrics.

    ``bpp`` uses the full container length over the original pixel count.
    PSNR is computed against a peak of 1.0 and capped at 99 dB (the cap also
    stands in for the infinite value on exact reconstruction).  Without the
    image pair, ``psnr``/``mse`` are NaN.
    """
    parts = deserialize(data)
    n_px = parts.height * parts.width
    sizes = {name: size for name, _, size in layout(data)}
    record: dict[str, float | int] = {
        "height": parts.height,
        "width": parts.width,
        "bytes_total": len(data),
        "bpp": 8.0 * len(data) / n_px,
        "bpp_header": 8.0 * sizes["header"] / n_px,
        "bpp_masks": 8.0 * (sizes["mask-length"] + sizes["mask"]) / n_px,
    }
    for name, st in zip(GRANULARITY_NAMES, parts.streams):
        z_b = sizes[f"{name}-latent-length"] + sizes[f"{name}-latent"]
        y_b = sizes[f"{name}-index-length"] + sizes[f"{name}-index"]
        record[f"bpp_latent_{name}"] = 8.0 * z_b / n_px
        record[f"bpp_index_{name}"] = 8.0 * y_b / n_px
        record[f"latent_symbols_{name}"] = st.z_count
        record[f"index_symbols_{name}"] = st.y_count
    if x is None or x_hat is None:
        record["mse"] = float("nan")
        record["psnr"] = float("nan")
        return record
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    record["mse"] = mse
    record["psnr"] = 99.0 if mse == 0.0 else float(min(99.0, -10.0 * np.log10(mse)))
    return record


# -- training --------------------------------------------------------------


@dataclass(frozen=True)
class RdWeights:
    """Per-granularity rate weights and the quantizer-regularizer weight."""

    lam_y: tuple[float, float, float] = (1.5e-3, 1.5e-3, 1.5e-3)
    lam_z: tuple[float, float, float] = (1.5e-3, 1.5e-3, 1.5e-3)
    lam_vq: float = 1.0

    def __post_init__(self):
        if len(self.lam_y) != 3 or len(self.lam_z) != 3:
            raise ValueError("lam_y and lam_z need one weight per granularity")
        if min(self.lam_y) < 0 or min(self.lam_z) < 0 or self.lam_vq < 0:
            raise ValueError("rate-distortion weights must be nonnegative")

    def scaled(self, factor: float) -> "RdWeights":
        """Scale the rate weights only (the sweep axis)."""
        return RdWeights(
            tuple(w * factor for w in self.lam_y),
            tuple(w * factor for w in self.lam_z),
            self.lam_vq,
        )


@dataclass(frozen=True)
class TrainConfig:
    """Sizes, schedules and weights for the three-stage run."""

    depth: int = 2
    codebook_size: int = 16
    hidden: int = 16
    hyper_channels: int = 4
    hyper_hidden: int = 16
    stage_a_steps: int = 800
    stage_b_steps: int = 800
    stage_c_steps: int = 400
    lr_a: float = 2e-3
    lr_b: float = 2e-3
    lr_c: float = 3e-4
    rd: RdWeights = field(default_factory=RdWeights)
    ratios_a: tuple[float, float, float] = (0.1, 0.3, 0.6)
    ratios_bc: tuple[float, float, float] = (0.3, 0.3, 0.4)
    seed: int = 0

    def __post_init__(self):
        if min(self.depth, self.codebook_size, self.hidden) < 1:
            raise ValueError("model dimensions must be positive")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least two entries")
        if min(self.stage_a_steps, self.stage_b_steps, self.stage_c_steps) < 1:
            raise ValueError("step counts must be positive")
        if min(self.lr_a, self.lr_b, self.lr_c) <= 0:
            raise ValueError("learning rates must be positive")


@dataclass(frozen=True)
class CurveRow:
    """One logged optimization step."""

    stage: str
    step: int
    loss: float
    mse: float
    rate_bits: float


@dataclass
class TrainResult:
    coder: ToyCoderParams
    codebook: Codebook
    hyper: HyperParams
    curve: list[CurveRow]


class _DivergenceGuard:
    """Abort when the loss sticks above 10x its initial value."""

    def __init__(self, patience: int = 100):
        self.initial: float | None = None
        self.over = 0
        self.patience = patience

    def check(self, value: float, step: int) -> None:
        if not np.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        if self.initial is None:
            self.initial = value
        if value > 10.0 * self.initial:
            self.over += 1
            if self.over >= self.patience:
                raise TrainingDivergedError(
                    f"loss {value:.4g} above 10x initial {self.initial:.4g} "
                    f"for {self.patience} consecutive steps"
                )
        else:
            self.over = 0


def _vq_and_straight_through(
    y: Var, cb_var: Var, cb_snap: Codebook
) -> tuple[np.ndarray, Var, Var]:
    """Quantize a (1, D, h, w) feature map against the trainable codebook.

    Returns the index grid, the VQ regularizer (entry pull + ``_BETA`` x
    feature pull) and the straight-through map whose value is the embedding
    but whose gradient passes to the features.
    """
    D = cb_snap.D
    _, _, h, w = y.data.shape
    n = h * w
    idx = quantize(y.data[0], cb_snap)
    flat = idx.reshape(-1)
    e_var = take_axis(cb_var, flat, 0)                      # (n, D) on tape
    y_flat = transpose(reshape(y, (D, n)))                  # (n, D) on tape
    cb_pull = sumv((e_var - Var(y_flat.data)) ** 2)
    feat_pull = sumv((y_flat - Var(e_var.data)) ** 2)
    vq = cb_pull + feat_pull * _BETA
    e_val = cb_snap.entries[idx].transpose(2, 0, 1)[None]   # (1, D, h, w)
    st = (y - Var(y.data)) + Var(e_val)  # value exactly e_val, gradient 1
    return idx, vq, st


def _routed_index_rate(
    indices: np.ndarray, mu: Var, sig: Var, cb_var: Var, mask: np.ndarray
) -> Var:
    """Total index bits over routed cells, differentiable in mu, sigma and
    the codebook entries (softmax over negative scaled squared distances;
    the coding-time probability floor is omitted to keep it smooth)."""
    idx = np.asarray(indices)
    n = idx.size
    D = cb_var.data.shape[1]
    muF = transpose(reshape(mu, (D, n)))                   # (n, D)
    sigF = reshape(sig, (n, 1))
    e2 = reshape(sumv(cb_var * cb_var, axis=1), (1, cb_var.data.shape[0]))
    cross = matmul(muF, transpose(cb_var))                 # (n, K)
    mu2 = sumv(muF * muF, axis=1, keepdims=True)           # (n, 1)
    logits = ((e2 - cross * 2.0) + mu2) * -0.5 / (sigF * sigF)
    mx = np.max(logits.data, axis=1, keepdims=True)
    lse = log(sumv(exp(logits - mx), axis=1, keepdims=True)) + mx
    sel = pick(logits, np.arange(n), idx.reshape(-1))
    per_cell = reshape(lse, (n,)) - sel
    weights = np.asarray(mask, dtype=np.float64).reshape(-1)
    return sumv(per_cell * weights) * (1.0 / _LN2)


def _stage_a_loss(
    xp: np.ndarray,
    coder: ToyCoderParams,
    cb_var: Var,
    ratios: tuple[float, float, float],
    lam_vq: float,
) -> tuple[Var, float]:
    ys = toy_encode(xp, coder)
    cb_snap = Codebook(cb_var.data)
    masks = allocate_masks(ys[2].data[0], ratios)
    vq_total = None
    sts = []
    for y in ys:
        _, vq, st = _vq_and_straight_through(y, cb_var, cb_snap)
        vq_total = vq if vq_total is None else vq_total + vq
        sts.append(st)
    x_hat = toy_decode(fuse_embeddings(*sts, masks), coder)
    err = x_hat - Var(xp[None])
    dist = sumv(err * err)
    loss = dist + vq_total * lam_vq
    return loss, dist.item() / xp.size


def train_stage_a(
    dataset: list[np.ndarray], config: TrainConfig
) -> tuple[ToyCoderParams, Var, list[CurveRow]]:
    """Reconstruction training from scratch.

    Returns the coder, the codebook as a trainable tape node (entries drawn
    from the first image's actual features), and the loss curve.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    padded = [_pad_image(_check_image(x)) for x in dataset]
    rng = np.random.default_rng(config.seed)
    coder = init_toy_params(ToyCoderConfig(config.depth, config.hidden), rng)

    vecs = np.concatenate(
        [v.data[0].reshape(config.depth, -1).T for v in toy_encode(padded[0], coder)]
    )
    take = rng.choice(len(vecs), size=config.codebook_size, replace=len(vecs) < config.codebook_size)
    cb_var = Var(vecs[take] + rng.normal(0.0, 1e-3, size=(config.codebook_size, config.depth)))

    opt = Adam(coder.variables() + [cb_var], lr=config.lr_a)
    guard = _DivergenceGuard()
    curve: list[CurveRow] = []
    for t in range(config.stage_a_steps):
        loss, mse = _stage_a_loss(
            padded[t % len(padded)], coder, cb_var, config.ratios_a, config.rd.lam_vq
        )
        lv = loss.item()
        guard.check(lv, t)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(CurveRow("A", t, lv, mse, 0.0))
    return coder, cb_var, curve


def collect_features(dataset: list[np.ndarray], coder: ToyCoderParams) -> list[np.ndarray]:
    """Frozen-coder feature grids (all granularities) for rate-model training."""
    feats: list[np.ndarray] = []
    for x in dataset:
        xp = _pad_image(_check_image(x))
        feats.extend(v.data[0].copy() for v in toy_encode(xp, coder))
    return feats


def _stage_c_loss(
    xp: np.ndarray,
    coder: ToyCoderParams,
    cb_var: Var,
    hyper: HyperParams,
    ratios: tuple[float, float, float],
    rd: RdWeights,
    noise: np.random.Generator | list[np.ndarray],
) -> tuple[Var, float, float]:
    """Joint objective for one image.

    ``noise`` is either a generator (training) or one fixed array per
    granularity (for deterministic evaluation and derivative checks).
    """
    ys = toy_encode(xp, coder)
    cb_snap = Codebook(cb_var.data)
    masks = allocate_masks(ys[2].data[0], ratios)
    vq_total = None
    rate_total = None
    rate_bits = 0.0
    sts = []
    for g, (y, m_g) in enumerate(zip(ys, masks.masks)):
        idx, vq, st = _vq_and_straight_through(y, cb_var, cb_snap)
        vq_total = vq if vq_total is None else vq_total + vq
        sts.append(st)
        z = hyper_analysis(reshape(y, y.data.shape[1:]), hyper)
        zt = quantize_train(z, noise if isinstance(noise, np.random.Generator) else noise[g])
        mu, sig = hyper_synthesis(zt, hyper, idx.shape)
        ry = _routed_index_rate(idx, mu, sig, cb_var, m_g)
        rz = z_rate(zt, hyper)
        term = ry * rd.lam_y[g] + rz * rd.lam_z[g]
        rate_total = term if rate_total is None else rate_total + term
        rate_bits += ry.item() + rz.item()
    x_hat = toy_decode(fuse_embeddings(*sts, masks), coder)
    err = x_hat - Var(xp[None])
    dist = sumv(err * err)
    loss = dist + vq_total * rd.lam_vq + rate_total
    return loss, dist.item() / xp.size, rate_bits


def train_stage_c(
    dataset: list[np.ndarray],
    coder: ToyCoderParams,
    cb_var: Var,
    hyper: HyperParams,
    config: TrainConfig,
) -> list[CurveRow]:
    """Joint fine-tuning of coder, codebook and rate model (in place).

    The index-rate term covers routed cells only, matching what the coder
    actually writes; the latent rate is trained over the whole grid as a
    smooth proxy for its routed subset.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    padded = [_pad_image(_check_image(x)) for x in dataset]
    noise = np.random.default_rng(config.seed + 2)
    opt = Adam(coder.variables() + [cb_var] + hyper.variables(), lr=config.lr_c)
    guard = _DivergenceGuard()
    curve: list[CurveRow] = []
    for t in range(config.stage_c_steps):
        loss, mse, bits = _stage_c_loss(
            padded[t % len(padded)], coder, cb_var, hyper, config.ratios_bc, config.rd, noise
        )
        lv = loss.item()
        guard.check(lv, t)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(CurveRow("C", t, lv, mse, bits))
    return curve


def train_stages(dataset: list[np.ndarray], config: TrainConfig) -> TrainResult:
    """Run the full A -> B -> C schedule on a list of (3, H, W) images."""
    coder, cb_var, curve = train_stage_a(dataset, config)
    feats = collect_features(dataset, coder)
    hyper = init_hyper_params(
        HyperConfig(
            depth=config.depth, channels=config.hyper_channels, hidden=config.hyper_hidden
        ),
        np.random.default_rng(config.seed + 1),
    )
    res_b = train_stage_b(
        feats,
        Codebook(cb_var.data),
        hyper,
        config.stage_b_steps,
        config.lr_b,
        lam_y=float(np.mean(config.rd.lam_y)),
        lam_z=float(np.mean(config.rd.lam_z)),
        seed=config.seed + 1,
    )
    curve += [
        CurveRow("B", t, l, float("nan"), ry + rz)
        for t, (l, ry, rz) in enumerate(
            zip(res_b.history, res_b.index_bits, res_b.latent_bits)
        )
    ]
    curve += train_stage_c(dataset, coder, cb_var, hyper, config)
    return TrainResult(coder, Codebook(cb_var.data), hyper, curve)
