"""Hyper-latent side channel: small conv nets that predict per-cell Gaussians.

An analysis network compresses a feature grid into a low-resolution latent
``z`` (stride 4 = two stride-2 convolutions).  After quantization, a synthesis
network expands the latent back to a ``(mu, sigma)`` field at index-grid
resolution; those Gaussians drive the categorical index model.  The quantized
latent itself is priced by a per-channel factorized discretized Gaussian.

Everything trainable runs on the in-repo reverse-mode tape (``autodiff``), so
the rate objective is gradient-checkable end to end.  Inference forward passes
are plain float64 and deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .autodiff import (
    Adam,
    GradCheckReport,
    Var,
    clamp_min,
    conv2d,
    erf,
    exp,
    grad_check,
    log,
    matmul,
    pick,
    relu,
    reshape,
    softplus,
    sumv,
    take_axis,
    transpose,
    upsample2,
)
from .codebook import Codebook, quantize
from .index_model import P_FLOOR, SIGMA_MIN

_LN2 = float(np.log(2.0))
_SQRT2 = float(np.sqrt(2.0))

# Quantized hyper-latents are clamped to [-Z_MAX, Z_MAX] (signed 8-bit range).
Z_MAX = 127

CHECKPOINT_MAGIC = b"VQHP"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised when a parameter checkpoint is malformed or truncated."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stays above 10x its initial value."""


@dataclass(frozen=True)
class HyperConfig:
    """Shape of the hyper networks.

    ``depth`` is the feature/codebook dimension D; ``channels`` the latent
    depth C; ``hidden`` the width of intermediate conv layers; ``stride`` the
    total spatial downsampling of the analysis net (two stride-2 convs).
    """

    depth: int
    channels: int = 8
    hidden: int = 32
    stride: int = 4
    z_max: int = Z_MAX

    def __post_init__(self):
        if self.depth < 1 or self.channels < 1 or self.hidden < 1:
            raise ValueError("depth, channels and hidden must be positive")
        if self.stride != 4:
            raise ValueError("only the two-conv stride-4 layout is supported")


# Layer names in checkpoint order.  ana* = analysis convs, syn* = synthesis
# convs, head_* = 1x1 output heads, factor_* = factorized latent prior.
_LAYER_ORDER = (
    "ana0_w", "ana0_b", "ana1_w", "ana1_b",
    "syn0_w", "syn0_b", "syn1_w", "syn1_b",
    "head_mu_w", "head_mu_b", "head_sig_w", "head_sig_b",
    "factor_m", "factor_s_raw",
)


def _layer_shapes(cfg: HyperConfig) -> dict[str, tuple[int, ...]]:
    d, c, h = cfg.depth, cfg.channels, cfg.hidden
    return {
        "ana0_w": (h, d, 3, 3), "ana0_b": (h,),
        "ana1_w": (c, h, 3, 3), "ana1_b": (c,),
        "syn0_w": (h, c, 3, 3), "syn0_b": (h,),
        "syn1_w": (h, h, 3, 3), "syn1_b": (h,),
        "head_mu_w": (d, h, 1, 1), "head_mu_b": (d,),
        "head_sig_w": (1, h, 1, 1), "head_sig_b": (1,),
        "factor_m": (c,), "factor_s_raw": (c,),
    }


class HyperParams:
    """Named trainable tensors living on the autodiff tape."""

    def __init__(self, cfg: HyperConfig, layers: dict[str, Var]):
        shapes = _layer_shapes(cfg)
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
        self.layers = {name: layers[name] for name in _LAYER_ORDER}

    def variables(self) -> list[Var]:
        return list(self.layers.values())

    def copy(self) -> "HyperParams":
        """Deep copy with fresh tape nodes (for A/B-state reuse across runs)."""
        return HyperParams(self.cfg, {k: Var(v.data.copy()) for k, v in self.layers.items()})

    def snap_f32(self) -> None:
        """Round every tensor through float32 in place.

        Called at the coder boundary so that encoder and decoder derive their
        probability tables from bit-identical parameter values (the checkpoint
        stores float32).
        """
        for v in self.layers.values():
            v.data = v.data.astype(np.float32).astype(np.float64)


def init_hyper_params(cfg: HyperConfig, rng: np.random.Generator) -> HyperParams:
    """He-scaled normal init for conv weights; zero biases; unit latent prior."""
    layers: dict[str, Var] = {}
    for name, shape in _layer_shapes(cfg).items():
        if name.endswith("_w"):
            fan_in = int(np.prod(shape[1:]))
            layers[name] = Var(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
        elif name == "factor_s_raw":
            # softplus(raw) = 1  =>  raw = log(e - 1)
            layers[name] = Var(np.full(shape, np.log(np.e - 1.0)))
        else:
            layers[name] = Var(np.zeros(shape))
    return HyperParams(cfg, layers)


# -- forward passes --------------------------------------------------------


def _pad_to_multiple_var(v: Var, m: int) -> Var:
    """Pad trailing spatial dims of (D, H, W) up to multiples of ``m``.

    Reflect padding; for inputs too small to reflect (dim <= pad), edge
    padding is used instead.  Implemented as index gathers so gradients
    flow to the unpadded input.
    """
    _, H, W = v.data.shape
    ph, pw = (-H) % m, (-W) % m
    if ph == 0 and pw == 0:
        return v
    mode = "reflect" if H > ph and W > pw else "edge"
    if ph:
        v = take_axis(v, np.pad(np.arange(H), (0, ph), mode=mode), axis=1)
    if pw:
        v = take_axis(v, np.pad(np.arange(W), (0, pw), mode=mode), axis=2)
    return v


def hyper_analysis(y: Var | np.ndarray, p: HyperParams) -> Var:
    """Continuous hyper-latent for a (D, H, W) feature grid.

    Accepts a plain array or a tape node; with a tape node, gradients flow
    back into the features, which end-to-end fine-tuning relies on.  Output
    shape is ``(1, C, ceil(H/4), ceil(W/4))``; odd sizes are reflect-padded
    before the strided convs.
    """
    v = y if isinstance(y, Var) else Var(np.asarray(y, dtype=np.float64))
    if v.data.ndim != 3 or v.data.shape[0] != p.cfg.depth:
        raise ValueError(f"features must be ({p.cfg.depth}, H, W), got {v.data.shape}")
    padded = _pad_to_multiple_var(v, p.cfg.stride)
    x = reshape(padded, (1,) + padded.data.shape)
    L = p.layers
    t = relu(conv2d(x, L["ana0_w"], L["ana0_b"], stride=2, pad=1))
    return conv2d(t, L["ana1_w"], L["ana1_b"], stride=2, pad=1)


def _crop2(v: Var, H: int, W: int) -> Var:
    if v.data.shape[2] != H:
        v = take_axis(v, np.arange(H), axis=2)
    if v.data.shape[3] != W:
        v = take_axis(v, np.arange(W), axis=3)
    return v


def hyper_synthesis(
    z_hat: Var | np.ndarray, p: HyperParams, out_hw: tuple[int, int]
) -> tuple[Var, Var]:
    """Expand a hyper-latent to a Gaussian field at index-grid resolution.

    Returns ``(mu, sigma)`` with shapes ``(1, D, H, W)`` and ``(1, 1, H, W)``
    for ``out_hw = (H, W)``.  ``sigma`` is softplus-activated and floored at
    ``SIGMA_MIN``.  Raises ``ValueError`` if the latent's upsampled extent
    cannot cover (or overshoots by a full stride) the requested grid.
    """
    z = z_hat if isinstance(z_hat, Var) else Var(np.asarray(z_hat, dtype=np.float64))
    if z.data.ndim == 3:
        z = reshape(z, (1,) + z.data.shape)
    if z.data.ndim != 4 or z.data.shape[1] != p.cfg.channels:
        raise ValueError(f"latent must be (1, {p.cfg.channels}, h, w), got {z.data.shape}")
    H, W = out_hw
    s = p.cfg.stride
    hs, ws = z.data.shape[2] * s, z.data.shape[3] * s
    if not (0 <= hs - H < s and 0 <= ws - W < s):
        raise ValueError(
            f"latent {z.data.shape[2]}x{z.data.shape[3]} does not match grid {H}x{W} at stride {s}"
        )
    L = p.layers
    t = relu(conv2d(upsample2(z), L["syn0_w"], L["syn0_b"], stride=1, pad=1))
    t = relu(conv2d(upsample2(t), L["syn1_w"], L["syn1_b"], stride=1, pad=1))
    mu = _crop2(conv2d(t, L["head_mu_w"], L["head_mu_b"]), H, W)
    sig = _crop2(clamp_min(softplus(conv2d(t, L["head_sig_w"], L["head_sig_b"])), SIGMA_MIN), H, W)
    return mu, sig


# -- quantizers ------------------------------------------------------------


def quantize_train(z: Var, noise: np.ndarray | np.random.Generator) -> Var:
    """Additive-noise surrogate quantizer: ``z + u``, u ~ U(-0.5, 0.5).

    The gradient w.r.t. ``z`` is exactly the identity.  Pass a Generator to
    draw fresh noise, or a fixed array (same shape as ``z``) to freeze it for
    finite-difference checks.
    """
    if isinstance(noise, np.random.Generator):
        u = noise.uniform(-0.5, 0.5, size=z.data.shape)
    else:
        u = np.asarray(noise, dtype=np.float64)
        if u.shape != z.data.shape:
            raise ValueError(f"noise shape {u.shape} != latent shape {z.data.shape}")
    return z + u


def quantize_infer(z: Var | np.ndarray, z_max: int = Z_MAX) -> tuple[np.ndarray, int]:
    """Round half away from zero, clamp to [-z_max, z_max].

    Returns the integer latent and the count of clamped (saturated) values.
    """
    a = z.data if isinstance(z, Var) else np.asarray(z, dtype=np.float64)
    r = np.copysign(np.floor(np.abs(a) + 0.5), a)
    saturated = int(np.count_nonzero(np.abs(r) > z_max))
    return np.clip(r, -z_max, z_max).astype(np.int32), saturated


# -- factorized latent prior ----------------------------------------------


def _phi(t: Var) -> Var:
    """Standard normal CDF on the tape."""
    return (erf(t * (1.0 / _SQRT2)) + 1.0) * 0.5


def z_rate(z_hat: Var | np.ndarray, p: HyperParams) -> Var:
    """Total bits of a latent under the per-channel discretized Gaussian.

    Each element of channel c is priced -log2 P_c(z) with
    P_c(z) = Phi((z + 0.5 - m_c) / s_c) - Phi((z - 0.5 - m_c) / s_c),
    floored at P_FLOOR.  Accepts integer latents or their noisy training
    surrogates; differentiable w.r.t. both the latent and (m, s).
    """
    z = z_hat if isinstance(z_hat, Var) else Var(np.asarray(z_hat, dtype=np.float64))
    if z.data.ndim == 3:
        z = reshape(z, (1,) + z.data.shape)
    C = p.cfg.channels
    if z.data.ndim != 4 or z.data.shape[1] != C:
        raise ValueError(f"latent must have {C} channels, got shape {z.data.shape}")
    m = reshape(p.layers["factor_m"], (1, C, 1, 1))
    s = clamp_min(softplus(reshape(p.layers["factor_s_raw"], (1, C, 1, 1))), SIGMA_MIN)
    hi = _phi((z - m + 0.5) / s)
    lo = _phi((z - m - 0.5) / s)
    prob = clamp_min(hi - lo, P_FLOOR)
    return -sumv(log(prob)) * (1.0 / _LN2)


def z_coder_pmf(p: HyperParams) -> np.ndarray:
    """Per-channel pmf over the integer alphabet [-z_max, z_max].

    Interior bins integrate the Gaussian over [z-0.5, z+0.5]; the two edge
    bins absorb the full tails, so the pmf sums to one before the floor.
    Floored at P_FLOOR and renormalized: shape (C, 2*z_max + 1).
    """
    z_max = p.cfg.z_max
    m = p.layers["factor_m"].data[:, None]
    s_raw = p.layers["factor_s_raw"].data[:, None]
    s = np.maximum(np.logaddexp(0.0, s_raw), SIGMA_MIN)  # softplus
    grid = np.arange(-z_max, z_max + 1, dtype=np.float64)[None, :]
    pmf = ndtr((grid - m + 0.5) / s) - ndtr((grid - m - 0.5) / s)
    pmf[:, 0] = ndtr((-z_max - m[:, 0] + 0.5) / s[:, 0])
    pmf[:, -1] = 1.0 - ndtr((z_max - m[:, 0] - 0.5) / s[:, 0])
    pmf = np.maximum(pmf, P_FLOOR)
    return pmf / pmf.sum(axis=1, keepdims=True)


# -- rate objective (Stage B) ----------------------------------------------


def index_rate(indices: np.ndarray, mu: Var, sigma: Var, cb: Codebook) -> Var:
    """Differentiable total bits of the index grid under the Gaussian field.

    Softmax over -0.5 * ||e_k - mu||^2 / sigma^2 per cell; the coding-time
    probability floor is omitted here (it only binds in the far tail) so the
    objective stays smooth.
    """
    idx = np.asarray(indices)
    H, W = idx.shape
    N = H * W
    D = cb.D
    muF = transpose(reshape(mu, (D, N)))          # (N, D)
    sigF = reshape(sigma, (N, 1))
    e = cb.entries                                 # (K, D) constant
    e2 = np.sum(e * e, axis=1)[None, :]            # (1, K)
    cross = matmul(muF, e.T)                       # (N, K)
    mu2 = sumv(muF * muF, axis=1, keepdims=True)   # (N, 1)
    d2 = (Var(e2) - cross * 2.0) + mu2
    logits = d2 * -0.5 / (sigF * sigF)
    mx = np.max(logits.data, axis=1, keepdims=True)
    lse = log(sumv(exp(logits - mx), axis=1, keepdims=True)) + mx
    sel = pick(logits, np.arange(N), idx.reshape(-1))
    return (sumv(lse) - sumv(sel)) * (1.0 / _LN2)


def stage_b_loss(
    y: np.ndarray,
    indices: np.ndarray,
    p: HyperParams,
    cb: Codebook,
    noise: np.ndarray | np.random.Generator,
    lam_y: float = 1.5e-3,
    lam_z: float = 1.5e-3,
) -> tuple[Var, float, float]:
    """Rate-only objective: lam_y * R_indices + lam_z * R_latent.

    Returns ``(loss, index_bits, latent_bits)`` where the bits are detached
    floats for logging.  Pass a fixed noise array to make the loss a
    deterministic function of the parameters (required for grad checks).
    """
    z = hyper_analysis(y, p)
    zt = quantize_train(z, noise)
    mu, sig = hyper_synthesis(zt, p, indices.shape)
    ry = index_rate(indices, mu, sig, cb)
    rz = z_rate(zt, p)
    loss = ry * lam_y + rz * lam_z
    return loss, ry.item(), rz.item()


@dataclass
class StageBResult:
    params: HyperParams
    history: list[float]          # loss per step
    index_bits: list[float]       # R_indices per step (bits, whole grid)
    latent_bits: list[float]      # R_latent per step (bits, whole grid)

    @property
    def converged(self) -> bool:
        """Mean loss over the last 10% of steps below the first 10%."""
        k = max(1, len(self.history) // 10)
        return float(np.mean(self.history[-k:])) < float(np.mean(self.history[:k]))


def train_stage_b(
    dataset: list[np.ndarray],
    cb: Codebook,
    p0: HyperParams,
    steps: int,
    lr: float,
    *,
    lam_y: float = 1.5e-3,
    lam_z: float = 1.5e-3,
    seed: int = 0,
) -> StageBResult:
    """Train the hyper networks on the rate objective; codebook stays frozen.

    Grids are visited in cyclic order; quantization noise comes from a seeded
    generator, so runs are reproducible.  Aborts with
    ``TrainingDivergedError`` if the loss exceeds 10x its initial value for
    100 consecutive steps.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if steps < 1:
        raise ValueError("steps must be positive")
    rng = np.random.default_rng(seed)
    index_grids = [quantize(y, cb) for y in dataset]
    opt = Adam(p0.variables(), lr=lr)
    history: list[float] = []
    ry_hist: list[float] = []
    rz_hist: list[float] = []
    initial = None
    over = 0
    for t in range(steps):
        g = t % len(dataset)
        loss, ry, rz = stage_b_loss(dataset[g], index_grids[g], p0, cb, rng, lam_y, lam_z)
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingDivergedError(f"non-finite loss at step {t}")
        if initial is None:
            initial = lv
        if lv > 10.0 * initial:
            over += 1
            if over >= 100:
                raise TrainingDivergedError(
                    f"loss {lv:.4g} above 10x initial {initial:.4g} for 100 consecutive steps"
                )
        else:
            over = 0
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(lv)
        ry_hist.append(ry)
        rz_hist.append(rz)
    return StageBResult(p0, history, ry_hist, rz_hist)


def grad_check_stage_b(
    p: HyperParams,
    y: np.ndarray,
    cb: Codebook,
    rng: np.random.Generator,
    n_coords: int = 200,
    **kwargs,
) -> GradCheckReport:
    """Finite-difference check of the full rate objective at a sample grid."""
    indices = quantize(y, cb)
    z_shape = hyper_analysis(y, p).data.shape
    noise = rng.uniform(-0.5, 0.5, size=z_shape)
    return grad_check(
        lambda: stage_b_loss(y, indices, p, cb, noise)[0],
        p.variables(),
        rng,
        n_coords=n_coords,
        **kwargs,
    )


# -- checkpoint I/O --------------------------------------------------------


def save_checkpoint(path, p: HyperParams) -> None:
    """Write parameters: magic, u16 version, then a (name, shape, f32) table."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HH", CHECKPOINT_VERSION, len(p.layers))]
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


def load_checkpoint(path) -> HyperParams:
    """Read a parameter checkpoint; layer shapes determine the config."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a hyper-parameter checkpoint (bad magic)")
    version, n_layers = struct.unpack_from("<HH", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
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
            off += 4 * count
            raw_layers[name] = arr.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointFormatError(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(data):
        raise CheckpointFormatError(f"{len(data) - off} trailing bytes after layer table")
    for need in ("ana0_w", "ana1_w"):
        if need not in raw_layers or raw_layers[need].ndim != 4:
            raise CheckpointFormatError(f"missing or malformed layer {need}")
    cfg = HyperConfig(
        depth=raw_layers["ana0_w"].shape[1],
        channels=raw_layers["ana1_w"].shape[0],
        hidden=raw_layers["ana0_w"].shape[0],
    )
    try:
        return HyperParams(cfg, {k: Var(v) for k, v in raw_layers.items()})
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from exc
