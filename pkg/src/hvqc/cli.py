"""Command-line front door for the compression toolkit.

Commands
--------
compress    image -> .hvqc container (prints a bpp breakdown)
decompress  .hvqc container -> image
report      per-segment bit accounting of a container; --dump-layout
bench       entropy-coding strategy comparison, CSV output
train       three-stage training run; writes coder/codebook/rate-model files
synth-data  synthetic image corpus generator

Conventions shared by every command: deterministic given ``--seed``; outputs
are written to a temporary file in the destination directory and atomically
renamed, so a failed run never leaves partial output; ``HVQC_THREADS`` caps
worker threads.  Exit codes: 0 success, 1 internal error, 2 usage error,
3 I/O error, 4 corrupt input stream or checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import tempfile
import time
import traceback
from pathlib import Path

import numpy as np
from PIL import Image

from .bitstream import (
    ContainerFormatError,
    decode_z_stream,
    encode_z_stream,
    layout,
)
from .codebook import (
    Codebook,
    CodebookFormatError,
    dequantize,
    load_codebook,
    quantize,
    save_codebook,
)
from .context_coders import (
    code_indices_context_stats,
    code_indices_hyper_stats,
    code_indices_static_stats,
    decode_indices_context,
    decode_indices_hyper,
    decode_indices_static,
)
from .hyperprior import (
    CheckpointFormatError,
    hyper_analysis,
    hyper_synthesis,
    load_checkpoint,
    quantize_infer,
    save_checkpoint,
    z_coder_pmf,
)
from .index_model import categorical_isotropic
from .pipeline import (
    CoderCheckpointError,
    ModelMismatchError,
    RdWeights,
    TrainConfig,
    decode_image,
    encode_image,
    load_coder_params,
    rate_report,
    save_coder_params,
    train_stages,
)
from .range_coder import StreamError
from .synthetic import (
    ar1_feature_grid,
    ar1_image,
    cyclic_transition,
    markov_row_indices,
    mosaic_image,
    uniform_indices,
)

BENCH_CSV_VERSION = "# hvqc-bench-csv v1"
TRAIN_CSV_VERSION = "# hvqc-train-csv v1"
REPORT_CSV_VERSION = "# hvqc-report-csv v1"
_STRATEGIES = ("static", "o0", "o1", "o2", "o3", "hyper")


class _UsageError(Exception):
    """Bad arguments or argument combinations; maps to exit code 2."""


# -- small shared helpers --------------------------------------------------


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=path.suffix + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def _save_image(path: Path, x: np.ndarray) -> None:
    arr = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format=_image_format(path))
    _atomic_write_bytes(path, buf.getvalue())


def _image_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".png":
        return "PNG"
    if suffix in (".ppm", ".pnm"):
        return "PPM"
    raise _UsageError(f"unsupported image extension {suffix!r} (use .png or .ppm)")


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise _UsageError("ratios must be three comma-separated numbers")
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise _UsageError(f"ratios are not numbers: {text!r}") from None
    if min(vals) < 0:
        raise _UsageError("ratios must be nonnegative")
    if abs(sum(vals) - 1.0) > 1e-6:
        raise _UsageError(f"ratios must sum to 1, got {sum(vals):.6f}")
    return vals


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise _UsageError(f"size must look like 64x64, got {text!r}") from None
    if h < 1 or w < 1:
        raise _UsageError("size must be positive")
    return h, w


def _load_models(args):
    coder = load_coder_params(Path(args.coder))
    cb = load_codebook(Path(args.codebook))
    hyper = load_checkpoint(Path(args.hyper))
    return coder, cb, hyper


def _print_report(rep: dict) -> None:
    for key in ("height", "width", "bytes_total"):
        print(f"{key}: {rep[key]}")
    for key, value in rep.items():
        if key.startswith("bpp") or key.endswith("symbols_coarse") or \
                key.endswith("symbols_medium") or key.endswith("symbols_fine"):
            print(f"{key}: {value:.6f}" if isinstance(value, float) else f"{key}: {value}")
    for key in ("mse", "psnr"):
        if key in rep and not (isinstance(rep[key], float) and np.isnan(rep[key])):
            print(f"{key}: {rep[key]:.6f}")


# -- compress / decompress / report ----------------------------------------


def cmd_compress(args) -> int:
    ratios = _parse_ratios(args.ratios)
    coder, cb, hyper = _load_models(args)
    x = _load_image(Path(args.input))
    enc = encode_image(x, coder, cb, hyper, ratios=ratios)
    _atomic_write_bytes(Path(args.output), enc.data)
    _print_report(rate_report(enc.data))
    return 0


def cmd_decompress(args) -> int:
    coder, cb, hyper = _load_models(args)
    data = Path(args.input).read_bytes()
    dec = decode_image(data, coder, cb, hyper)
    out = Path(args.output)
    _image_format(out)  # validate extension before heavier work
    _save_image(out, dec.x_hat)
    print(f"wrote {out} ({dec.x_hat.shape[2]}x{dec.x_hat.shape[1]})")
    return 0


def cmd_report(args) -> int:
    data = Path(args.input).read_bytes()
    rep = rate_report(data)
    _print_report(rep)
    if args.dump_layout:
        print("segment offsets:")
        for name, offset, size in layout(data):
            print(f"  {name:24s} offset {offset:8d}  size {size:8d}")
    if args.csv:
        buf = io.StringIO()
        buf.write(REPORT_CSV_VERSION + "\n")
        writer = csv.writer(buf)
        writer.writerow(["key", "value"])
        for key, value in rep.items():
            writer.writerow([key, value])
        _atomic_write_text(Path(args.csv), buf.getvalue())
    return 0


# -- bench ------------------------------------------------------------------


def _bench_source(args, rng: np.random.Generator, cb: Codebook | None):
    """Yield (indices, features-or-None) for one trial."""
    shape = _parse_size(args.size)
    if args.source == "uniform":
        return uniform_indices(shape, args.k, rng), None
    if args.source == "markov":
        T = cyclic_transition(args.k, args.fanout)
        return markov_row_indices(shape, T, rng), None
    if args.source == "ar1":
        if cb is None:
            raise _UsageError("--source ar1 requires --codebook")
        feats = ar1_feature_grid(cb.D, shape, args.corr_len, rng)
        return quantize(feats, cb), feats
    raise _UsageError(f"unknown source {args.source!r}")


def _bench_hyper(idx, feats, cb, hyper):
    """Code an index grid with the learned model; the latent stream rides along."""
    t0 = time.perf_counter_ns()
    y = feats if feats is not None else dequantize(idx, cb)
    z = hyper_analysis(y, hyper).data[0]
    zq, _ = quantize_infer(z, hyper.cfg.z_max)
    tables = z_coder_pmf(hyper)
    zmask = np.ones(zq.shape[1:], dtype=np.uint8)
    z_bytes, _ = encode_z_stream(zq, tables, zmask, hyper.cfg.z_max)
    mu, sig = hyper_synthesis(zq.astype(np.float64), hyper, idx.shape)
    probs = categorical_isotropic(cb, mu.data[0], sig.data[0, 0])
    y_bytes, _ = code_indices_hyper_stats(idx, probs)
    enc_ns = time.perf_counter_ns() - t0

    t0 = time.perf_counter_ns()
    z_dec = decode_z_stream(z_bytes, tables, zmask, hyper.cfg.z_max)
    mu, sig = hyper_synthesis(z_dec.astype(np.float64), hyper, idx.shape)
    probs = categorical_isotropic(cb, mu.data[0], sig.data[0, 0])
    out = decode_indices_hyper(y_bytes, probs)
    dec_ns = time.perf_counter_ns() - t0

    bpi = 8.0 * (len(z_bytes) + len(y_bytes)) / idx.size
    return bpi, enc_ns, dec_ns, bool(np.array_equal(out, idx))


def _bench_one(strategy: str, idx, feats, K: int, cb, hyper):
    if strategy == "hyper":
        return _bench_hyper(idx, feats, cb, hyper)
    if strategy == "static":
        # unused symbols still need a slot in the transmitted table
        counts = np.maximum(np.bincount(idx.reshape(-1), minlength=K), 1)
        t0 = time.perf_counter_ns()
        data, stats = code_indices_static_stats(idx, counts)
        enc_ns = time.perf_counter_ns() - t0
        t0 = time.perf_counter_ns()
        out = decode_indices_static(data, idx.shape, K)
        dec_ns = time.perf_counter_ns() - t0
    else:
        order = int(strategy[1:])
        t0 = time.perf_counter_ns()
        data, stats = code_indices_context_stats(idx, order, K)
        enc_ns = time.perf_counter_ns() - t0
        t0 = time.perf_counter_ns()
        out = decode_indices_context(data, idx.shape, order, K)
        dec_ns = time.perf_counter_ns() - t0
    return stats.bits_per_index, enc_ns, dec_ns, bool(np.array_equal(out, idx))


def cmd_bench(args) -> int:
    strategies = args.strategies.split(",")
    for s in strategies:
        if s not in _STRATEGIES:
            raise _UsageError(f"unknown strategy {s!r} (choose from {', '.join(_STRATEGIES)})")
    if "hyper" in strategies and not (args.codebook and args.hyper):
        raise _UsageError("strategy 'hyper' requires --codebook and --hyper")
    if args.source == "ar1" and not args.codebook:
        raise _UsageError("--source ar1 requires --codebook")
    cb = hyper = None
    if args.codebook:
        cb = load_codebook(Path(args.codebook))
        if cb.K != args.k:
            raise _UsageError(f"--k {args.k} does not match codebook K={cb.K}")
    if args.hyper:
        hyper = load_checkpoint(Path(args.hyper))

    rows = []
    all_ok = True
    for trial in range(args.trials):
        rng = np.random.default_rng(args.seed + trial)
        idx, feats = _bench_source(args, rng, cb)
        for s in strategies:
            bpi, enc_ns, dec_ns, ok = _bench_one(s, idx, feats, args.k, cb, hyper)
            rows.append((s, trial, bpi, enc_ns, dec_ns, ok))
            all_ok &= ok

    buf = io.StringIO()
    buf.write(BENCH_CSV_VERSION + "\n")
    writer = csv.writer(buf)
    writer.writerow(["strategy", "trial", "bits_per_index", "encode_ns", "decode_ns", "roundtrip_ok"])
    for s, trial, bpi, enc_ns, dec_ns, ok in rows:
        writer.writerow([s, trial, f"{bpi:.6f}", enc_ns, dec_ns, str(ok).lower()])
    text = buf.getvalue()
    if args.csv:
        _atomic_write_text(Path(args.csv), text)
    else:
        sys.stdout.write(text)
    if not all_ok:
        print("error: roundtrip mismatch in bench run", file=sys.stderr)
        return 1
    return 0


# -- train / synth-data -----------------------------------------------------


_IMAGE_GLOBS = ("*.png", "*.ppm", "*.pnm")


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    files = sorted(p for g in _IMAGE_GLOBS for p in data_dir.glob(g))
    if not files:
        raise _UsageError(f"no .png/.ppm images in {data_dir}")
    try:
        cfg = TrainConfig(
            depth=args.depth,
            codebook_size=args.k,
            hidden=args.hidden,
            hyper_channels=args.hyper_channels,
            hyper_hidden=args.hyper_hidden,
            stage_a_steps=args.steps_a,
            stage_b_steps=args.steps_b,
            stage_c_steps=args.steps_c,
            lr_a=args.lr_a,
            lr_b=args.lr_b,
            lr_c=args.lr_c,
            rd=RdWeights(lam_y=(args.lam_y,) * 3, lam_z=(args.lam_z,) * 3, lam_vq=args.lam_vq),
            seed=args.seed,
        )
    except ValueError as exc:
        raise _UsageError(str(exc)) from None
    dataset = [_load_image(p) for p in files]
    res = train_stages(dataset, cfg)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    coder = res.coder.copy()
    coder.snap_f32()
    save_coder_params(out / "coder.vqtc", coder)
    save_codebook(out / "codebook.vqcb", res.codebook)
    save_checkpoint(out / "hyper.vqhp", res.hyper)

    buf = io.StringIO()
    buf.write(TRAIN_CSV_VERSION + "\n")
    writer = csv.writer(buf)
    writer.writerow(["stage", "step", "loss", "mse", "rate_bits"])
    for row in res.curve:
        writer.writerow([row.stage, row.step, f"{row.loss:.8g}", f"{row.mse:.8g}", f"{row.rate_bits:.8g}"])
    _atomic_write_text(out / "curve.csv", buf.getvalue())

    print(f"trained on {len(dataset)} images; artifacts in {out}")
    print(f"final stage-A loss {res.curve[cfg.stage_a_steps - 1].loss:.6g}, "
          f"final loss {res.curve[-1].loss:.6g}")
    return 0


def cmd_synth_data(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.n < 1:
        raise _UsageError("--n must be positive")
    shape = _parse_size(args.size)
    rng = np.random.default_rng(args.seed)
    for i in range(args.n):
        if args.kind == "ar1":
            img = ar1_image(shape, args.len, rng)
        elif args.kind == "mosaic":
            img = mosaic_image(shape, rng)
        else:
            raise _UsageError(f"unknown kind {args.kind!r}")
        _save_image(out / f"{args.kind}_{i:04d}.{args.ext}", img)
    print(f"wrote {args.n} {args.kind} images to {out}")
    return 0


# -- parser -----------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--coder", required=True, help="image-coder checkpoint (.vqtc)")
    p.add_argument("--codebook", required=True, help="codebook file (.vqcb)")
    p.add_argument("--hyper", required=True, help="rate-model checkpoint (.vqhp)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hvqc",
        description="Vector-quantized image compression with a learned rate model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="image -> container")
    p.add_argument("input", help="input image (.png/.ppm)")
    _add_model_flags(p)
    p.add_argument("--ratios", default="0.3,0.3,0.4",
                   help="coarse,medium,fine routing fractions (sum to 1)")
    p.add_argument("-o", "--output", required=True, help="output container (.hvqc)")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="container -> image")
    p.add_argument("input", help="input container (.hvqc)")
    _add_model_flags(p)
    p.add_argument("-o", "--output", required=True, help="output image (.png/.ppm)")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("report", help="bit accounting for a container")
    p.add_argument("input", help="container (.hvqc)")
    p.add_argument("--dump-layout", action="store_true", help="print segment offsets and sizes")
    p.add_argument("--csv", help="also write the report as CSV")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="compare entropy-coding strategies")
    p.add_argument("--strategies", default="static,o0,o1,o2,o3",
                   help=f"comma list from: {', '.join(_STRATEGIES)}")
    p.add_argument("--source", choices=("uniform", "markov", "ar1"), default="uniform")
    p.add_argument("--k", type=int, default=4, help="alphabet size")
    p.add_argument("--size", default="128x128", help="index grid size HxW")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--fanout", type=int, default=2, help="markov source branching factor")
    p.add_argument("--corr-len", type=float, default=4.0, help="ar1 source correlation length")
    p.add_argument("--codebook", help="codebook file (ar1 source / hyper strategy)")
    p.add_argument("--hyper", help="rate-model checkpoint (hyper strategy)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="write rows to this file instead of stdout")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="run the three-stage training schedule")
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--out-dir", required=True, help="where to write model files and curve.csv")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--k", type=int, default=16, help="codebook size")
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--hyper-channels", type=int, default=4)
    p.add_argument("--hyper-hidden", type=int, default=16)
    p.add_argument("--steps-a", type=int, default=800)
    p.add_argument("--steps-b", type=int, default=800)
    p.add_argument("--steps-c", type=int, default=400)
    p.add_argument("--lr-a", type=float, default=2e-3)
    p.add_argument("--lr-b", type=float, default=2e-3)
    p.add_argument("--lr-c", type=float, default=3e-4)
    p.add_argument("--lam-y", type=float, default=1.5e-3)
    p.add_argument("--lam-z", type=float, default=1.5e-3)
    p.add_argument("--lam-vq", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth-data", help="generate a synthetic image corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=10, help="number of images")
    p.add_argument("--size", default="64x64", help="image size HxW")
    p.add_argument("--len", type=float, default=4.0, help="correlation length (ar1)")
    p.add_argument("--kind", choices=("ar1", "mosaic"), default="ar1")
    p.add_argument("--ext", choices=("png", "ppm"), default="png")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return int(args.func(args) or 0)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ModelMismatchError as exc:
        print(f"error: model mismatch: {exc}", file=sys.stderr)
        return 2
    except (ContainerFormatError, StreamError, CheckpointFormatError,
            CodebookFormatError, CoderCheckpointError) as exc:
        print(f"error: corrupt input: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        raise
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
