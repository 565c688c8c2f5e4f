import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from hvqc import cli


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A corpus and a small trained model, built through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    assert run("synth-data", "--out-dir", root / "data", "--n", 6,
               "--size", "48x48", "--len", 6, "--seed", 1) == 0
    assert run("train", "--data", root / "data", "--out-dir", root / "model",
               "--k", 8, "--hidden", 8, "--hyper-hidden", 8,
               "--steps-a", 200, "--steps-b", 100, "--steps-c", 40, "--seed", 0) == 0
    return root


def model_flags(root):
    return ("--coder", root / "model" / "coder.vqtc",
            "--codebook", root / "model" / "codebook.vqcb",
            "--hyper", root / "model" / "hyper.vqhp")


def read_csv_rows(path):
    with open(path) as f:
        version = f.readline().strip()
        rows = list(csv.DictReader(f))
    return version, rows


class TestCompressDecompress:
    def test_roundtrip_and_exit_codes(self, workspace):
        src = workspace / "data" / "ar1_0000.png"
        out = workspace / "out.hvqc"
        assert run("compress", src, *model_flags(workspace), "-o", out) == 0
        assert out.exists()
        recon = workspace / "recon.png"
        assert run("decompress", out, *model_flags(workspace), "-o", recon) == 0
        x = np.asarray(Image.open(src), dtype=np.float64) / 255.0
        y = np.asarray(Image.open(recon), dtype=np.float64) / 255.0
        assert x.shape == y.shape
        mse = np.mean((x - y) ** 2)
        psnr = -10.0 * np.log10(mse) if mse > 0 else 99.0
        assert np.isfinite(psnr) and psnr > 10.0

    def test_compress_deterministic(self, workspace):
        src = workspace / "data" / "ar1_0001.png"
        a, b = workspace / "det_a.hvqc", workspace / "det_b.hvqc"
        assert run("compress", src, *model_flags(workspace), "-o", a) == 0
        assert run("compress", src, *model_flags(workspace), "-o", b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_bad_ratios_usage_error_no_output(self, workspace):
        src = workspace / "data" / "ar1_0000.png"
        out = workspace / "never.hvqc"
        assert run("compress", src, *model_flags(workspace),
                   "--ratios", "0.3,0.3,0.3", "-o", out) == 2
        assert not out.exists()

    def test_missing_input_is_io_error(self, workspace):
        assert run("compress", workspace / "nope.png", *model_flags(workspace),
                   "-o", workspace / "x.hvqc") == 3
        assert run("decompress", workspace / "nope.hvqc", *model_flags(workspace),
                   "-o", workspace / "x.png") == 3

    def test_corrupt_container_is_stream_error(self, workspace):
        src = workspace / "data" / "ar1_0002.png"
        out = workspace / "corrupt.hvqc"
        assert run("compress", src, *model_flags(workspace), "-o", out) == 0
        blob = bytearray(out.read_bytes())
        blob[-2] ^= 0x40
        bad = workspace / "corrupted.hvqc"
        bad.write_bytes(bytes(blob))
        assert run("decompress", bad, *model_flags(workspace),
                   "-o", workspace / "junk.png") == 4

    def test_wrong_model_is_usage_error(self, workspace, tmp_path):
        from hvqc.codebook import Codebook, save_codebook
        src = workspace / "data" / "ar1_0000.png"
        out = workspace / "mm.hvqc"
        assert run("compress", src, *model_flags(workspace), "-o", out) == 0
        other = tmp_path / "other.vqcb"
        save_codebook(other, Codebook(np.random.default_rng(0).normal(size=(32, 2))))
        code = run("decompress", out,
                   "--coder", workspace / "model" / "coder.vqtc",
                   "--codebook", other,
                   "--hyper", workspace / "model" / "hyper.vqhp",
                   "-o", workspace / "junk2.png")
        assert code == 2

    def test_truncated_checkpoint_is_corrupt_error(self, workspace, tmp_path):
        src = workspace / "data" / "ar1_0000.png"
        clipped = tmp_path / "clipped.vqhp"
        clipped.write_bytes((workspace / "model" / "hyper.vqhp").read_bytes()[:-7])
        assert run("compress", src,
                   "--coder", workspace / "model" / "coder.vqtc",
                   "--codebook", workspace / "model" / "codebook.vqcb",
                   "--hyper", clipped, "-o", tmp_path / "x.hvqc") == 4


class TestReport:
    def test_report_accounts_for_every_byte(self, workspace, capsys):
        src = workspace / "data" / "ar1_0003.png"
        out = workspace / "rep.hvqc"
        assert run("compress", src, *model_flags(workspace), "-o", out) == 0
        assert run("report", out, "--dump-layout", "--csv", workspace / "rep.csv") == 0
        text = capsys.readouterr().out
        assert "bpp:" in text and "fine-index" in text
        version, rows = read_csv_rows(workspace / "rep.csv")
        assert version == "# hvqc-report-csv v1"
        rep = {r["key"]: r["value"] for r in rows}
        assert int(rep["bytes_total"]) == len(out.read_bytes())
        seg = float(rep["bpp_header"]) + float(rep["bpp_masks"]) + sum(
            float(rep[f"bpp_latent_{g}"]) + float(rep[f"bpp_index_{g}"])
            for g in ("coarse", "medium", "fine"))
        assert abs(seg - float(rep["bpp"])) < 1e-9

    def test_report_on_garbage_is_stream_error(self, tmp_path):
        bad = tmp_path / "junk.hvqc"
        bad.write_bytes(b"not a container at all")
        assert run("report", bad) == 4


class TestBench:
    def test_uniform_source_within_coder_gap_of_log2k(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert run("bench", "--strategies", "static,o0,o1,o2,o3",
                   "--source", "uniform", "--trials", 3, "--seed", 0,
                   "--csv", out) == 0
        version, rows = read_csv_rows(out)
        assert version == "# hvqc-bench-csv v1"
        assert len(rows) == 15  # 5 strategies x 3 trials
        for row in rows:
            assert row["roundtrip_ok"] == "true"
            assert abs(float(row["bits_per_index"]) - 2.0) < 0.15
            assert int(row["encode_ns"]) > 0 and int(row["decode_ns"]) > 0

    def test_bench_deterministic(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        args = ("bench", "--strategies", "static,o1", "--source", "markov",
                "--size", "32x32", "--trials", 2, "--seed", 7)
        assert run(*args, "--csv", a) == 0
        assert run(*args, "--csv", b) == 0
        a_rows = [r for r in a.read_text().splitlines()]
        b_rows = [r for r in b.read_text().splitlines()]
        # timings differ between runs; everything else must match
        for ra, rb in zip(a_rows, b_rows):
            if ra.startswith(("#", "strategy")):
                assert ra == rb
                continue
            ca, cb = ra.split(","), rb.split(",")
            assert (ca[0], ca[1], ca[2], ca[5]) == (cb[0], cb[1], cb[2], cb[5])

    def test_markov_source_context_beats_order0(self, tmp_path):
        out = tmp_path / "mk.csv"
        assert run("bench", "--strategies", "o0,o1", "--source", "markov",
                   "--k", 4, "--fanout", 2, "--size", "64x64", "--trials", 2,
                   "--seed", 3, "--csv", out) == 0
        _, rows = read_csv_rows(out)
        o0 = np.mean([float(r["bits_per_index"]) for r in rows if r["strategy"] == "o0"])
        o1 = np.mean([float(r["bits_per_index"]) for r in rows if r["strategy"] == "o1"])
        assert o1 < o0  # rows are first-order chains; context helps

    def test_unknown_strategy_is_usage_error(self, tmp_path):
        assert run("bench", "--strategies", "static,o9",
                   "--csv", tmp_path / "x.csv") == 2
        assert not (tmp_path / "x.csv").exists()

    def test_hyper_without_models_is_usage_error(self):
        assert run("bench", "--strategies", "hyper") == 2

    def test_hyper_strategy_runs_with_trained_model(self, workspace, tmp_path):
        out = tmp_path / "hy.csv"
        assert run("bench", "--strategies", "static,hyper", "--source", "ar1",
                   "--k", 8, "--size", "24x24", "--trials", 1, "--corr-len", 6,
                   "--codebook", workspace / "model" / "codebook.vqcb",
                   "--hyper", workspace / "model" / "hyper.vqhp",
                   "--seed", 2, "--csv", out) == 0
        _, rows = read_csv_rows(out)
        assert {r["strategy"] for r in rows} == {"static", "hyper"}
        assert all(r["roundtrip_ok"] == "true" for r in rows)


class TestSynthData:
    def test_ar1_corpus_matches_target_autocorrelation(self, tmp_path):
        out = tmp_path / "ac"
        assert run("synth-data", "--out-dir", out, "--n", 100, "--size", "64x64",
                   "--len", 8, "--seed", 5) == 0
        files = sorted(out.glob("*.png"))
        assert len(files) == 100
        num = den = 0.0
        for p in files:
            x = np.asarray(Image.open(p), dtype=np.float64) / 255.0
            v = x - x.mean(axis=(0, 1), keepdims=True)
            num += np.sum(v[:, 1:] * v[:, :-1])
            den += np.sum(v * v)
        assert abs(num / den - np.exp(-1.0 / 8.0)) < 0.05

    def test_deterministic_given_seed(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("synth-data", "--out-dir", out, "--n", 2,
                       "--size", "32x32", "--seed", 4) == 0
        for pa, pb in zip(sorted(a.iterdir()), sorted(b.iterdir())):
            assert pa.read_bytes() == pb.read_bytes()

    def test_mosaic_kind(self, tmp_path):
        out = tmp_path / "mo"
        assert run("synth-data", "--out-dir", out, "--n", 3, "--kind", "mosaic",
                   "--size", "32x32", "--seed", 0) == 0
        assert len(list(out.glob("mosaic_*.png"))) == 3


class TestTrain:
    def test_fifty_images_two_thousand_steps_loss_trends_down(self, tmp_path):
        data = tmp_path / "corpus"
        assert run("synth-data", "--out-dir", data, "--n", 50, "--size", "64x64",
                   "--len", 6, "--seed", 9) == 0
        out = tmp_path / "model"
        assert run("train", "--data", data, "--out-dir", out,
                   "--k", 8, "--hidden", 8, "--hyper-hidden", 8, "--seed", 0) == 0
        version, rows = read_csv_rows(out / "curve.csv")
        assert version == "# hvqc-train-csv v1"
        assert len(rows) == 2000  # 800 + 800 + 400 at default settings
        losses = [float(r["loss"]) for r in rows]
        k = len(losses) // 10
        assert np.mean(losses[-k:]) < np.mean(losses[:k])
        for name in ("coder.vqtc", "codebook.vqcb", "hyper.vqhp"):
            assert (out / name).exists()

    def test_empty_data_dir_is_usage_error(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert run("train", "--data", empty, "--out-dir", tmp_path / "m") == 2

    def test_missing_data_dir_is_io_error(self, tmp_path):
        assert run("train", "--data", tmp_path / "ghost", "--out-dir", tmp_path / "m") == 3

    def test_bad_hyperparameters_are_usage_errors(self, workspace, tmp_path):
        assert run("train", "--data", workspace / "data", "--out-dir", tmp_path / "m",
                   "--steps-a", 0) == 2
        assert run("train", "--data", workspace / "data", "--out-dir", tmp_path / "m",
                   "--lr-a", -1) == 2


class TestEntryPoints:
    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "hvqc.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "compress" in proc.stdout and "synth-data" in proc.stdout

    def test_missing_subcommand_is_usage_error(self):
        assert run() == 2

    def test_bad_size_is_usage_error(self, tmp_path):
        assert run("synth-data", "--out-dir", tmp_path / "x", "--size", "64by64") == 2
