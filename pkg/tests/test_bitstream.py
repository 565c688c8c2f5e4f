import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from hvqc.bitstream import (
    ContainerChecksumError,
    ContainerDimensionError,
    ContainerFormatError,
    ContainerMagicError,
    ContainerParts,
    ContainerTruncatedError,
    ContainerVersionError,
    GranularityStreams,
    RoutingMask,
    allocate_masks,
    decode_masked_symbols,
    decode_z_stream,
    deserialize,
    encode_masked_symbols,
    encode_z_stream,
    layout,
    mask_from_ternary,
    pack_masks,
    serialize,
    unpack_masks,
    upsample_mask,
    z_active_mask,
)
from hvqc.range_coder import StreamError


def make_parts(**overrides):
    base = dict(
        height=50, width=60, padded_height=64, padded_width=64,
        codebook_size=16, depth=2, hyper_channels=8, hyper_hidden=32,
        hyper_stride=4, hyper_z_max=127,
        mask_bytes=b"\x01\x02\x03",
        streams=(
            GranularityStreams(4, b"abcd", 9, b"xyz"),
            GranularityStreams(0, b"", 0, b""),
            GranularityStreams(2, b"qq", 5, b"ppppp"),
        ),
    )
    base.update(overrides)
    return ContainerParts(**base)


class TestRoutingMask:
    def test_partition_enforced(self):
        good = mask_from_ternary(np.array([[0, 1], [2, 1]]))
        assert good.active_counts() == (1, 8, 16)
        bad_c = good.m_c.copy()
        bad_c[0, 0] = 0  # nobody claims block (0, 0) now
        with pytest.raises(ValueError):
            RoutingMask(bad_c, good.m_m, good.m_f)

    def test_shape_consistency_enforced(self):
        good = mask_from_ternary(np.zeros((2, 2), dtype=np.int64))
        with pytest.raises(ValueError):
            RoutingMask(good.m_c, good.m_m[:1], good.m_f)

    def test_non_binary_rejected(self):
        good = mask_from_ternary(np.zeros((2, 2), dtype=np.int64))
        with pytest.raises(ValueError):
            RoutingMask(good.m_c * 3, good.m_m, good.m_f)

    def test_ternary_roundtrip(self):
        tern = np.array([[0, 1, 2], [2, 0, 1]])
        assert_array_equal(mask_from_ternary(tern).ternary(), tern)

    def test_upsample_mask(self):
        m = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        up = upsample_mask(m, 2)
        assert_array_equal(up, [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]])


class TestAllocateMasks:
    def test_all_coarse(self):
        m = allocate_masks(np.random.default_rng(0).normal(size=(4, 16, 16)), (1.0, 0.0, 0.0))
        assert m.active_counts() == (16, 0, 0)

    def test_all_fine(self):
        m = allocate_masks(np.random.default_rng(1).normal(size=(4, 16, 16)), (0.0, 0.0, 1.0))
        assert m.active_counts() == (0, 0, 256)

    def test_default_ratios_counts_within_one_block(self):
        f = np.random.default_rng(2).normal(size=(4, 40, 40))
        m = allocate_masks(f, (0.3, 0.3, 0.4))
        n = 100
        c, mm, ff = m.active_counts()
        assert abs(c - 0.3 * n) <= 1
        assert abs(mm / 4 - 0.3 * n) <= 1
        assert abs(ff / 16 - 0.4 * n) <= 1

    def test_lowest_variance_goes_coarse(self):
        # Four blocks with strictly increasing variance by construction.
        f = np.zeros((1, 4, 8))
        f[0, :, 4:] = np.random.default_rng(3).normal(size=(4, 4)) * 10.0
        f[0, 0, 5] += 100.0
        m = allocate_masks(f, (0.5, 0.0, 0.5))
        assert m.ternary()[0, 0] == 0  # flat block is coarse
        assert m.ternary()[0, 1] == 2

    def test_raster_tiebreak_on_constant_features(self):
        m = allocate_masks(np.zeros((2, 8, 8)), (0.5, 0.25, 0.25))
        assert_array_equal(m.ternary(), [[0, 0], [1, 2]])

    def test_bad_ratios_rejected(self):
        f = np.zeros((1, 8, 8))
        with pytest.raises(ValueError):
            allocate_masks(f, (0.5, 0.5, 0.5))
        with pytest.raises(ValueError):
            allocate_masks(f, (1.2, -0.2, 0.0))

    def test_indivisible_grid_rejected(self):
        with pytest.raises(ValueError):
            allocate_masks(np.zeros((1, 6, 8)), (1.0, 0.0, 0.0))


class TestPackMasks:
    def test_all_coarse_under_twelve_bytes(self):
        m = allocate_masks(np.zeros((1, 64, 64)), (1.0, 0.0, 0.0))
        assert m.m_c.shape == (16, 16)
        assert len(pack_masks(m)) < 12

    def test_balanced_mask_near_entropy(self):
        rng = np.random.default_rng(4)
        tern = rng.integers(0, 3, size=(32, 32))
        data = pack_masks(mask_from_ternary(tern))
        bits_per_block = 8.0 * len(data) / tern.size
        assert bits_per_block < np.log2(3.0) + 0.1

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 8), st.integers(1, 8))
    def test_roundtrip_random_masks(self, seed, hc, wc):
        tern = np.random.default_rng(seed).integers(0, 3, size=(hc, wc))
        m = mask_from_ternary(tern)
        back = unpack_masks(pack_masks(m), (hc, wc))
        assert_array_equal(back.ternary(), tern)

    def test_malformed_stream_rejected(self):
        with pytest.raises((StreamError, ValueError)):
            unpack_masks(b"", (4, 4))


class TestMaskedStreams:
    def test_roundtrip_and_fill(self):
        rng = np.random.default_rng(5)
        K, H, W = 8, 12, 12
        probs = rng.dirichlet(np.ones(K), size=H * W).T.reshape(K, H, W)
        vals = rng.integers(0, K, size=(H, W))
        mask = (rng.random((H, W)) < 0.5).astype(np.uint8)
        data, stats = encode_masked_symbols(vals, probs, mask)
        out = decode_masked_symbols(data, probs, mask, fill=-1)
        assert_array_equal(out[mask == 1], vals[mask == 1])
        assert np.all(out[mask == 0] == -1)
        assert stats.n_symbols == int(mask.sum())

    def test_symbol_count_equals_popcount(self):
        rng = np.random.default_rng(6)
        probs = np.full((4, 10, 10), 0.25)
        vals = rng.integers(0, 4, size=(10, 10))
        for density in (0.0, 0.2, 1.0):
            mask = (rng.random((10, 10)) < density).astype(np.uint8)
            _, stats = encode_masked_symbols(vals, probs, mask)
            assert stats.n_symbols == int(mask.sum())

    def test_empty_mask_zero_length_stream(self):
        probs = np.full((4, 6, 6), 0.25)
        data, stats = encode_masked_symbols(np.zeros((6, 6), dtype=int), probs,
                                            np.zeros((6, 6), dtype=np.uint8))
        assert data == b""
        assert stats.payload_bytes == 0
        out = decode_masked_symbols(b"", probs, np.zeros((6, 6), dtype=np.uint8), fill=7)
        assert np.all(out == 7)

    def test_coder_gap_within_bound(self):
        rng = np.random.default_rng(7)
        K, H, W = 16, 24, 24
        probs = rng.dirichlet(np.ones(K) * 2, size=H * W).T.reshape(K, H, W)
        vals = rng.integers(0, K, size=(H, W))
        mask = np.ones((H, W), dtype=np.uint8)
        _, stats = encode_masked_symbols(vals, probs, mask)
        assert stats.realized_bits <= 1.01 * stats.ideal_bits + 64


class TestZStreams:
    def test_active_mask_footprint_rule(self):
        m = np.zeros((9, 10), dtype=np.uint8)
        m[4, 7] = 1
        zm = z_active_mask(m, 4)
        assert zm.shape == (3, 3)
        expect = np.zeros((3, 3), dtype=np.uint8)
        expect[1, 1] = 1
        assert_array_equal(zm, expect)

    def test_active_mask_all_zero(self):
        assert z_active_mask(np.zeros((8, 8), dtype=np.uint8)).sum() == 0

    def test_roundtrip_with_inactive_zeroed(self):
        rng = np.random.default_rng(8)
        C, h, w = 3, 5, 4
        zq = rng.integers(-6, 7, size=(C, h, w)).astype(np.int32)
        zmask = (rng.random((h, w)) < 0.6).astype(np.uint8)
        tables = rng.dirichlet(np.ones(255), size=C)
        data, stats = encode_z_stream(zq, tables, zmask, 127)
        out = decode_z_stream(data, tables, zmask, 127)
        assert_array_equal(out[:, zmask == 1], zq[:, zmask == 1])
        assert np.all(out[:, zmask == 0] == 0)
        assert stats.n_symbols == C * int(zmask.sum())

    def test_empty_mask_empty_stream(self):
        tables = np.full((2, 255), 1 / 255.0)
        data, stats = encode_z_stream(np.zeros((2, 3, 3), dtype=np.int32), tables,
                                      np.zeros((3, 3), dtype=np.uint8), 127)
        assert data == b"" and stats.n_symbols == 0
        out = decode_z_stream(b"", tables, np.zeros((3, 3), dtype=np.uint8), 127)
        assert np.all(out == 0)

    def test_out_of_alphabet_rejected(self):
        tables = np.full((1, 5), 0.2)
        with pytest.raises(ValueError):
            encode_z_stream(np.full((1, 2, 2), 9, dtype=np.int32), tables,
                            np.ones((2, 2), dtype=np.uint8), 2)


class TestContainer:
    def test_minimal_roundtrip(self):
        parts = make_parts(height=16, width=16, padded_height=16, padded_width=16)
        assert deserialize(serialize(parts)) == parts

    def test_roundtrip_preserves_all_fields(self):
        parts = make_parts()
        back = deserialize(serialize(parts))
        assert back == parts
        assert back.streams[1].z_bytes == b""

    def test_bpp_accounting_identity(self):
        parts = make_parts()
        blob = serialize(parts)
        assert parts.total_bytes() == len(blob)
        assert parts.bpp() == 8.0 * len(blob) / (50 * 60)

    def test_layout_covers_every_byte(self):
        blob = serialize(make_parts())
        rows = layout(blob)
        off = 0
        for _, start, size in rows:
            assert start == off
            off += size
        assert off == len(blob)

    def test_bad_magic(self):
        blob = serialize(make_parts())
        with pytest.raises(ContainerMagicError):
            deserialize(b"XXXX" + blob[4:])

    def test_bad_version(self):
        blob = serialize(make_parts())
        with pytest.raises(ContainerVersionError):
            deserialize(blob[:4] + b"\x63\x00" + blob[6:])

    def test_truncation(self):
        blob = serialize(make_parts())
        with pytest.raises(ContainerTruncatedError):
            deserialize(blob[:20])
        with pytest.raises(ContainerTruncatedError):
            deserialize(blob[:-3])

    def test_trailing_bytes(self):
        blob = serialize(make_parts())
        with pytest.raises(ContainerTruncatedError):
            deserialize(blob + b"zz")

    def test_payload_corruption_detected_by_checksum(self):
        blob = serialize(make_parts())
        pos = len(blob) - 2  # inside the last stream
        mut = blob[:pos] + bytes([blob[pos] ^ 0xFF]) + blob[pos + 1 :]
        with pytest.raises(ContainerChecksumError):
            deserialize(mut)

    def test_dimension_errors(self):
        for bad in (
            dict(height=0),
            dict(padded_height=48),           # smaller than image height
            dict(padded_height=65),           # not a multiple of 16
            dict(height=10, width=10),        # padding would exceed one stride
            dict(codebook_size=1),
            dict(depth=0),
        ):
            with pytest.raises(ContainerDimensionError):
                make_parts(**bad)

    def test_every_single_byte_flip_is_detected(self):
        blob = serialize(make_parts(height=16, width=16, padded_height=16, padded_width=16))
        for pos in range(len(blob)):
            for pattern in (0x01, 0x80):
                mut = blob[:pos] + bytes([blob[pos] ^ pattern]) + blob[pos + 1 :]
                with pytest.raises(ContainerFormatError):
                    deserialize(mut)
