import numpy as np
import pytest

from tailpcc import bitstream as B
from tailpcc.entropy import FactorizedEntropyModel, QuantizedLatent
from tailpcc.rangecoder import RangeCoderError

GRID = [k / 32 for k in range(1, 33)]


def _stream(rng, C=8, C_xyz=4, M=20, feature_only=False):
    q = QuantizedLatent(rng.integers(-6, 7, size=(C, M)), rng.integers(-30, 31, size=(C_xyz, M)))
    mz, mx = FactorizedEntropyModel(C, seed=1), FactorizedEntropyModel(C_xyz, seed=2)
    d = rng.integers(0, 40, size=M)
    bs = B.serialize_progressive(q, rng.permutation(C), rng.permutation(C_xyz), mz, mx, d, 512, feature_only)
    return bs, q, d, mz, mx


class TestLayout:
    def test_two_by_two_alternates(self):
        assert B.layer_order(2, 2) == [("xyz", 0), ("z", 0), ("xyz", 1), ("z", 1)]

    def test_uneven_counts_follow_thresholds(self):
        order = B.layer_order(4, 2)
        assert order == [("xyz", 0), ("z", 0), ("z", 1), ("xyz", 1), ("z", 2), ("z", 3)]

    def test_feature_only_puts_coordinates_first(self):
        assert B.layer_order(2, 2, True) == [("xyz", 0), ("xyz", 1), ("z", 0), ("z", 1)]

    def test_header_length(self, rng):
        for C, C_xyz in ((2, 2), (8, 4), (32, 16)):
            bs, *_ = _stream(rng, C, C_xyz, M=5)
            raw = bs.to_bytes()
            assert bs.header_length == 16 + 4 * (C + C_xyz) + (C + C_xyz)
            assert len(raw) == bs.header_length + len(bs.body)

    def test_body_follows_importance(self, rng):
        q = QuantizedLatent(rng.integers(-3, 4, size=(2, 6)), rng.integers(-3, 4, size=(2, 6)))
        mz, mx = FactorizedEntropyModel(2, seed=1), FactorizedEntropyModel(2, seed=2)
        bs = B.serialize_progressive(q, [1, 0], [0, 1], mz, mx, np.ones(6, dtype=int), 6)
        spans = bs.layer_spans()
        assert [(s, r) for s, r, _, _ in spans] == [("xyz", 0), ("z", 0), ("xyz", 1), ("z", 1)]
        first_z = bs.body[spans[1][2]:spans[1][3]]
        assert first_z == B._encode_layer(q.z[1], mz, 1)


class TestRoundTrip:
    def test_full_stream_is_lossless(self, rng):
        bs, q, d, mz, mx = _stream(rng)
        back = B.ProgressiveBitstream.from_bytes(bs.to_bytes())
        assert back == bs
        q2, d2, kz, kx = B.parse_layers(back, mz, mx)
        np.testing.assert_array_equal(q2.z, q.z)
        np.testing.assert_array_equal(q2.z_xyz, q.z_xyz)
        np.testing.assert_array_equal(d2, d)
        assert kz.all() and kx.all()

    def test_density_counts(self, rng):
        for v in (np.zeros(5, int), rng.integers(0, 5000, size=300), np.array([0, 1, 2**20])):
            np.testing.assert_array_equal(B.decode_counts(B.encode_counts(v), len(v)), v)
        with pytest.raises(B.BitstreamError):
            B.decode_counts(B.encode_counts([3, 4]), 3)


class TestTruncate:
    def test_identity_at_one(self, rng):
        bs, *_ = _stream(rng)
        assert B.truncate(bs, 1.0) == bs

    def test_lowest_ratio_keeps_one_layer_each(self, rng):
        bs, *_ = _stream(rng, C=32, C_xyz=16, M=4)
        assert B.truncate(bs, 0.03).retained == (1, 1)

    def test_nested_prefixes(self, rng):
        bs, *_ = _stream(rng, C=32, C_xyz=16, M=6)
        cuts = [B.truncate(bs, a) for a in GRID]
        for i, small in enumerate(cuts):
            for big in cuts[i:]:
                assert big.body.startswith(small.body)

    def test_truncated_channels_decode_as_zero(self, rng):
        bs, q, _, mz, mx = _stream(rng)
        cut = B.truncate(bs, 0.25)
        q2, _, kz, kx = B.parse_layers(B.ProgressiveBitstream.from_bytes(cut.to_bytes()), mz, mx)
        assert kz.sum() == 2 and kx.sum() == 1
        np.testing.assert_array_equal(q2.z, q.z * kz[:, None])
        np.testing.assert_array_equal(q2.z_xyz, q.z_xyz * kx[:, None])
        assert set(np.nonzero(kz)[0]) == set(bs.perm_z[:2])

    def test_truncating_twice_keeps_smaller_ratio(self, rng):
        bs, *_ = _stream(rng)
        assert B.truncate(B.truncate(bs, 0.25), 0.75) == B.truncate(bs, 0.25)

    def test_feature_only_keeps_all_xyz(self, rng):
        bs, *_ = _stream(rng, feature_only=True)
        assert B.truncate(bs, 1 / 8).retained == (1, 4)

    def test_ratio_must_keep_a_layer(self, rng):
        bs, *_ = _stream(rng)
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                B.truncate(bs, bad)

    def test_rate_bounds(self, rng):
        bs, q, _, mz, mx = _stream(rng, C=32, C_xyz=16, M=40)
        for a in GRID:
            t = B.truncate(bs, a)
            est, got = B.entropy_bpp(t, mz, mx), B.file_bpp(t)
            assert est <= got <= 1.05 * est + B.overhead_bits(t) / t.n_points


class TestErrors:
    def test_header_errors(self, rng):
        bs, _, _, mz, mx = _stream(rng)
        raw = bs.to_bytes()
        with pytest.raises(B.BitstreamError):
            B.ProgressiveBitstream.from_bytes(b"")
        with pytest.raises(B.BitstreamError, match="magic"):
            B.ProgressiveBitstream.from_bytes(b"XXXX" + raw[4:])
        with pytest.raises(B.VersionError):
            B.ProgressiveBitstream.from_bytes(raw[:4] + b"\x09" + raw[5:])
        with pytest.raises(B.BitstreamError):
            B.ProgressiveBitstream.from_bytes(raw[:20])
        with pytest.raises(B.BitstreamError, match="lengths"):
            B.ProgressiveBitstream.from_bytes(raw[:bs.header_length + 2])
        # a stream cut short inside the last layer parses but fails to decode
        with pytest.raises((B.BitstreamError, RangeCoderError)):
            B.parse_layers(B.ProgressiveBitstream.from_bytes(raw[:-1]), mz, mx)
        dup = bytearray(raw)
        dup[16] = dup[17]
        with pytest.raises(B.BitstreamError, match="permutation"):
            B.ProgressiveBitstream.from_bytes(bytes(dup))

    def test_model_mismatch(self, rng):
        bs, _, _, mz, _ = _stream(rng)
        with pytest.raises(B.VersionError):
            B.parse_layers(bs, mz, FactorizedEntropyModel(5))

    def test_corrupt_layer_byte(self, rng):
        bs, _, _, mz, mx = _stream(rng, M=200)
        _, _, start, stop = bs.layer_spans()[1]
        raw = bytearray(bs.to_bytes())
        raw[bs.header_length + (start + stop) // 2] ^= 0xFF
        with pytest.raises(RangeCoderError):
            B.parse_layers(B.ProgressiveBitstream.from_bytes(bytes(raw)), mz, mx)
