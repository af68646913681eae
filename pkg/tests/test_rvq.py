import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rvqtok.features import FormatError
from rvqtok.rvq import (RvqStack, TokenStream, bandwidth_bps, init_stack, pack_bitstream, quantizer_dropout,
                        rvq_decode, rvq_encode, unpack_bitstream)
from rvqtok.tensorcore import DimensionError
from rvqtok.vq import Codebook, assign

from oracles import rvq_sequential


def _stack(seed, n=3, bits=3, d=4):
    return RvqStack.random(n, bits, d, np.random.default_rng(seed))


class TestStack:
    def test_level_bounds(self):
        with pytest.raises(ValueError):
            RvqStack([])

    def test_shared_shape(self):
        with pytest.raises(ValueError):
            RvqStack([Codebook(np.zeros((4, 2))), Codebook(np.zeros((8, 2)))])


class TestEncode:
    def test_codeword_input(self):
        st_ = _stack(0)
        res = rvq_encode(st_, st_.levels[0].entries[5:6])
        assert res.tokens.indices[0, 0] == 5
        assert np.abs(res.residuals[1]).max() == 0.0

    def test_single_level_is_assign(self):
        st_ = _stack(1)
        z = np.random.default_rng(1).normal(size=(10, 4))
        np.testing.assert_array_equal(rvq_encode(st_, z, 1).tokens.indices[:, 0], assign(st_.levels[0], z))

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force_oracle(self, seed):
        st_ = _stack(seed)
        z = np.random.default_rng(seed + 100).normal(size=(12, 4))
        res = rvq_encode(st_, z)
        oracle = rvq_sequential([cb.entries.tolist() for cb in st_.levels], z.tolist())
        np.testing.assert_array_equal(res.tokens.indices, oracle)
        np.testing.assert_allclose(res.quantized_sum + res.residual, z, rtol=0, atol=1e-12)

    def test_levels_used_range(self):
        with pytest.raises(ValueError):
            rvq_encode(_stack(0), np.zeros((1, 4)), 4)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            rvq_encode(_stack(0), np.zeros((1, 3)))

    def test_empty_input(self):
        assert rvq_encode(_stack(0), np.zeros((0, 4))).tokens.indices.shape == (0, 3)


class TestDecode:
    def test_matches_encode_sum(self):
        st_ = _stack(2)
        res = rvq_encode(st_, np.random.default_rng(2).normal(size=(7, 4)))
        np.testing.assert_array_equal(rvq_decode(st_, res.tokens), res.quantized_sum)

    def test_zero_codebooks(self):
        st_ = RvqStack.zeros(3, 2, 4)
        tokens = TokenStream(np.random.default_rng(0).integers(0, 4, (5, 3)), 2)
        assert not np.any(rvq_decode(st_, tokens))

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            rvq_decode(_stack(0), TokenStream(np.array([[9]]), 3))

    @pytest.mark.parametrize("seed", range(20))
    def test_rms_refinement_on_initialized_stack(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(300, 4)) * np.array([3.0, 1.0, 0.5, 0.2])
        st_ = init_stack(z, 4, 4, iters=5, seed=seed)
        res = rvq_encode(st_, z)
        rms = [np.sqrt(np.mean((z - sum(res.quantized[:i + 1])) ** 2)) for i in range(4)]
        assert all(b <= a for a, b in zip(rms, rms[1:]))


class TestDropout:
    def test_single_level(self):
        rng = np.random.default_rng(0)
        assert {quantizer_dropout(1, rng) for _ in range(50)} == {1}

    def test_uniform_within_three_sigma(self):
        rng = np.random.default_rng(1)
        counts = np.bincount([quantizer_dropout(8, rng) for _ in range(10000)], minlength=9)[1:]
        sigma = np.sqrt(10000 * (1 / 8) * (7 / 8))
        assert np.all(np.abs(counts - 1250) <= 3 * sigma)

    def test_reproducible(self):
        a = [quantizer_dropout(8, np.random.default_rng(5)) for _ in range(3)]
        b = [quantizer_dropout(8, np.random.default_rng(5)) for _ in range(3)]
        assert a == b


class TestBandwidth:
    def test_table_rows(self):
        assert bandwidth_bps(50, 4, 10) == 2000
        assert bandwidth_bps(50, 8, 10) == 4000

    def test_stream_properties(self):
        t = TokenStream(np.zeros((50, 8), np.int64), 10)
        assert t.frame_rate == 50 and t.tokens_per_second == 400 and t.bandwidth_bps == 4000


class TestBitstream:
    def test_known_bytes(self):
        t = TokenStream(np.array([[1, 2], [1023, 0]]), 10)
        expected = "52565142" "01" "803e0000" "40010000" "02" "0a" "02000000" "00402ffc00"
        assert pack_bitstream(t).hex() == expected

    def test_payload_size(self):
        t = TokenStream(np.zeros((4, 8), np.int64), 10)
        assert len(pack_bitstream(t)) - 19 == 40

    def test_one_second_payload(self):
        t = TokenStream(np.zeros((50, 8), np.int64), 10)
        assert (len(pack_bitstream(t)) - 19) * 8 == 4000

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        bits = int(rng.integers(1, 17))
        t = TokenStream(rng.integers(0, 1 << bits, (int(rng.integers(0, 20)), int(rng.integers(1, 9)))), bits)
        buf = pack_bitstream(t)
        assert unpack_bitstream(buf) == t
        assert pack_bitstream(unpack_bitstream(buf)) == buf

    def test_bad_magic(self):
        buf = bytearray(pack_bitstream(TokenStream(np.zeros((1, 1), np.int64), 4)))
        buf[:4] = b"XXXX"
        with pytest.raises(FormatError, match="magic"):
            unpack_bitstream(bytes(buf))

    def test_frame_count_mismatch(self):
        buf = pack_bitstream(TokenStream(np.zeros((3, 2), np.int64), 10))
        with pytest.raises(FormatError, match="frames"):
            unpack_bitstream(buf[:-1])

    def test_index_too_large(self):
        with pytest.raises(FormatError):
            pack_bitstream(TokenStream(np.array([[16]]), 4))

    def test_nonzero_padding_rejected(self):
        buf = bytearray(pack_bitstream(TokenStream(np.array([[1]]), 3)))
        buf[-1] |= 1
        with pytest.raises(FormatError, match="padding"):
            unpack_bitstream(bytes(buf))

    def test_truncated_header(self):
        with pytest.raises(FormatError, match="header"):
            unpack_bitstream(b"RVQB")
