import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from devolve import nn, sparsity
from devolve.packing import (BitReader, BitWriter, PackedFormatError,
                             PackedLayer, PackedModel, compression_report,
                             decode_layer, decode_mask, encode_layer, encode_mask,
                             huffman_build, huffman_decode, mask_runs, pack_model,
                             unpack_model)
from devolve.quantize import QuantizationSpec, quantize_network
from devolve.sparsity import SparsityMask


class TestBitIO:
    def test_roundtrip(self):
        w = BitWriter()
        w.write(0b101, 3)
        w.write(0b1, 1)
        w.write(0xABCD, 16)
        data = w.getvalue()
        r = BitReader(data, w.bit_length)
        assert r.read(3) == 0b101
        assert r.read(1) == 0b1
        assert r.read(16) == 0xABCD

    def test_truncation_detected(self):
        r = BitReader(b"\xFF", 4)
        r.read(4)
        with pytest.raises(PackedFormatError, match="truncated"):
            r.read(1)


class TestHuffman:
    def test_two_equal_symbols(self):
        t = huffman_build({0: 1, 1: 1})
        assert t.lengths[0] == 1 and t.lengths[1] == 1

    def test_single_symbol_one_bit(self):
        t = huffman_build({3: 10}, n_symbols=4)
        assert t.lengths[3] == 1
        assert (t.lengths[[0, 1, 2]] == 0).all()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            huffman_build({})

    def test_skewed_lengths(self):
        t = huffman_build({0: 100, 1: 1, 2: 1})
        assert t.lengths[0] == 1
        assert t.lengths[1] == 2 and t.lengths[2] == 2

    def test_kraft_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            freqs = {s: int(c) for s, c in
                     enumerate(rng.integers(1, 1000, size=16))}
            t = huffman_build(freqs)
            used = t.lengths[t.lengths > 0].astype(float)
            assert np.sum(2.0 ** -used) <= 1.0 + 1e-12

    def test_entropy_bound_random_distributions(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            n_sym = int(rng.integers(2, 17))
            counts = rng.integers(1, 500, size=n_sym)
            freqs = {s: int(c) for s, c in enumerate(counts)}
            t = huffman_build(freqs)
            total = counts.sum()
            p = counts / total
            entropy = -np.sum(p * np.log2(p))
            avg = t.average_length(freqs)
            assert entropy - 1e-12 <= avg < entropy + 1.0

    @given(st.integers(0, 5000))
    def test_roundtrip_fuzz(self, seed):
        rng = np.random.default_rng(seed)
        n_sym = int(rng.integers(1, 17))
        symbols = rng.integers(0, n_sym, size=int(rng.integers(1, 300))).astype(np.uint32)
        freqs = {int(s): int(c) for s, c in zip(*np.unique(symbols,
                                                           return_counts=True))}
        table = huffman_build(freqs, n_symbols=n_sym)
        w = BitWriter()
        table.encode_symbols(symbols, w)
        out = huffman_decode(BitReader(w.getvalue(), w.bit_length), table,
                             symbols.size)
        np.testing.assert_array_equal(out, symbols)

    def test_canonical_deterministic(self):
        freqs = {0: 5, 1: 5, 2: 3, 3: 3, 4: 1}
        a = huffman_build(freqs)
        b = huffman_build(dict(reversed(list(freqs.items()))))
        np.testing.assert_array_equal(a.lengths, b.lengths)
        np.testing.assert_array_equal(a.codes, b.codes)


class TestMaskEncoding:
    def test_all_zero_layer_prefers_rle(self):
        bits = np.ones(4096, dtype=bool)
        tag, payload = encode_mask(bits)
        assert tag == 1  # run-length
        assert len(payload) < 4096 // 8
        np.testing.assert_array_equal(decode_mask(tag, payload, 4096), bits)

    def test_dense_random_prefers_bitmap(self):
        rng = np.random.default_rng(0)
        bits = rng.random(4096) < 0.5
        tag, payload = encode_mask(bits)
        assert tag == 0
        np.testing.assert_array_equal(decode_mask(tag, payload, 4096), bits)

    def test_runs_alternate_starting_with_zero_run(self):
        bits = np.array([False, False, True, True, True, False])
        # first run counts zeroed (True) positions, so it starts empty
        assert mask_runs(bits) == [0, 2, 3, 1]

    @given(st.integers(0, 5000))
    def test_roundtrip_fuzz(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 600))
        bits = rng.random(n) < rng.uniform(0, 1)
        tag, payload = encode_mask(bits)
        np.testing.assert_array_equal(decode_mask(tag, payload, n), bits)

    def test_bad_tag(self):
        with pytest.raises(PackedFormatError):
            decode_mask(7, b"", 4)

    def test_tie_goes_to_bitmap(self):
        # 8 all-zero positions: bitmap is 1 byte, run-length [8] is 1 byte
        bits = np.ones(8, dtype=bool)
        tag, payload = encode_mask(bits)
        assert tag == 0 and len(payload) == 1

    def test_chosen_encoding_is_never_larger(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 500))
            bits = rng.random(n) < rng.uniform(0, 1)
            tag, payload = encode_mask(bits)
            bitmap_len = -(-n // 8)
            assert len(payload) <= bitmap_len
            if tag == 1:
                assert len(payload) < bitmap_len


class TestLayerCodec:
    def _roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 400))
        bits = rng.random(n) < rng.uniform(0, 0.97)
        if bits.all():
            bits[rng.integers(0, n)] = False
        n_levels = 2 ** int(rng.integers(1, 5))
        codes = rng.integers(0, n_levels, size=int((~bits).sum())).astype(np.uint32)
        freqs = {int(s): int(c) for s, c in zip(*np.unique(codes,
                                                           return_counts=True))}
        table = huffman_build(freqs, n_symbols=n_levels)
        levels = np.linspace(-1, 1, n_levels)
        spec = QuantizationSpec("uniform_affine", int(math.log2(n_levels)),
                                "nearest", levels)
        tag, mask_payload, payload, bit_len = encode_layer(bits, codes, table)
        back_bits, flat, back_codes = decode_layer(
            tag, mask_payload, payload, bit_len, n, table, spec)
        np.testing.assert_array_equal(back_bits, bits)
        np.testing.assert_array_equal(back_codes, codes)
        np.testing.assert_array_equal(flat[bits], 0.0)
        np.testing.assert_array_equal(flat[~bits], levels[codes])

    @pytest.mark.parametrize("seed", range(25))
    def test_roundtrip_seeded(self, seed):
        self._roundtrip(seed)

    def test_thousand_layer_fuzz(self):
        for seed in range(1000):
            self._roundtrip(10_000 + seed)

    def test_code_count_mismatch(self):
        table = huffman_build({0: 1}, n_symbols=2)
        with pytest.raises(ValueError, match="codes"):
            encode_layer(np.array([False, False]), np.array([0], dtype=np.uint32),
                         table)


def quantized_fixture(seed=0, fraction=0.6, bits=4):
    net = nn.build_network({"input_shape": [12], "layers": [
        {"kind": "dense", "units": 16},
        {"kind": "leaky_relu", "slope": 0.1},
        {"kind": "dense", "units": 4},
        {"kind": "softmax"},
    ]}, seed)
    mask = sparsity.random_mask(net, fraction, seed=seed + 5,
                                include_biases=False)
    student = sparsity.apply_mask(net, mask)
    model, _ = quantize_network(student, mask, bits=bits)
    return model


class TestContainer:
    def test_roundtrip_bit_exact(self):
        model = quantized_fixture()
        packed = pack_model(model)
        data = packed.to_bytes()
        back = PackedModel.from_bytes(data)
        assert back.to_bytes() == data

    def test_unpack_restores_masks_and_weights(self):
        model = quantized_fixture(seed=3)
        packed = pack_model(model)
        net, mask = unpack_model(PackedModel.from_bytes(packed.to_bytes()))
        for i in mask.bits:
            np.testing.assert_array_equal(mask.bits[i],
                                          model.mask.layer_bits(i))
            flat = np.concatenate([t.reshape(-1)
                                   for t in net.layers[i].param_tensors()])
            orig = np.concatenate([t.reshape(-1) for t in
                                   model.network.layers[i].param_tensors()])
            # values pass through an f32 level table
            np.testing.assert_allclose(flat, orig.astype(np.float32), rtol=1e-6)
        x = np.random.default_rng(0).normal(size=(3, 12))
        out = nn.forward(net, x)
        assert out.shape == (3, 4)

    def test_crc_detects_every_probed_bit_flip(self):
        model = quantized_fixture(seed=1)
        data = bytearray(pack_model(model).to_bytes())
        rng = np.random.default_rng(2)
        for _ in range(40):
            pos = int(rng.integers(0, len(data)))
            bit = 1 << int(rng.integers(0, 8))
            data[pos] ^= bit
            with pytest.raises(PackedFormatError, match="CRC"):
                PackedModel.from_bytes(bytes(data))
            data[pos] ^= bit

    def test_truncated_file(self):
        data = pack_model(quantized_fixture()).to_bytes()
        with pytest.raises(PackedFormatError):
            PackedModel.from_bytes(data[:10])

    def test_roundtrip_many_seeds(self):
        for seed in range(20):
            packed = pack_model(quantized_fixture(seed=seed,
                                                  fraction=0.2 + 0.03 * seed))
            data = packed.to_bytes()
            assert PackedModel.from_bytes(data).to_bytes() == data

    def test_fully_pruned_layer_empty_payload(self):
        net = nn.build_network({"input_shape": [4], "layers": [
            {"kind": "dense", "units": 3},
            {"kind": "relu"},
            {"kind": "dense", "units": 2}]}, 1)
        mask = SparsityMask.empty(net)
        mask.bits[0][:] = True  # layer 0 entirely pruned
        student = sparsity.apply_mask(net, mask)
        model, _ = quantize_network(student, mask, bits=4)
        packed = pack_model(model)
        dead = packed.layers[0]
        assert dead.payload_bit_length == 0 and dead.payload == b""
        assert dead.mask_tag == 1  # run-length wins for a solid run
        back, back_mask = unpack_model(PackedModel.from_bytes(packed.to_bytes()))
        assert back_mask.layer_bits(0).all()
        np.testing.assert_array_equal(back.layers[0].weights, 0.0)

    def test_degenerate_constant_layer(self):
        net = nn.Network([nn.Dense(np.full((3, 3), 0.25), np.full(3, 0.25))],
                         (3,))
        mask = SparsityMask.empty(net)
        model, _ = quantize_network(net, mask, bits=4)
        packed = pack_model(model)
        back, _ = unpack_model(PackedModel.from_bytes(packed.to_bytes()))
        np.testing.assert_allclose(back.layers[0].weights, 0.25, rtol=1e-7)


class TestCompressionReport:
    def test_identity_32bit_ratio_one(self):
        net = nn.build_network({"input_shape": [10], "layers": [
            {"kind": "dense", "units": 10}]}, 0)
        n = net.parameter_count()
        pl = PackedLayer("dense", {}, [(10, 10), (10,)],
                         mask_payload=bytes(-(-n // 8)),
                         lut_bits=0, lut_levels=np.zeros(1, dtype="<f4"),
                         code_lengths=np.array([1], dtype=np.uint8),
                         payload=bytes(4 * n), payload_bit_length=32 * n)
        report = compression_report(net, PackedModel((10,), [pl]))
        assert report.payload_only_ratio == pytest.approx(1.0)

    def test_bit_accounting_matches_payloads(self):
        model = quantized_fixture(seed=2, fraction=0.9)
        packed = pack_model(model)
        report = compression_report(model.network, packed)
        assert report.payload_bits == sum(pl.payload_bit_length
                                          for pl in packed.layers)
        assert report.total_bits == len(packed.to_bytes()) * 8
        assert report.total_ratio < report.payload_only_ratio
