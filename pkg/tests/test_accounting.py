import numpy as np
import pytest

from fedproj.accounting import (
    DEFAULT_COST_MODEL,
    CostModel,
    IndexBitsMode,
    TrafficLedger,
    changed_coordinates,
    deserialize_message,
    downlink_bits,
    index_bits,
    message_bits,
    serialize_message,
)
from fedproj.compressors import (
    CompressorKind,
    CompressorSpec,
    compress,
    decode,
)
from fedproj.vectors import ParamVector, StreamPurpose, derive_stream


def stream(r=0):
    return derive_stream(0, 0, r, StreamPurpose.COMPRESSOR)


class TestMessageBits:
    def test_sparse_ceil_log2(self):
        model = CostModel(index_bits_mode=IndexBitsMode.CEIL_LOG2_DIM)
        g = ParamVector(np.arange(1.0, 1001.0))
        msg = compress(CompressorSpec(CompressorKind.TOPK, k_fraction=0.01), g)
        assert index_bits(model, 1000) == 10
        assert message_bits(model, msg) == 10 * 42

    def test_dense(self):
        g = ParamVector(np.zeros(100))
        msg = compress(CompressorSpec(CompressorKind.IDENTITY), g)
        assert message_bits(DEFAULT_COST_MODEL, msg) == 3200

    def test_scalar_surcharge(self):
        g = ParamVector(np.arange(1.0, 21.0))
        msg = compress(CompressorSpec(CompressorKind.TOPK, k_fraction=0.1), g)
        base = message_bits(DEFAULT_COST_MODEL, msg)
        assert message_bits(DEFAULT_COST_MODEL, msg, extra_scalars=1) == base + 32

    def test_quantized_formula(self):
        g = ParamVector(np.array([3.0, -4.0, 1.0]))
        msg = compress(CompressorSpec(CompressorKind.QSGD, s_levels=3), g, stream())
        # norm 32 + 3 sign bits + 3 levels x ceil(log2(4)) = 2 bits
        assert message_bits(DEFAULT_COST_MODEL, msg) == 32 + 3 + 6

    def test_header_bits(self):
        model = CostModel(header_bits=16)
        g = ParamVector(np.zeros(4))
        msg = compress(CompressorSpec(CompressorKind.IDENTITY), g)
        assert message_bits(model, msg) == 4 * 32 + 16

    def test_compressor_bit_size_cross_check(self):
        """bit_size stored on messages equals the accounting formula (default model)."""
        rng = np.random.default_rng(0)
        g = ParamVector(rng.standard_normal(64), [(0, 16), (16, 64)])
        specs = [
            CompressorSpec(CompressorKind.IDENTITY),
            CompressorSpec(CompressorKind.TOPK, k_fraction=0.25),
            CompressorSpec(CompressorKind.TOPK, k_fraction=0.25, layerwise=True),
            CompressorSpec(CompressorKind.RANDK, k_fraction=0.1),
            CompressorSpec(CompressorKind.QSGD, s_levels=4),
        ]
        for spec in specs:
            msg = compress(spec, g, stream())
            assert msg.bit_size == message_bits(DEFAULT_COST_MODEL, msg)


class TestDownlink:
    def test_unchanged_is_free(self):
        w = np.linspace(-1, 1, 50)
        assert downlink_bits(DEFAULT_COST_MODEL, w, w.copy()) == 0

    def test_single_change(self):
        model = CostModel(index_bits_mode=IndexBitsMode.CEIL_LOG2_DIM)
        w1 = np.zeros(1000)
        w2 = w1.copy()
        w2[77] = 1.0
        assert downlink_bits(model, w1, w2) == 42

    def test_sub_float32_changes_are_free(self):
        w1 = np.ones(10)
        w2 = w1 + 1e-12  # below float32 resolution at 1.0
        assert changed_coordinates(w1, w2) == 0

    def test_topk_union_bound(self):
        """Changed coordinates after a sparse update never exceed M * k."""
        rng = np.random.default_rng(1)
        d, M, kf = 40, 5, 0.1
        spec = CompressorSpec(CompressorKind.TOPK, k_fraction=kf)
        w = ParamVector(rng.standard_normal(d))
        msgs = [compress(spec, ParamVector(rng.standard_normal(d))) for _ in range(M)]
        update = np.mean([decode(m).values for m in msgs], axis=0)
        w_next = w.values - 0.5 * update
        assert changed_coordinates(w, w_next) <= min(d, M * 4)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            downlink_bits(DEFAULT_COST_MODEL, np.zeros(3), np.zeros(4))


class TestLedger:
    def test_cumulative_prefix_sums(self):
        led = TrafficLedger()
        led.record_round([10, 20], 5)
        led.record_round([1, 2], 7)
        assert led.uplink_total == [30, 3]
        assert led.cumulative(1) == (30, 5, 35)
        assert led.cumulative() == (33, 12, 45)

    def test_monotone(self):
        led = TrafficLedger()
        for r in range(5):
            led.record_round([r], r)
        totals = [led.cumulative(i)[2] for i in range(6)]
        assert totals == sorted(totals)

    def test_negative_rejected(self):
        led = TrafficLedger()
        with pytest.raises(ValueError):
            led.record_round([-1], 0)


class TestWireFormat:
    def test_lengths_match_ceil_bits(self):
        rng = np.random.default_rng(2)
        g = ParamVector(rng.standard_normal(13))
        for spec in [CompressorSpec(CompressorKind.IDENTITY),
                     CompressorSpec(CompressorKind.TOPK, k_fraction=0.3),
                     CompressorSpec(CompressorKind.QSGD, s_levels=1),
                     CompressorSpec(CompressorKind.QSGD, s_levels=5)]:
            msg = compress(spec, g, stream())
            raw = serialize_message(msg)
            assert len(raw) == -(-msg.bit_size // 8), spec

    def test_sparse_roundtrip_float32(self):
        g = ParamVector(np.array([0.0, 7.5, 0.0]))
        msg = compress(CompressorSpec(CompressorKind.TOPK, k_fraction=0.34), g)
        back = deserialize_message(serialize_message(msg), "sparse", 3, n_values=1)
        assert decode(back).values.tolist() == [0.0, 7.5, 0.0]

    def test_quantized_roundtrip(self):
        g = ParamVector(np.array([3.0, -4.0, 0.25, 1.0]))
        msg = compress(CompressorSpec(CompressorKind.QSGD, s_levels=3), g, stream())
        back = deserialize_message(serialize_message(msg), "quantized", 4, s_levels=3)
        assert np.array_equal(back.payload.levels, msg.payload.levels)
        assert np.array_equal(back.payload.signs, msg.payload.signs)
        assert back.payload.norm == pytest.approx(msg.payload.norm, rel=1e-7)

    def test_dense_roundtrip(self):
        g = ParamVector(np.array([1.0, -2.0, 3.5]))
        msg = compress(CompressorSpec(CompressorKind.IDENTITY), g)
        back = deserialize_message(serialize_message(msg), "dense", 3)
        assert np.allclose(back.payload.values, g.values, rtol=1e-7)

    def test_golden_bytes(self):
        """Frozen wire bytes for fixed messages."""
        g = ParamVector(np.array([0.0, 7.5, 0.0]))
        msg = compress(CompressorSpec(CompressorKind.TOPK, k_fraction=0.34), g)
        assert serialize_message(msg) == bytes.fromhex("0000f040" "01000000")

        dense = compress(CompressorSpec(CompressorKind.IDENTITY),
                         ParamVector(np.array([1.0, -2.0])))
        assert serialize_message(dense) == bytes.fromhex("0000803f" "000000c0")

        # quantized: norm 5.0, signs (0,0), levels (1,1), s=1
        from fedproj.compressors import CompressedMessage, QuantizedPayload
        payload = QuantizedPayload(5.0, np.array([0, 0], np.uint8),
                                   np.array([1, 1], np.int64), 1)
        qm = CompressedMessage(payload, 2, 32 + 2 + 2)
        # 0x40a00000 big-bit-stream then bits 0,0,1,1 -> 0b0011 << 4 = 0x30
        assert serialize_message(qm) == bytes.fromhex("0000a040" "30")
