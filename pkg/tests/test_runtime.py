import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcexit import netspec, runtime
from mcexit.runtime import FlopCounter, QFormat, quantize


def layer(doc):
    return netspec.parse_layer(doc)


class TestQuantize:
    def test_frozen_example_q8_1(self):
        # 7 fractional bits: round(0.3 * 128) = 38, 38/128 = 0.296875
        assert quantize(0.3, QFormat(8, 1)) == 0.296875

    def test_frozen_example_saturation_q4_4(self):
        # integer-only 4-bit signed format tops out at 7
        assert quantize(100.0, QFormat(4, 4)) == 7.0

    def test_negative_saturation(self):
        assert quantize(-100.0, QFormat(4, 4)) == -8.0

    def test_round_half_to_even(self):
        q = QFormat(8, 8)  # step 1.0
        assert quantize(0.5, q) == 0.0
        assert quantize(1.5, q) == 2.0
        assert quantize(2.5, q) == 2.0

    def test_truncate_floors(self):
        q = QFormat(8, 8, mode="truncate")
        assert quantize(1.9, q) == 1.0
        assert quantize(-0.1, q) == -1.0

    def test_wraparound(self):
        q = QFormat(4, 4, saturating=False)
        # code 8 wraps to -8 in 4-bit two's complement
        assert quantize(8.0, q) == -8.0
        assert quantize(9.0, q) == -7.0

    def test_scalar_in_scalar_out(self):
        out = quantize(0.3, QFormat(8, 1))
        assert isinstance(out, float)

    def test_array_preserves_f32(self):
        x = np.array([0.3, -0.7], dtype=np.float32)
        out = quantize(x, QFormat(8, 1))
        assert out.dtype == np.float32

    def test_softmax_range_survives_8_1(self):
        probs = np.array([0.1, 0.2, 0.7], dtype=np.float32)
        out = quantize(probs, QFormat(8, 1))
        assert np.all(np.abs(out - probs) <= 2 ** -7)

    @given(st.floats(-1000, 1000, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_idempotent(self, v):
        for q in (QFormat(8, 3), QFormat(4, 2, mode="truncate"), QFormat(16, 5)):
            once = quantize(v, q)
            assert quantize(once, q) == once

    @given(st.floats(-3.9, 3.9, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_rne_error_bound_inside_range(self, v):
        q = QFormat(8, 3)  # representable range covers [-4, 3.96875]
        assert abs(quantize(v, q) - v) <= q.step / 2

    def test_invalid_formats(self):
        with pytest.raises(ValueError):
            QFormat(5, 2)
        with pytest.raises(ValueError):
            QFormat(8, 0)
        with pytest.raises(ValueError):
            QFormat(8, 9)
        with pytest.raises(ValueError):
            QFormat(8, 3, mode="stochastic")


class TestConv2d:
    def test_1x1_hand_multiply(self):
        conv = layer(
            {
                "id": "c",
                "kind": "conv2d",
                "params": {
                    "in_channels": 1,
                    "out_channels": 1,
                    "kernel_h": 1,
                    "kernel_w": 1,
                },
            }
        )
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
        weights = {
            "c": {
                "weights": np.full((1, 1, 1, 1), 3.0, dtype=np.float32),
                "bias": np.zeros(1, dtype=np.float32),
            }
        }
        out = runtime.forward(conv, x, weights)
        np.testing.assert_array_equal(out, np.array([[[3.0, 6.0], [9.0, 12.0]]], np.float32))

    def test_matches_brute_force_loops(self):
        rng = np.random.Generator(np.random.Philox(key=11))
        cin, cout, kh, kw, h, w = 3, 4, 3, 2, 6, 5
        stride, padding = 2, 1
        conv = layer(
            {
                "id": "c",
                "kind": "conv2d",
                "params": {
                    "in_channels": cin,
                    "out_channels": cout,
                    "kernel_h": kh,
                    "kernel_w": kw,
                    "stride": stride,
                    "padding": padding,
                },
            }
        )
        x = rng.normal(size=(cin, h, w)).astype(np.float32)
        weight = rng.normal(size=(cout, cin, kh, kw)).astype(np.float32)
        bias = rng.normal(size=cout).astype(np.float32)
        out = runtime.forward(conv, x, {"c": {"weights": weight, "bias": bias}})

        padded = np.zeros((cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
        padded[:, padding : padding + h, padding : padding + w] = x
        hout = (h + 2 * padding - kh) // stride + 1
        wout = (w + 2 * padding - kw) // stride + 1
        expected = np.zeros((cout, hout, wout))
        for co in range(cout):
            for i in range(hout):
                for j in range(wout):
                    patch = padded[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    expected[co, i, j] = (patch * weight[co]).sum() + bias[co]
        np.testing.assert_allclose(out, expected.astype(np.float32), rtol=1e-5, atol=1e-5)


class TestPoolingAndShape:
    def test_max_pool_rank1(self):
        pool = layer({"id": "p", "kind": "max_pool", "params": {"window": 2}})
        out = runtime.forward(pool, np.array([1.0, 5.0, 2.0, 3.0], dtype=np.float32))
        np.testing.assert_array_equal(out, np.array([5.0, 3.0], np.float32))

    def test_avg_pool_rank3(self):
        pool = layer({"id": "p", "kind": "avg_pool", "params": {"window": 2}})
        x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        out = runtime.forward(pool, x)
        np.testing.assert_array_equal(out, np.array([[[2.5, 4.5], [10.5, 12.5]]], np.float32))

    def test_global_pool(self):
        pool = layer({"id": "p", "kind": "avg_pool", "params": {"window": "global"}})
        x = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        out = runtime.forward(pool, x)
        np.testing.assert_array_equal(out, np.array([[[1.5]], [[5.5]]], np.float32))

    def test_shape_mismatch_names_layer(self):
        dense = layer(
            {"id": "fc7", "kind": "dense", "params": {"in_features": 4, "out_features": 2}}
        )
        with pytest.raises(netspec.ShapeMismatchError, match="fc7"):
            runtime.forward(dense, np.ones(5, dtype=np.float32), runtime.init_weights([dense], 0))

    def test_weight_shape_validated(self):
        dense = layer(
            {"id": "fc", "kind": "dense", "params": {"in_features": 4, "out_features": 2}}
        )
        bad = {"fc": {"weights": np.zeros((3, 4), np.float32), "bias": np.zeros(2, np.float32)}}
        with pytest.raises(ValueError, match="fc"):
            runtime.forward(dense, np.ones(4, dtype=np.float32), bad)


class TestFlopCounting:
    def test_dense_3_to_4_counts_24(self):
        dense = layer(
            {"id": "fc", "kind": "dense", "params": {"in_features": 3, "out_features": 4}}
        )
        counter = FlopCounter()
        runtime.forward(dense, np.ones(3, np.float32), runtime.init_weights([dense], 0), flop_counter=counter)
        assert counter.total == 24

    def test_1x1_conv_counts_48(self):
        conv = layer(
            {
                "id": "c",
                "kind": "conv2d",
                "params": {"in_channels": 2, "out_channels": 3, "kernel_h": 1, "kernel_w": 1},
            }
        )
        counter = FlopCounter()
        runtime.forward(
            conv, np.ones((2, 2, 2), np.float32), runtime.init_weights([conv], 0), flop_counter=counter
        )
        assert counter.total == 48

    def test_relu_and_pool_are_free(self):
        counter = FlopCounter()
        runtime.forward(layer({"id": "r", "kind": "relu"}), np.ones(4, np.float32), flop_counter=counter)
        runtime.forward(
            layer({"id": "p", "kind": "max_pool", "params": {"window": 2}}),
            np.ones(4, np.float32),
            flop_counter=counter,
        )
        assert counter.total == 0


class TestQuantizedForward:
    def test_softmax_output_not_quantized(self):
        sm = layer({"id": "sm", "kind": "softmax"})
        x = np.array([0.31, 0.41, 0.59], dtype=np.float32)
        out = runtime.forward(sm, x, qformat=QFormat(4, 2))
        assert out.sum() == pytest.approx(1.0, abs=1e-6)

    def test_activation_quantized_after_layer(self):
        relu = layer({"id": "r", "kind": "relu"})
        q = QFormat(8, 1)
        out = runtime.forward(relu, np.array([0.3], dtype=np.float32), qformat=q)
        assert out[0] == np.float32(0.296875)

    def test_weights_quantized_before_use(self):
        dense = layer(
            {"id": "fc", "kind": "dense", "params": {"in_features": 1, "out_features": 1}}
        )
        weights = {
            "fc": {"weights": np.array([[0.3]], np.float32), "bias": np.zeros(1, np.float32)}
        }
        out = runtime.forward(dense, np.ones(1, np.float32), weights, qformat=QFormat(8, 1))
        # 0.3 snaps to 0.296875 before the multiply
        assert out[0] == np.float32(0.296875)


class TestWeightStore:
    def test_init_deterministic_and_bounded(self):
        net = netspec.parse_network(
            {
                "input_shape": [6],
                "layers": [
                    {
                        "id": "fc",
                        "kind": "dense",
                        "params": {"in_features": 6, "out_features": 4},
                    }
                ],
            }
        )
        a = runtime.init_weights(net.layers, 5)
        b = runtime.init_weights(net.layers, 5)
        np.testing.assert_array_equal(a["fc"]["weights"], b["fc"]["weights"])
        limit = np.sqrt(6 / (6 + 4))
        assert np.all(np.abs(a["fc"]["weights"]) <= limit)
        np.testing.assert_array_equal(a["fc"]["bias"], np.zeros(4, np.float32))
        assert not np.array_equal(
            a["fc"]["weights"], runtime.init_weights(net.layers, 6)["fc"]["weights"]
        )

    def test_save_load_round_trip(self, tmp_path):
        layers = [
            layer({"id": "fc", "kind": "dense", "params": {"in_features": 3, "out_features": 2}})
        ]
        store = runtime.init_weights(layers, 9)
        path = tmp_path / "w.json"
        runtime.save_weights(store, path)
        loaded = runtime.load_weights(path)
        assert set(loaded) == {"fc"}
        np.testing.assert_array_equal(loaded["fc"]["weights"], store["fc"]["weights"])
        np.testing.assert_array_equal(loaded["fc"]["bias"], store["fc"]["bias"])

    def test_truncated_blob_rejected(self, tmp_path):
        layers = [
            layer({"id": "fc", "kind": "dense", "params": {"in_features": 3, "out_features": 2}})
        ]
        runtime.save_weights(runtime.init_weights(layers, 9), tmp_path / "w.json")
        blob = tmp_path / "w.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(ValueError):
            runtime.load_weights(tmp_path / "w.json")

    def test_manifest_length_mismatch_rejected(self, tmp_path):
        layers = [
            layer({"id": "fc", "kind": "dense", "params": {"in_features": 3, "out_features": 2}})
        ]
        runtime.save_weights(runtime.init_weights(layers, 9), tmp_path / "w.json")
        doc = json.loads((tmp_path / "w.json").read_text())
        doc["tensors"][0]["length"] += 4
        (tmp_path / "w.json").write_text(json.dumps(doc))
        with pytest.raises(ValueError):
            runtime.load_weights(tmp_path / "w.json")

    def test_unknown_dtype_rejected(self, tmp_path):
        layers = [
            layer({"id": "fc", "kind": "dense", "params": {"in_features": 3, "out_features": 2}})
        ]
        runtime.save_weights(runtime.init_weights(layers, 9), tmp_path / "w.json")
        doc = json.loads((tmp_path / "w.json").read_text())
        doc["tensors"][0]["dtype"] = "f64le"
        (tmp_path / "w.json").write_text(json.dumps(doc))
        with pytest.raises(ValueError):
            runtime.load_weights(tmp_path / "w.json")

    def test_zero_weights_give_uniform_softmax(self):
        layers = [
            layer({"id": "fc", "kind": "dense", "params": {"in_features": 5, "out_features": 4}}),
            layer({"id": "sm", "kind": "softmax"}),
        ]
        out = runtime.run_layers(layers, np.ones(5, np.float32), runtime.zero_weights(layers))
        np.testing.assert_allclose(out, np.full(4, 0.25, np.float32), atol=1e-7)

    def test_quantize_store(self):
        layers = [
            layer({"id": "fc", "kind": "dense", "params": {"in_features": 2, "out_features": 2}})
        ]
        store = {
            "fc": {
                "weights": np.full((2, 2), 0.3, np.float32),
                "bias": np.zeros(2, np.float32),
            }
        }
        q = runtime.quantize_store(store, QFormat(8, 1))
        np.testing.assert_array_equal(q["fc"]["weights"], np.full((2, 2), 0.296875, np.float32))

    def test_16_bit_near_lossless_on_activations(self):
        x = np.linspace(-2, 2, 64).astype(np.float32)
        out = quantize(x, QFormat(16, 3))
        assert np.max(np.abs(out - x)) <= 2 ** -13
