"""Fixed-point layer execution against the exact-rational oracle."""

from pathlib import Path

import numpy as np
import pytest

from fixq.activations import (
    ActivationKind,
    calibrate,
    profile_from_manifest,
    quantize_activations,
)
from fixq.codebooks import dequantize
from fixq.errors import ContractError, NumericError
from fixq.inference import (
    LayerSpec,
    forward_quantized,
    output_hw,
    pipeline_demo,
)
from fixq.tensors import (
    GroupScheme,
    QuantizedTensor,
    activation_tensor,
    read_bundle,
    weight_tensor,
)
from fixq.weights import quantize_weights

from oracles import fractions_equal_floats, oracle_conv_rational

GOLDEN = Path(__file__).parent / "golden"


def _quantized_pair(rng, in_shape, w_shape, kind=ActivationKind.NONE):
    x = rng.normal(0, 0.25, in_shape).astype(np.float32)
    if kind is ActivationKind.RELU:
        x = np.abs(x)
    w = rng.normal(0, 0.15, w_shape).astype(np.float32)
    xt, wt = activation_tensor(x), weight_tensor(w)
    prof = calibrate([xt], kind)
    return quantize_activations(xt, prof), quantize_weights(wt)


class TestForwardQuantized:
    def test_identity_one_by_one_kernel(self, rng):
        """A 1x1 kernel holding exactly 1.0 reproduces the decoded input."""
        x_q, _ = _quantized_pair(rng, (6, 5, 3), (3, 1, 1, 3))
        w = np.zeros((3, 1, 1, 3), dtype=np.float32)
        for c in range(3):
            w[c, 0, 0, c] = 1.0
        w_q = quantize_weights(weight_tensor(w))
        assert np.array_equal(dequantize(w_q).data, w)  # 1.0 is representable
        out = forward_quantized(x_q, w_q, LayerSpec("conv"))
        np.testing.assert_array_equal(out.data, dequantize(x_q).data)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_rational_oracle(self, seed):
        rng = np.random.default_rng(seed)
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 3, 5]))
        h, w = int(rng.integers(k, 12)), int(rng.integers(k, 12))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, k))
        act = rng.choice(["none", "relu", "leaky_relu"])
        x_q, w_q = _quantized_pair(rng, (h, w, ci), (ci, k, k, co))
        spec = LayerSpec("conv", stride, padding, ActivationKind(act))
        got = forward_quantized(x_q, w_q, spec)
        expected = oracle_conv_rational(
            dequantize(x_q).data, dequantize(w_q).data, "conv", stride, padding, act
        )
        assert got.shape == expected.shape
        assert fractions_equal_floats(expected, got.data)

    @pytest.mark.parametrize("seed", range(3))
    def test_transpose_matches_scatter_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        x_q, w_q = _quantized_pair(rng, (5, 6, 2), (2, 3, 3, 3))
        spec = LayerSpec("conv_transpose", 2, 1, ActivationKind.LEAKY_RELU)
        got = forward_quantized(x_q, w_q, spec)
        expected = oracle_conv_rational(
            dequantize(x_q).data, dequantize(w_q).data, "conv_transpose", 2, 1,
            "leaky_relu",
        )
        assert got.shape == expected.shape
        assert fractions_equal_floats(expected, got.data)

    def test_bias_on_accumulator_grid(self, rng):
        x_q, w_q = _quantized_pair(rng, (4, 4, 2), (2, 3, 3, 2))
        bias = np.array([0.25, -0.125])  # dyadic: exact on the grid
        spec = LayerSpec("conv", 1, 1, ActivationKind.NONE, bias=bias)
        got = forward_quantized(x_q, w_q, spec)
        expected = oracle_conv_rational(
            dequantize(x_q).data, dequantize(w_q).data, "conv", 1, 1, "none",
            bias=bias,
        )
        assert fractions_equal_floats(expected, got.data)

    def test_float32_reference_deviation_bound(self, rng):
        """Quantized output deviates from the float32 reference by at most
        the triangle-inequality bound |dW|*|Xq| + |W|*|dX| per output."""
        x = rng.normal(0, 0.25, (10, 10, 3)).astype(np.float32)
        w = rng.normal(0, 0.15, (3, 5, 5, 4)).astype(np.float32)
        xt, wt = activation_tensor(x), weight_tensor(w)
        x_q = quantize_activations(xt, calibrate([xt], ActivationKind.NONE))
        w_q = quantize_weights(wt)
        spec = LayerSpec("conv", 2, 2, ActivationKind.NONE)
        got = forward_quantized(x_q, w_q, spec).data

        xd, wd = dequantize(x_q).data, dequantize(w_q).data
        ref = oracle_conv_rational(x, w, "conv", 2, 2, "none").astype(np.float64)
        bound = (
            oracle_conv_rational(np.abs(xd - x), np.abs(w), "conv", 2, 2, "none")
            + oracle_conv_rational(np.abs(xd), np.abs(wd - w), "conv", 2, 2, "none")
        ).astype(np.float64)
        assert np.all(np.abs(got - ref) <= bound + 1e-12)

    def test_channel_mismatch_rejected(self, rng):
        x_q, _ = _quantized_pair(rng, (4, 4, 2), (2, 3, 3, 2))
        _, w_q = _quantized_pair(rng, (4, 4, 3), (3, 3, 3, 2))
        with pytest.raises(ContractError):
            forward_quantized(x_q, w_q, LayerSpec("conv"))

    def test_lut_weights_rejected(self, rng):
        x_q, _ = _quantized_pair(rng, (4, 4, 2), (2, 3, 3, 2))
        t = weight_tensor(rng.normal(0, 0.2, (2, 3, 3, 2)).astype(np.float32))
        w_q = quantize_weights(t, GroupScheme.LAYER_WISE, "lloyd")
        with pytest.raises(ContractError, match="lloyd"):
            forward_quantized(x_q, w_q, LayerSpec("conv"))

    def test_accumulator_overflow_names_position(self):
        """Huge exponent spread across input channels forces the aligned
        worst case past 2**31."""
        levels = np.full((3, 3, 2), 255, dtype=np.uint8)
        x_q = QuantizedTensor(
            levels, ("OH", "OW", "O"), GroupScheme.CHANNEL_WISE,
            "act-uniform-signed-n8",
            np.array([0, 40], dtype=np.int32),
        )
        wl = np.full((2, 3, 3, 1), 255, dtype=np.uint8)
        w_q = QuantizedTensor(
            wl, ("I", "H", "W", "O"), GroupScheme.LAYER_WISE, "weight-nlq-n8",
            np.array([0], dtype=np.int32),
        )
        with pytest.raises(NumericError, match="position"):
            forward_quantized(x_q, w_q, LayerSpec("conv"))

    def test_deterministic(self, rng):
        x_q, w_q = _quantized_pair(rng, (8, 8, 3), (3, 3, 3, 4))
        spec = LayerSpec("conv", 2, 1, ActivationKind.RELU)
        a = forward_quantized(x_q, w_q, spec)
        b = forward_quantized(x_q, w_q, spec)
        assert np.array_equal(a.data, b.data)


class TestShapeLaw:
    def test_stride2_pad2_kernel5_is_ceil_halving(self):
        spec = LayerSpec("conv", 2, 2)
        for h in (768, 512, 97, 5):
            oh, _ = output_hw(spec, (5, 5), (h, h))
            assert oh == -(-h // 2)

    def test_four_layers_map_768x512_to_48x32(self):
        hw = (512, 768)
        for _ in range(4):
            hw = output_hw(LayerSpec("conv", 2, 2), (5, 5), hw)
        assert hw == (32, 48)

    def test_transpose_inverts_stride(self):
        assert output_hw(LayerSpec("conv_transpose", 2, 2), (5, 5), (32, 48)) == (
            63, 95,
        )

    def test_full_resolution_code_is_48x32(self):
        """A 768x512 image through four stride-2 5x5 layers produces a
        48x32 code (run end to end with skinny channels)."""
        rng = np.random.default_rng(4832)
        img = activation_tensor(
            rng.uniform(0, 1, (512, 768, 1)).astype(np.float32)
        )
        x_q = quantize_activations(img, calibrate([img], ActivationKind.RELU))
        hw = (512, 768)
        for i in range(4):
            ci = x_q.n_channels
            w = rng.normal(0, 0.2, (ci, 5, 5, 2)).astype(np.float32)
            spec = LayerSpec("conv", 2, 2, ActivationKind.RELU)
            out = forward_quantized(x_q, quantize_weights(weight_tensor(w)), spec)
            hw = output_hw(spec, (5, 5), hw)
            assert out.shape[:2] == hw
            if i < 3:
                x_q = quantize_activations(
                    out, calibrate([out], ActivationKind.RELU)
                )
        assert out.shape[:2] == (32, 48)  # 48x32 feature map (width x height)


class TestPipeline:
    def _golden_layers(self):
        wb = read_bundle(GOLDEN / "infer_weights")
        layers = []
        for rec in wb.network:
            q = quantize_weights(wb.entries[rec["weight"]])
            layers.append(
                (
                    rec["name"],
                    q,
                    LayerSpec(rec["kind"], rec["stride"], rec["padding"],
                              ActivationKind(rec["activation"])),
                )
            )
        return layers

    def _golden_profiles(self):
        pb = read_bundle(GOLDEN / "infer_profiles")
        inp = profile_from_manifest(pb.profiles["input"])
        hidden = [
            profile_from_manifest(pb.profiles[f"layer{i}"]) for i in range(3)
        ]
        mean_params = profile_from_manifest(pb.profiles["y_hat"]).mean_params
        return inp, hidden, mean_params

    def test_zero_image_gives_zero_code(self):
        layers = self._golden_layers()
        inp, hidden, _ = self._golden_profiles()
        img = activation_tensor(np.zeros((24, 24, 2), dtype=np.float32))
        result = pipeline_demo(img, layers, inp, hidden)
        assert np.all(result.y_hat == 0)

    def test_matches_committed_golden(self):
        """The quantized pipeline reproduces the committed oracle output
        bit for bit, including the mean-removed channel."""
        layers = self._golden_layers()
        inp, hidden, mean_params = self._golden_profiles()
        img = read_bundle(GOLDEN / "infer_input").entries["img"]
        result = pipeline_demo(img, layers, inp, hidden, mean_params)

        expected = read_bundle(GOLDEN / "infer_expected")
        meta = expected.network[0]
        stored = expected.entries["y_hat"].data.astype(np.int64)
        ch = meta["mean_channel"]
        y_expected = stored.copy()
        y_expected[..., ch] += meta["mu_hat"]
        np.testing.assert_array_equal(result.y_hat, y_expected)
        assert result.mean_removed is not None
        assert result.mean_removed.mu_hat == meta["mu_hat"]
        np.testing.assert_array_equal(result.mean_removed.offsets, stored[..., ch])
        text = result.report_text()
        assert "acc_peak" in text and "mean-removed channel 1" in text

    def test_report_shapes(self):
        layers = self._golden_layers()
        inp, hidden, mean_params = self._golden_profiles()
        img = read_bundle(GOLDEN / "infer_input").entries["img"]
        result = pipeline_demo(img, layers, inp, hidden, mean_params)
        assert [r.shape for r in result.reports] == [
            (24, 24, 2), (12, 12, 3), (6, 6, 4), (3, 3, 3), (2, 2, 3),
        ]
        assert all(r.acc_peak < 2**31 for r in result.reports)

    def test_profile_count_mismatch(self):
        layers = self._golden_layers()
        inp, hidden, _ = self._golden_profiles()
        img = read_bundle(GOLDEN / "infer_input").entries["img"]
        with pytest.raises(ContractError):
            pipeline_demo(img, layers, inp, hidden[:-1])
