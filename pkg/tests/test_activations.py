"""Calibration, range multiplexing and mean-removed coding."""

import numpy as np
import pytest

from fixq.activations import (
    ActivationKind,
    MeanParams,
    bitwidth_of,
    calibrate,
    find_mean_channel,
    fit_mean_channel,
    interval_stats,
    mean_removed_quantize,
    mean_restore,
    profile_from_manifest,
    profile_to_manifest,
    quantize_activations,
    range_interval,
    render_interval_stats,
)
from fixq.codebooks import dequantize, mux_codebook, quantize_piecewise
from fixq.errors import ContractError
from fixq.tensors import activation_tensor


def _channel_tensor(maxima, fill=0.01, shape=(6, 4)):
    """Activation tensor whose channel c has max |value| == maxima[c]."""
    data = np.full(shape + (len(maxima),), fill, dtype=np.float32)
    for c, m in enumerate(maxima):
        data[0, 0, c] = m
    return activation_tensor(data)


class TestCalibrate:
    def test_worked_examples_kind_none(self):
        prof = calibrate([_channel_tensor([0.3, 0.49])], ActivationKind.NONE)
        assert prof.alpha == 0.5
        # max 0.3 -> sf 1, scaled 0.3 in [alpha/2, 5 alpha/8) -> selection 0
        assert prof.sf_exponents[0] == 0
        assert prof.max_scaled[0] == pytest.approx(0.3)
        assert prof.range_sel[0] == 0
        # max 0.49 -> scaled 0.49 in [7 alpha/8, alpha) -> selection 3
        assert prof.range_sel[1] == 3

    def test_relu_alpha_one(self):
        prof = calibrate([_channel_tensor([0.9])], ActivationKind.RELU)
        assert prof.alpha == 1.0
        assert prof.sf_exponents[0] == 0
        assert prof.range_sel[0] == 3

    def test_single_sample_equals_per_sample_max(self, rng):
        t = activation_tensor(rng.normal(0, 0.2, (5, 5, 3)).astype(np.float32))
        prof = calibrate([t], ActivationKind.NONE)
        maxima = np.max(np.abs(t.data.astype(np.float64)), axis=(0, 1))
        np.testing.assert_allclose(
            prof.max_scaled, maxima * np.exp2(prof.sf_exponents)
        )

    def test_max_scaled_in_band(self, rng):
        for kind in ActivationKind:
            samples = [
                activation_tensor(rng.normal(0, s, (4, 4, 8)).astype(np.float32))
                for s in (0.1, 1.0, 4.0)
            ]
            prof = calibrate(samples, kind)
            live = prof.max_scaled > 0
            assert np.all(prof.max_scaled[live] >= prof.alpha / 2)
            assert np.all(prof.max_scaled[live] < prof.alpha)
            for c in np.nonzero(live)[0]:
                assert prof.range_sel[c] == range_interval(
                    prof.max_scaled[c], prof.alpha
                )

    def test_all_zero_channel(self):
        prof = calibrate([_channel_tensor([0.0, 0.3], fill=0.0)],
                         ActivationKind.NONE)
        assert prof.sf_exponents[0] == 0
        assert prof.range_sel[0] == 3

    def test_inconsistent_channels_rejected(self):
        a = _channel_tensor([0.3])
        b = _channel_tensor([0.3, 0.4])
        with pytest.raises(ContractError):
            calibrate([a, b], ActivationKind.NONE)
        with pytest.raises(ContractError):
            calibrate([], ActivationKind.NONE)

    def test_monotone_range_bound(self, rng):
        """Adding a sample never shrinks a channel's representable range
        (codebook bound divided by sf)."""
        samples = [
            activation_tensor(rng.normal(0, 0.3, (4, 4, 6)).astype(np.float32))
            for _ in range(6)
        ]
        prev_bound = None
        for n in range(1, len(samples) + 1):
            prof = calibrate(samples[:n], ActivationKind.NONE)
            bound = np.array(
                [
                    prof.channel_codebook(c).alpha * 2.0 ** -prof.sf_exponents[c]
                    for c in range(prof.n_channels)
                ]
            )
            if prev_bound is not None:
                assert np.all(bound >= prev_bound - 1e-18)
            prev_bound = bound


class TestQuantizeActivations:
    def test_calibration_sample_has_zero_clips(self, rng):
        for kind in (ActivationKind.NONE, ActivationKind.RELU):
            data = rng.normal(0, 0.5, (8, 8, 12)).astype(np.float32)
            if kind is ActivationKind.RELU:
                data = np.abs(data)
            t = activation_tensor(data)
            prof = calibrate([t], kind)
            q = quantize_activations(t, prof)
            assert int(np.sum(prof.clip_count)) == 0
            # round-trip error bounded by half the worst step, plus the
            # saturation-edge gap for values that round onto the bound
            back = dequantize(q).data
            for c in range(12):
                cb = prof.channel_codebook(c)
                worst = max(p.step for p in cb.pieces)
                edge = cb.alpha - cb.max_value
                bound = (edge + worst / 2) * 2.0 ** -prof.sf_exponents[c]
                assert np.max(np.abs(back[..., c] - data[..., c])) <= bound

    def test_out_of_range_clamps_to_top_level(self):
        t = _channel_tensor([0.3])
        prof = calibrate([t], ActivationKind.NONE)
        big = _channel_tensor([50.0])
        q = quantize_activations(big, prof)
        assert prof.clip_count[0] == 1
        cb = prof.channel_codebook(0)
        decoded = dequantize(q).data[0, 0, 0]
        assert decoded == cb.max_value * 2.0 ** -prof.sf_exponents[0]

    def test_zero_tensor_zero_levels(self):
        t = _channel_tensor([0.6], fill=0.0)
        t.data[...] = 0.0
        prof = calibrate([_channel_tensor([0.6])], ActivationKind.RELU)
        q = quantize_activations(t, prof)
        assert np.all(q.levels == 0)  # one-sided codebook: zero is index 0
        assert np.all(dequantize(q).data == 0.0)

    def test_channel_count_mismatch(self):
        prof = calibrate([_channel_tensor([0.3])], ActivationKind.NONE)
        with pytest.raises(ContractError):
            quantize_activations(_channel_tensor([0.3, 0.3]), prof)

    def test_hyper_path_uniform_without_mux(self, rng):
        """Hyper-path profiles use the uniform codebook for every channel
        and emit no selection signal."""
        data = rng.normal(0, 0.3, (5, 5, 4)).astype(np.float32)
        t = activation_tensor(data)
        prof = calibrate([t], ActivationKind.LEAKY_RELU, use_mux=False)
        q = quantize_activations(t, prof)
        assert q.range_sel is None
        assert q.codebook_id == "act-uniform-signed-n8"
        rec = profile_to_manifest(prof)
        assert rec["use_mux"] is False
        assert profile_from_manifest(rec).use_mux is False
        back = dequantize(q).data
        for c in range(4):
            step = 2.0**-8 * 2.0 ** -prof.sf_exponents[c]
            assert np.max(np.abs(back[..., c] - data[..., c])) <= 1.5 * step


class TestFinerPrecisionDominance:
    @pytest.mark.parametrize("sel", [0, 1, 2])
    def test_low_band_error_never_worse_than_uniform(self, sel, rng):
        """On [0, alpha/4) the multiplexed codebooks quantize at least as
        finely as the uniform one, strictly better where their step is
        halved."""
        alpha = 0.5
        cb = mux_codebook(sel, 8, alpha, True)
        uni = mux_codebook(3, 8, alpha, True)
        x = rng.uniform(0, alpha / 4, size=4000)
        err = np.abs(x - quantize_piecewise(x, cb))
        err_u = np.abs(x - quantize_piecewise(x, uni))
        assert np.all(err <= err_u + 1e-18)
        # strict gain exactly where the halved step adds a grid point: the
        # value rounds to an odd multiple of 2**-9, absent from the grid
        # the uniform codebook uses
        fine_lo, fine_hi = (0.0, alpha / 4) if sel in (0, 1) else (alpha / 8, alpha / 4)
        inside = (x >= fine_lo) & (x < fine_hi)
        interleaved = np.rint(x * 2**9) % 2 == 1
        gains = inside & interleaved
        assert np.count_nonzero(gains) > 500
        assert np.all(err[gains] < err_u[gains])


class TestIntervalStats:
    def test_all_saturating(self):
        t = _channel_tensor([0.49, 0.48, 0.47])
        stats = interval_stats({"l0": [t]}, ActivationKind.NONE)
        np.testing.assert_array_equal(stats["l0"], [0, 0, 0, 1.0])

    def test_uniform_maxima_quarter_each(self, rng):
        """Channel maxima drawn uniformly over [alpha/2, alpha) land in
        each interval with probability ~1/4 (Monte-Carlo check)."""
        alpha = 0.5
        maxima = rng.uniform(alpha / 2, alpha, size=2000)
        t = _channel_tensor(maxima, fill=1e-4, shape=(2, 2))
        stats = interval_stats({"l0": [t]}, ActivationKind.NONE)
        np.testing.assert_allclose(stats["l0"], 0.25, atol=0.04)

    def test_render_layout(self):
        t = _channel_tensor([0.3, 0.49])
        stats = interval_stats({"AT0": [t]}, ActivationKind.NONE)
        text = render_interval_stats(stats, 0.5)
        assert "AT0" in text and "50.00%" in text


class TestMeanRegression:
    def test_exact_linear_recovery(self):
        images = [np.full((4, 4), m) for m in (0.1, 0.4, 0.7, 0.9)]
        chans = [np.full((3, 3), 2.0 * m + 1.0) for m in (0.1, 0.4, 0.7, 0.9)]
        mp = fit_mean_channel(images, chans, channel_index=5)
        assert mp.a == pytest.approx(2.0, rel=1e-12)
        assert mp.b == pytest.approx(1.0, rel=1e-12)
        assert mp.r2 == pytest.approx(1.0, abs=1e-12)
        assert mp.channel_index == 5

    def test_constant_channel(self):
        images = [np.full((2, 2), m) for m in (0.2, 0.8)]
        chans = [np.full((2, 2), 7.0)] * 2
        mp = fit_mean_channel(images, chans)
        assert mp.a == 0.0 and mp.b == 7.0 and mp.r2 == 1.0

    def test_noisy_recovery_within_ci(self, rng):
        a_true, b_true = 1.7, -0.4
        x = rng.uniform(0, 1, size=40)
        images = [np.full((2, 2), v) for v in x]
        chans = [
            np.full((2, 2), a_true * v + b_true) + rng.normal(0, 0.01, (2, 2))
            for v in x
        ]
        mp = fit_mean_channel(images, chans)
        assert mp.r2 < 1.0
        assert mp.a == pytest.approx(a_true, abs=0.05)
        assert mp.b == pytest.approx(b_true, abs=0.05)

    def test_degenerate_design_rejected(self):
        images = [np.full((2, 2), 0.5)] * 3
        chans = [np.zeros((2, 2))] * 3
        with pytest.raises(ContractError):
            fit_mean_channel(images, chans)
        with pytest.raises(ContractError):
            fit_mean_channel(images[:1], chans[:1])


class TestFindMeanChannel:
    def test_detects_large_mean_channel(self, rng):
        data = rng.normal(0, 1.0, (8, 8, 6)).astype(np.float32)
        data[..., 4] += 40.0
        t = activation_tensor(data)
        assert find_mean_channel(t, threshold=3.0) == 4

    def test_no_channel_above_threshold(self, rng):
        t = activation_tensor(rng.normal(0, 1.0, (8, 8, 6)).astype(np.float32))
        assert find_mean_channel(t, threshold=10.0) is None


class TestMeanRemoval:
    def test_nine_to_eight_bit_channel(self, rng):
        """A 48x32 integer channel with mean ~120 and spread reaching 230
        needs 9 signed bits; after removing the predicted mean the offsets
        fit in 8."""
        y = np.rint(rng.normal(120.0, 25.0, (48, 32)))
        y[0, 0], y[0, 1] = 230.0, 40.0
        y = np.clip(y, 10, 230)
        mp = MeanParams(a=0.0, b=120.0, channel_index=0, r2=1.0)
        ch = mean_removed_quantize(y, mp, x_mean=0.5)
        assert ch.mu_hat == 120
        assert ch.bits_before == 9 and ch.bits_after == 8
        assert ch.mean_in_range
        np.testing.assert_array_equal(mean_restore(ch), y.astype(np.int64))

    def test_zero_mean_channel_unchanged_width(self, rng):
        y = np.rint(rng.normal(0.0, 10.0, (16, 16)))
        mp = MeanParams(a=0.0, b=0.0, channel_index=0, r2=1.0)
        ch = mean_removed_quantize(y, mp, x_mean=0.3)
        assert ch.mu_hat == 0
        assert ch.bits_after == ch.bits_before

    def test_mu_out_of_signed_byte_flagged(self):
        y = np.full((2, 2), 300.0)
        mp = MeanParams(a=0.0, b=300.0, channel_index=0, r2=1.0)
        ch = mean_removed_quantize(y, mp, x_mean=0.0)
        assert not ch.mean_in_range

    def test_non_integer_input_rejected(self):
        mp = MeanParams(a=0.0, b=0.0, channel_index=0, r2=1.0)
        with pytest.raises(ContractError):
            mean_removed_quantize(np.array([[0.5]]), mp, 0.0)

    def test_inequality_when_mean_is_sane(self, rng):
        """bitwidth(max|y - mu|) <= bitwidth(max|y|) whenever the predicted
        mean shares the channel mean's sign and is at most twice it."""
        for _ in range(200):
            mu = rng.uniform(-200, 200)
            y = np.rint(rng.normal(mu, rng.uniform(1, 30), (8, 8)))
            true_mean = float(np.mean(y))
            if true_mean == 0:
                continue
            mu_hat = int(np.sign(true_mean) * rng.uniform(0, 2 * abs(true_mean)))
            before = bitwidth_of(int(np.max(np.abs(y))))
            after = bitwidth_of(int(np.max(np.abs(y - mu_hat))))
            assert after <= before

    def test_bitwidth_of(self):
        assert bitwidth_of(0) == 1
        assert bitwidth_of(127) == 8
        assert bitwidth_of(128) == 9
        assert bitwidth_of(255) == 9
        with pytest.raises(ContractError):
            bitwidth_of(-1)


class TestProfileManifest:
    def test_round_trip(self, rng):
        t = activation_tensor(rng.normal(0, 0.3, (4, 4, 5)).astype(np.float32))
        prof = calibrate([t], ActivationKind.LEAKY_RELU)
        prof.mean_params = MeanParams(1.25, -0.5, 3, 0.875)
        rec = profile_to_manifest(prof)
        back = profile_from_manifest(rec)
        assert back.kind == prof.kind
        np.testing.assert_array_equal(back.sf_exponents, prof.sf_exponents)
        np.testing.assert_array_equal(back.max_scaled, prof.max_scaled)
        np.testing.assert_array_equal(back.range_sel, prof.range_sel)
        assert back.mean_params == prof.mean_params
