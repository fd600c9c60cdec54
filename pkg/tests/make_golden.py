"""One-shot generator for the committed golden fixtures.

Builds a small seeded 4-layer network, calibrates it, runs the
exact-rational oracle pipeline, and writes the bundles under
tests/golden/.  Run manually from the repository root:

    python tests/make_golden.py

The expected outputs come from the oracle, not from the library's
inference path, so the committed files stay an independent reference.
"""

from pathlib import Path

import numpy as np

from fixq.activations import ActivationKind, profile_to_manifest
from fixq.codebooks import dequantize
from fixq.inference import LayerSpec, calibrate_pipeline
from fixq.tensors import Tensor, TensorBundle, write_bundle
from fixq.weights import quantize_weights

from oracles import oracle_pipeline

GOLDEN = Path(__file__).parent / "golden"

LAYOUT = [
    # (in_ch, kh, kw, out_ch, activation)
    (2, 3, 3, 3, "relu"),
    (3, 3, 3, 4, "relu"),
    (4, 3, 3, 3, "relu"),
    (3, 3, 3, 3, "none"),
]
STRIDE, PADDING = 2, 1
SEED = 20240809


def build_weight_bundle(rng) -> TensorBundle:
    wb = TensorBundle()
    for i, (ci, kh, kw, co, act) in enumerate(LAYOUT):
        w = rng.normal(0.0, 0.16, size=(ci, kh, kw, co))
        if i == len(LAYOUT) - 1:
            # final layer: integer-scale outputs, with positive-heavy taps
            # on channel 1 so it carries a large non-zero mean (the
            # mean-removal target)
            w[..., 1] = np.abs(w[..., 1]) + 0.25
            w *= 24.0
        wb.entries[f"at{i}.w"] = Tensor(w.astype(np.float32), ("I", "H", "W", "O"))
        wb.network.append(
            {
                "name": f"at{i}",
                "weight": f"at{i}.w",
                "kind": "conv",
                "stride": STRIDE,
                "padding": PADDING,
                "activation": act,
            }
        )
    return wb


def main() -> None:
    rng = np.random.default_rng(SEED)
    GOLDEN.mkdir(exist_ok=True)

    wb = build_weight_bundle(rng)
    write_bundle(wb, GOLDEN / "infer_weights")

    cal = TensorBundle()
    for j in range(4):
        img = rng.uniform(0.0, 1.0, size=(24, 24, 2)) * (0.5 + 0.16 * j)
        cal.entries[f"img{j}"] = Tensor(img.astype(np.float32), ("OH", "OW", "O"))
    write_bundle(cal, GOLDEN / "infer_samples")

    test_img = (rng.uniform(0.0, 1.0, size=(24, 24, 2)) * 0.8).astype(np.float32)
    ib = TensorBundle()
    ib.entries["img"] = Tensor(test_img, ("OH", "OW", "O"))
    write_bundle(ib, GOLDEN / "infer_input")

    # Quantize weights and calibrate with the library (covered by their own
    # oracle tests); freeze the result.
    layers = []
    for rec in wb.network:
        q = quantize_weights(wb.entries[rec["weight"]])
        spec = LayerSpec(rec["kind"], rec["stride"], rec["padding"],
                         ActivationKind(rec["activation"]))
        layers.append((rec["name"], q, spec))
    images = list(cal.entries.values())
    input_profile, hidden, mean_params = calibrate_pipeline(
        images, layers, ActivationKind.RELU, mean_threshold=1.5
    )
    assert mean_params is not None, "fixture must exercise mean removal"
    assert mean_params.channel_index == 1

    pb = TensorBundle()
    pb.profiles["input"] = profile_to_manifest(input_profile)
    for i, prof in enumerate(hidden):
        pb.profiles[f"layer{i}"] = profile_to_manifest(prof)
    pb.profiles["y_hat"] = {
        "kind": "none",
        "bits": 8,
        "sf_exponents": [],
        "max_scaled": [],
        "range_sel": [],
        "clip_count": [],
        "mean_params": {
            "a": float(mean_params.a).hex(),
            "b": float(mean_params.b).hex(),
            "channel_index": mean_params.channel_index,
            "r2": float(mean_params.r2).hex(),
        },
    }
    write_bundle(pb, GOLDEN / "infer_profiles")

    # Quantized weight bundle (the quantize-weights golden).
    qb = TensorBundle()
    for name, q, _ in layers:
        qb.entries[f"{name}.w"] = q
    write_bundle(qb, GOLDEN / "quantized_weights")

    # Expected y_hat from the rational oracle.
    descr = [
        (dequantize(q).data, spec.kind, spec.stride, spec.padding,
         spec.activation.value)
        for _, q, spec in layers
    ]
    y = oracle_pipeline(test_img, descr, input_profile, hidden)
    mu_hat = int(round(mean_params.a * float(np.mean(test_img.astype(np.float64)))
                       + mean_params.b))
    stored = y.astype(np.float64).copy()
    stored[..., mean_params.channel_index] = (
        y[..., mean_params.channel_index] - mu_hat
    )
    eb = TensorBundle()
    eb.entries["y_hat"] = Tensor(stored.astype(np.float32), ("OH", "OW", "O"))
    eb.network = [
        {"rounding": "element-wise", "mean_channel": mean_params.channel_index,
         "mu_hat": mu_hat}
    ]
    write_bundle(eb, GOLDEN / "infer_expected")
    print("golden fixtures written to", GOLDEN)
    print("y_hat:", y.shape, "mu_hat:", mu_hat, "channel:",
          mean_params.channel_index)


if __name__ == "__main__":
    main()
