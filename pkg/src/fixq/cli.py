"""Command-line front end over tensor bundles.

Exit codes: 0 success, 2 I/O or bundle format error, 3 contract or
configuration error, 4 numeric error (overflow, non-finite values).
Given the same inputs, flags and seed every subcommand produces
byte-identical outputs; FIXQ_SEED and FIXQ_JOBS override the defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import audit as audit_mod
from .activations import (
    ActivationKind,
    alpha_for,
    calibrate,
    interval_stats,
    profile_from_manifest,
    profile_to_manifest,
    quantize_activations,
    render_interval_stats,
)
from .codebooks import (
    AUDIT_SF_MAX,
    AUDIT_SF_MIN,
    catalog_text,
    codebook_ids,
    get_codebook,
    validate_codebook,
)
from .errors import BundleFormatError, ContractError, FixqError, NumericError
from .inference import (
    LayerSpec,
    calibrate_pipeline,
    pipeline_demo,
)
from .tensors import (
    GroupScheme,
    Tensor,
    TensorBundle,
    read_bundle,
    write_bundle,
)
from .weights import (
    ToyConvRegressor,
    clip_preset,
    quant_error,
    quantize_weights,
    render_wcft_log,
    wcft_train,
)

_EXIT_FORMAT = 2
_EXIT_CONTRACT = 3
_EXIT_NUMERIC = 4


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    return int(raw) if raw else default


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dry-run", action="store_true",
                   help="print the plan without writing anything")
    p.add_argument("--seed", type=int, default=_env_int("FIXQ_SEED", 0))
    p.add_argument("--jobs", type=int,
                   default=_env_int("FIXQ_JOBS", os.cpu_count() or 1),
                   help="parallelism level (results are identical at any setting)")


def _check_bits(args) -> int:
    if args.bits != 8 and not args.experimental_bits:
        raise ContractError(
            f"{args.bits}-bit budgets require --experimental-bits (only 8-bit"
            " codebooks ship with golden tests)"
        )
    return args.bits


def _network_layers(bundle: TensorBundle, bits: int):
    """Materialize (name, quantized weights, LayerSpec) triples from a
    bundle's network description, quantizing f32 weight entries."""
    if not bundle.network:
        raise BundleFormatError("bundle has no network description")
    layers = []
    for rec in bundle.network:
        name = rec["name"]
        w = bundle.entries.get(rec["weight"])
        if w is None:
            raise BundleFormatError(f"entry {rec['weight']!r}: missing weight entry")
        if isinstance(w, Tensor):
            w = quantize_weights(w, GroupScheme.CHANNEL_WISE, "nlq", bits)
        spec = LayerSpec(
            rec.get("kind", "conv"),
            int(rec.get("stride", 1)),
            int(rec.get("padding", 0)),
            ActivationKind(rec.get("activation", "none")),
        )
        layers.append((name, w, spec))
    return layers


def _load_profiles(bundle: TensorBundle, n_hidden: int):
    try:
        input_profile = profile_from_manifest(bundle.profiles["input"])
        hidden = [
            profile_from_manifest(bundle.profiles[f"layer{i}"])
            for i in range(n_hidden)
        ]
    except KeyError as e:
        raise BundleFormatError(f"profiles bundle is missing {e}") from None
    mean_params = None
    if "y_hat" in bundle.profiles:
        mean_params = profile_from_manifest(bundle.profiles["y_hat"]).mean_params
    return input_profile, hidden, mean_params


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_quantize_weights(args) -> int:
    bits = _check_bits(args)
    scheme = GroupScheme(args.scheme)
    bundle = read_bundle(args.input)
    weight_entries = {
        n: e for n, e in bundle.entries.items()
        if isinstance(e, Tensor) and e.is_weight
    }
    if not weight_entries:
        raise BundleFormatError("input bundle has no f32 weight entries")
    if args.dry_run:
        for name in weight_entries:
            print(f"would quantize {name} ({args.scheme}-{args.method}, {bits}-bit)")
        return 0
    out = TensorBundle()
    for name, t in weight_entries.items():
        q = quantize_weights(t, scheme, args.method, bits, jobs=args.jobs)
        out.entries[name] = q
        err = quant_error(t, q)
        print(f"{name}: quant_error={err.total:.9e}")
        _warn_audit_range(name, q.sf_exponents)
    write_bundle(out, args.output)
    return 0


def _warn_audit_range(name: str, exponents) -> None:
    """Exponents are stored as 8-bit but audited at 4-bit; flag the ones
    that would not fit the audit packing."""
    outside = int(np.sum((exponents < AUDIT_SF_MIN) | (exponents > AUDIT_SF_MAX)))
    if outside:
        print(
            f"warning: {name}: {outside} sf exponent(s) outside the 4-bit"
            f" audit range [{AUDIT_SF_MIN}, {AUDIT_SF_MAX}]",
            file=sys.stderr,
        )


def cmd_calibrate(args) -> int:
    bundle = read_bundle(args.input)
    bits = _check_bits(args)
    images = [
        e for e in bundle.entries.values()
        if isinstance(e, Tensor) and not e.is_weight
    ]
    if not images:
        raise BundleFormatError("input bundle has no activation samples")
    if args.network:
        weights = read_bundle(args.network)
        layers = _network_layers(weights, bits)
        if args.dry_run:
            print(f"would calibrate {len(layers)} layers over {len(images)} samples")
            return 0
        input_profile, hidden, mean_params = calibrate_pipeline(
            images, layers, ActivationKind(args.kind), args.mean_threshold, bits
        )
        out = TensorBundle()
        out.profiles["input"] = profile_to_manifest(input_profile)
        for i, prof in enumerate(hidden):
            out.profiles[f"layer{i}"] = profile_to_manifest(prof)
        if mean_params is not None:
            out.profiles["y_hat"] = {
                "kind": "none",
                "bits": bits,
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
            print(
                f"mean channel {mean_params.channel_index}:"
                f" a={mean_params.a:.6g} b={mean_params.b:.6g}"
                f" r2={mean_params.r2:.6f}"
            )
        write_bundle(out, args.output)
        print(f"calibrated input + {len(hidden)} layer profiles")
        return 0
    kind = ActivationKind(args.kind)
    if args.dry_run:
        print(f"would calibrate profile {args.name!r} from {len(images)} samples")
        return 0
    prof = calibrate(images, kind, bits, use_mux=not args.no_mux)
    out = TensorBundle()
    out.profiles[args.name] = profile_to_manifest(prof)
    write_bundle(out, args.output)
    stats = interval_stats({args.name: images}, kind, bits)
    print(render_interval_stats(stats, alpha_for(kind)), end="")
    return 0


def cmd_quantize_acts(args) -> int:
    bits = _check_bits(args)
    bundle = read_bundle(args.input)
    profiles = read_bundle(args.profiles)
    if args.profile not in profiles.profiles:
        raise BundleFormatError(f"profiles bundle has no profile {args.profile!r}")
    prof = profile_from_manifest(profiles.profiles[args.profile])
    acts = {
        n: e for n, e in bundle.entries.items()
        if isinstance(e, Tensor) and not e.is_weight
    }
    if not acts:
        raise BundleFormatError("input bundle has no activation entries")
    if args.dry_run:
        for name in acts:
            print(f"would quantize {name} with profile {args.profile!r}")
        return 0
    out = TensorBundle()
    for name, t in acts.items():
        before = int(np.sum(prof.clip_count))
        out.entries[name] = quantize_activations(t, prof)
        print(f"{name}: clipped={int(np.sum(prof.clip_count)) - before}")
    _warn_audit_range(args.profile, prof.sf_exponents)
    out.profiles[args.profile] = profile_to_manifest(prof)
    write_bundle(out, args.output)
    return 0


def cmd_infer(args) -> int:
    bits = _check_bits(args)
    weights = read_bundle(args.weights)
    profiles = read_bundle(args.profiles)
    inputs = read_bundle(args.input)
    layers = _network_layers(weights, bits)
    image = None
    for e in inputs.entries.values():
        if isinstance(e, Tensor) and not e.is_weight:
            image = e
            break
    if image is None:
        raise BundleFormatError("input bundle has no activation entry")
    input_profile, hidden, mean_params = _load_profiles(profiles, len(layers) - 1)
    if args.dry_run:
        print(f"would run {len(layers)} layers on input {image.shape}")
        return 0
    result = pipeline_demo(image, layers, input_profile, hidden, mean_params)
    print(result.report_text(), end="")
    out = TensorBundle()
    y = result.y_hat.astype(np.float64)
    if result.mean_removed is not None:
        y[..., result.mean_channel] = result.mean_removed.offsets
    out.entries["y_hat"] = Tensor(y.astype(np.float32), ("OH", "OW", "O"))
    meta: dict = {"rounding": "element-wise"}
    if result.mean_removed is not None:
        meta["mean_channel"] = result.mean_channel
        meta["mu_hat"] = result.mean_removed.mu_hat
    out.network = [meta]
    write_bundle(out, args.output)
    return 0


def cmd_wcft(args) -> int:
    bits = _check_bits(args)
    spec = clip_preset(args.preset, args.scale)
    rng = np.random.default_rng(args.seed)
    model = ToyConvRegressor(seed=args.seed)
    x = rng.normal(0.0, 1.0, (64, model.weights[0].shape[0]))
    c2 = model.weights[1].shape[-1]
    length = x.shape[0] - 2 * (model.kernel - 1)
    target = rng.normal(0.0, 1.0, (length, c2))
    if args.dry_run:
        print(
            f"would train: I1={spec.normal_iters} rounds={spec.rounds}"
            f" betas={spec.betas} I3={spec.finetune_iters}"
        )
        return 0
    result = wcft_train(model, spec, args.lr, x, target, bits)
    log_text = render_wcft_log(result.log)
    if args.log:
        with open(args.log, "w") as f:
            f.write(log_text)
    else:
        print(log_text, end="")
    out = TensorBundle()
    for i, q in enumerate(result.quantized):
        out.entries[f"layer{i}.w"] = q
    write_bundle(out, args.output)
    print(
        "total quant_error="
        + format(sum(e.total for e in result.errors), ".9e")
    )
    return 0


def cmd_audit(args) -> int:
    if args.mean_removal:
        dims, bits_s = args.mean_removal.split(":")
        h, w = (int(d) for d in dims.split("x"))
        rep = audit_mod.mean_removal_report((h, w), int(bits_s))
        print(
            f"mean-removal {h}x{w} @ {bits_s}-bit:"
            f" {rep.bits_before} -> {rep.bits_after} bits"
            f" (saving {100 * rep.saving:.2f}%)"
        )
        if not args.network:
            return 0
    if not args.network:
        raise ContractError("audit requires --network (or --mean-removal)")
    cfg = audit_mod.load_config(args.network)
    h, w = (int(d) for d in args.input_size.split("x"))
    if args.dry_run:
        print(f"would audit {len(cfg.layers)} layers at {h}x{w}")
        return 0
    if args.format == "json":
        print(json.dumps(audit_mod.audit_summary(cfg, (h, w)), indent=2,
                         sort_keys=True))
    else:
        print(audit_mod.render_audit(cfg, (h, w)), end="")
    return 0


def cmd_validate_codebooks(args) -> int:
    if args.dry_run:
        print(f"would validate {len(codebook_ids())} codebooks")
        return 0
    failed = False
    for cid in codebook_ids():
        report = validate_codebook(get_codebook(cid))
        status = "ok" if report.ok else "FAIL"
        print(
            f"{cid}: levels={report.level_count}"
            f" expected={report.expected_levels} {status}"
        )
        for v in report.violations:
            print(f"  violation: {v}")
        failed |= not report.ok
    if args.catalog:
        print(catalog_text(), end="")
    if failed:
        raise ContractError("codebook validation failed")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fixq",
        description="8-bit dynamic fixed-point quantization over tensor bundles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize-weights", help="quantize f32 weight entries")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scheme", choices=["cw", "lw"], default="cw")
    p.add_argument("--method", choices=["lq", "nlq", "lloyd"], default="nlq")
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--experimental-bits", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_quantize_weights)

    p = sub.add_parser("calibrate", help="profile activation dynamic ranges")
    p.add_argument("--input", required=True, help="bundle of activation samples")
    p.add_argument("--output", required=True)
    p.add_argument("--kind", choices=[k.value for k in ActivationKind],
                   default="none")
    p.add_argument("--name", default="profile")
    p.add_argument("--network", help="weights bundle; calibrate every layer of"
                                     " its network progressively")
    p.add_argument("--mean-threshold", type=float, default=3.0)
    p.add_argument("--no-mux", action="store_true",
                   help="uniform codebook only (hyper-path activations)")
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--experimental-bits", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize-acts", help="quantize activation entries")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--profile", default="profile")
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--experimental-bits", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_quantize_acts)

    p = sub.add_parser("infer", help="run the quantized pipeline on an image")
    p.add_argument("--weights", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--experimental-bits", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("wcft", help="toy clipping fine-tuning run")
    p.add_argument("--output", required=True)
    p.add_argument("--preset", choices=["low", "high"], default="low")
    p.add_argument("--scale", type=float, default=1e-3,
                   help="iteration-count scale for desk-sized runs")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--log", help="write the metrics log to this file")
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--experimental-bits", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_wcft)

    p = sub.add_parser("audit", help="memory and energy accounting")
    p.add_argument("--network", help="network config JSON")
    p.add_argument("--input-size", default="768x512")
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.add_argument("--mean-removal", metavar="HxW:BITS",
                   help="also print the mean-removal bit accounting")
    _add_common(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("validate-codebooks", help="check every registered codebook")
    p.add_argument("--catalog", action="store_true",
                   help="also dump the codebook catalog")
    _add_common(p)
    p.set_defaults(func=cmd_validate_codebooks)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BundleFormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return _EXIT_FORMAT
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return _EXIT_FORMAT
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return _EXIT_NUMERIC
    except ContractError as e:
        print(f"contract error: {e}", file=sys.stderr)
        return _EXIT_CONTRACT
    except FixqError as e:
        print(f"error: {e}", file=sys.stderr)
        return _EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
