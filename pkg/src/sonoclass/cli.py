"""Command-line surface: synth, consensus, augment, train, evaluate, report,
selftest.  Exit codes: 0 success, 1 usage error, 2 runtime error."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentationConfig, BlurKernel, augment_sample, sample_rng
from .config import RunConfig
from .consensus import (
    ds_run,
    read_annotations,
    write_consensus,
    write_diagnostics,
)
from .datasets import (
    PROFILE_NAMES,
    read_manifest,
    synth_generate,
    synth_profile,
)
from .ensemble import BackboneSpec, EnsembleConfig, build_ensemble, forward_scaled
from .image import decode_image, encode_image
from .losses import (
    attach_loss,
    cross_entropy,
    cross_entropy_label_smoothing,
    focal_loss,
    ldam_focal_loss,
    ldam_loss,
)
from .metrics import report_emit, report_from_dict
from .training import evaluate_checkpoint, run_root, train

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's default 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="sonoclass", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--profile", default="demo6", choices=PROFILE_NAMES)
    p.add_argument("--total", type=int, default=None, help="total image count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="64x64", help="image size HxW")
    p.add_argument("--speckle", type=float, default=0.15)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("consensus",
                       help="aggregate multi-annotator labels")
    p.add_argument("--annotations", required=True, help="item_id,annotator_id,label CSV")
    p.add_argument("--out", required=True, help="output consensus CSV")
    p.add_argument("--diagnostics", default=None, help="diagnostics JSON path")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--smoothing", type=float, default=0.01)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=100)
    p.set_defaults(func=_cmd_consensus)

    p = sub.add_parser("augment",
                       help="export augmented variants of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="run config file (augment section)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train the ensemble")
    p.add_argument("--config", default=None, help="run config file")
    p.add_argument("--manifest", default=None, help="overrides data.manifest")
    p.add_argument("--run-name", default="default")
    p.add_argument("--runs-root", default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate",
                       help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="directory for report artifacts")
    p.add_argument("--formats", default="json,csv,markdown")
    p.add_argument("--focus-class", default="")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report",
                       help="re-render a metrics JSON file")
    p.add_argument("--metrics", required=True)
    p.add_argument("--format", default="markdown", choices=("json", "csv", "markdown"))
    p.add_argument("--out", default=None, help="output file (default stdout)")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("selftest",
                       help="gradient and invariant suite")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=_cmd_selftest)

    return parser


def _parse_overrides(pairs) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise _UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _cmd_synth(args) -> int:
    h, w = (int(v) for v in args.size.lower().split("x"))
    spec = synth_profile(
        args.profile,
        total=args.total,
        seed=args.seed,
        image_size=(h, w),
        speckle=args.speckle,
    )
    manifest = synth_generate(spec, args.out)
    print(
        f"wrote {len(manifest)} images across {len(spec.class_names)} classes "
        f"to {args.out} (manifest.csv included)"
    )
    return 0


def _cmd_consensus(args) -> int:
    annotations = read_annotations(args.annotations, n_classes=args.classes)
    result, state = ds_run(
        annotations, tol=args.tol, max_iter=args.max_iter, smoothing=args.smoothing
    )
    write_consensus(annotations, result, args.out)
    if args.diagnostics:
        write_diagnostics(state, args.diagnostics)
    status = "converged" if result.converged else "stopped"
    print(
        f"{len(annotations.items)} items, {len(annotations.annotators)} annotators: "
        f"{status} after {result.iterations} iteration(s); labels written to {args.out}"
    )
    return 0


def _cmd_augment(args) -> int:
    overrides = _parse_overrides(args.overrides)
    if args.config:
        config = RunConfig.from_file(args.config, overrides)
    else:
        config = RunConfig(overrides)
    manifest = read_manifest(args.manifest)
    first = decode_image(manifest.entries[0].path)
    aug = config.augmentation(target_size=(first.height, first.width))
    if aug is None:
        aug = AugmentationConfig.disabled((first.height, first.width))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for entry in manifest.entries:
        img = decode_image(entry.path)
        for variant in range(args.variants):
            rng = sample_rng(args.seed, entry.image_id, variant)
            out = augment_sample(img, aug, rng)
            name = f"{entry.image_id}.aug{variant}.ppm"
            encode_image(out, out_dir / name)
            written.append(name)
    record = {
        "seed": args.seed,
        "variants": args.variants,
        "manifest": str(args.manifest),
        "augment": {
            key: config._text[key]
            for key in sorted(config._text)
            if key.startswith("augment.")
        },
        "files": written,
    }
    (out_dir / "augment_record.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote {len(written)} augmented images to {out_dir}")
    return 0


def _cmd_train(args) -> int:
    overrides = _parse_overrides(args.overrides)
    if args.manifest:
        overrides["data.manifest"] = args.manifest
    if args.config:
        config = RunConfig.from_file(args.config, overrides)
    else:
        config = RunConfig(overrides)
    run_dir = run_root(args.runs_root) / args.run_name
    started = time.monotonic()
    result = train(config, run_dir, resume=args.resume)
    elapsed = time.monotonic() - started
    last = result.history[-1] if result.history else {}
    print(
        f"run {args.run_name}: {len(result.history)} epoch(s) in {elapsed:.1f}s; "
        f"final train loss {last.get('train_loss', float('nan')):.6f}; "
        f"best val macro-F1 {result.best_macro_f1:.4f} at epoch {result.best_epoch}; "
        f"artifacts in {run_dir}"
    )
    return 0


def _cmd_evaluate(args) -> int:
    formats = tuple(f.strip() for f in args.formats.split(",") if f.strip())
    unknown = set(formats) - {"json", "csv", "markdown"}
    if unknown:
        raise _UsageError(f"unknown report formats: {sorted(unknown)}")
    report = evaluate_checkpoint(
        args.checkpoint,
        args.manifest,
        out_dir=args.out,
        formats=formats,
        focus_class=args.focus_class,
    )
    print(
        f"accuracy {report.overall_accuracy:.4f}, macro F1 {report.macro_f1:.4f}, "
        f"weighted F1 {report.weighted_f1:.4f}"
        + (f"; artifacts in {args.out}" if args.out else "")
    )
    return 0


def _cmd_report(args) -> int:
    payload = json.loads(Path(args.metrics).read_text())
    report = report_from_dict(payload)
    text = report_emit(report, args.format)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.format} report to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def _selftest_checks(n_seeds: int):
    yield "conv2d identity kernel", _check_conv_identity
    yield "global average pool of constants", _check_gap_constant
    yield "concat adjoint split", _check_concat_split
    yield "blur kernel normalization", _check_blur_kernels
    for seed in range(n_seeds):
        yield f"loss gradients vs finite differences (seed {seed})", (
            lambda s=seed: _check_loss_grads(s)
        )
    for seed in range(n_seeds):
        yield f"ensemble gradient check (seed {seed})", (
            lambda s=seed: _check_ensemble_grad(s)
        )


def _check_conv_identity():
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.uniform(size=(1, 1, 5, 7)))
    kernel = ad.Tensor(np.ones((1, 1, 1, 1)))
    bias = ad.Tensor(np.zeros(1))
    out = ad.conv2d(x, kernel, bias)
    assert np.array_equal(out.data, x.data)


def _check_gap_constant():
    for value in (0.5, 3.0, 0.25):
        t = ad.Tensor(np.full((2, 4, 8), value))
        assert np.array_equal(ad.global_average_pool(t).data, np.full(2, value))


def _check_concat_split():
    a = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = ad.Tensor(np.array([3.0, 4.0, 5.0]), requires_grad=True)
    with ad.Tape() as tape:
        merged = ad.concat_channels(a, b)
        loss = ad.tensor_sum(ad.multiply(merged, merged))
    tape.backward(loss)
    assert np.allclose(a.grad, 2.0 * a.data)
    assert np.allclose(b.grad, 2.0 * b.data)


def _check_blur_kernels():
    for sigma in (0.1, 0.5, 1.5, 3.0):
        kernel = BlurKernel.from_sigma(sigma)
        assert abs(kernel.weights.sum() - 1.0) <= 1e-9


def _check_loss_grads(seed: int):
    rng = np.random.default_rng([seed, 5150])
    logits = rng.normal(size=(4, 3))
    # The margin losses scale logits by 30, so probe them at moderate logits
    # where the softmax is not saturated and finite differences stay valid.
    small = 0.08 * rng.normal(size=(4, 3))
    labels = rng.integers(0, 3, size=4)
    counts = np.array([30, 8, 2])
    cases = [
        (logits, lambda z: cross_entropy(z, labels)),
        (logits, lambda z: cross_entropy_label_smoothing(z, labels, 0.1)),
        (logits, lambda z: focal_loss(z, labels, gamma=2.0)),
        (small, lambda z: ldam_loss(z, labels, counts)),
        (small, lambda z: ldam_focal_loss(z, labels, counts)),
    ]
    step = 1e-5
    for point, fn in cases:
        out = fn(point)
        for i in range(point.shape[0]):
            for j in range(point.shape[1]):
                bumped = point.copy()
                bumped[i, j] += step
                up = fn(bumped).loss
                bumped[i, j] -= 2 * step
                down = fn(bumped).loss
                diff = (up - down) / (2 * step)
                denom = max(abs(diff), abs(out.grad_logits[i, j]), 1e-8)
                err = abs(diff - out.grad_logits[i, j]) / denom
                assert err <= 1e-6, f"loss gradient relative error {err}"


def _check_ensemble_grad(seed: int):
    config = EnsembleConfig(
        class_count=3,
        shallow_input=(8, 8),
        detailed_input=(16, 16),
        shallow_backbone=BackboneSpec.from_channels((4,), pool_last=True),
        detailed_backbone=BackboneSpec.from_channels((4, 8), pool_last=False),
    )
    params = build_ensemble(config, init_seed=seed)
    rng = np.random.default_rng([seed, 6060])
    xs = ad.Tensor(rng.uniform(size=(2, 3, 8, 8)))
    xd = ad.Tensor(rng.uniform(size=(2, 3, 16, 16)))
    labels = rng.integers(0, 3, size=2)

    def f():
        logits = forward_scaled(params, config, xs, xd)
        scalar, _ = attach_loss(logits, lambda z, y: cross_entropy(z, y), labels)
        return scalar

    err = ad.grad_check(
        f, list(params.values()), step=1e-5, max_coords_per_param=4,
        rng=np.random.default_rng([seed, 7]),
    )
    assert err <= 1e-4, f"gradient relative error {err}"


def _cmd_selftest(args) -> int:
    ad.CHECK_FINITE = True
    passed = failed = 0
    try:
        for name, check in _selftest_checks(args.seeds):
            try:
                check()
            except AssertionError as exc:
                failed += 1
                print(f"FAIL {name}: {exc}")
            else:
                passed += 1
                print(f"PASS {name}")
    finally:
        ad.CHECK_FINITE = False
    print(f"selftest: {passed} passed, {failed} failed")
    return 0 if failed == 0 else 2


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        if os.environ.get("SONOCLASS_DEBUG"):
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
