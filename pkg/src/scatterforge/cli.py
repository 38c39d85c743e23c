"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure.  Errors go to standard error as ``ERROR[<code>] <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .autoencoder import (
    AEArchitecture,
    TrainConfig,
    gradient_check,
    init_model,
    read_model,
    reconstruction_stats,
    relu_margin,
    train as train_ae,
    write_model,
)
from .dataset import GenerationConfig, generate_dataset, read_manifest
from .errors import ScatterForgeError, TrainingError
from .features import (
    ArgmaxCodes,
    FeatureConfig,
    image_feature,
    read_codebook,
    sample_training_patches,
    train_codebook,
    write_codebook,
)
from .simkit.tags import CANONICAL_ATTRIBUTES
from .formats import XSIM_MAGIC, FeatureMatrix, read_features, read_image, write_features
from .learneval import (
    evaluate,
    labels_from_manifest,
    pr_curve,
    read_svm,
    scores,
    train_ovr,
    write_svm,
)

log = logging.getLogger("scatterforge")

GRAD_CHECK_TOL = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _existing(kind):
    def check(value):
        p = Path(value)
        if kind == "file" and not p.is_file():
            raise argparse.ArgumentTypeError(f"no such file: {value}")
        if kind == "dir" and not p.is_dir():
            raise argparse.ArgumentTypeError(f"no such directory: {value}")
        return p

    return check


def _workers(args) -> int:
    return 1 if args.deterministic else max(1, args.threads)


def _manifest_path(data: Path) -> Path:
    return data / "manifest.jsonl"


def _load_images(data: Path, entries, workers: int):
    def load(e):
        return read_image(data / e.path).data

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(load, entries))
    return [load(e) for e in entries]


# -- subcommands ----------------------------------------------------------------------


def cmd_generate(args):
    cfg = GenerationConfig.load(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.count is not None:
        cfg.image_count = args.count
        cfg.validate()
    entries = generate_dataset(cfg, args.out, workers=_workers(args))
    print(f"wrote {len(entries)} images to {args.out}")


def cmd_codebook(args):
    entries = read_manifest(_manifest_path(args.data))
    images = _load_images(args.data, entries, _workers(args))
    patches = sample_training_patches(images, args.patches_per_image, FeatureConfig(), args.seed,
                                      [e.id for e in entries])
    cb = train_codebook(patches, k=args.k, max_iters=args.max_iters, seed=args.seed)
    write_codebook(args.out, cb)
    print(f"codebook K={cb.k} from {len(patches)} patches, objective {cb.objective[-1]:.6g}")


def _grad_check(seed: int) -> int:
    arch = AEArchitecture(c1=2, c2=2, bottleneck=4)
    x = np.random.default_rng(seed).standard_normal((3, 32, 32))
    model = init_model(arch, seed=seed)
    report = gradient_check(model, x)
    worst = max(r.rel for r in report.values())
    for name, r in report.items():
        print(f"{name:14s} max rel err {r.rel:.3e}  max abs err {r.abs:.3e}  strict rel {r.rel_strict:.3e}")
    print(f"relu margin {relu_margin(model, x):.3e}")
    if worst >= GRAD_CHECK_TOL:
        raise TrainingError(f"gradient check failed: max relative error {worst:.3e}")
    print("gradient check passed")
    return 0


def cmd_ae_train(args):
    if args.grad_check:
        return _grad_check(args.seed)
    if args.out is None or args.data is None:
        raise UsageError("ae-train needs --data and --out (or --grad-check)")
    entries = read_manifest(_manifest_path(args.data))
    images = _load_images(args.data, entries, _workers(args))
    per_image = max(1, -(-args.patches // len(images)))
    patches = sample_training_patches(images, per_image, FeatureConfig(), args.seed, [e.id for e in entries])
    data = patches.patches[: args.patches]
    arch = AEArchitecture(c1=args.c1, c2=args.c2, bottleneck=args.bottleneck)
    dtype = np.float64 if args.deterministic else np.float32
    model = init_model(arch, seed=args.seed, dtype=dtype)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed)

    def report(epoch, loss, lr):
        log.info("epoch %d loss %.6f lr %.3g", epoch + 1, loss, lr)

    model = train_ae(model, data, cfg, callback=report)
    write_model(args.out, model)
    print(reconstruction_stats(model, data))


def cmd_features(args):
    entries = read_manifest(_manifest_path(args.data))
    if args.mode == "bow":
        model = read_codebook(args.model)
    else:
        model = read_model(args.model, dtype=np.float64 if args.deterministic else np.float32)
        if args.ae_assign == "hard":
            model = ArgmaxCodes(model)

    def one(e):
        return image_feature(read_image(args.data / e.path).data, model)

    workers = _workers(args)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, entries))
    else:
        rows = [one(e) for e in entries]
    write_features(args.out, FeatureMatrix([e.id for e in entries], np.array(rows, dtype=np.float64)))
    print(f"wrote {len(rows)} x {len(rows[0]) if rows else 0} features to {args.out}")


def cmd_train(args):
    entries = read_manifest(args.manifest)
    feats = read_features(args.features)
    ids, Y = labels_from_manifest(entries)
    model = train_ovr(feats.rows(ids), Y, list(CANONICAL_ATTRIBUTES), C=args.C, seed=args.seed, workers=_workers(args))
    write_svm(args.out, model)
    for name, why in model.skipped.items():
        print(f"skipped {name}: {why}")
    print(f"trained {len(model.attributes)} attribute scorers")


def cmd_eval(args):
    entries = read_manifest(args.manifest)
    feats = read_features(args.features)
    C = args.C
    if args.model is not None:
        svm = read_svm(args.model)
        if len(svm.C):
            C = float(svm.C[0])
    report = evaluate(entries, feats, protocol=args.protocol, ratio=args.ratio, seed=args.seed,
                      filter_single_run=args.filter_single_run, C=C, workers=_workers(args))
    report.write(args.report)
    for a, ap in report.attribute_ap.items():
        print(f"{a:20s} AP {ap:.4f}")
    for a, why in report.excluded.items():
        print(f"{a:20s} excluded: {why}")
    print(f"mAP {report.mAP:.4f} (prevalence baseline {report.prevalence_baseline:.4f}; "
          f"reference at full scale {report.reference_mAP:.3f})")


def cmd_prcurve(args):
    feat_path, manifest_path, model_path = args.report_inputs
    entries = read_manifest(manifest_path)
    feats = read_features(feat_path)
    svm = read_svm(model_path)
    if args.attribute not in svm.attributes:
        raise UsageError(f"model has no scorer for {args.attribute!r}")
    attrs = list(CANONICAL_ATTRIBUTES)
    if args.attribute not in attrs:
        attrs.append(args.attribute)
    ids, Y = labels_from_manifest(entries, attrs)
    if args.ids is not None:
        keep = set(Path(args.ids).read_text(encoding="utf-8").split())
        rows = [n for n, i in enumerate(ids) if i in keep]
        ids, Y = [ids[n] for n in rows], Y[rows]
    s = scores(svm, feats.rows(ids))[args.attribute]
    curve = pr_curve(s, Y[:, attrs.index(args.attribute)], args.attribute)
    curve.write_csv(args.out)
    print(f"wrote {len(curve.thresholds)} points to {args.out}")


def _colormap() -> np.ndarray:
    text = resources.files("scatterforge").joinpath("data/colormap.json").read_text(encoding="utf-8")
    return np.array(json.loads(text)["lut"], dtype=np.uint8)


def false_color(data: np.ndarray) -> np.ndarray:
    """Map counts through log1p and the shipped 256-entry LUT; returns (H, W, 3) uint8."""
    v = np.log1p(np.asarray(data, dtype=np.float64))
    lo, hi = float(v.min()), float(v.max())
    idx = np.zeros(v.shape, dtype=np.intp) if hi <= lo else np.rint((v - lo) / (hi - lo) * 255).astype(np.intp)
    return _colormap()[idx]


def cmd_inspect(args):
    img = read_image(args.image)
    d = img.data
    print(f"magic {XSIM_MAGIC.decode()} version 1 width {img.width} height {img.height}")
    print(f"min {int(d.min())} max {int(d.max())} mean {float(d.mean()):.4f}")
    if args.png is not None:
        from PIL import Image

        Image.fromarray(false_color(d), "RGB").save(args.png)
        print(f"wrote {args.png}")


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, 64-bit where it matters; bit-stable output")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="scatterforge", description="Synthetic scattering images and attribute benchmarks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("generate", parents=[common], help="render a synthetic dataset")
    s.add_argument("--config", type=_existing("file"), required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, help="override master_seed")
    s.add_argument("--count", type=int, help="override image_count")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("codebook", parents=[common], help="k-means patch codebook")
    s.add_argument("--data", type=_existing("dir"), required=True)
    s.add_argument("--k", type=int, default=256)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--patches-per-image", type=int, default=100)
    s.add_argument("--max-iters", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_codebook)

    s = sub.add_parser("ae-train", parents=[common], help="train the patch autoencoder")
    s.add_argument("--data", type=_existing("dir"))
    s.add_argument("--out", type=Path)
    s.add_argument("--grad-check", action="store_true", help="run the finite-difference check and exit")
    s.add_argument("--patches", type=int, default=10000)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--c1", type=int, default=16)
    s.add_argument("--c2", type=int, default=32)
    s.add_argument("--bottleneck", type=int, default=64)
    s.add_argument("--seed", type=int, default=1)
    s.set_defaults(func=cmd_ae_train)

    s = sub.add_parser("features", parents=[common], help="SPM image features")
    s.add_argument("--data", type=_existing("dir"), required=True)
    s.add_argument("--mode", choices=("bow", "ae"), default="bow")
    s.add_argument("--model", type=_existing("file"), required=True, help="XCBK codebook or XAEM model")
    s.add_argument("--ae-assign", choices=("soft", "hard"), default="soft",
                   help="ae mode: pool softmax codes (soft) or their argmax one-hots (hard)")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", parents=[common], help="one-vs-all SVMs")
    s.add_argument("--features", type=_existing("file"), required=True)
    s.add_argument("--manifest", type=_existing("file"), required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--C", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="AP / mAP under a fold protocol")
    s.add_argument("--features", type=_existing("file"), required=True)
    s.add_argument("--manifest", type=_existing("file"), required=True)
    s.add_argument("--model", type=_existing("file"), help="XSVM whose C is reused for per-fold training")
    s.add_argument("--protocol", choices=("loro", "random"), default="loro")
    s.add_argument("--ratio", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--C", type=float, default=1.0)
    s.add_argument("--filter-single-run", action="store_true")
    s.add_argument("--report", type=Path, required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("prcurve", parents=[common], help="precision-recall CSV for one attribute")
    s.add_argument("--report-inputs", nargs=3, metavar=("FEATURES", "MANIFEST", "MODEL"), type=_existing("file"),
                   required=True)
    s.add_argument("--attribute", required=True)
    s.add_argument("--ids", type=_existing("file"), help="restrict to ids listed in this file")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_prcurve)

    s = sub.add_parser("inspect", parents=[common], help="print image header and statistics")
    s.add_argument("--image", type=_existing("file"), required=True)
    s.add_argument("--png", type=Path, help="write a false-color PNG")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"ERROR[usage] {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"ERROR[usage] {exc}", file=sys.stderr)
        return 1
    except ScatterForgeError as exc:
        print(f"ERROR[{exc.code}] {exc}", file=sys.stderr)
        return exc.exit_status
    except FloatingPointError as exc:
        print(f"ERROR[numeric] {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError) as exc:
        print(f"ERROR[data] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
