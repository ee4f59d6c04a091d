"""Command-line interface: ``poredet <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .datasets import (AnnotationError, ManifestError, SyntheticParams, load_manifest, make_splits,
                       parse_annotations, read_split_file, write_annotations, write_synthetic_dataset)
from .evaluation import Criterion, crossval, evaluate_dataset
from .fcn import ConfigError, FcnConfig, detect as fcn_detect, load_checkpoint, save_checkpoint, train
from .filters import PORE_FILTERS, FilterParams, filter_detect
from .handcrafted import dpf_detect, skeleton_detect
from .imagecore import GrayImage, load_image, overlay, save_rgb_png

log = logging.getLogger("poredet")


class UsageError(Exception):
    """Bad arguments or missing inputs (exit code 2)."""


def _kv(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def load_run_config(path: str | None, overrides: list[tuple[str, str]] | None = None, **flags) -> FcnConfig:
    """Config file values, then ``--set`` overrides, then dedicated flags (non-None)."""
    text = _existing(path, "config file").read_text(encoding="utf-8") if path else ""
    values = dict(overrides or [])
    values.update({k: str(v) for k, v in flags.items() if v is not None})
    return FcnConfig.from_text(text, **values)


# ----------------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set, seed=args.seed, max_epochs=args.max_epochs)
    manifest = load_manifest(_existing(args.data, "dataset directory"), strict=args.strict)
    tr_stems = read_split_file(_existing(args.train_split, "train split file"))
    va_stems = read_split_file(_existing(args.val_split, "validation split file"))
    try:
        tr = [manifest.load(s) for s in tr_stems]
        va = [manifest.load(s) for s in va_stems]
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        for line in cfg.to_text().splitlines():
            fh.write(f"# {line}\n")
        fh.write("epoch,loss,val_f\n")

        def on_epoch(e):
            fh.write(f"{e.epoch},{e.loss:.6f},{e.val_f:.4f}\n")
            fh.flush()
            if not args.quiet:
                print(f"epoch {e.epoch:3d}  loss {e.loss:.5f}  val F {e.val_f:6.2f}", file=sys.stderr)

        res = train(tr, va, cfg, on_epoch)
    save_checkpoint(res.model, out)
    print(f"best epoch {res.best_epoch}, validation F {res.best_val_f:.2f}; wrote {out} and {log_path}")
    return 0


def _detector(args):
    m = args.method
    if m == "fcn":
        if not args.model:
            raise UsageError("--method fcn requires --model")
        model = load_checkpoint(_existing(args.model, "model checkpoint"))
        cfg = model.config
        upd = {k: v for k, v in (("prob_threshold", args.prob_threshold), ("nms_radius", args.nms_radius)) if v is not None}
        if args.ridge_filter:
            upd["ridge_filter"] = True
        cfg = replace(cfg, **upd)
        return lambda img: fcn_detect(model, img, cfg)
    if m == "skeleton":
        return lambda img: skeleton_detect(img, max_trace=args.max_trace)
    if m == "dpf":
        return lambda img: dpf_detect(img, args.r_min, args.r_max)
    params = FilterParams(sigma=args.sigma) if args.sigma is not None else None
    return lambda img: filter_detect(img, args.pore_filter, params, args.quantile)


def _load_for_detect(path: Path, args) -> GrayImage:
    img = load_image(path, args.dpi)
    return img.invert() if args.invert else img


def cmd_detect(args) -> int:
    src = _existing(args.image, "image")
    run = _detector(args)
    if src.is_dir():
        images = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".pgm"))
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.overlay:
            Path(args.overlay).mkdir(parents=True, exist_ok=True)
        for p in images:
            img = _load_for_detect(p, args)
            pores = run(img)
            write_annotations(pores, out_dir / f"{p.stem}.txt")
            if args.overlay:
                save_rgb_png(overlay(img, pores, args.radius), Path(args.overlay) / f"{p.stem}.png")
        print(f"wrote {len(images)} detection files to {out_dir}")
        return 0
    img = _load_for_detect(src, args)
    pores = run(img)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_annotations(pores, out)
    if args.overlay:
        save_rgb_png(overlay(img, pores, args.radius), args.overlay)
    print(f"{len(pores)} pores -> {out}")
    return 0


def _read_dir(d: Path) -> dict:
    return {p.stem: parse_annotations(p) for p in sorted(d.glob("*.txt"))}


def cmd_eval(args) -> int:
    pred = _read_dir(_existing(args.pred_dir, "prediction directory"))
    gt = _read_dir(_existing(args.gt_dir, "ground-truth directory"))
    if set(pred) != set(gt):
        raise UsageError(f"stem mismatch between prediction and ground truth: {sorted(set(pred) ^ set(gt))}")
    try:
        crit = Criterion.parse(args.criterion)
    except ValueError as e:
        raise UsageError(str(e)) from None
    report = evaluate_dataset(pred, gt, crit)
    text = report.to_text()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json() + "\n", encoding="utf-8")
        out.with_suffix(".txt").write_text(text, encoding="utf-8")
    print(text, end="")
    print(f"F = {report.aggregate.f:.2f}")
    return 0


def cmd_crossval(args) -> int:
    cfg = load_run_config(args.config, args.set, seed=args.seed, max_epochs=args.max_epochs)
    manifest = load_manifest(_existing(args.data, "dataset directory"), strict=args.strict)
    if args.folds < 2 or args.folds > len(manifest):
        raise UsageError(f"--folds must be within [2, {len(manifest)}], got {args.folds}")
    res = crossval(manifest.stems, manifest.load, args.folds, cfg, args.criterion, seed=cfg.seed, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, rep in enumerate(res.reports):
        (out / f"fold_{i}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        (out / f"fold_{i}.txt").write_text(rep.to_text(), encoding="utf-8")
    summary = res.summary()
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return 0


def cmd_synth(args) -> int:
    p = SyntheticParams(width=args.width, height=args.height, dpi=args.dpi, seed=args.seed,
                        ridge_period=args.period, pore_density=args.density,
                        open_fraction=args.open_fraction, noise_sigma=args.noise)
    try:
        p.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    m = write_synthetic_dataset(args.out, args.count, p, name=args.name)
    print(f"wrote {len(m)} images to {args.out}")
    return 0


def cmd_splits(args) -> int:
    manifest = load_manifest(_existing(args.data, "dataset directory"), strict=args.strict)
    splits = make_splits(manifest, args.spec, args.seed, args.out)
    for i, s in enumerate(splits):
        print(f"split {i}: train/val/test = {len(s.train)}/{len(s.val)}/{len(s.test)}")
    return 0


def cmd_overlay(args) -> int:
    img = load_image(_existing(args.image, "image"), args.dpi)
    pores = parse_annotations(_existing(args.pores, "pore file"))
    save_rgb_png(overlay(img, pores, args.radius), args.out)
    print(f"{len(pores)} circles -> {args.out}")
    return 0


def cmd_config(args) -> int:
    print(load_run_config(args.config, args.set).to_text(), end="")
    return 0


# ----------------------------------------------------------------------------- parser

def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file (FcnConfig fields)")
    p.add_argument("--set", action="append", type=_kv, default=[], metavar="KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--max-epochs", type=int, help="epoch limit (overrides config)")
    p.add_argument("--strict", action="store_true", help="fail on images without annotations")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="poredet", description="Sweat pore detection in fingerprint images.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the FCN on a manifest dataset")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset root (images/, annotations/)")
    p.add_argument("--train-split", required=True, help="file with one training stem per line")
    p.add_argument("--val-split", required=True, help="file with one validation stem per line")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV log path (default: checkpoint path with .csv)")
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="detect pores in an image or a directory of images")
    p.add_argument("--method", choices=("fcn", "skeleton", "dpf", "filter"), default="fcn")
    p.add_argument("--model", help="FCN checkpoint (method fcn)")
    p.add_argument("--image", required=True, help="image file, or a directory of .png/.pgm images")
    p.add_argument("--out", required=True, help="annotation file (or directory for directory input)")
    p.add_argument("--overlay", help="write an overlay PNG here (a directory for directory input)")
    p.add_argument("--radius", type=int, default=5, help="overlay circle radius")
    p.add_argument("--invert", action="store_true", help="invert intensities first (for dark-pore images)")
    p.add_argument("--dpi", type=int, help="override image resolution")
    p.add_argument("--prob-threshold", type=float, help="fcn: probability threshold")
    p.add_argument("--nms-radius", type=float, help="fcn: suppression radius")
    p.add_argument("--ridge-filter", action="store_true", help="fcn: drop detections off the ridge mask")
    p.add_argument("--max-trace", type=int, help="skeleton: maximum trace length (px)")
    p.add_argument("--r-min", type=int, help="dpf: smallest circle radius (px)")
    p.add_argument("--r-max", type=int, help="dpf: largest circle radius (px)")
    p.add_argument("--pore-filter", choices=PORE_FILTERS, default="mexican_hat", help="filter: kernel")
    p.add_argument("--sigma", type=float, help="filter: kernel scale (px)")
    p.add_argument("--quantile", type=float, default=0.95, help="filter: response quantile threshold")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detection files against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--criterion", default="bidirectional",
                   help="bidirectional | euclidean:<tau> | manhattan:<tau>")
    p.add_argument("--out", help="JSON report path (a .txt table is written alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="k-fold cross-validation of the FCN")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--criterion", default="bidirectional")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    p.add_argument("--out", required=True, help="output directory for fold reports and summary")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--dpi", type=int, default=1200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--period", type=float, help="ridge period in px (default 10 at 1200 dpi)")
    p.add_argument("--density", type=float, default=SyntheticParams.pore_density, help="pores per px of ridge")
    p.add_argument("--open-fraction", type=float, default=SyntheticParams.open_fraction)
    p.add_argument("--noise", type=float, default=SyntheticParams.noise_sigma)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("splits", help="write train/val/test split files")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True, help="protocol:<ID> | kfold:<k> | counts:<train>,<val>,<test>")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_splits)

    p = sub.add_parser("overlay", help="draw pore circles on an image")
    p.add_argument("--image", required=True)
    p.add_argument("--pores", required=True, help="annotation file")
    p.add_argument("--radius", type=int, default=5)
    p.add_argument("--dpi", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("config", help="print the effective FCN config")
    p.add_argument("--config")
    p.add_argument("--set", action="append", type=_kv, default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"poredet {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ManifestError, AnnotationError, ValueError, RuntimeError, KeyError, OSError) as e:
        print(f"poredet {args.command}: failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
