"""Synthetic end-to-end benchmark: FCN baseline vs handcrafted detectors.

Generates 20 synthetic 320x240 images at 1200 dpi (seed 42), splits them
14/2/4, trains the FCN (patch 17, r=5, no pooling, no residual) for each
seed and label type, and reports micro F on the 4 test images next to the
DPF and filter detectors.

Usage: python scripts/benchmark.py --out runs/bench [--seeds 0 1 2] [--labels soft hard]
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from poredet.datasets import SyntheticParams, load_manifest, make_splits, write_synthetic_dataset
from poredet.evaluation import evaluate_dataset
from poredet.fcn import FcnConfig, detect, save_checkpoint, train
from poredet.filters import filter_detect
from poredet.handcrafted import dpf_detect

BENCH_SEED = 42


def benchmark_config(seed: int, soft: bool, channels: int = 16, epoch_positives: int = 8000) -> FcnConfig:
    return FcnConfig(patch_size=17, pore_radius=5, use_pooling=False, use_residual=False, soft_labels=soft,
                     channels=(channels,) * 7, epoch_positives=epoch_positives, patience=5, max_epochs=30,
                     seed=seed)


def prepare(root: Path):
    data = root / "data"
    if not (data / "manifest.txt").exists():
        write_synthetic_dataset(data, 20, SyntheticParams(width=320, height=240, dpi=1200, seed=BENCH_SEED))
    manifest = load_manifest(data, strict=True)
    (split,) = make_splits(manifest, "counts:14,2,4", seed=BENCH_SEED, out_dir=root / "split")
    load = {s: manifest.load(s) for s in manifest.stems}
    return split, load


def score(detector, stems, load) -> float:
    dets = {s: detector(load[s][0]) for s in stems}
    return evaluate_dataset(dets, {s: load[s][1] for s in stems}).aggregate.f


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--labels", nargs="+", choices=("soft", "hard"), default=["soft", "hard"])
    ap.add_argument("--channels", type=int, default=16, help="width of every hidden layer")
    ap.add_argument("--epoch-positives", type=int, default=8000)
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    split, load = prepare(args.out)
    tr = [load[s] for s in split.train]
    va = [load[s] for s in split.val]
    results = {"dpf": score(dpf_detect, split.test, load),
               "filter": score(filter_detect, split.test, load)}
    print(f"dpf     F = {results['dpf']:.2f}")
    print(f"filter  F = {results['filter']:.2f}")
    for label in args.labels:
        fs = []
        for seed in args.seeds:
            cfg = benchmark_config(seed, label == "soft", args.channels, args.epoch_positives)
            t = time.perf_counter()
            res = train(tr, va, cfg)
            f = score(lambda img: detect(res.model, img), split.test, load)
            fs.append(f)
            save_checkpoint(res.model, args.out / f"fcn_{label}_{seed}.pdet")
            print(f"fcn {label:4s} seed {seed}: F = {f:.2f} (best epoch {res.best_epoch}, "
                  f"{len(res.log)} epochs, {time.perf_counter() - t:.0f} s)")
        results[f"fcn_{label}"] = fs
        print(f"fcn {label:4s} mean F = {np.mean(fs):.2f}")
    (args.out / "results.json").write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
