"""Annotation and manifest formats, split files, and a synthetic fingerprint generator.

Annotation files are UTF-8 text with one pore per line, ``<x> <y>``
(0-based column and row of the pixel centre). ``#`` lines and blank lines are
ignored on input; output is sorted row-major with LF endings.

Dataset layout::

    root/
      manifest.txt          # key = value: dpi, name, subset.<stem>
      images/<stem>.png     # or .pgm
      annotations/<stem>.txt
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import fft, ndimage

from .evaluation import SplitLists, get_protocol, instantiate_protocol, kfold_splits
from .imagecore import DEFAULT_DPI, GrayImage, PoreSet, load_image, save_image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm")


class AnnotationError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ----------------------------------------------------------------------------- annotations

def parse_annotations_text(text: str, source: str = "<text>") -> PoreSet:
    pts = []
    seen = set()
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 2:
            raise AnnotationError(f"{source}:{no}: expected '<x> <y>', got {line!r}")
        try:
            x, y = int(parts[0], 10), int(parts[1], 10)
        except ValueError:
            raise AnnotationError(f"{source}:{no}: coordinates must be base-10 integers, got {line!r}") from None
        if x < 0 or y < 0:
            raise AnnotationError(f"{source}:{no}: negative coordinate in {line!r}")
        if (x, y) in seen:
            raise AnnotationError(f"{source}:{no}: duplicate point ({x}, {y})")
        seen.add((x, y))
        pts.append((x, y))
    return PoreSet.from_points(pts, "ground_truth")


def parse_annotations(path: str | Path) -> PoreSet:
    path = Path(path)
    return parse_annotations_text(path.read_text(encoding="utf-8"), str(path))


def format_annotations(pores: PoreSet) -> str:
    return "".join(f"{x} {y}\n" for x, y in pores.sorted())


def write_annotations(pores: PoreSet, path: str | Path) -> None:
    Path(path).write_bytes(format_annotations(pores).encode("utf-8"))


# ----------------------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestEntry:
    stem: str
    image_path: Path
    annotation_path: Path
    dpi: int = DEFAULT_DPI
    subset: str = "all"

    def load(self) -> tuple[GrayImage, PoreSet]:
        return load_image(self.image_path, self.dpi), parse_annotations(self.annotation_path)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]
    name: str = ""

    def __post_init__(self):
        stems = [e.stem for e in self.entries]
        if len(set(stems)) != len(stems):
            raise ManifestError("duplicate stems in manifest")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def stems(self) -> list[str]:
        return [e.stem for e in self.entries]

    def entry(self, stem: str) -> ManifestEntry:
        for e in self.entries:
            if e.stem == stem:
                return e
        raise KeyError(f"stem {stem!r} not in manifest {self.root}")

    def load(self, stem: str) -> tuple[GrayImage, PoreSet]:
        return self.entry(stem).load()

    def subsets(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for e in self.entries:
            out.setdefault(e.subset, []).append(e.stem)
        return out


def read_manifest_file(root: Path) -> dict[str, str]:
    path = root / "manifest.txt"
    if not path.exists():
        return {}
    out = {}
    for no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, sep, value = s.partition("=")
        if not sep:
            raise ManifestError(f"{path}:{no}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def load_manifest(root: str | Path, strict: bool = False, dpi: int | None = None) -> DatasetManifest:
    """Pair ``images/<stem>.(png|pgm)`` with ``annotations/<stem>.txt``.

    Images without annotations are skipped with a warning, or raise in strict
    mode. ``dpi`` overrides the manifest value (default 1200).
    """
    root = Path(root)
    img_dir, ann_dir = root / "images", root / "annotations"
    if not img_dir.is_dir() or not ann_dir.is_dir():
        raise ManifestError(f"{root} must contain images/ and annotations/ directories")
    meta = read_manifest_file(root)
    try:
        base_dpi = int(dpi if dpi is not None else meta.get("dpi", DEFAULT_DPI))
    except ValueError:
        raise ManifestError(f"invalid dpi in {root / 'manifest.txt'}: {meta.get('dpi')!r}") from None
    entries = []
    seen = set()
    for img in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        stem = img.stem
        if stem in seen:
            raise ManifestError(f"two images share the stem {stem!r}")
        seen.add(stem)
        ann = ann_dir / f"{stem}.txt"
        if not ann.exists():
            if strict:
                raise ManifestError(f"image {img.name} has no annotation file {ann}")
            log.warning("skipping %s: no annotation file", img.name)
            continue
        entries.append(ManifestEntry(stem, img, ann, base_dpi, meta.get(f"subset.{stem}", "all")))
    return DatasetManifest(root, tuple(entries), meta.get("name", ""))


def write_manifest_file(root: Path, dpi: int, name: str = "", subsets: dict[str, str] | None = None) -> None:
    lines = [f"name = {name}", f"dpi = {dpi}"] if name else [f"dpi = {dpi}"]
    for stem, sub in sorted((subsets or {}).items()):
        lines.append(f"subset.{stem} = {sub}")
    (root / "manifest.txt").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


# ----------------------------------------------------------------------------- splits

def _read_list(path: Path) -> tuple[str, ...]:
    return tuple(s.strip() for s in path.read_text(encoding="utf-8").splitlines() if s.strip())


def read_split_file(path: str | Path) -> tuple[str, ...]:
    return _read_list(Path(path))


def write_split_files(split: SplitLists, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        stems = getattr(split, name)
        (out / f"{name}.txt").write_bytes("".join(f"{s}\n" for s in stems).encode("utf-8"))


def make_splits(manifest: DatasetManifest, spec: str | SplitLists, seed: int = 0,
                out_dir: str | Path | None = None) -> list[SplitLists]:
    """Build split lists and (optionally) write them.

    ``spec`` is ``protocol:<ID>``, ``kfold:<k>``, ``counts:<train>,<val>,<test>``
    or an explicit :class:`SplitLists`. k-fold writes ``fold_<i>/`` subdirectories.
    """
    stems = manifest.stems
    if isinstance(spec, SplitLists):
        unknown = set(spec.train + spec.val + spec.test) - set(stems)
        if unknown:
            raise ManifestError(f"split names unknown stems: {sorted(unknown)}")
        splits = [spec]
    else:
        kind, _, arg = spec.partition(":")
        if kind == "protocol":
            splits = [instantiate_protocol(get_protocol(arg), manifest.subsets(), seed)]
        elif kind == "kfold":
            splits = kfold_splits(stems, int(arg), seed)
        elif kind == "counts":
            n = [int(v) for v in arg.split(",")]
            if len(n) != 3 or min(n) < 0:
                raise ValueError(f"counts spec needs three non-negative integers, got {arg!r}")
            if sum(n) > len(stems):
                raise ManifestError(f"split needs {sum(n)} images, manifest has {len(stems)}")
            order = [stems[i] for i in np.random.default_rng(seed).permutation(len(stems))]
            splits = [SplitLists(tuple(order[:n[0]]), tuple(order[n[0]:n[0] + n[1]]),
                                 tuple(order[n[0] + n[1]:sum(n)]))]
        else:
            raise ValueError(f"unknown split spec {spec!r}")
    if out_dir is not None:
        if len(splits) == 1 and not (isinstance(spec, str) and spec.startswith("kfold")):
            write_split_files(splits[0], out_dir)
        else:
            for i, sp in enumerate(splits):
                write_split_files(sp, Path(out_dir) / f"fold_{i}")
    return splits


# ----------------------------------------------------------------------------- synthetic data

MICRONS_PER_INCH = 25400.0
PORE_DIAMETER_UM = (88.0, 220.0)


def pore_diameter_px(dpi: int) -> tuple[float, float]:
    """Pore diameter range in pixels for the 88-220 micron size range."""
    return tuple(d * dpi / MICRONS_PER_INCH for d in PORE_DIAMETER_UM)


@dataclass(frozen=True)
class SyntheticParams:
    """Generator settings. ``None`` fields are derived from ``dpi``.

    ``smoothness`` is the correlation length (px) of the orientation field,
    ``orientation_spread`` its amplitude (radians), ``pore_density`` the
    number of pores per pixel of ridge centreline, ``radius_range`` the pore
    blob radius range (px).
    """

    width: int = 320
    height: int = 240
    dpi: int = DEFAULT_DPI
    ridge_period: float | None = None
    smoothness: float = 60.0
    orientation_spread: float = 0.6
    pore_density: float = 1 / 30
    radius_range: tuple[float, float] | None = None
    open_fraction: float = 0.3
    noise_sigma: float = 0.05
    seed: int = 0

    @property
    def period(self) -> float:
        return self.ridge_period if self.ridge_period is not None else 10.0 * self.dpi / DEFAULT_DPI

    @property
    def radii(self) -> tuple[float, float]:
        if self.radius_range is not None:
            return tuple(self.radius_range)
        lo, hi = (d / 2 for d in pore_diameter_px(self.dpi))
        return max(1.0, lo), min(hi, self.period / 2)

    def validate(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ValueError("synthetic images must be at least 16x16")
        if not self.period > 2:
            raise ValueError(f"ridge period must exceed 2 px, got {self.period}")
        lo, hi = self.radii
        if not 1 <= lo <= hi <= self.period / 2:
            raise ValueError(f"radius range {self.radii} must lie within [1, period/2]")
        if not 0 <= self.open_fraction <= 1:
            raise ValueError("open_fraction must be within [0, 1]")
        if self.pore_density < 0 or self.noise_sigma < 0:
            raise ValueError("pore_density and noise_sigma must be non-negative")


@dataclass
class SyntheticSample:
    image: GrayImage
    pores: PoreSet
    ridge_mask: np.ndarray = field(repr=False)
    clean: np.ndarray = field(repr=False)
    is_open: np.ndarray = field(repr=False)


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    m = np.abs(f).max()
    return f / m if m > 0 else f


def _poisson_neumann(rhs: np.ndarray) -> np.ndarray:
    """Solve the 5-point Laplacian = rhs with Neumann boundaries (DCT-II)."""
    h, w = rhs.shape
    r = fft.dctn(rhs, type=2, norm="ortho")
    ky = 2 * np.cos(np.pi * np.arange(h) / h) - 2
    kx = 2 * np.cos(np.pi * np.arange(w) / w) - 2
    den = ky[:, None] + kx[None, :]
    den[0, 0] = 1.0
    r = r / den
    r[0, 0] = 0.0
    return fft.idctn(r, type=2, norm="ortho")


def ridge_phase(p: SyntheticParams, rng: np.random.Generator) -> np.ndarray:
    """Phase whose gradient follows a smooth random orientation field (period ``p.period``)."""
    margin = int(2 * p.smoothness)
    H, W = p.height + 2 * margin, p.width + 2 * margin
    theta0 = rng.uniform(0, math.pi)
    theta = theta0 + p.orientation_spread * _smooth_field(rng, (H, W), p.smoothness)
    k = 2 * math.pi / p.period
    kx, ky = -k * np.sin(theta), k * np.cos(theta)
    kx0, ky0 = -k * math.sin(theta0), k * math.cos(theta0)
    div = np.gradient(kx - kx0, axis=1) + np.gradient(ky - ky0, axis=0)
    psi = _poisson_neumann(div)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    phi = kx0 * xx + ky0 * yy + psi + rng.uniform(0, 2 * math.pi)
    return phi[margin:margin + p.height, margin:margin + p.width]


def _wrap(a: np.ndarray) -> np.ndarray:
    return (a + math.pi) % (2 * math.pi) - math.pi


def synthesize(p: SyntheticParams, max_tries: int | None = None) -> SyntheticSample:
    """Render a synthetic fingerprint with exact pore ground truth.

    Dark ridges, bright valleys and bright pore blobs. Closed pores sit on the
    ridge centreline, open pores are shifted towards a ridge edge. Planted
    pores are pairwise farther apart than twice the maximum radius.
    """
    p.validate()
    rng = np.random.default_rng(p.seed)
    phi = ridge_phase(p, rng)
    ridge = np.sin(phi) > 0
    T = p.period
    valley_level, ridge_level = 0.82, 0.22
    soft = ndimage.gaussian_filter(ridge.astype(np.float64), 0.06 * T, mode="mirror")
    clean = valley_level + (ridge_level - valley_level) * soft

    lo, hi = p.radii
    sep = 2 * hi
    border = int(math.ceil(hi)) + 1
    rel = _wrap(phi - math.pi / 2)
    centre = np.abs(rel) < math.pi / T
    centre[:border] = centre[-border:] = False
    centre[:, :border] = centre[:, -border:] = False
    cy, cx = np.nonzero(centre)
    target = int(round(p.pore_density * len(cy)))
    gy, gx = np.gradient(phi)
    gn = np.hypot(gx, gy) + 1e-12
    blocked = np.zeros(ridge.shape, dtype=bool)
    r_block = int(math.floor(sep))
    oy, ox = np.mgrid[-r_block:r_block + 1, -r_block:r_block + 1]
    disc = (oy ** 2 + ox ** 2) <= sep ** 2
    oy, ox = oy[disc], ox[disc]
    h, w = ridge.shape
    placed, opened, radii = [], [], []
    order = rng.permutation(len(cy))
    tries = 0
    limit = max_tries if max_tries is not None else len(order)
    for i in order:
        if len(placed) >= target:
            break
        tries += 1
        if tries > limit:
            break
        y, x = cy[i], cx[i]
        is_open = rng.random() < p.open_fraction
        if is_open:
            side = 1 if rng.random() < 0.5 else -1
            shift = side * 0.2 * T
            ny, nx = gy[y, x] / gn[y, x], gx[y, x] / gn[y, x]
            y, x = int(round(y + shift * ny)), int(round(x + shift * nx))
        if not (border <= y < h - border and border <= x < w - border):
            continue
        if blocked[y, x] or not ridge[y, x]:
            continue
        placed.append((x, y))
        opened.append(is_open)
        radii.append(rng.uniform(lo, hi))
        ys, xs = y + oy, x + ox
        ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        blocked[ys[ok], xs[ok]] = True
    if len(placed) < target:
        raise ValueError(f"could only place {len(placed)} of {target} pores with separation > {sep:.1f} px; "
                         f"lower pore_density")

    img = clean.copy()
    yy, xx = np.mgrid[0:h, 0:w]
    for (x, y), r in zip(placed, radii):
        s = r / 2
        y0, y1 = max(0, y - int(3 * r)), min(h, y + int(3 * r) + 1)
        x0, x1 = max(0, x - int(3 * r)), min(w, x + int(3 * r) + 1)
        d2 = (yy[y0:y1, x0:x1] - y) ** 2 + (xx[y0:y1, x0:x1] - x) ** 2
        blob = np.exp(-d2 / (2 * s * s))
        amp = rng.uniform(0.7, 1.0)
        patch = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = np.maximum(patch, patch + amp * blob * (valley_level - patch) / (valley_level - ridge_level))

    # smooth contrast modulation and brightness drift, then sensor noise
    contrast = 0.75 + 0.25 * _smooth_field(rng, (h, w), 2 * p.smoothness)
    drift = 0.08 * _smooth_field(rng, (h, w), 2 * p.smoothness)
    mean = img.mean()
    img = mean + (img - mean) * contrast + drift
    img = img + rng.normal(0.0, p.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    img = np.rint(img * 255) / 255
    pores = PoreSet(np.array(placed, dtype=np.int64).reshape(-1, 2), "ground_truth")
    order = np.lexsort((pores.points[:, 0], pores.points[:, 1])) if len(pores) else np.arange(0)
    return SyntheticSample(GrayImage(img, p.dpi), PoreSet(pores.points[order], "ground_truth"),
                           ridge, clean, np.array(opened, dtype=bool)[order])


def synthesize_fingerprint(p: SyntheticParams) -> tuple[GrayImage, PoreSet]:
    s = synthesize(p)
    return s.image, s.pores


def write_synthetic_dataset(out: str | Path, count: int, params: SyntheticParams,
                            name: str = "synthetic", fmt: str = "png") -> DatasetManifest:
    """Generate ``count`` images (seeds ``params.seed + i``) in manifest layout."""
    root = Path(out)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(count - 1)))
    for i in range(count):
        stem = f"synth_{i:0{width}d}"
        img, pores = synthesize_fingerprint(replace(params, seed=params.seed + i))
        save_image(img, root / "images" / f"{stem}.{fmt}")
        write_annotations(pores, root / "annotations" / f"{stem}.txt")
    write_manifest_file(root, params.dpi, name)
    return load_manifest(root, strict=True)
