"""Raster types and the low-level image operations shared by every detector.

Conventions used throughout the package:

* arrays are indexed ``[row, col]`` i.e. ``[y, x]``; points are ``(x, y)``
  with integer pixel-centre coordinates, 0-based;
* intensities are floats in ``[0, 1]``;
* pores (and valleys) are *bright*; images with dark pores must be inverted
  on ingestion (``invert()``);
* border handling is reflect padding without edge repetition
  (``numpy.pad(mode="reflect")``, ``scipy.ndimage`` ``mode="mirror"``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Literal

import numpy as np
from PIL import Image
from scipy import ndimage

DEFAULT_DPI = 1200

PoreSource = Literal["ground_truth", "detection"]


class ImageFormatError(ValueError):
    """Raised when an image file cannot be decoded as 8-bit grayscale."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GrayImage:
    """Grayscale raster, intensities in [0, 1], shape ``(height, width)``."""

    pixels: np.ndarray
    dpi: int = DEFAULT_DPI

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"GrayImage needs a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("GrayImage intensities must be finite and within [0, 1]")
        if int(self.dpi) <= 0:
            raise ValueError(f"dpi must be positive, got {self.dpi}")
        object.__setattr__(self, "pixels", _frozen(px))
        object.__setattr__(self, "dpi", int(self.dpi))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def invert(self) -> "GrayImage":
        return GrayImage(1.0 - self.pixels, self.dpi)


@dataclass(frozen=True)
class BinaryImage:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ValueError(f"BinaryImage needs a 2-D array, got shape {b.shape}")
        object.__setattr__(self, "bits", _frozen(b))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class PoreSet:
    """Ordered, duplicate-free set of integer ``(x, y)`` pore coordinates."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    source: PoreSource = "detection"

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.size == 0:
            pts = np.zeros((0, 2), dtype=np.int64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must have shape (n, 2), got {pts.shape}")
        if not np.all(np.equal(np.round(pts), pts)):
            raise ValueError("pore coordinates must be integers")
        pts = pts.astype(np.int64)
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("PoreSet contains duplicate points")
        if self.source not in ("ground_truth", "detection"):
            raise ValueError(f"unknown PoreSet source {self.source!r}")
        object.__setattr__(self, "points", _frozen(pts))

    @classmethod
    def from_points(cls, points: Iterable[tuple[int, int]], source: PoreSource = "detection") -> "PoreSet":
        return cls(np.array(list(points), dtype=np.int64).reshape(-1, 2), source)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        for x, y in self.points:
            yield int(x), int(y)

    def as_tuples(self) -> list[tuple[int, int]]:
        return list(self)

    def sorted(self) -> "PoreSet":
        """Row-major order: by y, then x."""
        if len(self) == 0:
            return self
        order = np.lexsort((self.points[:, 0], self.points[:, 1]))
        return PoreSet(self.points[order], self.source)

    def subset(self, mask: np.ndarray) -> "PoreSet":
        return PoreSet(self.points[np.asarray(mask, dtype=bool)], self.source)

    def within(self, shape: tuple[int, int]) -> bool:
        h, w = shape
        p = self.points
        return bool(np.all((p[:, 0] >= 0) & (p[:, 0] < w) & (p[:, 1] >= 0) & (p[:, 1] < h)))


# ----------------------------------------------------------------------------- I/O

def _read_sidecar_dpi(path: Path) -> int | None:
    meta = path.with_name(path.name + ".meta")
    if not meta.exists():
        return None
    for line in meta.read_text(encoding="utf-8").splitlines():
        key, sep, value = line.partition("=")
        if sep and key.strip() == "dpi":
            return int(value.strip())
    return None


def load_image(path: str | Path, dpi: int | None = None) -> GrayImage:
    """Read an 8-bit grayscale PGM (P5) or PNG.

    dpi precedence: explicit argument, then a ``<file>.meta`` sidecar with a
    ``dpi = N`` line, then 1200.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: unreadable image ({exc})") from exc
    if mode != "L":
        raise ImageFormatError(f"{path}: expected 8-bit grayscale, got mode {mode!r}")
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageFormatError(f"{path}: zero image dimensions")
    if dpi is None:
        dpi = _read_sidecar_dpi(path) or DEFAULT_DPI
    return GrayImage(arr.astype(np.float64) / 255.0, dpi)


def to_uint8(img: GrayImage | np.ndarray) -> np.ndarray:
    px = img.pixels if isinstance(img, GrayImage) else np.asarray(img)
    return np.clip(np.rint(px * 255.0), 0, 255).astype(np.uint8)


def save_image(img: GrayImage, path: str | Path) -> None:
    """Write as PGM (P5) or PNG depending on suffix; intensities are quantised to 8 bits."""
    path = Path(path)
    fmt = {".pgm": "PPM", ".png": "PNG"}.get(path.suffix.lower())
    if fmt is None:
        raise ValueError(f"{path}: unsupported suffix, use .pgm or .png")
    Image.fromarray(to_uint8(img), mode="L").save(path, format=fmt)


# ----------------------------------------------------------------------------- binarisation

def binarize_adaptive(img: GrayImage, block: int = 15, offset: float = 0.02) -> BinaryImage:
    """Foreground where intensity exceeds the local block mean by more than ``offset``."""
    if block < 3 or block % 2 == 0:
        raise ValueError(f"block must be odd and >= 3, got {block}")
    if block > min(img.shape):
        raise ValueError(f"block {block} larger than image {img.shape}")
    px = img.pixels
    mean = ndimage.uniform_filter(px, size=block, mode="mirror")
    # slack absorbs summation round-off so constant regions stay background
    return BinaryImage(px - mean > offset + 1e-12)


# ----------------------------------------------------------------------------- thinning

def _neighbours(b: np.ndarray) -> list[np.ndarray]:
    """P2..P9 (N, NE, E, SE, S, SW, W, NW) of every pixel, zero outside."""
    p = np.pad(b, 1).astype(np.uint8)
    h, w = b.shape
    s = lambda dy, dx: p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return [s(-1, 0), s(-1, 1), s(0, 1), s(1, 1), s(1, 0), s(1, -1), s(0, -1), s(-1, -1)]


def _zs_pass(b: np.ndarray, first: bool) -> np.ndarray:
    P2, P3, P4, P5, P6, P7, P8, P9 = nb = _neighbours(b)
    B = sum(n.astype(np.int32) for n in nb)
    seq = nb + [P2]
    A = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.int32) for i in range(8))
    if first:
        c1 = (P2 * P4 * P6) == 0
        c2 = (P4 * P6 * P8) == 0
    else:
        c1 = (P2 * P4 * P8) == 0
        c2 = (P2 * P6 * P8) == 0
    return b & (B >= 2) & (B <= 6) & (A == 1) & c1 & c2


_EIGHT = np.ones((3, 3), dtype=bool)


def _keep_components(b: np.ndarray, kill: np.ndarray) -> np.ndarray:
    """Drop from ``kill`` one pixel (first in row-major order) of every
    component that would otherwise vanish, e.g. a 2x2 block."""
    lab, n = ndimage.label(b, structure=_EIGHT)
    if n == 0:
        return kill
    total = np.bincount(lab.ravel(), minlength=n + 1)
    dying = np.bincount(lab[kill], minlength=n + 1)
    gone = np.flatnonzero((total == dying) & (total > 0))
    gone = gone[gone > 0]
    if len(gone) == 0:
        return kill
    kill = kill.copy()
    flat = lab.ravel()
    first = {}
    for idx in np.flatnonzero(np.isin(flat, gone)):
        first.setdefault(flat[idx], idx)
    kill.ravel()[list(first.values())] = False
    return kill


def _is_simple(b: np.ndarray, y: int, x: int) -> bool:
    h, w = b.shape
    ring = [b[y + dy, x + dx] if 0 <= y + dy < h and 0 <= x + dx < w else False
            for dy, dx in ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))]
    a = sum(1 for i in range(8) if not ring[i] and ring[(i + 1) % 8])
    return a == 1 and sum(ring) >= 2


def _break_blocks(b: np.ndarray) -> bool:
    """Sequentially delete pixels of fully-set 2x2 blocks; returns True if any changed.

    Simple pixels (one 0->1 transition around them) go first. A block with no
    simple pixel loses its top-left pixel so the output is always 1 px wide.
    """
    changed = False
    while True:
        blocks = b[:-1, :-1] & b[1:, :-1] & b[:-1, 1:] & b[1:, 1:]
        if not blocks.any():
            return changed
        y0, x0 = map(int, np.argwhere(blocks)[0])
        cells = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
        victim = next((c for c in cells if _is_simple(b, *c)), cells[0])
        b[victim] = False
        changed = True


def thin(bin_img: BinaryImage) -> BinaryImage:
    """Zhang-Suen two-subiteration thinning, iterated to a fixpoint.

    Two fixes to the textbook scheme: a component is never erased completely
    (a 2x2 blob would otherwise vanish), and leftover 2x2 blocks are broken
    up so the result is a strict 1-px skeleton.
    """
    b = np.array(bin_img.bits, dtype=bool)
    while True:
        changed = False
        for first in (True, False):
            kill = _zs_pass(b, first)
            if kill.any():
                kill = _keep_components(b, kill)
            if kill.any():
                b &= ~kill
                changed = True
        if not changed and not _break_blocks(b):
            return BinaryImage(b)


# ----------------------------------------------------------------------------- patches

def reflect_pad(a: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(a, pad, mode="reflect") if pad > 0 else a


def extract_patch(img: GrayImage | np.ndarray, center: tuple[int, int], size: int) -> np.ndarray:
    """``size x size`` window centred on ``center=(x, y)``; reflect-padded at borders."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"patch size must be odd, got {size}")
    px = img.pixels if isinstance(img, GrayImage) else np.asarray(img)
    x, y = center
    h = size // 2
    padded = reflect_pad(px, h)
    return padded[y:y + size, x:x + size].copy()


# ----------------------------------------------------------------------------- overlay

OVERLAY_COLOR = (255, 0, 0)


def ring_offsets(radius: int) -> np.ndarray:
    """(dy, dx) offsets of a 1-px circle outline of the given radius."""
    r = int(radius)
    if r <= 0:
        return np.zeros((1, 2), dtype=np.int64)
    yy, xx = np.mgrid[-r - 1:r + 2, -r - 1:r + 2]
    d = np.hypot(yy, xx)
    sel = np.abs(d - r) < 0.5
    return np.stack([yy[sel], xx[sel]], axis=1)


def overlay(img: GrayImage, pores: PoreSet, radius: int = 5,
            color: tuple[int, int, int] = OVERLAY_COLOR) -> np.ndarray:
    """RGB uint8 rendering of ``img`` with a circle outline around each pore.

    Circles are clipped at the image border; pixels inside a ring keep their
    gray value.
    """
    g = to_uint8(img)
    rgb = np.repeat(g[:, :, None], 3, axis=2)
    if len(pores) == 0:
        return rgb
    off = ring_offsets(radius)
    ys = pores.points[:, 1][:, None] + off[None, :, 0]
    xs = pores.points[:, 0][:, None] + off[None, :, 1]
    ok = (ys >= 0) & (ys < img.height) & (xs >= 0) & (xs < img.width)
    rgb[ys[ok], xs[ok]] = color
    return rgb


def save_rgb_png(rgb: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(Path(path), format="PNG")
