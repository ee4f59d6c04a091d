"""Handcrafted pore detectors: skeleton tracing, circle transition counting
(DPF) and the ridge-mask post-filter.

The published descriptions of these methods are one sentence each, so the
following details are fixed here:

* endpoints / bifurcations use the crossing number of the 8-neighbourhood
  (CN == 1 / CN >= 3), which coincides with "one neighbour" / ">= 3
  neighbours" on clean 1-px skeletons and is robust to staircase corners;
* a closed pore is reported at the midpoint of its endpoint-to-endpoint
  trace, an open pore at the endpoint the trace started from;
* DPF perimeters are ordered clockwise starting east; a pixel is a closed
  candidate when the escape circle (or the next larger one) is all dark, an
  open candidate when it has exactly two transitions and the bright arc
  covers at most 40% of the circle (this rejects pixels on the edge of a
  valley);
* DPF candidates closer than 2 px are merged, the cluster centroid is emitted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .filters import gabor_enhance, _zscore
from .imagecore import DEFAULT_DPI, BinaryImage, GrayImage, PoreSet, binarize_adaptive, thin

# 8-neighbourhood in circular order starting north: (dy, dx)
_RING = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


@dataclass(frozen=True)
class TraceResult:
    origin: tuple[int, int]
    terminal: Literal["endpoint", "bifurcation", "exhausted"]
    length: int
    path: tuple[tuple[int, int], ...] = ()


def _scale(value: float, dpi: int) -> float:
    return value * dpi / DEFAULT_DPI


# ----------------------------------------------------------------------------- skeleton

def crossing_number(skel: np.ndarray) -> np.ndarray:
    """Half the number of 0/1 changes around each pixel's 8-neighbourhood."""
    p = np.pad(skel.astype(np.int8), 1)
    h, w = skel.shape
    nb = [p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in _RING]
    cn = sum(np.abs(nb[i] - nb[(i + 1) % 8]) for i in range(8)) // 2
    return np.where(skel, cn, 0)


def _neighbour_count(skel: np.ndarray) -> np.ndarray:
    n = ndimage.convolve(skel.astype(np.int32), np.ones((3, 3), dtype=np.int32), mode="constant") - skel
    return np.where(skel, n, 0)


def _trace(skel: np.ndarray, cn: np.ndarray, start: tuple[int, int], max_trace: int,
           blocked: np.ndarray) -> TraceResult:
    """Walk from an endpoint ``start=(y, x)`` along the skeleton."""
    h, w = skel.shape
    path = [start]
    on_path = {start}
    cur = start
    while True:
        if len(path) - 1 >= max_trace:
            return TraceResult((start[1], start[0]), "exhausted", len(path) - 1, tuple(path))
        y, x = cur
        cands = []
        for dy, dx in _RING:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and skel[ny, nx] and (ny, nx) not in on_path:
                cands.append((abs(dy) + abs(dx), (ny, nx)))
        if not cands:
            return TraceResult((start[1], start[0]), "exhausted", len(path) - 1, tuple(path))
        # 4-neighbours first: a skipped diagonal is reached on the next step anyway
        cands.sort(key=lambda c: c[0])
        nxt = cands[0][1]
        if blocked[nxt]:
            return TraceResult((start[1], start[0]), "exhausted", len(path), tuple(path))
        path.append(nxt)
        on_path.add(nxt)
        cur = nxt
        if cn[nxt] >= 3:
            return TraceResult((start[1], start[0]), "bifurcation", len(path) - 1, tuple(path))
        if cn[nxt] == 1:
            return TraceResult((start[1], start[0]), "endpoint", len(path) - 1, tuple(path))


def skeleton_pores(skel: BinaryImage | np.ndarray, max_trace: int = 12) -> PoreSet:
    """Pores from a 1-px skeleton: endpoint->endpoint (closed), endpoint->bifurcation (open)."""
    if max_trace < 2:
        raise ValueError(f"max_trace must be >= 2, got {max_trace}")
    s = np.asarray(skel.bits if isinstance(skel, BinaryImage) else skel, dtype=bool)
    cn = crossing_number(s)
    visited = np.zeros_like(s)
    found: list[tuple[int, int]] = []

    # isolated skeleton pixels are degenerate closed pores
    for y, x in zip(*np.nonzero(s & (_neighbour_count(s) == 0))):
        found.append((int(x), int(y)))

    for y, x in zip(*np.nonzero(s & (cn == 1))):
        start = (int(y), int(x))
        if visited[start]:
            continue
        res = _trace(s, cn, start, max_trace, visited)
        if res.terminal == "endpoint":
            mid = res.path[len(res.path) // 2]
            found.append((mid[1], mid[0]))
            for p in res.path:
                visited[p] = True
        elif res.terminal == "bifurcation":
            found.append((start[1], start[0]))
            for p in res.path[:-1]:
                visited[p] = True
    if not found:
        return PoreSet()
    return PoreSet(np.unique(np.array(found, dtype=np.int64), axis=0)).sorted()


def enhance_for_skeleton(img: GrayImage, gabor_weight: float = 0.5) -> GrayImage:
    """Blend the lightly smoothed image with its Gabor valley response, rescaled to [0, 1].

    The Gabor term makes valleys continuous; the image term keeps the pores.
    """
    smooth = ndimage.gaussian_filter(img.pixels, 0.7, mode="mirror")
    mix = (1 - gabor_weight) * _zscore(smooth) + gabor_weight * _zscore(gabor_enhance(img))
    lo, hi = mix.min(), mix.max()
    if hi - lo < 1e-12:
        return GrayImage(np.zeros(img.shape), img.dpi)
    return GrayImage((mix - lo) / (hi - lo), img.dpi)


def skeleton_detect(img: GrayImage, max_trace: int | None = None, block: int = 15,
                    offset: float = 0.02) -> PoreSet:
    """Gabor enhancement, binarisation, thinning and endpoint tracing."""
    max_trace = max_trace if max_trace is not None else int(round(_scale(12, img.dpi)))
    if max_trace < 2:
        raise ValueError(f"max_trace must be >= 2, got {max_trace}")
    block = min(block, min(img.shape) - (1 - min(img.shape) % 2))
    if block < 3:
        return PoreSet()
    enhanced = enhance_for_skeleton(img)
    binary = binarize_adaptive(enhanced, block, offset)
    return skeleton_pores(thin(binary), max_trace)


# ----------------------------------------------------------------------------- DPF

def circle_perimeter(r: int) -> np.ndarray:
    """Midpoint-circle (Bresenham) perimeter, (dy, dx), ordered clockwise from east."""
    if r < 1:
        raise ValueError(f"radius must be >= 1, got {r}")
    pts = set()
    x, y, d = r, 0, 1 - r
    while x >= y:
        for a, b in ((x, y), (y, x), (-y, x), (-x, y), (-x, -y), (-y, -x), (y, -x), (x, -y)):
            pts.add((b, a))
        y += 1
        if d < 0:
            d += 2 * y + 1
        else:
            x -= 1
            d += 2 * (y - x) + 1
    arr = np.array(sorted(pts), dtype=np.int64)
    # rows grow downwards, so increasing atan2(dy, dx) is clockwise on screen
    ang = np.mod(np.arctan2(arr[:, 0], arr[:, 1]), 2 * math.pi)
    return arr[np.argsort(ang, kind="stable")]


def dpf_candidates(binary: np.ndarray, r_min: int, r_max: int, max_open_arc: float = 0.4,
                   slack: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Closed and open candidate masks of the transition-counting rule.

    For each bright pixel the circle grows from ``r_min`` until its perimeter
    is no longer fully bright (the escape radius). That radius and up to
    ``slack`` larger ones (capped at ``r_max``) are examined in order: a fully
    dark perimeter marks a closed candidate, exactly two transitions with a
    bright arc of at most ``max_open_arc`` of the circle an open one. The
    slack tolerates blob outlines that do not follow a digital circle.
    """
    if not 1 <= r_min <= r_max:
        raise ValueError(f"need 1 <= r_min <= r_max, got {r_min}, {r_max}")
    if slack < 0:
        raise ValueError(f"slack must be >= 0, got {slack}")
    b = np.asarray(binary, dtype=bool)
    h, w = b.shape
    ys, xs = np.nonzero(b)
    closed = np.zeros_like(b)
    opened = np.zeros_like(b)
    if len(ys) == 0:
        return closed, opened
    pad = r_max
    padded = np.pad(b, pad, mode="reflect") if min(h, w) > pad else np.pad(b, pad)
    # 0 = still growing, 1 = escaped and being examined, 2 = decided
    state = np.zeros(len(ys), dtype=np.int8)
    left = np.full(len(ys), slack + 1)
    for r in range(r_min, r_max + 1):
        idx = np.nonzero(state < 2)[0]
        if len(idx) == 0:
            break
        per = circle_perimeter(r)
        vals = padded[ys[idx, None] + pad + per[None, :, 0], xs[idx, None] + pad + per[None, :, 1]]
        full = vals.all(axis=1)
        look = idx[~full | (state[idx] == 1)]
        v = vals[~full | (state[idx] == 1)]
        state[look] = 1
        trans = (v != np.roll(v, -1, axis=1)).sum(axis=1)
        bright_frac = v.mean(axis=1)
        c = bright_frac == 0
        o = (trans == 2) & (bright_frac <= max_open_arc)
        closed[ys[look[c]], xs[look[c]]] = True
        opened[ys[look[o]], xs[look[o]]] = True
        left[look] -= 1
        state[look[c | o | (left[look] == 0)]] = 2
    return closed, opened


def cluster_centroids(mask: np.ndarray, link: float = 2.0) -> PoreSet:
    """Single-linkage clusters of mask pixels (distance <= link); one point per cluster.

    The rounded centroid is used when it is itself a mask pixel, otherwise the
    cluster pixel nearest to the centroid.
    """
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return PoreSet()
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    pairs = cKDTree(pts).query_pairs(link + 1e-9, output_type="ndarray")
    n = len(pts)
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else coo_matrix((n, n))
    ncomp, lab = connected_components(g, directed=False)
    out = []
    for c in range(ncomp):
        member = pts[lab == c]
        cen = member.mean(axis=0)
        p = np.rint(cen).astype(np.int64)
        if not mask[p[1], p[0]]:
            p = member[np.argmin(((member - cen) ** 2).sum(axis=1))].astype(np.int64)
        out.append(p)
    return PoreSet(np.unique(np.array(out), axis=0)).sorted()


def dpf_binarize(img: GrayImage, block: int = 15, offset: float = 0.02) -> BinaryImage:
    block = min(block, min(img.shape) - (1 - min(img.shape) % 2))
    if block < 3:
        return BinaryImage(np.zeros(img.shape, dtype=bool))
    smooth = GrayImage(np.clip(ndimage.gaussian_filter(img.pixels, 1.0, mode="mirror"), 0, 1), img.dpi)
    return binarize_adaptive(smooth, block, offset)


def dpf_detect(img: GrayImage, r_min: int | None = None, r_max: int | None = None,
               block: int = 15, offset: float = 0.05, max_open_arc: float = 0.4) -> PoreSet:
    """Adaptive-circle transition-counting detector."""
    r_min = r_min if r_min is not None else max(1, int(round(_scale(2, img.dpi))))
    r_max = r_max if r_max is not None else max(r_min, int(round(_scale(6, img.dpi))))
    if not 1 <= r_min <= r_max:
        raise ValueError(f"need 1 <= r_min <= r_max, got {r_min}, {r_max}")
    binary = dpf_binarize(img, block, offset)
    closed, opened = dpf_candidates(binary.bits, r_min, r_max, max_open_arc)
    return cluster_centroids(closed | opened)


# ----------------------------------------------------------------------------- ridge mask

def ridge_mask_filter(pores: PoreSet, img: GrayImage, dilation: int = 2) -> PoreSet:
    """Keep only pores lying on the (dilated) Gabor ridge map."""
    if dilation < 0:
        raise ValueError(f"dilation must be >= 0, got {dilation}")
    if len(pores) == 0:
        return pores
    ridges = gabor_enhance(img) < 0
    if dilation > 0:
        yy, xx = np.mgrid[-dilation:dilation + 1, -dilation:dilation + 1]
        ridges = ndimage.binary_dilation(ridges, structure=(yy ** 2 + xx ** 2) <= dilation ** 2)
    keep = ridges[pores.points[:, 1], pores.points[:, 0]]
    return pores.subset(keep)
