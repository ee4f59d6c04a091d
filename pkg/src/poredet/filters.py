"""Filter banks, orientation estimation and the filtering-based pore detector."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import ndimage, signal

from .imagecore import DEFAULT_DPI, GrayImage, PoreSet, reflect_pad

PoreFilter = Literal["gaussian", "dog", "log", "mexican_hat"]
PORE_FILTERS = ("gaussian", "dog", "log", "mexican_hat")


@dataclass(frozen=True)
class Kernel:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    h = size // 2
    y, x = np.mgrid[-h:h + 1, -h:h + 1].astype(np.float64)
    return x, y


def _default_size(sigma: float, k: float = 3.0) -> int:
    return 2 * int(math.ceil(k * sigma)) + 1


def _check_sigma(sigma: float) -> None:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")


def gaussian_kernel(sigma: float, size: int | None = None) -> Kernel:
    _check_sigma(sigma)
    x, y = _grid(size or _default_size(sigma))
    w = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return Kernel(w / w.sum())


def dog_kernel(sigma1: float, sigma2: float, size: int | None = None) -> Kernel:
    _check_sigma(sigma1)
    if not sigma1 < sigma2:
        raise ValueError(f"DoG needs sigma1 < sigma2, got {sigma1}, {sigma2}")
    size = size or _default_size(sigma2)
    w = gaussian_kernel(sigma1, size).weights - gaussian_kernel(sigma2, size).weights
    return Kernel(w - w.mean())


def log_kernel(sigma: float, size: int | None = None) -> Kernel:
    """Negated Laplacian of Gaussian (bright blobs respond positively), zero sum."""
    _check_sigma(sigma)
    x, y = _grid(size or _default_size(sigma, 4.0))
    r2 = (x * x + y * y) / (2 * sigma * sigma)
    w = -(r2 - 1.0) * np.exp(-r2) / (math.pi * sigma ** 4)
    return Kernel(w - w.mean())


def mexican_hat_kernel(sigma: float, size: int | None = None) -> Kernel:
    _check_sigma(sigma)
    x, y = _grid(size or _default_size(sigma, 4.0))
    r2 = (x * x + y * y) / (2 * sigma * sigma)
    w = (1.0 - r2) * np.exp(-r2)
    return Kernel(w - w.mean())


def gabor_kernel(theta: float, wavelength: float, sigma: float, size: int | None = None) -> Kernel:
    """Even-symmetric Gabor tuned to ridges running along ``theta``.

    The cosine varies along the ridge normal ``(-sin t, cos t)``, so the
    kernel responds most to a grating whose stripes are oriented at ``theta``
    (angles measured from +x towards +y, image rows pointing down).
    """
    if not wavelength > 1:
        raise ValueError(f"wavelength must exceed 1 px, got {wavelength}")
    _check_sigma(sigma)
    x, y = _grid(size or _default_size(sigma))
    u = -x * math.sin(theta) + y * math.cos(theta)
    w = np.cos(2 * math.pi * u / wavelength) * np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return Kernel(w - w.mean())


def make_pore_kernel(name: str, sigma: float, size: int | None = None) -> Kernel:
    """Pore model by name. DoG uses ``sigma`` and ``1.6 * sigma``."""
    if name == "gaussian":
        k = gaussian_kernel(sigma, size)
        # zero-mean so flat regions do not dominate the sum with the ridge term
        return Kernel(k.weights - k.weights.mean())
    if name == "dog":
        return dog_kernel(sigma, 1.6 * sigma, size)
    if name == "log":
        return log_kernel(sigma, size)
    if name == "mexican_hat":
        return mexican_hat_kernel(sigma, size)
    raise ValueError(f"unknown pore filter {name!r}; choose from {PORE_FILTERS}")


# ----------------------------------------------------------------------------- convolution

def _as_array(img: GrayImage | np.ndarray) -> np.ndarray:
    return img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)


def convolve(img: GrayImage | np.ndarray, k: Kernel) -> np.ndarray:
    """True 2-D convolution (kernel flipped), same output size, reflect padding."""
    px = _as_array(img)
    if k.size > min(px.shape):
        raise ValueError(f"kernel of size {k.size} larger than image {px.shape}")
    return ndimage.convolve(px, k.weights, mode="mirror")


def fft_convolve(px: np.ndarray, k: Kernel) -> np.ndarray:
    """Same result as :func:`convolve`, faster for large kernels."""
    h = k.size // 2
    if k.size > min(px.shape):
        raise ValueError(f"kernel of size {k.size} larger than image {px.shape}")
    return signal.fftconvolve(reflect_pad(px, h), k.weights, mode="valid")


# ----------------------------------------------------------------------------- orientation

@dataclass(frozen=True)
class OrientationField:
    """Per-block ridge orientation in [0, pi)."""

    block: int
    angles: np.ndarray
    coherence: np.ndarray
    low_coherence: np.ndarray

    def per_pixel(self, shape: tuple[int, int]) -> np.ndarray:
        reps = np.kron(self.angles, np.ones((self.block, self.block)))
        return reps[: shape[0], : shape[1]]


def estimate_orientation(img: GrayImage | np.ndarray, block: int = 16, smooth: float = 1.0,
                         min_coherence: float = 1e-3) -> OrientationField:
    """Structure-tensor orientation: perpendicular to the dominant gradient of each block.

    ``smooth`` is the std (in blocks) of the Gaussian applied to the doubled-angle
    vector field; 0 disables it. Blocks without gradient energy get angle 0
    and are flagged low-coherence.
    """
    if block < 8:
        raise ValueError(f"orientation block must be >= 8, got {block}")
    px = _as_array(img)
    gx = ndimage.sobel(px, axis=1, mode="mirror")
    gy = ndimage.sobel(px, axis=0, mode="mirror")
    h, w = px.shape
    nby, nbx = -(-h // block), -(-w // block)
    ph, pw = nby * block - h, nbx * block - w

    def block_sum(a):
        a = np.pad(a, ((0, ph), (0, pw)))
        return a.reshape(nby, block, nbx, block).sum(axis=(1, 3))

    gxx, gyy, gxy = block_sum(gx * gx), block_sum(gy * gy), block_sum(gx * gy)
    energy = gxx + gyy
    vx, vy = gxx - gyy, 2 * gxy
    mag = np.hypot(vx, vy)
    coherence = np.where(energy > 1e-12, mag / np.maximum(energy, 1e-300), 0.0)
    low = (energy <= 1e-12) | (coherence < min_coherence)
    if smooth > 0:
        vx = ndimage.gaussian_filter(vx, smooth, mode="nearest")
        vy = ndimage.gaussian_filter(vy, smooth, mode="nearest")
    grad_angle = 0.5 * np.arctan2(vy, vx)
    angles = np.mod(grad_angle + math.pi / 2, math.pi)
    angles = np.where(low, 0.0, angles)
    # mod can return pi for tiny negative inputs
    angles = np.where(angles >= math.pi, 0.0, angles)
    return OrientationField(block, angles, coherence, low)


# ----------------------------------------------------------------------------- enhancement

def default_wavelength(dpi: int) -> float:
    return 10.0 * dpi / DEFAULT_DPI


def gabor_enhance(img: GrayImage, wavelength: float | None = None, sigma: float | None = None,
                  block: int = 16, n_angles: int = 16) -> np.ndarray:
    """Orientation-adaptive Gabor response.

    Each pixel takes the response of the bank kernel closest to its block's
    orientation. Positive on bright valleys, negative on dark ridges.
    """
    wavelength = wavelength or default_wavelength(img.dpi)
    sigma = sigma or 4.0 * img.dpi / DEFAULT_DPI
    size = min(_default_size(sigma), min(img.shape) - (1 - min(img.shape) % 2))
    field = estimate_orientation(img, block)
    bins = np.rint(field.per_pixel(img.shape) / math.pi * n_angles).astype(int) % n_angles
    out = np.zeros(img.shape)
    for i in range(n_angles):
        sel = bins == i
        if sel.any():
            k = gabor_kernel(i * math.pi / n_angles, wavelength, sigma, size)
            out[sel] = fft_convolve(img.pixels, k)[sel]
    return out


def ridge_map(img: GrayImage, wavelength: float | None = None, sigma: float | None = None) -> np.ndarray:
    """Boolean ridge mask (dark stripes) from the sign of the Gabor response."""
    return gabor_enhance(img, wavelength, sigma) < 0


def _zscore(a: np.ndarray) -> np.ndarray:
    s = a.std()
    return (a - a.mean()) / s if s > 1e-12 else np.zeros_like(a)


# ----------------------------------------------------------------------------- detector

@dataclass(frozen=True)
class FilterParams:
    """Parameters of :func:`filter_detect`; ``None`` means derived from dpi."""

    sigma: float | None = None
    size: int | None = None
    min_area: float | None = None
    max_area: float | None = None
    ridge_weight: float = 1.0
    wavelength: float | None = None
    gabor_sigma: float | None = None


def pore_response(img: GrayImage, pore_filter: str = "mexican_hat", params: FilterParams | None = None) -> np.ndarray:
    """Sum of the z-scored pore-filter response and the z-scored ridge strength."""
    p = params or FilterParams()
    scale = img.dpi / DEFAULT_DPI
    sigma = p.sigma or 1.5 * scale
    k = make_pore_kernel(pore_filter, sigma, p.size)
    pores = fft_convolve(img.pixels, k)
    ridges = -gabor_enhance(img, p.wavelength, p.gabor_sigma)
    return _zscore(pores) + p.ridge_weight * _zscore(ridges)


def blob_centroids(mask: np.ndarray, min_area: float, max_area: float) -> PoreSet:
    """Centroid (rounded) of each 8-connected component with area in the gate."""
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return PoreSet()
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(mask, labels, idx)
    keep = idx[(areas >= min_area) & (areas <= max_area)]
    if len(keep) == 0:
        return PoreSet()
    cy_cx = np.array(ndimage.center_of_mass(mask, labels, keep)).reshape(-1, 2)
    pts = np.rint(cy_cx[:, ::-1]).astype(np.int64)
    pts = np.unique(pts, axis=0)
    return PoreSet(pts).sorted()


def filter_detect(img: GrayImage, pore_filter: str = "mexican_hat", params: FilterParams | None = None,
                  threshold: float = 0.95) -> PoreSet:
    """Gabor-plus-pore-filter response, quantile thresholding and blob localisation."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold is a quantile in (0, 1), got {threshold}")
    p = params or FilterParams()
    scale2 = (img.dpi / DEFAULT_DPI) ** 2
    min_area = p.min_area if p.min_area is not None else 3.0 * scale2
    max_area = p.max_area if p.max_area is not None else 120.0 * scale2
    resp = pore_response(img, pore_filter, p)
    cut = np.quantile(resp, threshold)
    return blob_centroids(resp > cut, min_area, max_area)
