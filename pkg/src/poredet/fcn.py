"""Baseline fully convolutional pore detector.

A stack of valid 3x3 convolutions shrinks a ``patch_size`` window to a single
probability, so the same network applied to a reflect-padded image yields a
dense pore intensity map in one pass. Architecture rules:

* ``(patch_size - 1) / 2`` shrinking layers; with pooling every second one
  (odd index) is a stride-1 3x3 max-pool;
* ReLU after every conv except the last, sigmoid on the network output;
* layers are grouped in consecutive pairs ("blocks"); with residuals enabled,
  every block except the first and the last adds its centre-cropped input to
  its output (identity path, zero-padded when the block widens channels).
"""
from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from . import nn
from .imagecore import GrayImage, PoreSet, reflect_pad

log = logging.getLogger(__name__)

PATCH_SIZES = (13, 15, 17, 19)
PORE_RADII = (4, 5, 6)
THRESHOLD_GRID = tuple(round(0.30 + 0.05 * i, 2) for i in range(13))


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class FcnConfig:
    patch_size: int = 17
    pore_radius: int = 5
    use_pooling: bool = False
    use_residual: bool = False
    soft_labels: bool = True
    loss: str = "bce"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # hidden conv widths; empty -> min(16 * 2**i, 128)
    channels: tuple[int, ...] = ()
    lr: float = 1e-3
    batch: int = 128
    patience: int = 10
    max_epochs: int = 100
    neg_pos_ratio: float = 1.0
    # positives drawn per epoch; 0 -> every labelled pixel
    epoch_positives: int = 0
    seed: int = 0
    nms_radius: float = 0.0  # 0 -> pore_radius
    prob_threshold: float = 0.5
    tune_threshold: bool = False
    ridge_filter: bool = False
    ridge_dilation: int = 2

    def __post_init__(self):
        if self.patch_size < 9 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd and >= 9, got {self.patch_size}")
        if self.pore_radius < 1 or 2 * self.pore_radius + 1 > self.patch_size:
            raise ConfigError(f"pore_radius must be >= 1 with 2r+1 <= patch_size, got {self.pore_radius}")
        if self.loss not in ("bce", "focal"):
            raise ConfigError(f"loss must be 'bce' or 'focal', got {self.loss!r}")
        if self.focal_gamma < 0 or not 0 <= self.focal_alpha <= 1:
            raise ConfigError("focal_gamma must be >= 0 and focal_alpha within [0, 1]")
        if self.batch < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("batch, patience and max_epochs must be >= 1")
        if self.lr < 0 or self.neg_pos_ratio < 0 or self.epoch_positives < 0:
            raise ConfigError("lr, neg_pos_ratio and epoch_positives must be non-negative")
        if not 0 < self.prob_threshold < 1:
            raise ConfigError(f"prob_threshold must be in (0, 1), got {self.prob_threshold}")
        if self.nms_radius < 0 or self.ridge_dilation < 0:
            raise ConfigError("nms_radius and ridge_dilation must be non-negative")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel widths must be positive")
        if self.channels and len(self.channels) != self.n_convs - 1:
            raise ConfigError(f"channels needs {self.n_convs - 1} hidden widths, got {len(self.channels)}")

    @property
    def n_layers(self) -> int:
        return (self.patch_size - 1) // 2

    @property
    def n_convs(self) -> int:
        return math.ceil(self.n_layers / 2) if self.use_pooling else self.n_layers

    @property
    def effective_nms_radius(self) -> float:
        return self.nms_radius or float(self.pore_radius)

    def hidden_channels(self) -> tuple[int, ...]:
        if self.channels:
            return self.channels
        return tuple(min(16 * 2 ** i, 128) for i in range(self.n_convs - 1))

    # -- key = value text --------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(c) for c in v) if v else "auto"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "FcnConfig":
        values = parse_key_values(text)
        values.update({k: str(v) for k, v in overrides.items()})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "FcnConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, type(getattr(cls(), key)))
        return cls(**kwargs)


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {no}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, raw, kind):
    if not isinstance(raw, str):
        return raw
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return () if raw.lower() in ("", "auto") else tuple(int(c) for c in raw.split(","))
        return kind(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


SUGGESTED_CONFIG = FcnConfig()


# ----------------------------------------------------------------------------- architecture

@dataclass(frozen=True)
class _Op:
    kind: str  # conv | relu | pool | add
    index: int = -1


@dataclass(frozen=True)
class _Block:
    ops: tuple[_Op, ...]
    residual: bool
    in_channels: int
    out_channels: int


def _plan(cfg: FcnConfig) -> list[_Block]:
    n = cfg.n_layers
    kinds = ["pool" if cfg.use_pooling and i % 2 == 1 else "conv" for i in range(n)]
    widths = list(cfg.hidden_channels()) + [1]
    layers = []  # (kind, conv index, in, out)
    ci, ch = 0, 1
    for k in kinds:
        if k == "conv":
            layers.append(("conv", ci, ch, widths[ci]))
            ch = widths[ci]
            ci += 1
        else:
            layers.append(("pool", -1, ch, ch))
    last_conv = ci - 1
    groups = [layers[i:i + 2] for i in range(0, n, 2)]
    internal = range(1, len(groups) - 1)
    if cfg.use_residual and len(internal) == 0:
        raise ConfigError(f"patch {cfg.patch_size} leaves no internal block for residual connections")
    blocks = []
    for gi, grp in enumerate(groups):
        res = cfg.use_residual and gi in internal
        cin, cout = grp[0][2], grp[-1][3]
        if res and cout < cin:
            raise ConfigError(f"residual block {gi} narrows channels {cin} -> {cout}")
        ops = []
        for li, (kind, idx, _, _) in enumerate(grp):
            is_last = li == len(grp) - 1
            if kind == "conv":
                ops.append(_Op("conv", idx))
                if res and is_last:
                    ops.append(_Op("add"))
                if idx != last_conv:
                    ops.append(_Op("relu"))
            else:
                ops.append(_Op("pool"))
                if res and is_last:
                    ops.append(_Op("add"))
        blocks.append(_Block(tuple(ops), res, cin, cout))
    return blocks


def _pad_channels(x: np.ndarray, c: int) -> np.ndarray:
    if x.shape[1] == c:
        return x
    return np.pad(x, ((0, 0), (0, c - x.shape[1]), (0, 0), (0, 0)))


@dataclass
class FcnModel:
    config: FcnConfig
    convs: list[nn.ConvLayer]
    blocks: list[_Block] = field(init=False, repr=False)

    def __post_init__(self):
        self.blocks = _plan(self.config)
        expected = _conv_shapes(self.config)
        got = [c.weight.shape for c in self.convs]
        if got != expected:
            raise ConfigError(f"conv shapes {got} do not match architecture {expected}")

    @property
    def dtype(self):
        return self.convs[0].weight.dtype

    def params(self) -> list[np.ndarray]:
        out = []
        for c in self.convs:
            out += [c.weight, c.bias]
        return out

    def astype(self, dtype) -> "FcnModel":
        return FcnModel(self.config, [c.astype(dtype) for c in self.convs])

    def copy(self) -> "FcnModel":
        return self.astype(self.dtype)

    def layer_summary(self) -> list[str]:
        out = []
        for b in self.blocks:
            for op in b.ops:
                if op.kind == "conv":
                    c = self.convs[op.index]
                    out.append(f"conv3x3 {c.in_channels}->{c.out_channels}")
                elif op.kind == "pool":
                    out.append("maxpool3x3")
                elif op.kind == "add":
                    out.append("residual")
        return out

    # -- forward / backward ---------------------------------------------------
    def forward(self, x: np.ndarray, keep: bool = True) -> tuple[np.ndarray, list]:
        """Probabilities and (when ``keep``) the tape needed by :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"input must be (N, 1, H, W), got {x.shape}")
        p = self.config.patch_size
        if x.shape[2] < p or x.shape[3] < p:
            raise ValueError(f"input spatial dims {x.shape[2:]} smaller than patch {p}")
        h, tape, _ = self._run(x, 0, keep)
        return nn.sigmoid(h), tape

    def _run(self, h: np.ndarray, start: int, keep: bool) -> tuple[np.ndarray, list, list]:
        """Blocks ``start..`` on ``h``; returns logits, tape and each block's input."""
        tape, inputs = [], []
        for b in self.blocks[start:]:
            block_in = h
            inputs.append(h)
            btape = []
            for op in b.ops:
                if op.kind == "conv":
                    h, cache = nn.conv2d_forward(h, self.convs[op.index])
                    btape.append(cache if keep else None)
                elif op.kind == "relu":
                    btape.append(h if keep else None)
                    h = nn.relu(h)
                elif op.kind == "pool":
                    h, cache = nn.max_pool2d_forward(h)
                    btape.append(cache if keep else None)
                else:
                    skip = _pad_channels(block_in, h.shape[1])
                    btape.append(block_in.shape if keep else None)
                    h = nn.residual_add(h, skip)
            if keep:
                tape.append(btape)
        return h, tape, inputs

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, keep=False)[0]

    # -- gradient-check support -----------------------------------------------
    def block_inputs(self, x: np.ndarray) -> list[np.ndarray]:
        """Input of every block for ``x`` (the first is ``x`` itself)."""
        return self._run(np.asarray(x, dtype=self.dtype), 0, False)[2]

    def param_block(self, i: int) -> int:
        """Block holding parameter ``i`` of :meth:`params`."""
        conv = i // 2
        for bi, b in enumerate(self.blocks):
            if any(op.kind == "conv" and op.index == conv for op in b.ops):
                return bi
        raise IndexError(f"parameter index {i} out of range")

    def regime(self, x: np.ndarray, start: int = 0) -> tuple[np.ndarray, bytes]:
        """Probabilities plus a fingerprint of the ReLU signs and pool argmaxes.

        ``x`` is the input of block ``start``; the fingerprint covers that
        block onwards. Inside one regime the logits are linear in any single
        weight, so finite differences that keep the fingerprint are exact up
        to rounding.
        """
        h, tape, _ = self._run(np.asarray(x, dtype=self.dtype), start, True)
        parts = []
        for b, btape in zip(self.blocks[start:], tape):
            for op, cache in zip(b.ops, btape):
                if op.kind == "relu":
                    parts.append(np.packbits(cache > 0).tobytes())
                elif op.kind == "pool":
                    parts.append(cache[0].tobytes())
        return nn.sigmoid(h), b"".join(parts)

    def backward(self, tape: list, dz: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients (ordered like :meth:`params`) from d loss / d logits."""
        grads: list = [None] * (2 * len(self.convs))
        dy = dz.astype(self.dtype, copy=False)
        for b, btape in zip(reversed(self.blocks), reversed(tape)):
            dskip = None
            for op, item in zip(reversed(b.ops), reversed(btape)):
                if op.kind == "conv":
                    dy, dw, db = nn.conv2d_backward(dy, item)
                    grads[2 * op.index], grads[2 * op.index + 1] = dw, db
                elif op.kind == "relu":
                    dy = nn.relu_backward(dy, item)
                elif op.kind == "pool":
                    dy = nn.max_pool2d_backward(dy, item)
                else:
                    in_shape = item
                    padded = (in_shape[0], dy.shape[1], in_shape[2], in_shape[3])
                    dy, ds = nn.residual_add_backward(dy, padded)
                    dskip = ds[:, : in_shape[1]]
            if dskip is not None:
                dy = dy + dskip
        return grads


def _conv_shapes(cfg: FcnConfig) -> list[tuple[int, int, int, int]]:
    widths = list(cfg.hidden_channels()) + [1]
    ins = [1] + widths[:-1]
    return [(o, i, 3, 3) for i, o in zip(ins, widths)]


def build_model(cfg: FcnConfig, dtype=np.float32) -> FcnModel:
    """Freshly initialised model (Kaiming normal weights, seeded by ``cfg.seed``)."""
    rng = np.random.default_rng(cfg.seed)
    convs = [nn.ConvLayer.init(i, o, rng, dtype) for (o, i, _, _) in _conv_shapes(cfg)]
    return FcnModel(cfg, convs)


# ----------------------------------------------------------------------------- labels

def make_label_map(pores: PoreSet, dims: tuple[int, int], r: float, soft: bool = True) -> np.ndarray:
    """Per-pixel training targets; ``dims=(height, width)``."""
    if r < 1:
        raise ValueError(f"pore radius must be >= 1, got {r}")
    h, w = dims
    if len(pores) == 0:
        return np.zeros(dims, dtype=np.float32)
    seeds = np.ones(dims, dtype=bool)
    pts = pores.points
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    seeds[pts[inside, 1], pts[inside, 0]] = False
    if not inside.any():
        return np.zeros(dims, dtype=np.float32)
    d = ndimage.distance_transform_edt(seeds)
    if soft:
        return np.clip((r - d) / r, 0.0, 1.0).astype(np.float32)
    return (d < r).astype(np.float32)


# ----------------------------------------------------------------------------- sampling

@dataclass
class TrainingImage:
    image: GrayImage
    pores: PoreSet
    labels: np.ndarray = field(default=None, repr=False)


def _prepare(items: Sequence[tuple[GrayImage, PoreSet]], cfg: FcnConfig) -> list[TrainingImage]:
    out = []
    for img, pores in items:
        out.append(TrainingImage(img, pores, make_label_map(pores, img.shape, cfg.pore_radius, cfg.soft_labels)))
    return out


def sample_batches(data: Sequence[TrainingImage], cfg: FcnConfig, epoch_seed: int
                   ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled (patches, targets) batches for one epoch.

    Positives are labelled pixels (all of them, or ``epoch_positives`` drawn
    without replacement); negatives are zero-label pixels drawn uniformly,
    ``neg_pos_ratio`` times as many as positives.
    """
    rng = np.random.default_rng(epoch_seed)
    half = cfg.patch_size // 2
    windows, pos, neg = [], [], []
    for i, item in enumerate(data):
        padded = reflect_pad(item.image.pixels.astype(np.float32), half)
        windows.append(sliding_window_view(padded, (cfg.patch_size, cfg.patch_size)))
        lab = item.labels.ravel()
        p = np.flatnonzero(lab > 0)
        n = np.flatnonzero(lab == 0)
        pos.append(np.stack([np.full(len(p), i), p], axis=1))
        neg.append(np.stack([np.full(len(n), i), n], axis=1))
    pos = np.concatenate(pos)
    neg = np.concatenate(neg)
    if cfg.epoch_positives and len(pos) > cfg.epoch_positives:
        pos = pos[np.sort(rng.choice(len(pos), cfg.epoch_positives, replace=False))]
    n_neg = int(round(cfg.neg_pos_ratio * len(pos)))
    if len(pos) == 0:
        # nothing labelled: a single batch worth of negatives
        n_neg = cfg.batch
    n_neg = min(n_neg, len(neg))
    neg = neg[np.sort(rng.choice(len(neg), n_neg, replace=False))] if n_neg else neg[:0]
    allc = np.concatenate([pos, neg])
    allc = allc[rng.permutation(len(allc))]
    for s in range(0, len(allc), cfg.batch):
        chunk = allc[s:s + cfg.batch]
        xs = np.empty((len(chunk), 1, cfg.patch_size, cfg.patch_size), dtype=np.float32)
        ts = np.empty(len(chunk), dtype=np.float32)
        for i in np.unique(chunk[:, 0]):
            sel = chunk[:, 0] == i
            w = data[i].image.width
            flat = chunk[sel, 1]
            yy, xx = flat // w, flat % w
            xs[sel, 0] = windows[i][yy, xx]
            ts[sel] = data[i].labels[yy, xx]
        yield xs, ts.reshape(-1, 1, 1, 1)


# ----------------------------------------------------------------------------- inference

def infer_map(model: FcnModel, img: GrayImage, max_bytes: int = 64 * 2 ** 20) -> np.ndarray:
    """Dense pore-probability map with the image's shape.

    The image is reflect-padded by half a patch and pushed through the network
    in horizontal strips; valid convolutions make each strip exact.
    """
    p = model.config.patch_size
    half = p // 2
    if img.height < p or img.width < p:
        raise ValueError(f"image {img.shape} smaller than patch {p}")
    padded = reflect_pad(img.pixels.astype(model.dtype), half)
    widest = max(max(c.in_channels for c in model.convs), 1)
    per_row = (img.width + p) * widest * 9 * np.dtype(model.dtype).itemsize
    rows = int(max(1, min(img.height, max_bytes // max(per_row, 1))))
    out = np.empty(img.shape, dtype=model.dtype)
    for r0 in range(0, img.height, rows):
        r1 = min(img.height, r0 + rows)
        strip = padded[r0:r1 + p - 1][None, None]
        out[r0:r1] = model.predict(strip)[0, 0]
    return out


def patch_forward(model: FcnModel, img: GrayImage, points: np.ndarray) -> np.ndarray:
    """Reference per-patch evaluation at ``points`` (x, y); used to check :func:`infer_map`."""
    p = model.config.patch_size
    padded = reflect_pad(img.pixels.astype(model.dtype), p // 2)
    xs = np.stack([padded[y:y + p, x:x + p] for x, y in points])[:, None]
    return model.predict(xs).reshape(-1)


def nms(prob_map: np.ndarray, prob_threshold: float = 0.5, nms_radius: float = 5.0) -> PoreSet:
    """Greedy non-maximum suppression on a probability map.

    Candidates (``prob >= threshold``) are visited by descending probability,
    ties in row-major order; a candidate is kept if it is farther than
    ``nms_radius`` from every kept detection.
    """
    if not 0 < prob_threshold < 1:
        raise ValueError(f"prob_threshold must be in (0, 1), got {prob_threshold}")
    if nms_radius < 1:
        raise ValueError(f"nms_radius must be >= 1, got {nms_radius}")
    m = np.asarray(prob_map)
    h, w = m.shape
    flat = m.ravel()
    cand = np.flatnonzero(flat >= prob_threshold)
    if len(cand) == 0:
        return PoreSet()
    order = cand[np.argsort(-flat[cand], kind="stable")]
    r = int(math.floor(nms_radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disc = (yy ** 2 + xx ** 2) <= nms_radius ** 2
    dy, dx = yy[disc], xx[disc]
    blocked = np.zeros((h, w), dtype=bool)
    kept = []
    for idx in order:
        y, x = divmod(int(idx), w)
        if blocked[y, x]:
            continue
        kept.append((x, y))
        ys, xs = y + dy, x + dx
        ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        blocked[ys[ok], xs[ok]] = True
    return PoreSet(np.array(kept, dtype=np.int64))


def detect(model: FcnModel, img: GrayImage, cfg: FcnConfig | None = None) -> PoreSet:
    """infer_map -> nms -> optional ridge-mask filter."""
    cfg = cfg or model.config
    pores = nms(infer_map(model, img), cfg.prob_threshold, cfg.effective_nms_radius)
    if cfg.ridge_filter:
        from .handcrafted import ridge_mask_filter
        pores = ridge_mask_filter(pores, img, cfg.ridge_dilation)
    return pores


# ----------------------------------------------------------------------------- training

@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_f: float


@dataclass
class TrainResult:
    model: FcnModel
    log: list[EpochLog]
    best_epoch: int
    best_val_f: float


def _loss_and_grad(prob: np.ndarray, target: np.ndarray, cfg: FcnConfig) -> tuple[float, np.ndarray]:
    if cfg.loss == "bce":
        return nn.loss_bce(prob, target), nn.bce_grad_logits(prob, target)
    return (nn.loss_focal(prob, target, cfg.focal_gamma, cfg.focal_alpha),
            nn.focal_grad_logits(prob, target, cfg.focal_gamma, cfg.focal_alpha))


def _micro_f(maps: list[np.ndarray], gts: list[PoreSet], threshold: float, radius: float) -> float:
    from .evaluation import compute_metrics, match_bidirectional
    pairs = n_det = n_gt = 0
    for m, gt in zip(maps, gts):
        det = nms(m, threshold, radius)
        pairs += len(match_bidirectional(det, gt).pairs)
        n_det += len(det)
        n_gt += len(gt)
    if n_gt == 0:
        return 0.0
    return compute_metrics(pairs, n_det, n_gt).f


def validation_f(model: FcnModel, val: Sequence[tuple[GrayImage, PoreSet]], cfg: FcnConfig | None = None) -> float:
    """Micro F-score of :func:`detect` on validation images (bidirectional matching)."""
    from .evaluation import compute_metrics, match_bidirectional
    cfg = cfg or model.config
    pairs = n_det = n_gt = 0
    for img, gt in val:
        det = detect(model, img, cfg)
        pairs += len(match_bidirectional(det, gt).pairs)
        n_det += len(det)
        n_gt += len(gt)
    return compute_metrics(pairs, n_det, n_gt).f if n_gt else 0.0


def tune_threshold(model: FcnModel, val: Sequence[tuple[GrayImage, PoreSet]],
                   grid: Sequence[float] = THRESHOLD_GRID) -> tuple[float, float]:
    """Threshold from ``grid`` maximising validation F (first best wins)."""
    maps = [infer_map(model, img) for img, _ in val]
    gts = [gt for _, gt in val]
    best = (grid[0], -1.0)
    for t in grid:
        f = _micro_f(maps, gts, t, model.config.effective_nms_radius)
        if f > best[1]:
            best = (t, f)
    return best


def train(train_set: Sequence[tuple[GrayImage, PoreSet]], val_set: Sequence[tuple[GrayImage, PoreSet]],
          cfg: FcnConfig, on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Adam training with early stopping on validation F-score; returns the best weights."""
    if not train_set or not val_set:
        raise ValueError("training needs at least one training and one validation image")
    data = _prepare(train_set, cfg)
    model = build_model(cfg)
    state = nn.OptimizerState(lr=cfg.lr)
    best_model, best_f, best_epoch, wait = model.copy(), -1.0, 0, 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        total, count = 0.0, 0
        for xs, ts in sample_batches(data, cfg, epoch_seed=cfg.seed * 1_000_003 + epoch):
            prob, tape = model.forward(xs)
            loss, dz = _loss_and_grad(prob, ts, cfg)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} (lr={cfg.lr})")
            grads = model.backward(tape, dz)
            nn.adam_step(model.params(), grads, state)
            total += loss * len(xs)
            count += len(xs)
        vf = validation_f(model, val_set, cfg)
        entry = EpochLog(epoch, total / max(count, 1), vf)
        history.append(entry)
        log.info("epoch %d loss %.5f val_f %.2f", epoch, entry.loss, vf)
        if on_epoch:
            on_epoch(entry)
        if vf > best_f:
            best_model, best_f, best_epoch, wait = model.copy(), vf, epoch, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    if cfg.tune_threshold:
        t, f = tune_threshold(best_model, val_set)
        best_model = FcnModel(replace(cfg, prob_threshold=t), best_model.convs)
        log.info("tuned threshold %.2f (val F %.2f)", t, f)
    return TrainResult(best_model, history, best_epoch, best_f)


# ----------------------------------------------------------------------------- checkpoints

MAGIC = b"PDET"
VERSION = 1
CONV_TAG = b"CONV"


def checkpoint_bytes(model: FcnModel) -> bytes:
    buf = io.BytesIO()
    text = model.config.to_text().encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for c in model.convs:
        buf.write(CONV_TAG)
        buf.write(struct.pack("<4i", *c.weight.shape))
        buf.write(c.weight.astype("<f4").tobytes())
        buf.write(c.bias.astype("<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: FcnModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def _take(data: bytes, pos: int, n: int, what: str) -> tuple[bytes, int]:
    if pos + n > len(data):
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data[pos:pos + n], pos + n


def load_checkpoint_bytes(data: bytes) -> FcnModel:
    head, pos = _take(data, 0, 4, "magic")
    if head != MAGIC:
        raise CheckpointError(f"bad magic {head!r}, expected {MAGIC!r}")
    raw, pos = _take(data, pos, 4, "version")
    (version,) = struct.unpack("<I", raw)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    raw, pos = _take(data, pos, 4, "config length")
    (n,) = struct.unpack("<I", raw)
    raw, pos = _take(data, pos, n, "config")
    try:
        cfg = FcnConfig.from_text(raw.decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"invalid embedded config: {exc}") from exc
    convs = []
    while pos < len(data):
        tag, pos = _take(data, pos, 4, "layer tag")
        if tag != CONV_TAG:
            raise CheckpointError(f"unknown layer tag {tag!r}")
        raw, pos = _take(data, pos, 16, "layer shape")
        shape = struct.unpack("<4i", raw)
        if min(shape) < 1:
            raise CheckpointError(f"invalid layer shape {shape}")
        nw = int(np.prod(shape))
        raw, pos = _take(data, pos, 4 * nw, "weights")
        w = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        raw, pos = _take(data, pos, 4 * shape[0], "biases")
        b = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        convs.append(nn.ConvLayer(w, b))
    try:
        return FcnModel(cfg, convs)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint layers inconsistent with config: {exc}") from exc


def load_checkpoint(path: str | Path) -> FcnModel:
    return load_checkpoint_bytes(Path(path).read_bytes())
