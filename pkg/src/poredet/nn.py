"""Small dense-tensor engine for the baseline FCN.

Tensors are plain ``numpy`` arrays in ``(batch, channels, height, width)``
layout. Every op is a pair of functions: ``*_forward`` returns the output and
a cache, ``*_backward`` maps the upstream gradient (and cache) to input and
parameter gradients. Keeping the caches outside the layers makes forward
passes reentrant, so a model can serve concurrent inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS_PROB = 1e-7


def _check_4d(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be (N, C, H, W), got shape {x.shape}")


# ----------------------------------------------------------------------------- conv

@dataclass
class ConvLayer:
    """3x3 convolution parameters: ``weight`` (out, in, 3, 3), ``bias`` (out,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (3, 3):
            raise ValueError(f"conv weight must be (out, in, 3, 3), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_channels: int, out_channels: int, rng: np.random.Generator,
             dtype=np.float32) -> "ConvLayer":
        """Kaiming (fan-in) normal weights, zero bias."""
        std = np.sqrt(2.0 / (in_channels * 9))
        w = rng.standard_normal((out_channels, in_channels, 3, 3)) * std
        return cls(w.astype(dtype), np.zeros(out_channels, dtype=dtype))

    def astype(self, dtype) -> "ConvLayer":
        return ConvLayer(self.weight.astype(dtype), self.bias.astype(dtype))


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N*Ho*Wo, C*9) with valid 3x3 windows."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (3, 3), axis=(2, 3))  # N, C, Ho, Wo, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * (h - 2) * (w - 2), c * 9)


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, tuple]:
    """Valid 3x3 cross-correlation plus bias."""
    _check_4d(x)
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise ValueError(f"conv expects {layer.in_channels} input channels, got {c}")
    if h < 3 or w < 3:
        raise ValueError(f"conv needs spatial dims >= 3, got {(h, w)}")
    cols = _im2col(x)
    wmat = layer.weight.reshape(layer.out_channels, -1)
    out = cols @ wmat.T + layer.bias
    out = out.reshape(n, h - 2, w - 2, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, layer)


def conv2d_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dweight, dbias)."""
    cols, xshape, layer = cache
    n, c, h, w = xshape
    o = layer.out_channels
    dmat = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dmat.T @ cols).reshape(layer.weight.shape)
    db = dmat.sum(axis=0)
    dcols = (dmat @ layer.weight.reshape(o, -1)).reshape(n, h - 2, w - 2, c, 3, 3)
    dx = np.zeros(xshape, dtype=dy.dtype)
    for ky in range(3):
        for kx in range(3):
            dx[:, :, ky:ky + h - 2, kx:kx + w - 2] += dcols[..., ky, kx].transpose(0, 3, 1, 2)
    return dx, dw, db


# ----------------------------------------------------------------------------- pooling

def max_pool2d_forward(x: np.ndarray, k: int = 3) -> tuple[np.ndarray, tuple]:
    """Stride-1 valid max pooling. Ties resolve to the first maximum in row-major order."""
    _check_4d(x)
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ValueError(f"max pool needs spatial dims >= {k}, got {(h, w)}")
    win = sliding_window_view(x, (k, k), axis=(2, 3)).reshape(n, c, h - k + 1, w - k + 1, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape, k)


def max_pool2d_backward(dy: np.ndarray, cache: tuple) -> np.ndarray:
    arg, xshape, k = cache
    h, w = xshape[2:]
    ho, wo = h - k + 1, w - k + 1
    dx = np.zeros(xshape, dtype=dy.dtype)
    for i in range(k * k):
        ky, kx = divmod(i, k)
        dx[:, :, ky:ky + ho, kx:kx + wo] += np.where(arg == i, dy, 0)
    return dx


# ----------------------------------------------------------------------------- activations

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient through sigmoid given its *output* ``y``."""
    return dy * y * (1 - y)


# ----------------------------------------------------------------------------- residual

def center_crop(x: np.ndarray, h: int, w: int) -> np.ndarray:
    dh, dw = x.shape[2] - h, x.shape[3] - w
    if dh < 0 or dw < 0 or dh % 2 or dw % 2:
        raise ValueError(f"cannot centre-crop {x.shape[2:]} to {(h, w)}")
    return x[:, :, dh // 2:dh // 2 + h, dw // 2:dw // 2 + w]


def residual_add(x: np.ndarray, skip: np.ndarray) -> np.ndarray:
    """``x + centre_crop(skip)``; channel counts must agree, size differences must be even."""
    _check_4d(x)
    _check_4d(skip, "skip")
    if x.shape[:2] != skip.shape[:2]:
        raise ValueError(f"residual channel/batch mismatch: {x.shape[:2]} vs {skip.shape[:2]}")
    return x + center_crop(skip, x.shape[2], x.shape[3])


def residual_add_backward(dy: np.ndarray, skip_shape: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dx, dskip)."""
    dskip = np.zeros(skip_shape, dtype=dy.dtype)
    ph, pw = (skip_shape[2] - dy.shape[2]) // 2, (skip_shape[3] - dy.shape[3]) // 2
    dskip[:, :, ph:ph + dy.shape[2], pw:pw + dy.shape[3]] = dy
    return dy, dskip


# ----------------------------------------------------------------------------- losses

def _check_pair(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")


def loss_bce(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean binary cross-entropy; accepts fractional targets."""
    _check_pair(pred, target)
    p = np.clip(pred.astype(np.float64), EPS_PROB, 1 - EPS_PROB)
    t = target.astype(np.float64)
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def loss_bce_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d loss_bce / d pred (clamped probabilities, straight-through)."""
    _check_pair(pred, target)
    p = np.clip(pred, EPS_PROB, 1 - EPS_PROB)
    return ((p - target) / (p * (1 - p)) / pred.size).astype(pred.dtype)


def loss_focal(pred: np.ndarray, target: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> float:
    """Mean focal loss; ``gamma=0, alpha=0.5`` equals half the BCE."""
    _check_pair(pred, target)
    if gamma < 0 or not 0 <= alpha <= 1:
        raise ValueError(f"focal loss needs gamma >= 0 and alpha in [0, 1], got {gamma}, {alpha}")
    p = np.clip(pred.astype(np.float64), EPS_PROB, 1 - EPS_PROB)
    t = target.astype(np.float64)
    pos = alpha * (1 - p) ** gamma * t * -np.log(p)
    neg = (1 - alpha) * p ** gamma * (1 - t) * -np.log(1 - p)
    return float(np.mean(pos + neg))


def loss_focal_grad(pred: np.ndarray, target: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> np.ndarray:
    _check_pair(pred, target)
    p = np.clip(pred, EPS_PROB, 1 - EPS_PROB)
    t = target
    lp, l1p = np.log(p), np.log(1 - p)
    dpos = alpha * t * (gamma * (1 - p) ** (gamma - 1) * lp - (1 - p) ** gamma / p) if gamma > 0 \
        else alpha * t * (-1 / p)
    dneg = (1 - alpha) * (1 - t) * ((gamma * p ** (gamma - 1) * -l1p if gamma > 0 else 0) + p ** gamma / (1 - p))
    return ((dpos + dneg) / pred.size).astype(pred.dtype)


def bce_grad_logits(prob: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d loss_bce / d logit when ``prob = sigmoid(logit)``; stable when saturated."""
    _check_pair(prob, target)
    return ((prob - target) / prob.size).astype(prob.dtype)


def focal_grad_logits(prob: np.ndarray, target: np.ndarray, gamma: float, alpha: float) -> np.ndarray:
    """d loss_focal / d logit, with the sigmoid derivative folded in analytically."""
    _check_pair(prob, target)
    p = np.clip(prob.astype(np.float64), EPS_PROB, 1 - EPS_PROB)
    t = target.astype(np.float64)
    q = 1 - p
    dpos = alpha * t * (gamma * p * q ** gamma * np.log(p) - q ** (gamma + 1))
    dneg = (1 - alpha) * (1 - t) * (gamma * p ** gamma * q * -np.log(q) + p ** (gamma + 1))
    return ((dpos + dneg) / prob.size).astype(prob.dtype)


# ----------------------------------------------------------------------------- Adam

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState) -> None:
    """In-place Adam update with bias correction."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in adam_step: {p.shape} / {g.shape} / {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ----------------------------------------------------------------------------- gradient check

# fourth-order stencils: (offsets, weights) with f'(0) ~ sum(w * f(o * eps)) / (12 * eps)
_CENTRAL = ((2, 1, -1, -2), (-1, 8, -8, 1))
_FORWARD = ((0, 1, 2, 3, 4), (-25, 48, -36, 16, -3))
_BACKWARD = ((0, -1, -2, -3, -4), (25, -48, 36, -16, 3))


def grad_check(model, x: np.ndarray, target: np.ndarray, epsilon: float = 1e-2,
               max_params: int | None = 200, rng: np.random.Generator | None = None,
               loss: str = "bce", gamma: float = 2.0, alpha: float = 0.25,
               corrupt: float | None = None, min_epsilon: float = 1e-7) -> float:
    """Max relative error between analytic and finite-difference parameter gradients.

    ``model`` must offer ``forward``, ``backward``, ``params`` (float64 for a
    meaningful check). Derivatives use fourth-order stencils. When the model
    has more than ``max_params`` parameters a random subset of that many is
    checked. ``corrupt`` scales every analytic gradient (negative control).

    Models exposing ``regime(h, start) -> (prob, fingerprint)``,
    ``block_inputs`` and ``param_block`` get a kink-aware check: a stencil
    is only used if none of its points changes the ReLU/max-pool
    fingerprint. Central differences are tried first, then one-sided ones
    (a parameter sitting exactly on a kink is differenced from the side the
    analytic subgradient describes), then the step shrinks tenfold. Only
    the blocks downstream of the perturbed parameter are recomputed.
    """
    rng = rng or np.random.default_rng(0)
    aware = all(hasattr(model, a) for a in ("regime", "block_inputs", "param_block"))

    def loss_of(p: np.ndarray) -> float:
        return loss_bce(p, target) if loss == "bce" else loss_focal(p, target, gamma, alpha)

    prob, tape = model.forward(x)
    if loss == "bce":
        dz = bce_grad_logits(prob, target)
    else:
        dz = focal_grad_logits(prob, target, gamma, alpha)
    grads = model.backward(tape, dz)
    if corrupt is not None:
        grads = [g * corrupt for g in grads]
    params = model.params()
    sizes = [p.size for p in params]
    total = sum(sizes)
    offsets = np.cumsum([0] + sizes)
    flat_ids = np.arange(total) if max_params is None or total <= max_params \
        else np.sort(rng.choice(total, size=max_params, replace=False))
    inputs = model.block_inputs(x) if aware else None
    base_keys: dict[int, bytes] = {}
    worst = 0.0
    for fid in flat_ids:
        li = int(np.searchsorted(offsets, fid, side="right") - 1)
        p = params[li].reshape(-1)
        j = fid - offsets[li]
        orig = p[j]
        if aware:
            start = model.param_block(li)
            if start not in base_keys:
                base_keys[start] = model.regime(inputs[start], start)[1]

        cache: dict[float, tuple[float, bool]] = {}

        def at(delta: float) -> tuple[float, bool]:
            if delta not in cache:
                p[j] = orig + delta
                if aware:
                    pr, key = model.regime(inputs[start], start)
                    cache[delta] = (loss_of(pr), key == base_keys[start])
                else:
                    cache[delta] = (loss_of(model.predict(x)), True)
                p[j] = orig
            return cache[delta]

        def diff(stencil, eps):
            # weights sum to zero: differencing against one value keeps flat losses exactly flat
            offs, w = stencil
            ref = at(offs[0] * eps)[0]
            return sum(wi * (at(o * eps)[0] - ref) for o, wi in zip(offs, w)) / (12 * eps)

        eps, numeric = epsilon, None
        while numeric is None:
            cache.clear()
            for stencil in (_CENTRAL, _BACKWARD, _FORWARD):
                if all(at(o * eps)[1] for o in stencil[0]):
                    numeric = diff(stencil, eps)
                    break
            else:
                if eps / 10 >= min_epsilon:
                    eps /= 10
                else:
                    numeric = diff(_CENTRAL, eps)
        analytic = float(grads[li].reshape(-1)[j])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
