"""Differentiable training objectives.

The SSIM term is the raw similarity (1 for identical images).  The combined
objective weights it negatively, so minimising the sum maximises SSIM.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

PERCEPTUAL_CHANNELS = (3, 16, 32, 64)
PERCEPTUAL_SEED = 0


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    ssim: float = -5e-3
    perceptual: float = 0.006
    tv: float = 2e-8
    sobel_mix: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def _same(pred: Tensor, tgt: Tensor, name: str) -> None:
    if pred.shape != tgt.shape:
        raise ShapeError(f"{name}: shape mismatch {pred.shape} vs {tgt.shape}")


def l1_loss(pred: Tensor, tgt: Tensor) -> Tensor:
    _same(pred, tgt, "l1_loss")
    return T.mean(T.absolute(T.sub(pred, tgt)))


def l2_loss(pred: Tensor, tgt: Tensor) -> Tensor:
    _same(pred, tgt, "l2_loss")
    return T.mean(T.square(T.sub(pred, tgt)))


# -- SSIM ------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 2-D Gaussian, the outer product of a 1-D kernel."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _depthwise(x: Tensor, kernel: np.ndarray, pad: int = 0) -> Tensor:
    """Apply each (k, k) kernel in ``kernel`` (K, k, k) to every channel separately.

    Returns (N, C*K, H', W') with the K responses of a channel adjacent.
    """
    N, C, H, W = x.shape
    K, k, _ = kernel.shape
    w = T.Tensor(kernel.reshape(K, 1, k, k).astype(x.data.dtype))
    y = T.conv2d(T.reshape(x, (N * C, 1, H, W)), w, None, stride=1, pad=pad)
    return T.reshape(y, (N, C * K, y.shape[2], y.shape[3]))


def ssim_map(x: Tensor, y: Tensor, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
             c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """Per-position SSIM over valid window placements (no padding)."""
    _same(x, y, "ssim")
    _, _, H, W = x.shape
    if H < window or W < window:
        raise ShapeError(f"ssim: image {H}x{W} smaller than window {window}")
    g = gaussian_window(window, sigma)[None]
    mu_x = _depthwise(x, g)
    mu_y = _depthwise(y, g)
    e_xx = _depthwise(T.square(x), g)
    e_yy = _depthwise(T.square(y), g)
    e_xy = _depthwise(T.mul(x, y), g)
    mu_xx = T.square(mu_x)
    mu_yy = T.square(mu_y)
    mu_xy = T.mul(mu_x, mu_y)
    var_x = T.sub(e_xx, mu_xx)
    var_y = T.sub(e_yy, mu_yy)
    cov = T.sub(e_xy, mu_xy)
    num = T.mul(T.add_scalar(T.scale(mu_xy, 2.0), c1), T.add_scalar(T.scale(cov, 2.0), c2))
    den = T.mul(T.add_scalar(T.add(mu_xx, mu_yy), c1), T.add_scalar(T.add(var_x, var_y), c2))
    return T.div(num, den)


def ssim_value(x: Tensor, y: Tensor, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
               c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    return T.mean(ssim_map(x, y, window, sigma, c1, c2))


# -- total variation -------------------------------------------------------

def tv_loss(pred: Tensor) -> Tensor:
    """Squared neighbour differences in both directions, divided by N*C*H*W."""
    _, _, H, W = pred.shape
    if H < 2 or W < 2:
        raise ShapeError(f"tv_loss needs H, W >= 2, got {H}x{W}")
    dh = T.total(T.square(T.diff(pred, 2)))
    dw = T.total(T.square(T.diff(pred, 3)))
    return T.scale(T.add(dh, dw), 1.0 / pred.size)


# -- perceptual ------------------------------------------------------------

@functools.lru_cache(maxsize=4)
def _perceptual_weights(dtype_name: str, seed: int = PERCEPTUAL_SEED):
    rng = np.random.default_rng(seed)
    layers = []
    for cin, cout in zip(PERCEPTUAL_CHANNELS[:-1], PERCEPTUAL_CHANNELS[1:]):
        bound = math.sqrt(6.0 / (cin * 9))
        w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(dtype_name)
        w.setflags(write=False)
        layers.append(w)
    return tuple(layers)


def perceptual_features(x: Tensor) -> list:
    """Activations of the frozen 3-layer extractor (stride 2, relu after each)."""
    feats = []
    h = x
    for w in _perceptual_weights(x.data.dtype.name):
        h = T.relu(T.conv2d(h, T.Tensor(w), None, stride=2, pad=1))
        feats.append(h)
    return feats


def perceptual_loss(pred: Tensor, tgt: Tensor) -> Tensor:
    _same(pred, tgt, "perceptual_loss")
    _, _, H, W = pred.shape
    if H % 8 or W % 8:
        raise ShapeError(f"perceptual_loss needs H, W divisible by 8, got {H}x{W}")
    with T.no_grad():
        tgt_feats = perceptual_features(T.Tensor(tgt.data))
    terms = [T.mean(T.square(T.sub(fp, ft))) for fp, ft in zip(perceptual_features(pred), tgt_feats)]
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


# -- Sobel -----------------------------------------------------------------

SOBEL_KERNELS = np.array([
    [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]],     # 0 deg
    [[-1, -2, -1], [0, 0, 0], [1, 2, 1]],     # 90 deg, transpose of 0 deg
    [[0, 1, 2], [-1, 0, 1], [-2, -1, 0]],     # 45 deg
    [[-2, -1, 0], [-1, 0, 1], [0, 1, 2]],     # 135 deg
], dtype=np.float64)


def sobel_edges(x: Tensor) -> Tensor:
    """Four directional responses per channel at full resolution: (N, 4C, H, W).

    Borders are edge-replicated so flat images have no edges anywhere.
    """
    return _depthwise(T.pad_replicate(x, 1), SOBEL_KERNELS)


def advanced_sobel_loss(pred: Tensor, tgt: Tensor) -> Tensor:
    _same(pred, tgt, "advanced_sobel_loss")
    # equal-sized direction maps, so the mean of per-direction means is the global mean
    return T.mean(T.absolute(T.sub(sobel_edges(pred), sobel_edges(tgt))))


# -- combinations ----------------------------------------------------------

def combined_loss(pred: Tensor, tgt: Tensor, weights: LossWeights = LossWeights()):
    """Weighted sum of L1, SSIM, perceptual and TV terms.

    Returns ``(loss, terms)`` where ``terms`` maps each component name to its
    unweighted float value.
    """
    parts = {
        "l1": l1_loss(pred, tgt),
        "ssim": ssim_value(pred, tgt),
        "perceptual": perceptual_loss(pred, tgt),
        "tv": tv_loss(pred),
    }
    loss = None
    for name, value in parts.items():
        term = T.scale(value, getattr(weights, name))
        loss = term if loss is None else T.add(loss, term)
    return loss, {k: v.item() for k, v in parts.items()}


def combined_sobel_loss(pred: Tensor, tgt: Tensor, sobel_mix: float = 0.1):
    l2 = l2_loss(pred, tgt)
    sob = advanced_sobel_loss(pred, tgt)
    return T.add(l2, T.scale(sob, sobel_mix)), {"l2": l2.item(), "sobel": sob.item()}


LOSS_MODES = ("MSE", "CL", "CSL")


def objective(mode: str, pred: Tensor, tgt: Tensor, weights: LossWeights = LossWeights()):
    """Dispatch a training loss by mode name; returns ``(loss, terms)``."""
    if mode == "MSE":
        loss = l2_loss(pred, tgt)
        return loss, {"l2": loss.item()}
    if mode == "CL":
        return combined_loss(pred, tgt, weights)
    if mode == "CSL":
        return combined_sobel_loss(pred, tgt, weights.sobel_mix)
    raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
