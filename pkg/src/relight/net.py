"""Three-level coarse-to-fine encoder/decoder network and its two-stage cascade.

Parameters live in a flat ``name -> Tensor`` dict.  Names follow
``s{stack}.{e|d}{level}.{layer}.{w|b}``; ``stack`` counts from 0, ``level``
from 1 (coarsest) to 3 (full resolution).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

LEVELS = 3


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 8
    stacks: int = 2
    init_seed: int = 0
    levels: int = LEVELS

    def __post_init__(self):
        if self.levels != LEVELS:
            raise ValueError(f"levels is fixed at {LEVELS}, got {self.levels}")
        if self.stacks not in (1, 2):
            raise ValueError(f"stacks must be 1 or 2, got {self.stacks}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _encoder_layers(C: int) -> list:
    # (name, cin, cout, stride)
    layers = [("c0", 3, C, 1), ("c1", C, 2 * C, 2), ("c2", 2 * C, 4 * C, 2)]
    for r in range(2):
        layers += [(f"r{r}a", 4 * C, 4 * C, 1), (f"r{r}b", 4 * C, 4 * C, 1)]
    return layers


def _decoder_layers(C: int) -> list:
    layers = []
    for r in range(2):
        layers += [(f"r{r}a", 4 * C, 4 * C, 1), (f"r{r}b", 4 * C, 4 * C, 1)]
    layers += [("u0", 4 * C, 2 * C, 1), ("u1", 2 * C, C, 1), ("out", C, 3, 1)]
    return layers


def layer_table(config: NetConfig) -> list:
    """Every conv layer as ``(prefix, cin, cout, stride)`` in parameter order."""
    C = config.base_channels
    table = []
    for s in range(config.stacks):
        for lvl in range(1, LEVELS + 1):
            table += [(f"s{s}.e{lvl}.{n}", ci, co, st) for n, ci, co, st in _encoder_layers(C)]
            table += [(f"s{s}.d{lvl}.{n}", ci, co, st) for n, ci, co, st in _decoder_layers(C)]
    return table


def init_params(config: NetConfig, requires_grad: bool = True) -> dict:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    rng = np.random.default_rng(config.init_seed)
    dtype = T.get_dtype()
    params = {}
    for prefix, cin, cout, _ in layer_table(config):
        bound = math.sqrt(6.0 / (cin * 9))
        w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(dtype)
        params[prefix + ".w"] = Tensor(w, requires_grad=requires_grad)
        params[prefix + ".b"] = Tensor(np.zeros((1, cout, 1, 1), dtype=dtype), requires_grad=requires_grad)
    return params


def zero_params(config: NetConfig) -> dict:
    params = init_params(config)
    for t in params.values():
        t.data[...] = 0
    return params


def count_params(params: dict) -> int:
    return sum(t.size for t in params.values())


def stack_params(params: dict, stack: int) -> dict:
    """The sub-dict for one stack, with the ``s{stack}.`` prefix removed."""
    head = f"s{stack}."
    sub = {k[len(head):]: v for k, v in params.items() if k.startswith(head)}
    if not sub:
        raise KeyError(f"no parameters for stack {stack}")
    return sub


def _conv(p: dict, name: str, x: Tensor, stride: int = 1) -> Tensor:
    return T.conv2d(x, p[name + ".w"], p[name + ".b"], stride=stride, pad=1)


def _resblock(p: dict, name: str, x: Tensor) -> Tensor:
    h = T.relu(_conv(p, name + "a", x))
    h = _conv(p, name + "b", h)
    return T.relu(T.add(h, x))


def build_pyramid(image: Tensor):
    """Return ``(B1, B2, B3)`` at 1/4, 1/2 and full resolution."""
    _, _, H, W = image.shape
    if H % 4 or W % 4:
        raise ShapeError(f"pyramid needs H and W divisible by 4, got {H}x{W}")
    b2 = T.downsample_avg2x(image)
    b1 = T.downsample_avg2x(b2)
    return b1, b2, image


def encoder_forward(p: dict, x: Tensor) -> Tensor:
    """``(N,3,h,w) -> (N,4C,h/4,w/4)``; ``p`` holds one level's encoder params."""
    _, _, h, w = x.shape
    if h % 4 or w % 4:
        raise ShapeError(f"encoder input must have h, w divisible by 4, got {h}x{w}")
    x = T.relu(_conv(p, "c0", x))
    x = T.relu(_conv(p, "c1", x, stride=2))
    x = T.relu(_conv(p, "c2", x, stride=2))
    x = _resblock(p, "r0", x)
    return _resblock(p, "r1", x)


def decoder_forward(p: dict, f: Tensor) -> Tensor:
    """``(N,4C,h,w) -> (N,3,4h,4w)``; linear output layer."""
    if f.shape[1] != p["r0a.w"].shape[1]:
        raise ShapeError(f"decoder expects {p['r0a.w'].shape[1]} channels, got {f.shape[1]}")
    x = _resblock(p, "r0", f)
    x = _resblock(p, "r1", x)
    x = T.relu(_conv(p, "u0", T.upsample_bilinear2x(x)))
    x = T.relu(_conv(p, "u1", T.upsample_bilinear2x(x)))
    return _conv(p, "out", x)


def _level(p: dict, kind: str, lvl: int) -> dict:
    head = f"{kind}{lvl}."
    return {k[len(head):]: v for k, v in p.items() if k.startswith(head)}


def check_input(image: Tensor) -> None:
    _, c, H, W = image.shape
    if c != 3:
        raise ShapeError(f"expected 3-channel images, got {c}")
    if H % 16 or W % 16:
        raise ShapeError(f"input H and W must be divisible by 16, got {H}x{W}")


def dmshn_forward(p: dict, image: Tensor) -> Tensor:
    """One coarse-to-fine pass; ``p`` is a single stack's parameters."""
    check_input(image)
    b1, b2, b3 = build_pyramid(image)
    enc = [_level(p, "e", i) for i in (1, 2, 3)]
    dec = [_level(p, "d", i) for i in (1, 2, 3)]

    f1 = encoder_forward(enc[0], b1)
    o1 = decoder_forward(dec[0], f1)

    i2 = T.add(b2, T.upsample_bilinear2x(o1))
    f2 = T.add(encoder_forward(enc[1], i2), T.upsample_bilinear2x(f1))
    o2 = decoder_forward(dec[1], f2)

    i3 = T.add(b3, T.upsample_bilinear2x(o2))
    f3 = T.add(encoder_forward(enc[2], i3), T.upsample_bilinear2x(f2))
    return decoder_forward(dec[2], f3)


def stacked_forward(params: dict, image: Tensor):
    """Return ``(O_mid, O_final)``: the second stack refines the first's output."""
    mid = dmshn_forward(stack_params(params, 0), image)
    return mid, dmshn_forward(stack_params(params, 1), mid)


def forward(params: dict, image: Tensor, stacks: int) -> Tensor:
    """Final output of a 1- or 2-stack model."""
    if stacks == 1:
        return dmshn_forward(stack_params(params, 0), image)
    return stacked_forward(params, image)[1]
