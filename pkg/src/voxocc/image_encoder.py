"""Multi-camera 2D feature extraction.

A small residual backbone shared across cameras (cameras ride the batch
axis) produces a three-level pyramid at strides 8, 16 and 32 of the input,
all projected to a common channel width and merged top-down.

Grid-mask augmentation lives here too: with some probability an input batch
gets a periodic grid of zeroed squares, one independent mask per camera.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import ContractViolation
from .layers import BatchNorm, Conv2d, Module, ModuleList
from .tensor import Tensor


class ResBlock2d(Module):
    def __init__(self, cin: int, cout: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1,
                            bias=False)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, stride=1, padding=1,
                            bias=False)
        self.bn2 = BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, rng, stride=stride, bias=False)
            self.proj_bn = BatchNorm(cout)
        else:
            self.proj = None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        if self.proj is not None:
            x = self.proj_bn(self.proj(x))
        return ops.relu(ops.add(y, x))


class ImageEncoder(Module):
    """(N, 3, H, W) -> three feature maps at strides 8/16/32, channels c_out.

    H and W must be divisible by 32.
    """

    def __init__(self, c_out: int, rng: np.random.Generator,
                 widths=(16, 24, 32, 48, 64)):
        super().__init__()
        self.c_out = c_out
        self.stem = Conv2d(3, widths[0], 3, rng, stride=2, padding=1,
                           bias=False)
        self.stem_bn = BatchNorm(widths[0])
        self.stage1 = ResBlock2d(widths[0], widths[1], 2, rng)
        self.stage2 = ResBlock2d(widths[1], widths[2], 2, rng)
        self.stage3 = ResBlock2d(widths[2], widths[3], 2, rng)
        self.stage4 = ResBlock2d(widths[3], widths[4], 2, rng)
        self.laterals = ModuleList(
            Conv2d(w, c_out, 1, rng) for w in widths[2:])

    def __call__(self, images: Tensor) -> list[Tensor]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ContractViolation(
                f"ImageEncoder: expected (N,3,H,W), got {images.shape}")
        if images.shape[2] % 32 or images.shape[3] % 32:
            raise ContractViolation(
                f"ImageEncoder: H,W must be divisible by 32, got "
                f"{images.shape[2:]}")
        x = ops.relu(self.stem_bn(self.stem(images)))
        x = self.stage1(x)
        t8 = self.stage2(x)
        t16 = self.stage3(t8)
        t32 = self.stage4(t16)
        p32 = self.laterals[2](t32)
        p16 = ops.add(self.laterals[1](t16), ops.upsample_nearest2d(p32, 2))
        p8 = ops.add(self.laterals[0](t8), ops.upsample_nearest2d(p16, 2))
        return [p8, p16, p32]


def make_grid_mask(shape, rng: np.random.Generator, ratio: float = 0.5,
                   period_range=(8, 32)) -> np.ndarray:
    """One binary keep-mask (N,1,H,W); zeros form a periodic square grid.

    Each image draws its own period d in period_range and offset; squares of
    side round(d * ratio) are dropped at each period cell.
    """
    n, _, h, w = shape
    mask = np.ones((n, 1, h, w), dtype=np.float32)
    for i in range(n):
        d = int(rng.integers(period_range[0], period_range[1] + 1))
        hole = max(1, int(round(d * ratio)))
        off_y = int(rng.integers(0, d))
        off_x = int(rng.integers(0, d))
        ys = (np.arange(h) + off_y) % d < hole
        xs = (np.arange(w) + off_x) % d < hole
        mask[i, 0][np.outer(ys, xs)] = 0.0
    return mask


def grid_mask(images: Tensor, rng: np.random.Generator, prob: float = 0.5,
              ratio: float = 0.5, period_range=(8, 32)) -> Tensor:
    """Randomly drop a grid of squares from each camera image."""
    if not (0.0 <= prob <= 1.0 and 0.0 < ratio < 1.0):
        raise ContractViolation(f"grid_mask: bad prob {prob} / ratio {ratio}")
    if rng.random() >= prob:
        return images
    mask = make_grid_mask(images.shape, rng, ratio, period_range)
    return ops.mul(images, ops.const(mask))
