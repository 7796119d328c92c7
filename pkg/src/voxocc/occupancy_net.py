"""Voxel-space network: local/global fusion, 3D encoder-decoder, class head.

The lifted per-level volumes are fused with their ground-plane (pillar)
counterparts through a learned sigmoid gate, merged coarse-to-fine into a
single volume, pushed through a four-stage residual 3D encoder and a
top-down decoder that emits class logits at every scale (finest first). A
shared per-voxel perceptron turns decoder features into class logits.

Encoder and decoder can each be bypassed for ablations; the bypasses are
cheap learned projections so the rest of the pipeline keeps its shapes.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import ContractViolation
from .layers import BatchNorm, Conv3d, Module, ModuleList
from .tensor import Tensor


class FusionGate(Module):
    """Blend a voxel volume with its pillar features, per voxel.

    The pillar map broadcasts along z, the gate is a 1x1x1 convolution over
    the concatenated channels squeezed through a sigmoid, and the output is
    gate * local + (1 - gate) * broadcast global.
    """

    def __init__(self, c: int, rng: np.random.Generator):
        super().__init__()
        self.gate = Conv3d(2 * c, 1, 1, rng)

    def __call__(self, local: Tensor, bev: Tensor) -> Tensor:
        if local.ndim != 4 or bev.ndim != 3:
            raise ContractViolation(
                f"FusionGate: local {local.shape}, bev {bev.shape}")
        c, nx, ny, nz = local.shape
        if bev.shape != (c, nx, ny):
            raise ContractViolation(
                f"FusionGate: bev {bev.shape} does not match local "
                f"{local.shape}")
        bcast = ops.mul(ops.reshape(bev, (c, nx, ny, 1)),
                        ops.const(np.ones((1, 1, 1, nz), dtype=np.float32)))
        both = ops.reshape(ops.concat([local, bcast], axis=0),
                           (1, 2 * c, nx, ny, nz))
        a = ops.sigmoid(self.gate(both))
        a = ops.reshape(a, (1, nx, ny, nz))
        one_minus = ops.add_scalar(ops.neg(a), 1.0)
        return ops.add(ops.mul(local, a), ops.mul(bcast, one_minus))


class ScaleMerger(Module):
    """Fold a coarse-to-fine list of volumes into the finest one.

    Walking from the coarsest level, each volume is trilinearly upsampled by
    two and added to the next finer one; a 1x1x1 projection is inserted only
    when channel counts differ.
    """

    def __init__(self, channels: list[int], rng: np.random.Generator):
        super().__init__()
        self.projs = ModuleList()
        for i in range(len(channels) - 1):
            if channels[i + 1] != channels[i]:
                self.projs.append(Conv3d(channels[i + 1], channels[i], 1, rng))
            else:
                self.projs.append(_Identity())

    def __call__(self, volumes: list[Tensor]) -> Tensor:
        if len(volumes) != len(self.projs) + 1:
            raise ContractViolation("ScaleMerger: wrong number of volumes")
        acc = volumes[-1]
        for i in range(len(volumes) - 2, -1, -1):
            up = ops.upsample_trilinear3d(
                ops.reshape(acc, (1,) + acc.shape), 2)
            up = ops.reshape(up, up.shape[1:])
            proj = self.projs[i]
            if not isinstance(proj, _Identity):
                p = proj(ops.reshape(up, (1,) + up.shape))
                up = ops.reshape(p, p.shape[1:])
            acc = ops.add(volumes[i], up)
        return acc


class _Identity(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return x


class ResBlock3d(Module):
    def __init__(self, cin: int, cout: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv3d(cin, cout, 3, rng, stride=stride, padding=1,
                            bias=False)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv3d(cout, cout, 3, rng, stride=1, padding=1,
                            bias=False)
        self.bn2 = BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv3d(cin, cout, 1, rng, stride=stride, bias=False)
            self.proj_bn = BatchNorm(cout)
        else:
            self.proj = None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        if self.proj is not None:
            x = self.proj_bn(self.proj(x))
        return ops.relu(ops.add(y, x))


class Encoder3d(Module):
    """Four residual stages at scales 1, 2, 4, 8 of the input volume."""

    def __init__(self, cin: int, base: int, rng: np.random.Generator):
        super().__init__()
        w = [base, base * 2, base * 4, base * 8]
        self.widths = w
        self.stem = Conv3d(cin, w[0], 1, rng)
        self.stages = ModuleList([
            ResBlock3d(w[0], w[0], 1, rng),
            ResBlock3d(w[0], w[1], 2, rng),
            ResBlock3d(w[1], w[2], 2, rng),
            ResBlock3d(w[2], w[3], 2, rng),
        ])

    def __call__(self, x: Tensor) -> list[Tensor]:
        x = self.stem(x)
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


class EncoderBypass(Module):
    """Ablation stand-in: strided downsampling plus 1x1x1 projections."""

    def __init__(self, cin: int, base: int, rng: np.random.Generator):
        super().__init__()
        self.widths = [base, base * 2, base * 4, base * 8]
        self.projs = ModuleList(
            Conv3d(cin, w, 1, rng) for w in self.widths)

    def __call__(self, x: Tensor) -> list[Tensor]:
        taps = []
        cur = x
        for i, proj in enumerate(self.projs):
            if i > 0:
                cur = ops.downsample_nearest3d(cur, 2)
            taps.append(proj(cur))
        return taps


class Decoder3d(Module):
    """Top-down feature pyramid over the encoder taps.

    Every tap is projected to a common width, upsampled coarse-to-fine with
    addition, then smoothed with a 3x3x3 convolution. Outputs are returned
    finest first and all carry the common width.
    """

    def __init__(self, tap_widths: list[int], c_out: int,
                 rng: np.random.Generator):
        super().__init__()
        self.laterals = ModuleList(
            Conv3d(w, c_out, 1, rng) for w in tap_widths)
        self.smooths = ModuleList(
            Conv3d(c_out, c_out, 3, rng, padding=1) for _ in tap_widths)

    def __call__(self, taps: list[Tensor]) -> list[Tensor]:
        if len(taps) != len(self.laterals):
            raise ContractViolation("Decoder3d: tap count mismatch")
        feats = [None] * len(taps)
        acc = None
        for i in range(len(taps) - 1, -1, -1):
            lat = self.laterals[i](taps[i])
            if acc is not None:
                lat = ops.add(lat, ops.upsample_trilinear3d(acc, 2))
            acc = lat
            feats[i] = self.smooths[i](acc)
        return feats


class DecoderBypass(Module):
    """Ablation stand-in: per-scale lateral projections, no top-down path."""

    def __init__(self, tap_widths: list[int], c_out: int,
                 rng: np.random.Generator):
        super().__init__()
        self.laterals = ModuleList(
            Conv3d(w, c_out, 1, rng) for w in tap_widths)

    def __call__(self, taps: list[Tensor]) -> list[Tensor]:
        return [lat(t) for lat, t in zip(self.laterals, taps)]


class OccupancyHead(Module):
    """Shared per-voxel two-layer perceptron from features to class logits,
    applied at every scale."""

    def __init__(self, c_in: int, hidden: int, n_classes: int,
                 rng: np.random.Generator):
        super().__init__()
        self.fc1 = Conv3d(c_in, hidden, 1, rng)
        self.fc2 = Conv3d(hidden, n_classes, 1, rng)

    def __call__(self, feats: list[Tensor]) -> list[Tensor]:
        return [self.fc2(ops.relu(self.fc1(f))) for f in feats]


def logits_to_labels(logits: np.ndarray) -> np.ndarray:
    """(Cls, nx, ny, nz) logits or probs -> uint8 labels, ties to the lowest
    class index."""
    return np.argmax(logits, axis=0).astype(np.uint8)
