"""End-to-end model: cameras in, multi-scale occupancy logits out, plus the
auxiliary detection outputs during training.

The forward path for one sample:
  images (n_cameras, 3, H, W)
    -> 2D pyramid (3 levels, common width)
    -> sparse lift to voxel volumes + pillar maps per level
    -> per-level gated fusion, coarse-to-fine merge into one volume
    -> 3D encoder taps (4 scales) -> top-down decoder -> class logits at 4
       scales, finest first
    -> detection branch consuming the pyramid, pillar maps and logit
       volumes

The view transform is geometry, not parameters: it is built per rig and
passed in, so checkpoints stay rig-independent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .aux_detection import DetectionBranch, HeadOutput
from .config import RunConfig
from .errors import ContractViolation
from .geometry import CameraRig, VoxelGridSpec
from .image_encoder import ImageEncoder
from .layers import Module, ModuleList
from .occupancy_net import (Decoder3d, DecoderBypass, Encoder3d,
                            EncoderBypass, FusionGate, OccupancyHead,
                            ScaleMerger, logits_to_labels)
from .tensor import Tensor
from .view_transform import ViewTransform, apply_view_transform


@dataclass
class ModelOutputs:
    feats: list          # image pyramid, (n_cameras, C, H_l, W_l)
    bevs: list           # pillar maps, (C, nx_l, ny_l)
    fused: list          # fused volumes per lift level
    logits: list         # class logits per decoder scale, finest first
    det: list            # HeadOutput list (empty when the branch is off)


class OccupancyModel(Module):
    N_DECODER_SCALES = 4

    def __init__(self, config: RunConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.PCG64(config.seed))
        c = config.feat_channels
        self.image_encoder = ImageEncoder(c, rng)
        self.fusion = ModuleList(
            FusionGate(c, rng) for _ in range(config.n_levels))
        self.merger = ScaleMerger([c] * config.n_levels, rng)
        if config.use_encoder3d:
            self.encoder3d = Encoder3d(c, config.trunk_base, rng)
        else:
            self.encoder3d = EncoderBypass(c, config.trunk_base, rng)
        if config.use_decoder3d:
            self.decoder3d = Decoder3d(self.encoder3d.widths,
                                       config.decoder_channels, rng)
        else:
            self.decoder3d = DecoderBypass(self.encoder3d.widths,
                                           config.decoder_channels, rng)
        self.occ_head = OccupancyHead(config.decoder_channels,
                                      config.head_hidden, config.n_classes,
                                      rng)
        if config.use_aux:
            self.det_branch = DetectionBranch(
                c, config.n_queries, config.n_layers, config.n_det_classes,
                config.n_classes, config.n_levels, config.head_hidden,
                config.box_size_bias, rng, group=config.attn_group,
                use_self_attention=config.use_self_attention,
                use_visual=config.use_visual_ca,
                use_bev=config.use_bev_ca,
                use_volume=config.use_volume_ca)
        else:
            self.det_branch = None

    def volume_grids(self) -> list:
        return [self.config.grid.scaled(2 ** i)
                for i in range(self.N_DECODER_SCALES)]

    def lift_grids(self) -> list:
        return [self.config.grid.scaled(2 ** i)
                for i in range(self.config.n_levels)]

    def forward(self, images: Tensor, vt: ViewTransform, rig: CameraRig,
                with_detection: bool = True) -> ModelOutputs:
        cfg = self.config
        if images.shape != (cfg.n_cameras, 3, cfg.image_height,
                            cfg.image_width):
            raise ContractViolation(
                f"forward: images {images.shape}, expected "
                f"({cfg.n_cameras},3,{cfg.image_height},{cfg.image_width})")
        feats = self.image_encoder(images)
        locals_, bevs = apply_view_transform(vt, feats)
        fused = [gate(lv, bv)
                 for gate, lv, bv in zip(self.fusion, locals_, bevs)]
        merged = self.merger(fused)
        taps = self.encoder3d(ops.reshape(merged, (1,) + merged.shape))
        dec = self.decoder3d(taps)
        logits_b = self.occ_head(dec)
        logits = [ops.reshape(t, t.shape[1:]) for t in logits_b]
        det: list[HeadOutput] = []
        if with_detection and self.det_branch is not None:
            det = self.det_branch(feats, bevs, logits, self.volume_grids(),
                                  rig, cfg.grid, self.lift_grids())
        return ModelOutputs(feats=feats, bevs=bevs, fused=fused,
                            logits=logits, det=det)

    def predict_labels(self, images: np.ndarray, vt: ViewTransform,
                       rig: CameraRig) -> np.ndarray:
        """Inference: finest-scale argmax labels, (nx, ny, nz) uint8."""
        was_training = self.training
        self.eval()
        try:
            out = self.forward(Tensor(images), vt, rig, with_detection=False)
        finally:
            self.train(was_training)
        return logits_to_labels(out.logits[0].data)


def detection_targets(boxes) -> tuple[np.ndarray, np.ndarray]:
    """Dynamic boxes -> (9-vector array, detection class ids).

    Semantic ids 1..n_det map to detection classes 0..n_det-1.
    """
    if not boxes:
        return np.zeros((0, 9)), np.zeros(0, dtype=np.int64)
    nine = np.stack([b.nine() for b in boxes])
    cls = np.array([b.class_id - 1 for b in boxes], dtype=np.int64)
    if (cls < 0).any():
        raise ContractViolation("detection_targets: free-class box")
    return nine, cls
