"""
Full network: backbone + FPN + shared heads + keypoint regressor, with the
heatmap branch attached in training mode only.
"""
import logging
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.errors import VariantError
from app.models.config import HeadVariant, ModelConfig
from app.tensorcore import Tensor
from .backbone import FeaturePyramid, backbone_fpn_forward, build_backbone_params
from .heads import (
    HEATMAP_STRIDES,
    build_head_params,
    check_variant,
    heatmap_branch_forward,
    keypoint_groups,
    keypoint_tower,
    kpalign_forward,
    naive_keypoint_head,
    shared_head_forward,
)
from .params import ParamStore

logger = logging.getLogger(__name__)


class LevelOutput(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    level: int
    stride: int
    cls: Tensor
    ctr: Tensor
    kp: Tensor
    box: Optional[Tensor] = None
    locator: Optional[Tensor] = None


class HeadOutputs(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    levels: List[LevelOutput]
    heatmap: Optional[Tensor] = None


class KeypointNet:
    def __init__(self, cfg: ModelConfig, variant: HeadVariant, dtype=np.float32):
        check_variant(variant)
        if variant.heatmap_aux and HEATMAP_STRIDES[variant.heatmap_stride] >= cfg.num_levels:
            raise VariantError(
                f"heatmap_stride {variant.heatmap_stride} needs a pyramid level at that stride "
                f"(num_levels = {cfg.num_levels})",
                field_path="variant.heatmap_stride",
            )
        self.cfg = cfg
        self.variant = variant
        self.groups = keypoint_groups(cfg, variant)
        self.params = ParamStore(seed=cfg.init_seed, dtype=dtype)
        build_backbone_params(self.params, cfg)
        build_head_params(self.params, cfg, variant)
        logger.info(
            f"KeypointNet built: {len(self.params)} tensors, {self.params.num_scalars()} scalars, "
            f"align={variant.align} groups={len(self.groups)} heatmap_aux={variant.heatmap_aux}"
        )

    @property
    def dtype(self):
        return self.params.dtype

    def pyramid(self, images: Tensor) -> FeaturePyramid:
        return backbone_fpn_forward(images, self.params, self.cfg)

    def forward(self, images: Tensor, training: bool = True) -> HeadOutputs:
        pyramid = self.pyramid(images)
        shared = shared_head_forward(pyramid, self.params, self.cfg, self.variant)
        towers = [keypoint_tower(p, self.params, self.cfg) for _, p in pyramid]

        levels = []
        for level, ((stride, _), heads) in enumerate(zip(pyramid, shared)):
            locator = None
            if self.variant.align:
                finer = towers[level - 1] if level > 0 else None
                out = kpalign_forward(towers[level], finer, self.variant, self.groups, self.params)
                kp, locator = out["kp"], out["locator"]
            else:
                kp = naive_keypoint_head(towers[level], self.params)
            levels.append(LevelOutput(
                level=level, stride=stride, cls=heads["cls"], ctr=heads["ctr"],
                kp=kp, box=heads["box"], locator=locator,
            ))

        heatmap = None
        if training and self.variant.heatmap_aux:
            heatmap = heatmap_branch_forward(pyramid[HEATMAP_STRIDES[self.variant.heatmap_stride]][1], self.params)
        return HeadOutputs(levels=levels, heatmap=heatmap)

    __call__ = forward

    def drop_heatmap_branch(self) -> int:
        """Remove the training-only heatmap parameters."""
        return self.params.delete_prefix("hm.")
