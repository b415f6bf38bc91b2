"""
Keypoint regression network built on app.tensorcore
"""
from .backbone import FeaturePyramid, backbone_fpn_forward, build_backbone_params, required_divisor
from .heads import (
    heatmap_branch_forward,
    keypoint_groups,
    keypoint_tower,
    kpalign_forward,
    naive_keypoint_head,
    shared_head_forward,
)
from .model import HeadOutputs, KeypointNet, LevelOutput
from .params import ParamStore, prior_bias

__all__ = [
    "FeaturePyramid",
    "backbone_fpn_forward",
    "build_backbone_params",
    "required_divisor",
    "heatmap_branch_forward",
    "keypoint_groups",
    "keypoint_tower",
    "kpalign_forward",
    "naive_keypoint_head",
    "shared_head_forward",
    "HeadOutputs",
    "KeypointNet",
    "LevelOutput",
    "ParamStore",
    "prior_bias",
]
