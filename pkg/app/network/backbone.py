"""
Desk-scale backbone and feature pyramid.

Stem (two stride-2 convs) then three stages, each a stride-2 conv followed
by a stride-1 conv, give C3-C5 at strides 8/16/32. The pyramid uses 1x1
laterals, nearest x2 top-down sums and 3x3 smoothing; P6/P7 come from
stride-2 convs on the level above.
"""
from typing import List, Tuple

from app.errors import DimensionError
from app.models.config import ModelConfig
from app.tensorcore import Tensor, add, conv2d, relu, upsample_nearest2x
from .params import ParamStore

FeaturePyramid = List[Tuple[int, Tensor]]


def build_backbone_params(store: ParamStore, cfg: ModelConfig) -> None:
    c_prev = 3
    for i, c in enumerate(cfg.stem_channels):
        store.conv(f"backbone.stem{i}", c, c_prev, 3)
        c_prev = c
    for k, c in zip((3, 4, 5), cfg.backbone_channels):
        store.conv(f"backbone.c{k}.down", c, c_prev, 3)
        store.conv(f"backbone.c{k}.conv", c, c, 3)
        c_prev = c
    fpn = cfg.fpn_channels
    for k, c in zip((3, 4, 5), cfg.backbone_channels):
        if k - 3 < cfg.num_levels:
            store.conv(f"fpn.lateral{k}", fpn, c, 1)
            store.conv(f"fpn.smooth{k}", fpn, fpn, 3)
    for k in range(6, 3 + cfg.num_levels):
        store.conv(f"fpn.p{k}", fpn, fpn, 3)


def _conv(x: Tensor, store: ParamStore, prefix: str, stride: int = 1) -> Tensor:
    w = store[f"{prefix}.weight"]
    return conv2d(x, w, store[f"{prefix}.bias"], stride=stride, pad=w.shape[-1] // 2)


def required_divisor(cfg: ModelConfig) -> int:
    return max(32, cfg.strides[-1])


def backbone_fpn_forward(images: Tensor, store: ParamStore, cfg: ModelConfig) -> FeaturePyramid:
    """[N,3,H,W] (or [3,H,W]) images to [(stride, P_l)] for the configured levels."""
    h, w = images.shape[-2:]
    div = required_divisor(cfg)
    if h % div or w % div:
        raise DimensionError(f"Input spatial axes H={h}, W={w} must be divisible by {div}")

    x = images
    for i in range(len(cfg.stem_channels)):
        x = relu(_conv(x, store, f"backbone.stem{i}", stride=2))
    feats = {}
    for k in (3, 4, 5):
        x = relu(_conv(x, store, f"backbone.c{k}.down", stride=2))
        x = relu(_conv(x, store, f"backbone.c{k}.conv"))
        feats[k] = x

    top = min(5, 2 + cfg.num_levels)
    merged = {}
    prev = None
    for k in range(top, 2, -1):
        lateral = _conv(feats[k], store, f"fpn.lateral{k}")
        prev = lateral if prev is None else add(lateral, upsample_nearest2x(prev))
        merged[k] = prev
    levels = [_conv(merged[k], store, f"fpn.smooth{k}") for k in range(3, top + 1)]

    for k in range(6, 3 + cfg.num_levels):
        src = levels[-1] if k == 6 else relu(levels[-1])
        levels.append(_conv(src, store, f"fpn.p{k}", stride=2))
    return list(zip(cfg.strides, levels))
