"""
Prediction heads shared across pyramid levels: classification/center-ness
(and optional box) head, the keypoint tower with its naive or KPAlign
regressor, and the training-only keypoint heatmap branch.

Keypoint offsets are laid out as 2K channels (dx_0, dy_0, dx_1, ...) in
stride units of the level the location lives on.
"""
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.errors import VariantError
from app.models.config import HeadVariant, ModelConfig, variant_problems
from app.tensorcore import (
    Tensor,
    add,
    bilinear_sample,
    concat,
    conv2d,
    exp,
    getitem,
    matmul,
    relu,
    reshape,
    scale,
    transpose,
)
from .params import ParamStore, prior_bias

HEATMAP_STRIDES = {8: 0, 16: 1}


def _conv(x: Tensor, store: ParamStore, prefix: str, stride: int = 1) -> Tensor:
    w = store[f"{prefix}.weight"]
    return conv2d(x, w, store[f"{prefix}.bias"], stride=stride, pad=w.shape[-1] // 2)


def _batched(x: Tensor) -> Tensor:
    return x if x.ndim == 4 else reshape(x, (1,) + x.shape)


def check_variant(variant: HeadVariant) -> None:
    problems = variant_problems(variant)
    if problems:
        raise VariantError("; ".join(problems), field_path="variant")


def keypoint_groups(cfg: ModelConfig, variant: HeadVariant) -> List[List[int]]:
    if variant.grouped:
        return [list(g) for g in cfg.groups]
    return [[t] for t in range(cfg.num_keypoints)]


def sample_channels(cfg: ModelConfig, variant: HeadVariant) -> int:
    return cfg.fpn_channels // 4 if variant.separate_features else cfg.fpn_channels


# ---------------------------------------------------------------- parameters

def build_head_params(store: ParamStore, cfg: ModelConfig, variant: HeadVariant) -> None:
    c = cfg.fpn_channels
    k = cfg.num_keypoints
    for i in range(cfg.tower_convs):
        store.conv(f"head.tower{i}", c, c, 3, init="normal")
    store.conv("head.cls", 1, c, 1, init="normal", bias=prior_bias())
    store.conv("head.ctr", 1, c, 1, init="normal")
    if variant.box_branch:
        store.conv("head.box", 4, c, 1, init="normal")

    for i in range(cfg.tower_convs):
        store.conv(f"kp.tower{i}", c, c, 3, init="normal")
    if not variant.align:
        kk = cfg.naive_final_kernel
        store.conv("kp.final", 2 * k, c, kk, init="normal")
    else:
        groups = keypoint_groups(cfg, variant)
        g_count = len(groups)
        store.conv("kp.locator", 2 * g_count, c, 3, init="zeros")
        cs = sample_channels(cfg, variant)
        if variant.separate_features:
            store.conv("kp.sep", g_count * cs, c, 1, init="normal")
        for g, members in enumerate(groups):
            store.conv(f"kp.pred{g}", 2 * len(members), cs, 1, init="normal")

    if variant.heatmap_aux:
        hc = cfg.heatmap_channels
        store.conv("hm.conv0", hc, c, 3, init="normal")
        store.conv("hm.conv1", hc, hc, 3, init="normal")
        store.conv("hm.out", k, hc, 3, init="normal", bias=prior_bias())


# ---------------------------------------------------------------- forwards

def shared_head_forward(
    pyramid: Sequence, store: ParamStore, cfg: ModelConfig, variant: HeadVariant
) -> List[Dict[str, Optional[Tensor]]]:
    """Per level: cls logits [N,1,H,W], center-ness logits [N,1,H,W], box offsets [N,4,H,W] or None."""
    outs = []
    for _stride, p in pyramid:
        x = _batched(p)
        for i in range(cfg.tower_convs):
            x = relu(_conv(x, store, f"head.tower{i}"))
        box = exp(_conv(x, store, "head.box")) if variant.box_branch else None
        outs.append({
            "cls": _conv(x, store, "head.cls"),
            "ctr": _conv(x, store, "head.ctr"),
            "box": box,
        })
    return outs


def keypoint_tower(p: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    x = _batched(p)
    for i in range(cfg.tower_convs):
        x = relu(_conv(x, store, f"kp.tower{i}"))
    return x


def naive_keypoint_head(tower: Tensor, store: ParamStore) -> Tensor:
    """[N,C,H,W] tower features to [N,2K,H,W] offsets from one feature vector per location."""
    return _conv(tower, store, "kp.final")


def _grid(h: int, w: int, dtype) -> np.ndarray:
    """(x, y) = (j, i) per location, [H*W, 2] row-major."""
    ii, jj = np.mgrid[0:h, 0:w]
    return np.stack([jj.reshape(-1), ii.reshape(-1)], axis=-1).astype(dtype)


def kpalign_forward(
    tower: Tensor,
    finer_tower: Optional[Tensor],
    variant: HeadVariant,
    groups: Sequence[Sequence[int]],
    store: ParamStore,
) -> Dict[str, Tensor]:
    """Locate, sample and predict keypoint offsets for one level.

    Returns ``kp`` [N,2K,H,W] offsets (residual + locator offset of the
    keypoint's group) and ``locator`` [N,H*W,G,2], the group sample offsets
    in cells of this level relative to each location.
    """
    if not variant.align:
        raise VariantError("kpalign_forward needs align = true", field_path="variant.align")
    check_variant(variant)
    tower = _batched(tower)
    n, c, h, w = tower.shape
    g_count = len(groups)
    dtype = tower.dtype
    num_kp = sum(len(g) for g in groups)

    if variant.aligner_disabled:
        locator = Tensor(np.zeros((n, h * w, g_count, 2), dtype=dtype))
    else:
        raw = _conv(tower, store, "kp.locator")                      # [N, 2G, H, W]
        locator = reshape(transpose(raw, (0, 2, 3, 1)), (n, h * w, g_count, 2))

    use_finer = variant.finer_sampling and finer_tower is not None and not variant.aligner_disabled
    source = _batched(finer_tower) if use_finer else tower
    if variant.separate_features:
        source = _conv(source, store, "kp.sep")                     # [N, G*C', H', W']
        cs = source.shape[1] // g_count
        features = reshape(source, (n, g_count, cs) + source.shape[-2:])
        group_axis = g_count
    else:
        cs = source.shape[1]
        features = reshape(source, (n, 1, cs) + source.shape[-2:])
        group_axis = 1

    # sample points: (j, i) + o_g, mapped to the finer grid when needed
    base = _grid(h, w, dtype)[None, :, None, :]                     # [1, HW, 1, 2]
    points = add(locator, base)                                     # [N, HW, G, 2]
    if use_finer:
        points = add(scale(points, 2.0), np.asarray(0.5, dtype=dtype))
    points = transpose(points, (0, 2, 1, 3))                        # [N, G, HW, 2]
    if group_axis == 1:
        points = reshape(points, (n, 1, g_count * h * w, 2))
    sampled = bilinear_sample(features, points)                     # [N, g', P, C']
    sampled = reshape(sampled, (n, g_count, h * w, cs))

    pieces = []
    order = []
    for g, members in enumerate(groups):
        weight = store[f"kp.pred{g}.weight"]                        # [2|g|, C', 1, 1]
        bias = store[f"kp.pred{g}.bias"]
        wmat = transpose(reshape(weight, (weight.shape[0], cs)), (1, 0))
        v_g = getitem(sampled, (slice(None), g))                    # [N, HW, C']
        residual = add(matmul(v_g, wmat), bias)                     # [N, HW, 2|g|]
        o_g = getitem(locator, (slice(None), slice(None), g))       # [N, HW, 2]
        tiled = concat([o_g] * len(members), axis=-1) if len(members) > 1 else o_g
        pieces.append(add(residual, tiled))
        for t in members:
            order.extend([2 * t, 2 * t + 1])

    flat = concat(pieces, axis=-1) if len(pieces) > 1 else pieces[0]  # [N, HW, 2K] in group order
    inverse = np.argsort(np.asarray(order))
    flat = getitem(flat, (slice(None), slice(None), inverse))
    kp = transpose(reshape(flat, (n, h, w, 2 * num_kp)), (0, 3, 1, 2))
    return {"kp": kp, "locator": locator}


def heatmap_branch_forward(p: Tensor, store: ParamStore) -> Tensor:
    """Keypoint heatmap logits [N,K,H',W'] for the level at the heatmap stride."""
    x = relu(_conv(_batched(p), store, "hm.conv0"))
    x = relu(_conv(x, store, "hm.conv1"))
    return _conv(x, store, "hm.out")
