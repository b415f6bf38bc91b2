"""
Keypoint and box arithmetic: pseudo-boxes, IoU, greedy NMS, OKS and
horizontal flips. Everything here is a pure function.
"""
from typing import List, Sequence, Tuple, Union

import numpy as np

from app.errors import AnnotationError
from app.models.schemas import Box, InstanceAnnotation
from app.models.skeleton import FLIP_PERMUTATION

BoxLike = Union[Box, Tuple[float, float, float, float], Sequence[float]]


def _corners(box: BoxLike) -> Tuple[float, float, float, float]:
    if isinstance(box, Box):
        return box.as_tuple()
    x0, y0, x1, y1 = box
    return float(x0), float(y0), float(x1), float(y1)


def min_enclosing_rect(ann: InstanceAnnotation) -> Box:
    """Tightest axis-aligned box over the labeled (visibility > 0) keypoints."""
    kps = ann.kp_array()
    labeled = kps[ann.vis_array() > 0]
    if len(labeled) == 0:
        raise AnnotationError("Cannot build a pseudo-box: annotation has no labeled keypoints")
    x0, y0 = labeled.min(axis=0)
    x1, y1 = labeled.max(axis=0)
    return Box(x0=float(x0), y0=float(y0), x1=float(x1), y1=float(y1))


def enclosing_rect_of_points(points: np.ndarray) -> Box:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return Box(x0=float(x0), y0=float(y0), x1=float(x1), y1=float(y1))


def iou(a: BoxLike, b: BoxLike) -> float:
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N,4] and [M,4] corner arrays."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def nms(detections: Sequence[Tuple[float, BoxLike]], threshold: float = 0.5) -> List[int]:
    """Greedy suppression; returns kept original indices in score order.

    A detection survives iff its IoU with every already-kept one is at most
    ``threshold``. Equal scores keep the lower original index first.
    """
    if not detections:
        return []
    scores = np.asarray([float(s) for s, _ in detections])
    boxes = np.asarray([_corners(b) for _, b in detections])
    # stable sort on -score gives the lower-index tie-break
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    kept: List[int] = []
    for idx in order:
        idx = int(idx)
        if all(overlaps[idx, k] <= threshold for k in kept):
            kept.append(idx)
    return kept


def oks(pred: np.ndarray, gt: InstanceAnnotation, sigmas: Sequence[float]) -> float:
    """COCO object keypoint similarity with per-keypoint constants 2*sigma."""
    if gt.area <= 0:
        raise AnnotationError(f"OKS needs a positive ground-truth area, got {gt.area}")
    vis = gt.vis_array() > 0
    if not vis.any():
        raise AnnotationError("OKS needs at least one labeled ground-truth keypoint")
    sig = np.asarray(sigmas, dtype=np.float64)
    if np.any(sig <= 0):
        raise AnnotationError("OKS sigmas must be positive")
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    g = gt.kp_array()
    d2 = ((p - g) ** 2).sum(axis=1)
    kappa = 2.0 * sig
    e = d2 / (2.0 * gt.area * kappa ** 2)
    return float(np.exp(-e)[vis].sum() / vis.sum())


def flip_keypoints(ann: InstanceAnnotation, image_width: float) -> InstanceAnnotation:
    """Mirror x' = W - x and swap left/right slots."""
    kps = ann.kp_array()
    vis = ann.vis_array()
    k = len(kps)
    perm = FLIP_PERMUTATION if k == len(FLIP_PERMUTATION) else list(range(k))
    new_kps = np.empty_like(kps)
    new_vis = np.empty_like(vis)
    for t in range(k):
        dst = perm[t]
        new_kps[dst, 0] = image_width - kps[t, 0]
        new_kps[dst, 1] = kps[t, 1]
        new_vis[dst] = vis[t]
    return InstanceAnnotation(
        keypoints=[(float(x), float(y)) for x, y in new_kps],
        visibility=[int(v) for v in new_vis],
        area=ann.area,
    )
