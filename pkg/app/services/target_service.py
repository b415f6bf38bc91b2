"""
Per-location training targets: positive/negative labels, stride-normalized
keypoint offsets with masks, center-ness, box offsets and keypoint heatmaps.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.models.config import HeadVariant, LevelAssignment, ModelConfig
from app.models.schemas import Box, InstanceAnnotation
from app.services.geometry import min_enclosing_rect

logger = logging.getLogger(__name__)


class LocationTargets(BaseModel):
    """Targets of one pyramid level; arrays are C-before-spatial."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    level: int
    stride: int
    cls: np.ndarray = Field(..., description="[H, W] in {0, 1}")
    instance_id: np.ndarray = Field(..., description="[H, W], -1 on negatives")
    kp_offsets: np.ndarray = Field(..., description="[2K, H, W], (dx_t, dy_t) interleaved, stride units")
    kp_mask: np.ndarray = Field(..., description="[2K, H, W] in {0, 1}")
    centerness: np.ndarray = Field(..., description="[H, W], 0 on negatives")
    box_offsets: np.ndarray = Field(..., description="[4, H, W] (l, t, r, b) / stride")

    @property
    def num_positives(self) -> int:
        return int(self.cls.sum())


class HeatmapTargets(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    stride: int
    labels: np.ndarray = Field(..., description="[K, H', W'] in {0, 1}")
    collisions: int = 0


class ImageTargets(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    levels: List[LocationTargets]
    heatmap: Optional[HeatmapTargets] = None


def location_center(stride: int, i: int, j: int) -> Tuple[float, float]:
    return stride / 2 + j * stride, stride / 2 + i * stride


def grid_centers(stride: int, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """x centers per column and y centers per row."""
    xs = stride / 2 + np.arange(width) * stride
    ys = stride / 2 + np.arange(height) * stride
    return xs, ys


def keypoint_offsets(
    ann: InstanceAnnotation, center: Tuple[float, float], stride: int
) -> Tuple[np.ndarray, np.ndarray]:
    kps = ann.kp_array()
    offsets = ((kps - np.asarray(center, dtype=np.float64)) / stride).reshape(-1)
    mask = np.repeat((ann.vis_array() > 0).astype(np.float64), 2)
    return offsets, mask


def decode_keypoints(offsets: np.ndarray, center: Tuple[float, float], stride: int) -> np.ndarray:
    return np.asarray(center, dtype=np.float64) + np.asarray(offsets, dtype=np.float64).reshape(-1, 2) * stride


def _side_distances(box: Box, center: Tuple[float, float]) -> Tuple[float, float, float, float]:
    x, y = center
    return x - box.x0, y - box.y0, box.x1 - x, box.y1 - y


def centerness_target(box: Box, center: Tuple[float, float]) -> float:
    l, t, r, b = _side_distances(box, center)
    if min(l, t, r, b) <= 0:
        return 0.0
    return float(np.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b))))


def box_offsets(box: Box, center: Tuple[float, float], stride: int) -> np.ndarray:
    return np.clip(np.asarray(_side_distances(box, center), dtype=np.float64), 0.0, None) / stride


def _assigned_level(size: float, assignments: Sequence[LevelAssignment]) -> int:
    for a in assignments:
        if a.contains(size):
            return a.level
    lo = assignments[0].size_range[0]
    return assignments[0].level if size <= lo else assignments[-1].level


def _place_orphans(
    boxes: Sequence[Box],
    level_shapes: Sequence[Tuple[int, int]],
    assignments: Sequence[LevelAssignment],
    best_ids: List[np.ndarray],
) -> None:
    """Give every instance without positives the cell nearest its box center.

    Smaller boxes are placed first and a placed cell is never taken back, so
    an owner displaced here is queued again and settles on a cell of its own.
    """
    def orphaned(n: int) -> bool:
        return not any((ids == n).any() for ids in best_ids)

    queue = sorted((n for n in range(len(boxes)) if orphaned(n)), key=lambda n: (boxes[n].area, n))
    pinned = [np.zeros(ids.shape, dtype=bool) for ids in best_ids]
    while queue:
        n = queue.pop(0)
        box = boxes[n]
        level = _assigned_level(max(box.width, box.height), assignments)
        s = assignments[level].stride
        h, w = level_shapes[level]
        xs, ys = grid_centers(s, h, w)
        bx, by = (box.x0 + box.x1) / 2, (box.y0 + box.y1) / 2
        d2 = (ys[:, None] - by) ** 2 + (xs[None, :] - bx) ** 2
        d2[pinned[level]] = np.inf
        if not np.isfinite(d2).any():
            logger.warning(f"⚠️ No location left for instance {n} on level {level}")
            continue
        # first minimum wins: ties go to the lower index
        i, j = np.unravel_index(int(np.argmin(d2)), d2.shape)
        previous = int(best_ids[level][i, j])
        best_ids[level][i, j] = n
        pinned[level][i, j] = True
        if previous >= 0 and orphaned(previous):
            queue.append(previous)


def assign_locations(
    annotations: Sequence[InstanceAnnotation],
    level_shapes: Sequence[Tuple[int, int]],
    assignments: Sequence[LevelAssignment],
    num_keypoints: Optional[int] = None,
) -> List[LocationTargets]:
    """FCOS-style assignment on pseudo-boxes.

    A location is positive for an instance when its center lies inside the
    pseudo-box (boundary included) and the box's longer side falls in the
    level's size range. Overlaps go to the smallest box, then the lower
    instance index. An instance left without positives takes the cell
    nearest its box center on the level its size maps to, whoever owned it.
    """
    num_kp = num_keypoints if num_keypoints is not None else (annotations[0].num_keypoints if annotations else 0)
    boxes = [min_enclosing_rect(a) for a in annotations]
    out: List[LocationTargets] = []
    best_ids: List[np.ndarray] = []

    for assignment, (h, w) in zip(assignments, level_shapes):
        s = assignment.stride
        xs, ys = grid_centers(s, h, w)
        best_area = np.full((h, w), np.inf)
        best_id = np.full((h, w), -1, dtype=np.int64)
        for n, box in enumerate(boxes):
            if not assignment.contains(max(box.width, box.height)):
                continue
            inside = ((ys >= box.y0) & (ys <= box.y1))[:, None] & ((xs >= box.x0) & (xs <= box.x1))[None, :]
            win = inside & (box.area < best_area)
            best_area[win] = box.area
            best_id[win] = n
        best_ids.append(best_id)

    _place_orphans(boxes, level_shapes, assignments, best_ids)

    for assignment, (h, w), best_id in zip(assignments, level_shapes, best_ids):
        s = assignment.stride
        cls = (best_id >= 0).astype(np.float64)
        kp_offsets = np.zeros((2 * num_kp, h, w))
        kp_mask = np.zeros((2 * num_kp, h, w))
        centerness = np.zeros((h, w))
        box_off = np.zeros((4, h, w))
        for i, j in zip(*np.nonzero(best_id >= 0)):
            n = int(best_id[i, j])
            center = location_center(s, int(i), int(j))
            kp_offsets[:, i, j], kp_mask[:, i, j] = keypoint_offsets(annotations[n], center, s)
            centerness[i, j] = centerness_target(boxes[n], center)
            box_off[:, i, j] = box_offsets(boxes[n], center, s)
        out.append(LocationTargets(
            level=assignment.level,
            stride=s,
            cls=cls,
            instance_id=best_id,
            kp_offsets=kp_offsets,
            kp_mask=kp_mask,
            centerness=centerness,
            box_offsets=box_off,
        ))
    return out


def nearest_cell(x: float, y: float, stride: int, height: int, width: int) -> Tuple[int, int]:
    """Grid cell whose center is nearest (x, y); ties go to the lower index."""
    # ceil(u - 0.5) rounds half down
    j = int(np.ceil(x / stride - 1.0))
    i = int(np.ceil(y / stride - 1.0))
    return min(max(i, 0), height - 1), min(max(j, 0), width - 1)


def heatmap_targets(
    annotations: Sequence[InstanceAnnotation], stride: int, grid: Tuple[int, int], num_keypoints: Optional[int] = None
) -> HeatmapTargets:
    h, w = grid
    k = num_keypoints if num_keypoints is not None else (annotations[0].num_keypoints if annotations else 0)
    labels = np.zeros((k, h, w))
    collisions = 0
    for ann in annotations:
        for t, ((x, y), v) in enumerate(zip(ann.keypoints, ann.visibility)):
            if v == 0:
                continue
            i, j = nearest_cell(x, y, stride, h, w)
            if labels[t, i, j] == 1:
                collisions += 1
            labels[t, i, j] = 1
    if collisions:
        logger.debug(f"heatmap targets: {collisions} keypoint collision(s) at stride {stride}")
    return HeatmapTargets(stride=stride, labels=labels, collisions=collisions)


class TargetBuilder:
    """Builds all targets of one image for a model configuration."""

    def __init__(self, model_cfg: ModelConfig, variant: HeadVariant):
        self.model_cfg = model_cfg
        self.variant = variant
        self.assignments = model_cfg.level_assignments()

    def level_shapes(self, image_hw: Tuple[int, int]) -> List[Tuple[int, int]]:
        h, w = image_hw
        return [(h // a.stride, w // a.stride) for a in self.assignments]

    def build(self, annotations: Sequence[InstanceAnnotation], image_hw: Tuple[int, int]) -> ImageTargets:
        levels = assign_locations(
            annotations, self.level_shapes(image_hw), self.assignments, self.model_cfg.num_keypoints
        )
        heatmap = None
        if self.variant.heatmap_aux:
            s = self.variant.heatmap_stride
            heatmap = heatmap_targets(
                annotations, s, (image_hw[0] // s, image_hw[1] // s), self.model_cfg.num_keypoints
            )
        return ImageTargets(levels=levels, heatmap=heatmap)
