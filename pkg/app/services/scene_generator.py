"""
Procedural multi-person stick-figure scenes with exact 17-keypoint labels.

A scene is a pure function of (spec, index): all randomness comes from a
Philox stream keyed by the spec seed with the scene index in the counter.
Keypoints are snapped to the 1/16-pixel grid the rasterizer draws on.
"""
import json
import logging
import os
from typing import Iterator, List, Tuple

import cv2
import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, Field, ValidationError

from app.errors import DatasetError, ManifestVersionError
from app.models.config import FORMAT_VERSION, SceneSpec
from app.models.schemas import InstanceAnnotation, Sample
from app.models.skeleton import LIMBS
from app.services import rng as rng_streams

logger = logging.getLogger(__name__)

SUBPIXEL_SHIFT = 4
SUBPIXEL = 1 << SUBPIXEL_SHIFT

# neutral standing pose, unit height, y down, person's left on +x
CANONICAL_POSE = np.array([
    (0.00, 0.08),
    (0.03, 0.06), (-0.03, 0.06),
    (0.06, 0.08), (-0.06, 0.08),
    (0.12, 0.22), (-0.12, 0.22),
    (0.18, 0.38), (-0.18, 0.38),
    (0.20, 0.52), (-0.20, 0.52),
    (0.08, 0.55), (-0.08, 0.55),
    (0.09, 0.76), (-0.09, 0.76),
    (0.10, 0.97), (-0.10, 0.97),
])

LIMB_COLORS = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
], dtype=np.uint8)

# (joint, child, grandchild, swing range of the first segment, bend range)
_CHAINS = [
    (5, 7, 9, 1.3, 1.2),
    (6, 8, 10, 1.3, 1.2),
    (11, 13, 15, 0.5, 0.6),
    (12, 14, 16, 0.5, 0.6),
]


def _rotate(v: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def random_pose(rng: np.random.Generator) -> np.ndarray:
    """Perturbed canonical pose in unit coordinates, [17, 2]."""
    pose = CANONICAL_POSE.copy()
    for root, mid, tip, swing, bend in _CHAINS:
        upper = CANONICAL_POSE[mid] - CANONICAL_POSE[root]
        lower = CANONICAL_POSE[tip] - CANONICAL_POSE[mid]
        a1 = rng.uniform(-swing, swing)
        a2 = a1 + rng.uniform(-bend, bend)
        pose[mid] = pose[root] + _rotate(upper, a1)
        pose[tip] = pose[mid] + _rotate(lower, a2)
    head_tilt = rng.uniform(-0.3, 0.3)
    neck = (pose[5] + pose[6]) / 2
    for t in range(5):
        pose[t] = neck + _rotate(pose[t] - neck, head_tilt)
    lean = rng.uniform(-0.25, 0.25)
    center = pose.mean(axis=0)
    pose = np.stack([center + _rotate(p - center, lean) for p in pose])
    pose[:, 0] *= rng.uniform(0.8, 1.25)
    return pose


def _snap(points: np.ndarray) -> np.ndarray:
    return np.round(points * SUBPIXEL) / SUBPIXEL


def _to_cv(point: np.ndarray) -> Tuple[int, int]:
    # pixel c covers [c, c+1); cv2 puts pixel centers on integers
    return int(round((point[0] - 0.5) * SUBPIXEL)), int(round((point[1] - 0.5) * SUBPIXEL))


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.45, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=(2, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    grad = (yy[..., None] / max(h - 1, 1)) * tilt[0] + (xx[..., None] / max(w - 1, 1)) * tilt[1]
    noise = rng.normal(0.0, 0.03, size=(h, w, 3))
    return np.clip(base + grad + noise, 0.0, 1.0)


def _draw_figure(canvas: np.ndarray, owner: np.ndarray, kps: np.ndarray, label: int, thickness: int, tint: int):
    for limb_idx, (a, b) in enumerate(LIMBS):
        color = tuple((int(c) + tint) % 256 for c in LIMB_COLORS[limb_idx])
        pa, pb = _to_cv(kps[a]), _to_cv(kps[b])
        cv2.line(canvas, pa, pb, color, thickness, cv2.LINE_8, SUBPIXEL_SHIFT)
        cv2.line(owner, pa, pb, label, thickness, cv2.LINE_8, SUBPIXEL_SHIFT)
    radius = (thickness + 1) * SUBPIXEL
    for t in range(len(kps)):
        center = _to_cv(kps[t])
        cv2.circle(canvas, center, radius, (255, 255, 255), -1, cv2.LINE_8, SUBPIXEL_SHIFT)
        cv2.circle(owner, center, radius, label, -1, cv2.LINE_8, SUBPIXEL_SHIFT)


def _dilated(box: Tuple[float, float, float, float], margin: float) -> Tuple[float, float, float, float]:
    return box[0] - margin, box[1] - margin, box[2] + margin, box[3] + margin


def _overlaps(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


class SceneGenerator:
    """Renders scenes for one SceneSpec."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.height, self.width = spec.image_size
        lo, hi = spec.scale_range
        # keeps the max side inside scale_range after snapping both ends
        margin = min(2.0 / SUBPIXEL, (hi - lo) / 2)
        self.size_range = (lo + margin, hi - margin)
        self.snap = margin >= 2.0 / SUBPIXEL
        self.margin = spec.limb_thickness + 2.0

    def _place(self, rng: np.random.Generator) -> np.ndarray:
        pose = random_pose(rng)
        mins = pose.min(axis=0)
        extent = pose.max(axis=0) - mins
        size = rng.uniform(*self.size_range)
        kps = (pose - mins) * (size / extent.max())
        w, h = kps.max(axis=0)
        ox = rng.uniform(0.0, self.width - w)
        oy = rng.uniform(0.0, self.height - h)
        kps = kps + np.array([ox, oy])
        if self.snap:
            kps = _snap(kps)
        return kps

    def generate(self, index: int) -> Sample:
        spec = self.spec
        rng = rng_streams.counter_rng(spec.seed, rng_streams.SCENE, index)
        h, w = self.height, self.width
        wanted = int(rng.integers(spec.n_instances[0], spec.n_instances[1] + 1))

        figures: List[np.ndarray] = []
        boxes: List[Tuple[float, float, float, float]] = []
        warning = False
        for _ in range(wanted):
            allow_overlap = rng.random() < spec.occlusion_prob
            placed = None
            for _attempt in range(spec.max_placement_tries):
                kps = self._place(rng)
                box = (*kps.min(axis=0), *kps.max(axis=0))
                grown = _dilated(box, self.margin)
                if allow_overlap or not any(_overlaps(grown, _dilated(b, self.margin)) for b in boxes):
                    placed = kps
                    break
            if placed is None:
                warning = True
                break
            figures.append(placed)
            boxes.append((*placed.min(axis=0), *placed.max(axis=0)))

        if warning:
            logger.warning(
                f"⚠️ Scene {index}: placed {len(figures)} of {wanted} figures after "
                f"{spec.max_placement_tries} tries"
            )

        canvas = (_background(rng, h, w) * 255).astype(np.uint8)
        owner = np.zeros((h, w), dtype=np.uint8)
        for f, kps in enumerate(figures):
            tint = int(rng.integers(0, 40))
            _draw_figure(canvas, owner, kps, f + 1, spec.limb_thickness, tint)

        annotations = []
        for f, kps in enumerate(figures):
            cols = np.clip(np.floor(kps[:, 0]).astype(int), 0, w - 1)
            rows = np.clip(np.floor(kps[:, 1]).astype(int), 0, h - 1)
            covered = owner[rows, cols] > f + 1
            visibility = np.where(covered, 1, 2)
            x0, y0 = kps.min(axis=0)
            x1, y1 = kps.max(axis=0)
            annotations.append(InstanceAnnotation(
                keypoints=[(float(x), float(y)) for x, y in kps],
                visibility=[int(v) for v in visibility],
                area=float((x1 - x0) * (y1 - y0)),
            ))

        image = np.ascontiguousarray(canvas.astype(np.float32).transpose(2, 0, 1) / 255.0)
        return Sample(image=image, annotations=annotations, index=index, placement_warning=warning)


def generate_scene(spec: SceneSpec, index: int) -> Sample:
    return SceneGenerator(spec).generate(index)


class DatasetManifest(BaseModel):
    format_version: int = FORMAT_VERSION
    spec: SceneSpec
    count: int = Field(..., ge=1)
    first_index: int = Field(default=0, ge=0, description="Scene index of the first sample")


def dataset_manifest(spec: SceneSpec, count: int, first_index: int = 0) -> DatasetManifest:
    if count < 1:
        raise DatasetError(f"Dataset count must be >= 1, got {count}")
    return DatasetManifest(spec=spec, count=count, first_index=first_index)


def write_manifest(path: str, manifest: DatasetManifest) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(manifest.model_dump_json(indent=2))
    logger.info(f"✅ Dataset manifest written to {path} ({manifest.count} scenes)")


def read_manifest(path: str) -> DatasetManifest:
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"Cannot read dataset manifest {path}: {e}")
    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise ManifestVersionError(
            f"Dataset manifest {path} has format_version {version}, expected {FORMAT_VERSION}"
        )
    try:
        return DatasetManifest(**raw)
    except ValidationError as e:
        raise DatasetError(f"Invalid dataset manifest {path}: {e}")


class SyntheticDataset:
    """Indexable view of a manifest; scenes are regenerated on access."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.generator = SceneGenerator(manifest.spec)

    def __len__(self) -> int:
        return self.manifest.count

    def __getitem__(self, i: int) -> Sample:
        if not 0 <= i < self.manifest.count:
            raise IndexError(i)
        return self.generator.generate(self.manifest.first_index + i)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]


def write_preview(sample: Sample, path: str, draw_keypoints: bool = True) -> None:
    """Save a PNG of the scene with labeled keypoints marked."""
    rgb = (np.clip(sample.image.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    img = Image.fromarray(rgb)
    if draw_keypoints:
        draw = ImageDraw.Draw(img)
        for ann in sample.annotations:
            for (x, y), v in zip(ann.keypoints, ann.visibility):
                if v == 0:
                    continue
                fill = (0, 255, 0) if v == 2 else (255, 0, 0)
                draw.point((x, y), fill=fill)
    img.save(path)
