"""
Inference decoding and COCO-style keypoint evaluation.

Matching per image is greedy in descending score: each detection takes the
best still-unmatched ground truth whose similarity reaches the threshold,
preferring ground truths inside the area range. Precision is made
monotone and read at 101 recall points.
"""
import logging
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from app.models.config import EvalSettings, RunConfig
from app.models.schemas import Box, Detection, EvalReport, InstanceAnnotation
from app.network import HeadOutputs, KeypointNet
from app.services.checkpoint_service import load_checkpoint, restore_params
from app.services.geometry import enclosing_rect_of_points, iou, min_enclosing_rect, nms, oks
from app.services.scene_generator import SyntheticDataset, dataset_manifest
from app.services.target_service import location_center
from app.tensorcore import Tensor, no_grad

logger = logging.getLogger(__name__)

OKS_THRESHOLDS = [round(0.5 + 0.05 * i, 2) for i in range(10)]
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
VAL_INDEX_OFFSET = 1_000_000


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -np.asarray(z, dtype=np.float64)))


# ---------------------------------------------------------------- decode

def decode(
    outputs: HeadOutputs,
    score_thresh: float = 0.05,
    topk_per_level: int = 100,
    nms_thresh: float = 0.5,
    max_detections: Optional[int] = None,
    image_index: int = 0,
) -> List[Detection]:
    """Turn raw head outputs of one image into scored detections."""
    candidates: List[Detection] = []
    for lv in outputs.levels:
        s = lv.stride
        cls = lv.cls.data[image_index, 0]
        ctr = lv.ctr.data[image_index, 0]
        scores = np.sqrt(_sigmoid(cls) * _sigmoid(ctr))
        flat = scores.reshape(-1)
        keep = np.nonzero(flat > score_thresh)[0]
        if keep.size == 0:
            continue
        order = keep[np.argsort(-flat[keep], kind="stable")][:topk_per_level]
        h, w = scores.shape
        kp_map = lv.kp.data[image_index].astype(np.float64)
        box_map = lv.box.data[image_index].astype(np.float64) if lv.box is not None else None
        locator = lv.locator.data[image_index].astype(np.float64) if lv.locator is not None else None
        for loc in order:
            i, j = divmod(int(loc), w)
            cx, cy = location_center(s, i, j)
            kps = np.array([cx, cy]) + kp_map[:, i, j].reshape(-1, 2) * s
            if box_map is not None:
                l, t, r, b = box_map[:, i, j] * s
                box = Box(x0=cx - l, y0=cy - t, x1=cx + r, y1=cy + b)
            else:
                box = enclosing_rect_of_points(kps)
            sample_points = None
            if locator is not None:
                pts = np.array([cx, cy]) + locator[loc] * s
                sample_points = [(float(x), float(y)) for x, y in pts]
            candidates.append(Detection(
                score=float(flat[loc]),
                keypoints=[(float(x), float(y)) for x, y in kps],
                box=box,
                level=lv.level,
                location=(i, j),
                location_center=(cx, cy),
                sample_points=sample_points,
            ))

    kept = nms([(d.score, d.box) for d in candidates], nms_thresh)
    if max_detections is not None:
        kept = kept[:max_detections]
    return [candidates[k] for k in kept]


# ---------------------------------------------------------------- matching

class ImageMatches(BaseModel):
    scores: List[float]
    matched: List[List[bool]]      # [T][D]
    ignored: List[List[bool]]      # [T][D]
    num_gt: int                    # ground truths inside the area range


def match_image(
    dt_scores: Sequence[float],
    dt_areas: Sequence[float],
    similarity: np.ndarray,
    gt_areas: Sequence[float],
    thresholds: Sequence[float],
    area_range: Tuple[float, Optional[float]],
) -> ImageMatches:
    lo, hi = area_range
    hi = np.inf if hi is None else hi
    gt_ignore = np.array([a < lo or a > hi for a in gt_areas], dtype=bool)
    gt_order = np.argsort(gt_ignore, kind="stable")
    dt_order = np.argsort(-np.asarray(dt_scores, dtype=np.float64), kind="stable")
    sim = similarity[np.ix_(dt_order, gt_order)] if similarity.size else similarity
    g_ig = gt_ignore[gt_order]
    d_areas = np.asarray(dt_areas, dtype=np.float64)[dt_order]

    matched, ignored = [], []
    for tau in thresholds:
        gt_taken = np.zeros(len(gt_order), dtype=bool)
        m_row, ig_row = [], []
        for d in range(len(dt_order)):
            best = min(tau, 1 - 1e-10)
            m = -1
            for g in range(len(gt_order)):
                if gt_taken[g]:
                    continue
                if m > -1 and not g_ig[m] and g_ig[g]:
                    break
                if sim[d, g] < best:
                    continue
                best = sim[d, g]
                m = g
            if m == -1:
                m_row.append(False)
                ig_row.append(bool(d_areas[d] < lo or d_areas[d] > hi))
            else:
                gt_taken[m] = True
                m_row.append(True)
                ig_row.append(bool(g_ig[m]))
        matched.append(m_row)
        ignored.append(ig_row)
    return ImageMatches(
        scores=[float(dt_scores[i]) for i in dt_order],
        matched=matched,
        ignored=ignored,
        num_gt=int((~gt_ignore).sum()),
    )


def average_precision(images: Sequence[ImageMatches], t: int) -> Tuple[float, List[float]]:
    """101-point interpolated AP at threshold index ``t``; 0.0 when no ground truth counts."""
    num_gt = sum(im.num_gt for im in images)
    if num_gt == 0:
        return 0.0, [0.0] * len(RECALL_POINTS)
    scores = np.concatenate([np.asarray(im.scores, dtype=np.float64) for im in images]) if images else np.zeros(0)
    matched = np.concatenate([np.asarray(im.matched[t], dtype=bool) for im in images]) if images else np.zeros(0, bool)
    ignored = np.concatenate([np.asarray(im.ignored[t], dtype=bool) for im in images]) if images else np.zeros(0, bool)
    order = np.argsort(-scores, kind="stable")
    matched, ignored = matched[order], ignored[order]
    tp = np.cumsum(matched & ~ignored).astype(np.float64)
    fp = np.cumsum(~matched & ~ignored).astype(np.float64)
    recall = tp / num_gt
    precision = tp / (tp + fp + np.spacing(1))
    # monotone envelope from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision
    q = np.zeros(len(RECALL_POINTS))
    inds = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = inds < len(precision)
    q[valid] = precision[inds[valid]]
    return float(q.mean()), q.tolist()


SimilarityFn = Callable[[Detection, InstanceAnnotation], float]


def _run_protocol(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[InstanceAnnotation]],
    similarity: SimilarityFn,
    thresholds: Sequence[float],
    area_range: Tuple[float, Optional[float]],
) -> List[Tuple[float, List[float]]]:
    images = []
    for dets, gts in zip(detections, ground_truth):
        sim = np.array([[similarity(d, g) for g in gts] for d in dets], dtype=np.float64).reshape(len(dets), len(gts))
        images.append(match_image(
            [d.score for d in dets],
            [d.box.area for d in dets],
            sim,
            [g.area for g in gts],
            thresholds,
            area_range,
        ))
    return [average_precision(images, t) for t in range(len(thresholds))]


def evaluate(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[InstanceAnnotation]],
    sigmas: Sequence[float],
    area_medium: Tuple[float, Optional[float]] = (32.0 ** 2, 96.0 ** 2),
    area_large: Tuple[float, Optional[float]] = (96.0 ** 2, None),
    box_ap: bool = False,
) -> EvalReport:
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truth)} images")

    def kp_sim(d: Detection, g: InstanceAnnotation) -> float:
        return oks(d.kp_array(), g, sigmas)

    everything = (0.0, None)
    per_t = _run_protocol(detections, ground_truth, kp_sim, OKS_THRESHOLDS, everything)
    aps = [ap for ap, _ in per_t]
    medium = [ap for ap, _ in _run_protocol(detections, ground_truth, kp_sim, OKS_THRESHOLDS, area_medium)]
    large = [ap for ap, _ in _run_protocol(detections, ground_truth, kp_sim, OKS_THRESHOLDS, area_large)]

    report = EvalReport(
        AP=float(np.mean(aps)),
        AP50=aps[0],
        AP75=aps[OKS_THRESHOLDS.index(0.75)],
        AP_M=float(np.mean(medium)),
        AP_L=float(np.mean(large)),
        thresholds=list(OKS_THRESHOLDS),
        per_threshold_ap=aps,
        pr_curves={f"{tau:.2f}": curve for tau, (_, curve) in zip(OKS_THRESHOLDS, per_t)},
        num_images=len(ground_truth),
        num_detections=sum(len(d) for d in detections),
        num_gt=sum(len(g) for g in ground_truth),
    )
    if box_ap:
        def box_sim(d: Detection, g: InstanceAnnotation) -> float:
            return iou(d.box, min_enclosing_rect(g))

        bb = [ap for ap, _ in _run_protocol(detections, ground_truth, box_sim, OKS_THRESHOLDS, everything)]
        report.AP_bb = float(np.mean(bb))
        report.AP_bb50 = bb[0]
        report.AP_bb75 = bb[OKS_THRESHOLDS.index(0.75)]
    return report


# ---------------------------------------------------------------- service

class EvaluationService:
    """Runs a trained model over the validation scenes and scores it."""

    def __init__(self, model: KeypointNet, settings: EvalSettings, batch_size: int = 4):
        self.model = model
        self.settings = settings
        self.batch_size = batch_size
        removed = model.drop_heatmap_branch()
        if removed:
            logger.info(f"Heatmap branch removed for inference ({removed} tensors)")

    @classmethod
    def from_checkpoint(cls, path: str, settings: EvalSettings, batch_size: int = 4) -> "EvaluationService":
        checkpoint = load_checkpoint(path)
        model = KeypointNet(checkpoint.manifest.model, checkpoint.manifest.variant)
        restore_params(model.params, checkpoint)
        logger.info(f"Loaded checkpoint {path} (iteration {checkpoint.manifest.iteration})")
        return cls(model, settings, batch_size)

    def predict(self, images: np.ndarray) -> List[List[Detection]]:
        """[N,3,H,W] images to per-image detections."""
        s = self.settings
        with no_grad():
            outputs = self.model.forward(Tensor(images.astype(self.model.dtype)), training=False)
        return [
            decode(outputs, s.score_thresh, s.topk_per_level, s.nms_thresh, s.max_detections, image_index=b)
            for b in range(images.shape[0])
        ]

    def evaluate_dataset(self, dataset: SyntheticDataset) -> Tuple[EvalReport, List[List[Detection]]]:
        all_dets: List[List[Detection]] = []
        all_gts: List[List[InstanceAnnotation]] = []
        elapsed = 0.0
        for start in range(0, len(dataset), self.batch_size):
            samples = [dataset[i] for i in range(start, min(start + self.batch_size, len(dataset)))]
            images = np.stack([smp.image for smp in samples])
            t0 = time.perf_counter()
            all_dets.extend(self.predict(images))
            elapsed += time.perf_counter() - t0
            all_gts.extend(smp.annotations for smp in samples)
        report = evaluate(
            all_dets,
            all_gts,
            self.settings.sigmas,
            self.settings.area_medium,
            self.settings.area_large,
            box_ap=self.model.variant.box_branch,
        )
        report.ms_per_image = 1000.0 * elapsed / max(len(dataset), 1)
        logger.info(
            f"✅ Evaluation: AP {report.AP:.3f} AP50 {report.AP50:.3f} AP75 {report.AP75:.3f} "
            f"({report.num_images} images, {report.ms_per_image:.1f} ms/image)"
        )
        return report, all_dets


def validation_dataset(config: RunConfig) -> SyntheticDataset:
    return SyntheticDataset(
        dataset_manifest(config.data.scene, config.data.val_count, first_index=VAL_INDEX_OFFSET)
    )


def detections_payload(detections: Sequence[Sequence[Detection]], names: Optional[Sequence[str]] = None) -> List[Dict]:
    names = names or [str(i) for i in range(len(detections))]
    return [
        {"image": name, "detections": [d.model_dump() for d in dets]}
        for name, dets in zip(names, detections)
    ]
