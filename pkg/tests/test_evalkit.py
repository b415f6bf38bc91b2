"""
Tests for decoding, COCO-style keypoint AP, the evaluation service and the
ablation harness.
"""
import os

import numpy as np
import pytest

from app.models.config import ABLATION_ROWS, AblationSettings, RunConfig
from app.models.schemas import Box, Detection
from app.models.skeleton import COCO_SIGMAS
from app.network import HeadOutputs, KeypointNet, LevelOutput
from app.services.ablation_service import median_curve, row_variant, run_ablation
from app.services.evaluation_service import (
    OKS_THRESHOLDS,
    RECALL_POINTS,
    EvaluationService,
    average_precision,
    decode,
    detections_payload,
    evaluate,
    match_image,
    validation_dataset,
)
from app.services.geometry import min_enclosing_rect
from app.services.training_service import TrainingService
from app.storage import RunDirectory, read_csv
from app.tensorcore import Tensor


def level_output(cls_logits, kp, box=None, locator=None, stride=8):
    h, w = cls_logits.shape
    return LevelOutput(
        level=0,
        stride=stride,
        cls=Tensor(cls_logits.reshape(1, 1, h, w)),
        ctr=Tensor(np.full((1, 1, h, w), 30.0)),
        kp=Tensor(kp.reshape(1, -1, h, w)),
        box=None if box is None else Tensor(box.reshape(1, 4, h, w)),
        locator=locator,
    )


def detection_at(keypoints, score=0.9):
    kps = np.asarray(keypoints, dtype=np.float64)
    x0, y0 = kps.min(axis=0)
    x1, y1 = kps.max(axis=0)
    return Detection(
        score=score,
        keypoints=[tuple(p) for p in kps],
        box=Box(x0=float(x0), y0=float(y0), x1=float(x1), y1=float(y1)),
    )


def displaced_for_oks(gt, target):
    """Keypoints shifted in x so every labeled keypoint scores exactly ``target``."""
    kappa = 2.0 * np.asarray(COCO_SIGMAS)
    d = np.sqrt(-np.log(target) * 2.0 * gt.area * kappa ** 2)
    kps = gt.kp_array().copy()
    kps[:, 0] += d
    return kps


class TestDecode:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.kp = np.zeros((34, 4, 4))
        self.offsets = rng.uniform(-1.5, 1.5, size=34)

    def test_all_negative_gives_nothing(self):
        out = HeadOutputs(levels=[level_output(np.full((4, 4), -30.0), self.kp)])
        assert decode(out) == []

    def test_single_positive_decodes_offsets(self):
        cls = np.full((4, 4), -30.0)
        cls[1, 2] = 30.0
        self.kp[:, 1, 2] = self.offsets
        dets = decode(HeadOutputs(levels=[level_output(cls, self.kp)]))
        assert len(dets) == 1
        d = dets[0]
        assert d.location == (1, 2)
        assert d.location_center == (20.0, 12.0)
        assert d.score == pytest.approx(1.0)
        np.testing.assert_allclose(d.kp_array(), np.array([20.0, 12.0]) + self.offsets.reshape(-1, 2) * 8)
        assert d.box.x0 == pytest.approx(d.kp_array()[:, 0].min())

    def test_box_branch_decodes_box(self):
        cls = np.full((4, 4), -30.0)
        cls[0, 0] = 30.0
        box = np.ones((4, 4, 4))
        d = decode(HeadOutputs(levels=[level_output(cls, self.kp, box=box)]))[0]
        assert d.box.as_tuple() == (-4.0, -4.0, 12.0, 12.0)

    def test_sample_points_from_locator(self):
        cls = np.full((4, 4), -30.0)
        cls[2, 1] = 30.0
        locator = np.zeros((1, 16, 9, 2))
        locator[0, 2 * 4 + 1, 3] = (1.0, -0.5)
        d = decode(HeadOutputs(levels=[level_output(cls, self.kp, locator=Tensor(locator))]))[0]
        assert len(d.sample_points) == 9
        assert d.sample_points[0] == (12.0, 20.0)
        assert d.sample_points[3] == (20.0, 16.0)

    def test_nms_removes_duplicate(self):
        cls = np.full((4, 4), -30.0)
        cls[1, 1] = 30.0
        cls[1, 2] = 2.0
        self.kp[:, 1, 1] = self.offsets
        shifted = self.offsets.copy()
        shifted[0::2] -= 1.0
        self.kp[:, 1, 2] = shifted
        dets = decode(HeadOutputs(levels=[level_output(cls, self.kp)]))
        assert [d.location for d in dets] == [(1, 1)]

    def test_max_detections_cap(self):
        cls = np.full((4, 4), -30.0)
        cls[0, 0] = cls[3, 3] = 30.0
        cls[0, 3] = 5.0
        kp = np.tile(self.offsets.reshape(34, 1, 1) * 0.2, (1, 4, 4))
        dets = decode(HeadOutputs(levels=[level_output(cls, kp)]), max_detections=2)
        assert len(dets) == 2
        assert dets[0].score >= dets[1].score


class TestEvaluate:
    def gt(self, make_ann, area=2000.0):
        rng = np.random.default_rng(11)
        points = rng.uniform(20, 80, size=(17, 2))
        return make_ann(points, area=area)

    def test_exact_prediction(self, make_ann):
        gt = self.gt(make_ann)
        report = evaluate([[detection_at(gt.kp_array())]], [[gt]], COCO_SIGMAS)
        assert report.AP == pytest.approx(1.0)
        assert report.AP_M == pytest.approx(1.0)
        assert report.AP_L == 0.0
        assert report.num_gt == 1

    def test_similarity_between_thresholds(self, make_ann):
        gt = self.gt(make_ann)
        report = evaluate([[detection_at(displaced_for_oks(gt, 0.87))]], [[gt]], COCO_SIGMAS)
        assert report.AP50 == pytest.approx(1.0)
        assert report.AP75 == pytest.approx(1.0)
        assert report.per_threshold_ap[-1] == 0.0
        assert report.AP == pytest.approx(0.8)

    def test_low_similarity(self, make_ann):
        gt = self.gt(make_ann)
        report = evaluate([[detection_at(displaced_for_oks(gt, 0.62))]], [[gt]], COCO_SIGMAS)
        assert report.AP50 == pytest.approx(1.0)
        assert report.AP75 == 0.0
        assert report.AP == pytest.approx(0.3)

    def test_no_detections(self, make_ann):
        report = evaluate([[]], [[self.gt(make_ann)]], COCO_SIGMAS)
        assert report.AP == report.AP50 == report.AP75 == 0.0
        assert report.pr_curves["0.50"] == [0.0] * 101

    def test_duplicate_is_false_positive(self, make_ann):
        gt = self.gt(make_ann)
        dets = [detection_at(gt.kp_array(), 0.9), detection_at(gt.kp_array(), 0.8)]
        report = evaluate([dets], [[gt]], COCO_SIGMAS)
        assert report.AP == pytest.approx(1.0)
        late = [detection_at(gt.kp_array() + 40.0, 0.95), detection_at(gt.kp_array(), 0.5)]
        assert evaluate([late], [[gt]], COCO_SIGMAS).AP50 == pytest.approx(0.5)

    def test_box_ap(self, make_ann):
        gt = self.gt(make_ann)
        det = detection_at(gt.kp_array())
        assert det.box == min_enclosing_rect(gt)
        report = evaluate([[det]], [[gt]], COCO_SIGMAS, box_ap=True)
        assert report.AP_bb == pytest.approx(1.0)
        assert report.AP_bb50 == pytest.approx(1.0)
        assert evaluate([[det]], [[gt]], COCO_SIGMAS).AP_bb is None

    def test_ap_never_rises_with_threshold(self, make_ann, rng):
        # far-apart people, so each detection can only ever match its own
        centers = [(60.0, 60.0), (300.0, 60.0), (60.0, 300.0)]
        for _ in range(10):
            dets, gts = [], []
            for _ in range(4):
                image_gts = [make_ann(np.asarray(c) + rng.uniform(-15, 15, size=(17, 2)), area=400.0) for c in centers]
                image_dets = []
                for g in image_gts:
                    for _ in range(int(rng.integers(0, 3))):
                        noisy = g.kp_array() + rng.normal(0.0, rng.uniform(0.0, 3.0), size=(17, 2))
                        image_dets.append(detection_at(noisy, float(rng.uniform(0.1, 1.0))))
                dets.append(image_dets)
                gts.append(image_gts)
            aps = evaluate(dets, gts, COCO_SIGMAS).per_threshold_ap
            assert len(aps) == 10
            assert all(b <= a + 1e-12 for a, b in zip(aps, aps[1:])), aps

    def test_image_count_mismatch(self, make_ann):
        with pytest.raises(ValueError):
            evaluate([[], []], [[self.gt(make_ann)]], COCO_SIGMAS)


def brute_force_ap(images, tau):
    """Greedy matching per image, then 101-point interpolated precision."""
    pooled = []
    num_gt = 0
    for scores, sim in images:
        num_gt += sim.shape[1]
        taken = set()
        for d in np.argsort(-scores):
            candidates = [g for g in range(sim.shape[1]) if g not in taken and sim[d, g] >= tau]
            hit = max(candidates, key=lambda g: sim[d, g]) if candidates else None
            if hit is not None:
                taken.add(hit)
            pooled.append((scores[d], hit is not None))
    if num_gt == 0:
        return 0.0
    pooled.sort(key=lambda p: -p[0])
    tp = fp = 0
    curve = []
    for _, hit in pooled:
        tp += hit
        fp += not hit
        curve.append((tp / num_gt, tp / (tp + fp)))
    q = [max((p for r, p in curve if r >= point), default=0.0) for point in RECALL_POINTS]
    return float(np.mean(q))


class TestMatching:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(2024)
        images = []
        for _ in range(200):
            n_dt, n_gt = rng.integers(0, 5), rng.integers(0, 4)
            images.append((rng.random(n_dt), rng.random((n_dt, n_gt))))
        matches = [
            match_image(scores, [1.0] * len(scores), sim, [1.0] * sim.shape[1], OKS_THRESHOLDS, (0.0, None))
            for scores, sim in images
        ]
        for t, tau in enumerate(OKS_THRESHOLDS):
            ap, _ = average_precision(matches, t)
            assert ap == pytest.approx(brute_force_ap(images, tau), abs=1e-12)

    def test_out_of_range_ground_truth_is_ignored(self):
        sim = np.array([[1.0, 0.0], [0.0, 1.0]])
        m = match_image([0.9, 0.8], [100.0, 2000.0], sim, [100.0, 2000.0], [0.5], (1024.0, 9216.0))
        assert m.num_gt == 1
        assert m.matched == [[True, True]]
        assert m.ignored == [[True, False]]
        assert average_precision([m], 0)[0] == pytest.approx(1.0)

    def test_unmatched_out_of_range_detection_is_ignored(self):
        m = match_image([0.9, 0.8], [50.0, 2000.0], np.array([[0.0], [1.0]]), [2000.0], [0.5], (1024.0, 9216.0))
        assert m.ignored == [[True, False]]
        assert average_precision([m], 0)[0] == pytest.approx(1.0)

    def test_prefers_in_range_ground_truth(self):
        sim = np.array([[0.9, 0.7]])
        m = match_image([0.9], [2000.0], sim, [100.0, 2000.0], [0.5], (1024.0, 9216.0))
        assert m.matched == [[True]]
        assert m.ignored == [[False]]


class TestEvaluationService:
    def test_untrained_model_report(self, tiny_run_config):
        model = KeypointNet(tiny_run_config.model, tiny_run_config.variant)
        service = EvaluationService(model, tiny_run_config.eval, batch_size=2)
        assert not any(name.startswith("hm.") for name in model.params)
        report, dets = service.evaluate_dataset(validation_dataset(tiny_run_config))
        assert report.num_images == len(dets) == 3
        assert all(len(d) <= tiny_run_config.eval.max_detections for d in dets)
        for value in report.headline().values():
            assert 0.0 <= value <= 1.0
        assert report.ms_per_image >= 0.0

    def test_from_checkpoint_reproduces_model(self, tiny_run_config, tmp_path):
        run_dir = RunDirectory(str(tmp_path / "run"))
        trainer = TrainingService(tiny_run_config, run_dir=run_dir)
        result = trainer.train()
        images = np.stack([validation_dataset(tiny_run_config)[0].image])
        direct = EvaluationService(trainer.model, tiny_run_config.eval).predict(images)
        loaded = EvaluationService.from_checkpoint(result.checkpoint, tiny_run_config.eval).predict(images)
        assert direct == loaded

    def test_validation_scenes_differ_from_training(self, tiny_run_config):
        val = validation_dataset(tiny_run_config)
        train = TrainingService(tiny_run_config).dataset
        assert not np.array_equal(val[0].image, train[0].image)

    def test_detections_payload(self):
        det = detection_at([[1.0, 2.0], [3.0, 5.0]])
        payload = detections_payload([[det], []], ["a.png", "b.png"])
        assert payload[0]["image"] == "a.png"
        assert payload[0]["detections"][0]["score"] == 0.9
        assert payload[1]["detections"] == []


class TestAblation:
    def test_row_variants_stack(self):
        naive = row_variant("naive")
        assert not naive.align and not naive.heatmap_aux
        disabled = row_variant("align_disabled")
        assert disabled.align and disabled.aligner_disabled and not disabled.grouped
        finer = row_variant("finer_sampling")
        assert finer.grouped and finer.separate_features and finer.finer_sampling and not finer.heatmap_aux
        top = row_variant("heatmap_16x", box_branch=True)
        assert top.heatmap_aux and top.heatmap_stride == 16 and top.box_branch
        assert not row_variant("heatmap_8x").aligner_disabled

    def test_unknown_row(self):
        with pytest.raises(ValueError):
            row_variant("bogus")

    def test_median_curve(self):
        assert median_curve([[1.0, 5.0, 9.0], [3.0, 1.0], [2.0, 2.0]]) == [2.0, 2.0]
        assert median_curve([]) == []

    def test_small_ablation_writes_artifacts(self, tiny_run_config, tmp_path):
        config = tiny_run_config.model_copy(update={
            "ablation": AblationSettings(rows=["naive", "finer_sampling", "heatmap_8x"], seeds=[0]),
            "train": tiny_run_config.train.model_copy(update={"max_iter": 2}),
        })
        run_dir = RunDirectory(str(tmp_path / "ablate"))
        table = run_ablation(config, run_dir)
        assert [r.row for r in table.rows] == ["naive", "finer_sampling", "heatmap_8x"]
        assert table.get("naive").label == "naive"
        rows = read_csv(run_dir.file("ablation.csv"))
        assert [r["row"] for r in rows] == ["naive", "+finer-sampling", "+heatmap-aux(8x)"]
        curves = read_csv(run_dir.file("loss_curves.csv"))
        assert len(curves) == 2
        assert os.path.exists(run_dir.file("ablation.json"))
        assert os.path.exists(run_dir.file("cells", "naive", "seed0", "metrics.csv"))


@pytest.mark.slow
class TestAblationClaims:
    """Directional checks on a full-length desk-scale run."""

    @pytest.fixture(scope="class")
    def table(self, tmp_path_factory):
        run_dir = RunDirectory(str(tmp_path_factory.mktemp("ablation")))
        return run_ablation(RunConfig(ablation=AblationSettings(rows=list(ABLATION_ROWS))), run_dir)

    def test_alignment_beats_naive(self, table):
        assert table.get("align").AP >= table.get("naive").AP + 0.03

    def test_disabled_aligner_matches_naive(self, table):
        assert abs(table.get("align_disabled").AP - table.get("naive").AP) <= 0.02

    def test_heatmap_supervision_helps(self, table):
        assert table.get("heatmap_8x").AP >= table.get("finer_sampling").AP + 0.02
        assert table.get("heatmap_8x").final_kp_loss < table.get("finer_sampling").final_kp_loss

    def test_heatmap_stride_barely_matters(self, table):
        assert abs(table.get("heatmap_16x").AP - table.get("heatmap_8x").AP) <= 0.02
