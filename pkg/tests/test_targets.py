"""
Tests for per-location target construction.
"""
import numpy as np
import pytest

from app.models.config import HeadVariant, LevelAssignment, ModelConfig
from app.models.schemas import Box
from app.services.target_service import (
    TargetBuilder,
    assign_locations,
    box_offsets,
    centerness_target,
    decode_keypoints,
    heatmap_targets,
    keypoint_offsets,
    location_center,
    nearest_cell,
)

P3_ONLY = [LevelAssignment(level=0, stride=8, size_range=(0.0, 32.0))]
DESK = ModelConfig().level_assignments()


class TestLocationCenter:
    @pytest.mark.parametrize("stride,i,j,expected", [
        (8, 0, 0, (4, 4)),
        (8, 2, 1, (12, 20)),
        (16, 1, 1, (24, 24)),
    ])
    def test_convention(self, stride, i, j, expected):
        assert location_center(stride, i, j) == expected


class TestAssignLocations:
    def test_outside_every_box_is_negative(self, make_ann):
        ann = make_ann([(20, 20), (28, 26)])
        lv = assign_locations([ann], [(8, 8)], P3_ONLY)[0]
        assert lv.cls[0, 0] == 0
        assert lv.instance_id[7, 7] == -1

    def test_positives_are_centers_inside_box(self, make_ann):
        # 20x10 pseudo-box
        ann = make_ann([(2, 3), (22, 13)])
        lv = assign_locations([ann], [(8, 8)], P3_ONLY)[0]
        expected = np.zeros((8, 8))
        for i in range(8):
            for j in range(8):
                x, y = location_center(8, i, j)
                expected[i, j] = 2 <= x <= 22 and 3 <= y <= 13
        np.testing.assert_array_equal(lv.cls, expected)
        assert lv.num_positives == 6

    def test_degenerate_box_gets_one_positive(self, make_ann):
        ann = make_ann([(10, 10)])
        levels = assign_locations([ann], [(8, 8), (4, 4), (2, 2)], DESK)
        assert sum(lv.num_positives for lv in levels) == 1
        assert levels[0].cls[1, 1] == 1

    def test_level_by_pseudo_box_size(self, make_ann):
        small = make_ann([(4, 4), (20, 20)])
        large = make_ann([(0, 0), (100, 120)])
        levels = assign_locations([small, large], [(16, 16), (8, 8), (4, 4)], DESK)
        assert set(np.unique(levels[0].instance_id)) == {-1, 0}
        assert set(np.unique(levels[2].instance_id)) == {-1, 1}
        assert levels[1].num_positives == 0

    def test_overlap_goes_to_smaller_box(self, make_ann):
        big = make_ann([(0, 0), (30, 30)])
        small = make_ann([(10, 10), (22, 22)])
        lv = assign_locations([big, small], [(8, 8)], P3_ONLY)[0]
        assert lv.instance_id[1, 1] == 1   # (12, 12) lies in both
        assert lv.instance_id[0, 0] == 0

    def test_every_instance_has_a_positive(self, make_ann, rng):
        for _ in range(50):
            anns = []
            for _ in range(int(rng.integers(1, 4))):
                c = rng.uniform(0, 128, size=2)
                half = rng.uniform(0, 40, size=2)
                anns.append(make_ann([c - half, c + half]))
            levels = assign_locations(anns, [(16, 16), (8, 8), (4, 4)], DESK)
            ids = set(np.concatenate([lv.instance_id.ravel() for lv in levels]))
            assert set(range(len(anns))) <= ids

    def test_point_inside_larger_box_takes_nearest_cell(self, make_ann):
        big = make_ann([(0, 0), (30, 30)])
        point = make_ann([(10, 10)])
        levels = assign_locations([big, point], [(16, 16), (8, 8), (4, 4)], DESK)
        where = [(lv.level, (int(i), int(j))) for lv in levels for i, j in np.argwhere(lv.instance_id == 1)]
        assert where == [(0, (1, 1))]
        assert levels[0].num_positives == 16
        assert (levels[0].instance_id == 0).sum() == 15

    def test_displaced_owner_moves_to_next_nearest(self, make_ann):
        # the small box covers only (12, 12), which is also nearest the point
        small = make_ann([(10, 10), (14, 14)])
        point = make_ann([(11, 11)])
        lv = assign_locations([small, point], [(8, 8)], P3_ONLY)[0]
        assert lv.instance_id[1, 1] == 1
        assert lv.instance_id[0, 1] == 0
        assert lv.num_positives == 2

    def test_stacked_points_share_nothing(self, make_ann):
        anns = [make_ann([(12, 12)]) for _ in range(3)]
        lv = assign_locations(anns, [(8, 8)], P3_ONLY)[0]
        assert lv.instance_id[1, 1] == 0
        assert sorted(np.unique(lv.instance_id)) == [-1, 0, 1, 2]
        assert lv.num_positives == 3

    def test_translation_equivariant(self, make_ann, rng):
        for _ in range(30):
            anns = []
            for _ in range(int(rng.integers(1, 4))):
                c = np.round(rng.uniform(48, 80, size=2) * 16) / 16
                half = np.round(rng.uniform(0, 14, size=2) * 16) / 16
                anns.append((c - half, c + half))
            a, b = (int(v) for v in rng.integers(-3, 4, size=2))
            shift = np.array([8.0 * a, 8.0 * b])
            base = assign_locations([make_ann([p, q]) for p, q in anns], [(16, 16)], P3_ONLY)[0]
            moved = assign_locations([make_ann([p + shift, q + shift]) for p, q in anns], [(16, 16)], P3_ONLY)[0]
            expected = {(int(i) + b, int(j) + a, int(base.instance_id[i, j])) for i, j in np.argwhere(base.cls > 0)}
            got = {(int(i), int(j), int(moved.instance_id[i, j])) for i, j in np.argwhere(moved.cls > 0)}
            assert got == expected

    def test_unlabeled_keypoints_masked(self, make_ann):
        ann = make_ann([(8, 8), (20, 20), (14, 14)], visibility=[2, 1, 0])
        lv = assign_locations([ann], [(8, 8)], P3_ONLY)[0]
        i, j = np.argwhere(lv.cls > 0)[0]
        mask = lv.kp_mask[:, i, j]
        assert mask[0] == mask[1] == mask[2] == mask[3] == 1
        assert mask[4] == mask[5] == 0


class TestKeypointOffsets:
    def test_stride_units(self, make_ann):
        offsets, _ = keypoint_offsets(make_ann([(20, 20)]), (12, 12), 8)
        assert tuple(offsets[:2]) == (1.0, 1.0)

    def test_at_center_is_zero(self, make_ann):
        offsets, _ = keypoint_offsets(make_ann([(12, 12)]), (12, 12), 8)
        assert tuple(offsets[:2]) == (0.0, 0.0)

    def test_unlabeled_present_but_masked(self, make_ann):
        offsets, mask = keypoint_offsets(make_ann([(12, 12), (30, 4)], visibility=[2, 0]), (12, 12), 8)
        assert tuple(offsets[2:4]) == (2.25, -1.0)
        assert tuple(mask[2:4]) == (0.0, 0.0)

    def test_decode_is_exact_inverse_on_positives(self, make_ann, rng):
        for _ in range(20):
            pts = np.round(rng.uniform(0, 64, size=(17, 2)) * 16) / 16
            ann = make_ann(pts.tolist())
            levels = assign_locations([ann], [(8, 8), (4, 4), (2, 2)], DESK)
            for lv in levels:
                for i, j in np.argwhere(lv.cls > 0):
                    center = location_center(lv.stride, int(i), int(j))
                    decoded = decode_keypoints(lv.kp_offsets[:, i, j], center, lv.stride)
                    np.testing.assert_array_equal(decoded, pts)


class TestCenterness:
    def test_center_is_one(self):
        assert centerness_target(Box(x0=0, y0=0, x1=8, y1=4), (4, 2)) == 1.0

    def test_boundary_is_zero(self):
        assert centerness_target(Box(x0=0, y0=0, x1=8, y1=4), (0, 2)) == 0.0

    def test_hand_value(self):
        # l=1, r=3, t=2, b=2
        assert centerness_target(Box(x0=0, y0=0, x1=4, y1=4), (1, 2)) == pytest.approx(np.sqrt(1 / 3))


class TestBoxOffsets:
    def test_center_of_2s_box(self):
        np.testing.assert_array_equal(box_offsets(Box(x0=0, y0=0, x1=16, y1=16), (8, 8), 8), [1, 1, 1, 1])

    def test_top_left_corner(self):
        np.testing.assert_array_equal(box_offsets(Box(x0=4, y0=4, x1=36, y1=20), (4, 4), 8), [0, 0, 4, 2])

    def test_hand_value(self):
        np.testing.assert_array_equal(box_offsets(Box(x0=0, y0=0, x1=16, y1=8), (4, 4), 8), [0.5, 0.5, 1.5, 0.5])


class TestHeatmapTargets:
    def test_nearest_center(self, make_ann):
        hm = heatmap_targets([make_ann([(12, 20)])], 8, (8, 8))
        assert hm.labels.shape == (17, 8, 8)
        assert hm.labels[0, 2, 1] == 1
        assert hm.labels[0].sum() == 1

    def test_tie_goes_to_lower_index(self):
        assert nearest_cell(8.0, 8.0, 8, 8, 8) == (0, 0)
        assert nearest_cell(16.0, 24.0, 8, 8, 8) == (2, 1)

    def test_two_noses_two_cells(self, make_ann):
        hm = heatmap_targets([make_ann([(4, 4)]), make_ann([(44, 28)])], 8, (8, 8))
        assert hm.labels[0].sum() == 2
        assert hm.collisions == 0

    def test_collision_counted(self, make_ann):
        hm = heatmap_targets([make_ann([(4, 4)]), make_ann([(5, 3)])], 8, (8, 8))
        assert hm.labels[0].sum() == 1
        assert hm.collisions == 1

    @pytest.mark.parametrize("stride", [8, 16])
    def test_ones_are_labeled_minus_collisions(self, make_ann, rng, stride):
        for _ in range(20):
            anns, labeled = [], 0
            for _ in range(int(rng.integers(1, 6))):
                pts = rng.uniform(-8, 72, size=(17, 2))
                vis = rng.integers(0, 3, size=17)
                vis[0] = 2
                labeled += int((vis > 0).sum())
                anns.append(make_ann(pts.tolist(), visibility=vis.tolist()))
            hm = heatmap_targets(anns, stride, (64 // stride, 64 // stride))
            assert hm.labels.sum() == labeled - hm.collisions


class TestTargetBuilder:
    def test_shapes(self, make_ann, tiny_model_cfg):
        builder = TargetBuilder(tiny_model_cfg, HeadVariant(heatmap_stride=16))
        targets = builder.build([make_ann([(10, 10), (40, 50)])], (64, 64))
        assert [lv.cls.shape for lv in targets.levels] == [(8, 8), (4, 4), (2, 2)]
        assert targets.levels[0].kp_offsets.shape == (34, 8, 8)
        assert targets.heatmap.labels.shape == (17, 4, 4)

    def test_no_heatmap_without_aux(self, make_ann, tiny_model_cfg):
        variant = HeadVariant(heatmap_aux=False)
        assert TargetBuilder(tiny_model_cfg, variant).build([make_ann([(10, 10)])], (64, 64)).heatmap is None
