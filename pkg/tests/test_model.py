"""
Tests for the backbone/FPN, shared head, naive and KPAlign keypoint heads,
and the heatmap branch.
"""
import numpy as np
import pytest
from pydantic import ValidationError

from app.errors import DimensionError, VariantError
from app.models.config import HeadVariant, ModelConfig, TrainConfig
from app.models.skeleton import DEFAULT_GROUPS, UNGROUPED
from app.network import (
    KeypointNet,
    ParamStore,
    backbone_fpn_forward,
    build_backbone_params,
    kpalign_forward,
    naive_keypoint_head,
    shared_head_forward,
)
from app.network.heads import build_head_params
from app.services.evaluation_service import decode
from app.services.target_service import TargetBuilder, decode_keypoints, location_center
from app.services.training_service import Batch, stack_targets, total_loss
from app.tensorcore import Tensor, backward, graph_scope, no_grad


def backbone(cfg, seed=0):
    store = ParamStore(seed=seed, dtype=np.float64)
    build_backbone_params(store, cfg)
    return store


class TestBackboneFPN:
    def test_level_shapes(self):
        cfg = ModelConfig()
        with no_grad():
            pyramid = backbone_fpn_forward(Tensor(np.zeros((3, 128, 128))), backbone(cfg), cfg)
        assert [s for s, _ in pyramid] == [8, 16, 32]
        assert [p.shape for _, p in pyramid] == [(64, 16, 16), (64, 8, 8), (64, 4, 4)]

    def test_zero_input_zero_pyramid(self, tiny_model_cfg):
        with no_grad():
            pyramid = backbone_fpn_forward(Tensor(np.zeros((1, 3, 64, 64))), backbone(tiny_model_cfg), tiny_model_cfg)
        for _, p in pyramid:
            assert not p.data.any()

    def test_doubling_input_doubles_levels(self, tiny_model_cfg, rng):
        store = backbone(tiny_model_cfg)
        with no_grad():
            small = backbone_fpn_forward(Tensor(rng.random((1, 3, 64, 64))), store, tiny_model_cfg)
            large = backbone_fpn_forward(Tensor(rng.random((1, 3, 128, 128))), store, tiny_model_cfg)
        for (_, a), (_, b) in zip(small, large):
            assert b.shape[-2:] == (2 * a.shape[-2], 2 * a.shape[-1])

    def test_five_levels(self, rng):
        cfg = ModelConfig(stem_channels=[4, 4], backbone_channels=[4, 8, 8], fpn_channels=8, num_levels=5)
        with no_grad():
            pyramid = backbone_fpn_forward(Tensor(rng.random((1, 3, 128, 128))), backbone(cfg), cfg)
        assert [s for s, _ in pyramid] == [8, 16, 32, 64, 128]
        assert pyramid[-1][1].shape[-2:] == (1, 1)

    def test_indivisible_size_rejected(self, tiny_model_cfg):
        with pytest.raises(DimensionError):
            backbone_fpn_forward(Tensor(np.zeros((1, 3, 60, 64))), backbone(tiny_model_cfg), tiny_model_cfg)


class TestSharedHead:
    def setup_method(self):
        self.cfg = ModelConfig(stem_channels=[4, 4], backbone_channels=[4, 8, 8], fpn_channels=8, tower_convs=1)
        self.variant = HeadVariant(box_branch=True)
        self.store = ParamStore(seed=1, dtype=np.float64)
        build_head_params(self.store, self.cfg, self.variant)

    def test_shapes_and_sharing(self, rng):
        p = Tensor(rng.normal(size=(1, 8, 4, 5)))
        outs = shared_head_forward([(8, p), (16, p)], self.store, self.cfg, self.variant)
        assert outs[0]["cls"].shape == (1, 1, 4, 5)
        assert outs[0]["ctr"].shape == (1, 1, 4, 5)
        assert outs[0]["box"].shape == (1, 4, 4, 5)
        for key in ("cls", "ctr", "box"):
            np.testing.assert_array_equal(outs[0][key].data, outs[1][key].data)

    def test_box_offsets_positive(self, rng):
        p = Tensor(rng.normal(0, 50, size=(1, 8, 3, 3)))
        box = shared_head_forward([(8, p)], self.store, self.cfg, self.variant)[0]["box"]
        assert (box.data > 0).all()

    def test_classification_prior(self):
        p = Tensor(np.zeros((1, 8, 2, 2)))
        cls = shared_head_forward([(8, p)], self.store, self.cfg, self.variant)[0]["cls"].data
        np.testing.assert_allclose(1 / (1 + np.exp(-cls)), 0.01, rtol=1e-9)


class TestNaiveHead:
    def setup_method(self):
        self.store = ParamStore(seed=2, dtype=np.float64)
        self.store.conv("kp.final", 34, 8, 3, init="normal")

    def test_output_channels(self, rng):
        out = naive_keypoint_head(Tensor(rng.normal(size=(1, 8, 4, 4))), self.store)
        assert out.shape == (1, 34, 4, 4)

    def test_zero_final_layer_decodes_to_center(self, rng):
        self.store["kp.final.weight"].data[:] = 0
        out = naive_keypoint_head(Tensor(rng.normal(size=(1, 8, 4, 4))), self.store).data
        kps = decode_keypoints(out[0, :, 2, 3], location_center(8, 2, 3), 8)
        np.testing.assert_array_equal(kps, np.tile([28.0, 20.0], (17, 1)))

    def test_shift_equivariance(self, rng):
        x = rng.normal(size=(1, 8, 6, 6))
        shifted = np.zeros_like(x)
        shifted[..., 1:, 1:] = x[..., :-1, :-1]
        a = naive_keypoint_head(Tensor(x), self.store).data
        b = naive_keypoint_head(Tensor(shifted), self.store).data
        np.testing.assert_allclose(b[..., 2:5, 2:5], a[..., 1:4, 1:4], atol=1e-12)


class TestKPAlign:
    def make_store(self, variant, c=8, seed=3):
        cfg = ModelConfig(stem_channels=[4, 4], backbone_channels=[4, 8, 8], fpn_channels=c, tower_convs=1)
        store = ParamStore(seed=seed, dtype=np.float64)
        build_head_params(store, cfg, variant)
        groups = DEFAULT_GROUPS if variant.grouped else UNGROUPED
        return store, groups

    def test_zero_locator_zero_predictor_gives_centers(self, rng):
        variant = HeadVariant(heatmap_aux=False)
        store, groups = self.make_store(variant)
        for g in range(len(groups)):
            store[f"kp.pred{g}.weight"].data[:] = 0
        out = kpalign_forward(Tensor(rng.normal(size=(1, 8, 4, 4))), None, variant, groups, store)
        assert not out["kp"].data.any()
        assert out["locator"].shape == (1, 16, 9, 2)

    def test_composes_locator_and_residual(self, rng):
        variant = HeadVariant(heatmap_aux=False, finer_sampling=False)
        store, groups = self.make_store(variant)
        for g, members in enumerate(groups):
            store[f"kp.pred{g}.weight"].data[:] = 0
            bias = np.zeros(2 * len(members))
            bias[0::2] = 0.5
            store[f"kp.pred{g}.bias"].data = bias
        loc_bias = np.zeros(2 * len(groups))
        loc_bias[0::2] = 1.0
        store["kp.locator.bias"].data = loc_bias
        kp = kpalign_forward(Tensor(rng.normal(size=(1, 8, 4, 5))), None, variant, groups, store)["kp"].data
        i, j = 2, 3
        kps = decode_keypoints(kp[0, :, i, j], location_center(8, i, j), 8)
        np.testing.assert_allclose(kps[:, 0], 4 + (j + 1.5) * 8, atol=1e-12)
        np.testing.assert_allclose(kps[:, 1], 4 + i * 8, atol=1e-12)

    @pytest.mark.parametrize("grouped", [True, False])
    def test_aligner_disabled_matches_weight_matched_naive(self, rng, grouped):
        variant = HeadVariant(aligner_disabled=True, separate_features=False, grouped=grouped, heatmap_aux=False)
        store, groups = self.make_store(variant)
        store.conv("kp.final", 34, 8, 1, init="normal")
        final_w = store["kp.final.weight"].data
        final_b = store["kp.final.bias"].data = rng.normal(size=34)
        for g, members in enumerate(groups):
            rows = [r for t in members for r in (2 * t, 2 * t + 1)]
            store[f"kp.pred{g}.weight"].data = final_w[rows].copy()
            store[f"kp.pred{g}.bias"].data = final_b[rows].copy()
        tower = Tensor(rng.normal(size=(2, 8, 5, 6)))
        naive = naive_keypoint_head(tower, store).data
        aligned = kpalign_forward(tower, None, variant, groups, store)["kp"].data
        np.testing.assert_allclose(aligned, naive, rtol=0, atol=1e-6)

    def test_shift_equivariance(self, rng):
        variant = HeadVariant(heatmap_aux=False)
        store, groups = self.make_store(variant)
        store["kp.locator.weight"].data = rng.normal(0, 0.02, size=store["kp.locator.weight"].shape)
        x = rng.normal(size=(1, 8, 12, 12))
        shifted = np.zeros_like(x)
        shifted[..., 1:, 1:] = x[..., :-1, :-1]
        a = kpalign_forward(Tensor(x), None, variant, groups, store)["kp"].data
        b = kpalign_forward(Tensor(shifted), None, variant, groups, store)["kp"].data
        np.testing.assert_allclose(b[..., 5:9, 5:9], a[..., 4:8, 4:8], atol=1e-3)

    def test_rejects_naive_variant(self, rng):
        store, groups = self.make_store(HeadVariant(heatmap_aux=False))
        naive = HeadVariant(align=False, grouped=False, separate_features=False, finer_sampling=False)
        with pytest.raises(VariantError):
            kpalign_forward(Tensor(rng.normal(size=(1, 8, 2, 2))), None, naive, groups, store)


class TestKeypointNet:
    def test_invalid_flag_combination(self):
        with pytest.raises(ValidationError):
            HeadVariant(align=False)

    def test_heatmap_stride_needs_level(self):
        cfg = ModelConfig(stem_channels=[4, 4], backbone_channels=[4, 8, 8], fpn_channels=8, num_levels=1)
        with pytest.raises(VariantError):
            KeypointNet(cfg, HeadVariant(heatmap_stride=16))

    def test_output_shapes(self, tiny_model_cfg, rng):
        model = KeypointNet(tiny_model_cfg, HeadVariant(heatmap_stride=16), dtype=np.float64)
        with no_grad():
            out = model.forward(Tensor(rng.random((2, 3, 64, 64))))
        assert [lv.kp.shape for lv in out.levels] == [(2, 34, 8, 8), (2, 34, 4, 4), (2, 34, 2, 2)]
        assert out.heatmap.shape == (2, 17, 4, 4)
        assert out.levels[1].locator.shape == (2, 16, 9, 2)

    def test_heatmap_stride8_shape(self, tiny_model_cfg, rng):
        model = KeypointNet(tiny_model_cfg, HeadVariant(), dtype=np.float64)
        with no_grad():
            out = model.forward(Tensor(rng.random((1, 3, 64, 64))))
        assert out.heatmap.shape == (1, 17, 8, 8)

    def test_heatmap_removal_keeps_detections(self, tiny_model_cfg, rng):
        model = KeypointNet(tiny_model_cfg, HeadVariant(), dtype=np.float64)
        images = Tensor(rng.random((1, 3, 64, 64)))
        with no_grad():
            before = decode(model.forward(images, training=False))
            removed = model.drop_heatmap_branch()
            after = decode(model.forward(images, training=False))
        assert removed == 6
        assert not any(name.startswith("hm.") for name in model.params)
        assert before == after

    def test_initialization_is_seeded(self, tiny_model_cfg):
        a = KeypointNet(tiny_model_cfg, HeadVariant()).params.state()
        b = KeypointNet(tiny_model_cfg, HeadVariant()).params.state()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_shared_layers_independent_of_variant(self, tiny_model_cfg):
        naive = KeypointNet(tiny_model_cfg, HeadVariant(
            align=False, grouped=False, separate_features=False, finer_sampling=False, heatmap_aux=False))
        full = KeypointNet(tiny_model_cfg, HeadVariant())
        np.testing.assert_array_equal(naive.params["head.cls.weight"].data, full.params["head.cls.weight"].data)
        np.testing.assert_array_equal(naive.params["kp.tower0.weight"].data, full.params["kp.tower0.weight"].data)

    def test_locator_receives_gradient(self, tiny_model_cfg, make_ann):
        variant = HeadVariant()
        model = KeypointNet(tiny_model_cfg, variant, dtype=np.float64)
        ann = make_ann([(12, 10), (30, 22), (20, 44), (41, 50)])
        levels, heatmap, _ = stack_targets([TargetBuilder(tiny_model_cfg, variant).build([ann], (64, 64))], np.float64)
        images = np.random.default_rng(5).random((1, 3, 64, 64))
        batch = Batch(iteration=0, indices=[0], flipped=[False], images=images, levels=levels, heatmap=heatmap)
        with graph_scope() as graph:
            loss, _ = total_loss(model.forward(Tensor(images)), batch, TrainConfig(), variant)
            backward(graph, loss)
        assert not model.params["kp.locator.weight"].data.any()
        assert np.linalg.norm(model.params["kp.locator.weight"].grad) > 0

    def test_shifting_image_by_coarsest_stride_shifts_keypoints(self, tiny_model_cfg, rng):
        model = KeypointNet(tiny_model_cfg, HeadVariant(), dtype=np.float64)
        loc = model.params["kp.locator.weight"]
        loc.data = rng.normal(0, 0.02, size=loc.shape)
        image = rng.random((1, 3, 320, 320))
        shifted = np.zeros_like(image)
        shifted[..., 32:, 32:] = image[..., :-32, :-32]
        with no_grad():
            a = model.forward(Tensor(image), training=False)
            b = model.forward(Tensor(shifted), training=False)
        # cells far from the bottom-right edge, where the shifted image lost content
        for lv_a, lv_b in zip(a.levels, b.levels):
            s = lv_a.stride
            cells = 32 // s
            lo, hi = 64 // s, 112 // s
            for i in range(lo, hi):
                for j in range(lo, hi):
                    kps = decode_keypoints(lv_a.kp.data[0, :, i, j], location_center(s, i, j), s)
                    moved = decode_keypoints(
                        lv_b.kp.data[0, :, i + cells, j + cells], location_center(s, i + cells, j + cells), s
                    )
                    np.testing.assert_allclose(moved, kps + 32.0, atol=1e-7)
                    assert lv_b.cls.data[0, 0, i + cells, j + cells] == pytest.approx(lv_a.cls.data[0, 0, i, j])
