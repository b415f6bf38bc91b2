"""
Finite-difference verification suite over every differentiable kernel and
one full-model composite. Each case draws a random double-precision
configuration from its own counter stream, so a failure is reproducible
from (seed, case, configuration).
"""
import logging
import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.models.config import HeadVariant, ModelConfig, TrainConfig
from app.models.schemas import InstanceAnnotation
from app.network import KeypointNet
from app.services import rng as rng_streams
from app.services.target_service import TargetBuilder
from app.services.training_service import Batch, stack_targets, total_loss
from app.tensorcore import (
    GradCheckReport,
    Tensor,
    abs as t_abs,
    add,
    bilinear_sample,
    binary_cross_entropy_with_logits,
    concat,
    conv2d,
    exp,
    finite_diff_check,
    getitem,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    sigmoid_focal_loss,
    sub,
    sum as t_sum,
    transpose,
    upsample_nearest2x,
)

logger = logging.getLogger(__name__)

Case = Callable[[np.random.Generator], Tuple[Callable[[Tensor], Tensor], Tensor]]



def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """Random linear functional so every output element matters."""
    return t_sum(mul(out, weights))


def _unary(op: Callable[[Tensor], Tensor], low: float = -2.0, high: float = 2.0) -> Case:
    def case(rng: np.random.Generator):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=2))
        x = Tensor(rng.uniform(low, high, size=shape))
        r = rng.normal(size=op(Tensor(x.data)).shape)
        return (lambda p: _weighted(op(p), r)), x
    return case


def _binary(op: Callable[[Tensor, Tensor], Tensor], wrt: int) -> Case:
    def case(rng: np.random.Generator):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=2))
        # second operand broadcasts along axis 0 to exercise gradient reduction
        a = Tensor(rng.normal(size=shape))
        b = Tensor(rng.normal(size=(1, shape[1])))
        r = rng.normal(size=shape)
        if wrt == 0:
            return (lambda p: _weighted(op(p, b), r)), a
        return (lambda p: _weighted(op(a, p), r)), b
    return case


def _conv_case(wrt: str) -> Case:
    def case(rng: np.random.Generator):
        n, c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
        x = Tensor(rng.normal(size=(n, c_in, h, w)))
        wt = Tensor(rng.normal(size=(c_out, c_in, k, k)))
        b = Tensor(rng.normal(size=(c_out,)))
        r = rng.normal(size=conv2d(x, wt, b, stride, pad).shape)
        target = {"input": x, "weight": wt, "bias": b}[wrt]

        def f(p: Tensor) -> Tensor:
            args = {"input": x, "weight": wt, "bias": b}
            args[wrt] = p
            return _weighted(conv2d(args["input"], args["weight"], args["bias"], stride, pad), r)
        return f, target
    return case


def _bilinear_case(wrt: str) -> Case:
    def case(rng: np.random.Generator):
        c, h, w, p = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 7))
        feats = Tensor(rng.normal(size=(c, h, w)))
        # includes points outside the map to cover clamping
        pts = Tensor(np.stack([rng.uniform(-0.7, w - 0.3, size=p), rng.uniform(-0.7, h - 0.3, size=p)], axis=-1))
        r = rng.normal(size=(p, c))
        if wrt == "features":
            return (lambda q: _weighted(bilinear_sample(q, pts), r)), feats
        return (lambda q: _weighted(bilinear_sample(feats, q), r)), pts
    return case


def _focal_case(rng: np.random.Generator):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)))
    logits = Tensor(rng.normal(0.0, 3.0, size=shape))
    targets = (rng.random(shape) < 0.3).astype(np.float64)
    alpha, gamma = float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.0, 3.0))
    return (lambda p: t_sum(sigmoid_focal_loss(p, targets, alpha, gamma))), logits


def _bce_case(rng: np.random.Generator):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)))
    logits = Tensor(rng.normal(0.0, 3.0, size=shape))
    targets = rng.random(shape)
    return (lambda p: t_sum(binary_cross_entropy_with_logits(p, targets))), logits


def _conv_focal_case(rng: np.random.Generator):
    x = Tensor(rng.normal(size=(2, 5, 5)))
    wt = Tensor(rng.normal(0.0, 0.5, size=(1, 2, 3, 3)))
    b = Tensor(rng.normal(size=(1,)))
    targets = (rng.random((1, 5, 5)) < 0.2).astype(np.float64)
    return (lambda p: t_sum(sigmoid_focal_loss(conv2d(x, p, b, 1, 1), targets))), wt


def _shape_cases() -> Dict[str, Case]:
    def reshape_case(rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        r = rng.normal(size=(4, 6))
        return (lambda p: _weighted(reshape(p, (4, 6)), r)), x

    def transpose_case(rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        r = rng.normal(size=(4, 2, 3))
        return (lambda p: _weighted(transpose(p, (2, 0, 1)), r)), x

    def getitem_case(rng):
        x = Tensor(rng.normal(size=(4, 5)))
        idx = rng.integers(0, 5, size=6)
        r = rng.normal(size=(2, 6))
        return (lambda p: _weighted(getitem(p, (slice(1, 3), idx)), r)), x

    def concat_case(rng):
        x = Tensor(rng.normal(size=(2, 3)))
        y = Tensor(rng.normal(size=(2, 2)))
        r = rng.normal(size=(2, 8))
        return (lambda p: _weighted(concat([p, y, p], axis=1), r)), x

    def matmul_case(rng):
        a = Tensor(rng.normal(size=(2, 3, 4)))
        b = Tensor(rng.normal(size=(4, 2)))
        r = rng.normal(size=(2, 3, 2))
        return (lambda p: _weighted(matmul(a, p), r)), b

    def upsample_case(rng):
        x = Tensor(rng.normal(size=(1, 2, 3, 3)))
        r = rng.normal(size=(1, 2, 6, 6))
        return (lambda p: _weighted(upsample_nearest2x(p), r)), x

    def reduce_case(rng):
        x = Tensor(rng.normal(size=(3, 4)))
        r = rng.normal(size=(4,))
        return (lambda p: add(_weighted(t_sum(p, axis=0), r), mean(p))), x

    return {
        "reshape": reshape_case,
        "transpose": transpose_case,
        "getitem": getitem_case,
        "concat": concat_case,
        "matmul": matmul_case,
        "upsample_nearest2x": upsample_case,
        "sum_mean": reduce_case,
    }


def model_case(prefixes: Optional[Tuple[str, ...]] = None) -> Case:
    """Total loss of a tiny KPAlign model w.r.t. one random parameter tensor.

    Every tensor in the store is a candidate unless ``prefixes`` narrows the
    draw. ReLU and bilinear-cell crossings are left to kink exclusion.
    """
    def case(rng: np.random.Generator):
        cfg = ModelConfig(
            stem_channels=[4, 4], backbone_channels=[4, 8, 8], fpn_channels=8,
            num_levels=2, tower_convs=1, heatmap_channels=4, init_seed=int(rng.integers(0, 1 << 30)),
        )
        variant = HeadVariant(heatmap_stride=8, box_branch=True)
        model = KeypointNet(cfg, variant, dtype=np.float64)
        # move the locator off integer sample points, where bilinear sampling has kinks
        loc = model.params["kp.locator.weight"]
        loc.data = rng.normal(0.0, 0.05, size=loc.shape)
        model.params["kp.locator.bias"].data = rng.uniform(0.1, 0.4, size=model.params["kp.locator.bias"].shape)

        h = w = 32
        kps = np.stack([rng.uniform(4, 28, size=17), rng.uniform(4, 28, size=17)], axis=-1)
        ann = InstanceAnnotation(
            keypoints=[(float(x), float(y)) for x, y in kps], visibility=[2] * 17,
            area=float(np.ptp(kps[:, 0]) * np.ptp(kps[:, 1])),
        )
        targets = TargetBuilder(cfg, variant).build([ann], (h, w))
        levels, heatmap, _ = stack_targets([targets], np.float64)
        batch = Batch(iteration=0, indices=[0], flipped=[False], images=rng.uniform(0, 1, size=(1, 3, h, w)),
                      levels=levels, heatmap=heatmap)
        names = [n for n, _ in model.params.named() if prefixes is None or n.startswith(prefixes)]
        name = names[int(rng.integers(0, len(names)))]
        target = model.params[name]
        train_cfg = TrainConfig()

        def f(p: Tensor) -> Tensor:
            loss, _ = total_loss(model.forward(Tensor(batch.images)), batch, train_cfg, variant)
            return loss

        target.requires_grad = True
        return f, target
    return case


def default_cases() -> Dict[str, Case]:
    cases: Dict[str, Case] = {
        "add": _binary(add, 1),
        "sub": _binary(sub, 1),
        "mul": _binary(mul, 0),
        "scale": _unary(lambda p: scale(p, -1.7)),
        "relu": _unary(relu),
        "sigmoid": _unary(sigmoid, -6.0, 6.0),
        "exp": _unary(exp),
        "abs": _unary(t_abs),
        "conv2d.input": _conv_case("input"),
        "conv2d.weight": _conv_case("weight"),
        "conv2d.bias": _conv_case("bias"),
        "bilinear_sample.features": _bilinear_case("features"),
        "bilinear_sample.points": _bilinear_case("points"),
        "sigmoid_focal_loss": _focal_case,
        "bce_with_logits": _bce_case,
        "conv2d+focal": _conv_focal_case,
    }
    cases.update(_shape_cases())
    return cases


class OpSummary(BaseModel):
    op: str
    configurations: int
    max_rel_error: float
    worst_configuration: Optional[int] = None
    excluded_points: int = 0
    passed: bool


class GradCheckSuiteReport(BaseModel):
    tolerance: float
    seconds: float = 0.0
    ops: List[OpSummary] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(op.passed for op in self.ops)

    @property
    def failures(self) -> List[str]:
        return [op.op for op in self.ops if not op.passed]


class GradCheckService:
    def __init__(
        self,
        configurations: int = 100,
        model_configurations: int = 100,
        tol: float = 1e-4,
        h: float = 1e-4,
        model_h: float = 1e-5,
        max_checks: int = 12,
        seed: int = 0,
    ):
        self.configurations = configurations
        self.model_configurations = model_configurations
        self.tol = tol
        self.h = h
        self.model_h = model_h
        self.max_checks = max_checks
        self.seed = seed

    def check_case(
        self, name: str, case: Case, configurations: int, case_index: int, h: Optional[float] = None
    ) -> OpSummary:
        worst, worst_cfg, excluded = 0.0, None, 0
        for k in range(configurations):
            rng = rng_streams.counter_rng(self.seed, rng_streams.GRADCHECK, case_index, k)
            f, params = case(rng)
            report: GradCheckReport = finite_diff_check(
                f, params, h=h or self.h, tol=self.tol, max_checks=self.max_checks, rng=rng, op=name
            )
            excluded += len(report.excluded)
            if report.max_rel_error > worst:
                worst, worst_cfg = report.max_rel_error, k
        summary = OpSummary(
            op=name,
            configurations=configurations,
            max_rel_error=worst,
            worst_configuration=worst_cfg,
            excluded_points=excluded,
            passed=worst < self.tol,
        )
        marker = "✅" if summary.passed else "❌"
        logger.info(f"{marker} {name}: max rel err {worst:.2e} over {configurations} configurations")
        return summary

    def run(self, include_model: bool = True, only: Optional[List[str]] = None) -> GradCheckSuiteReport:
        started = time.time()
        cases = default_cases()
        if include_model:
            cases["model_composite"] = model_case()
        report = GradCheckSuiteReport(tolerance=self.tol)
        for index, (name, case) in enumerate(cases.items()):
            if only and name not in only:
                continue
            if name == "model_composite":
                # ReLU crossings inside the backbone get rarer with a shorter step
                report.ops.append(self.check_case(name, case, self.model_configurations, index, h=self.model_h))
            else:
                report.ops.append(self.check_case(name, case, self.configurations, index))
        report.seconds = time.time() - started
        return report


_gradcheck_service: Optional[GradCheckService] = None


def get_gradcheck_service(**kwargs) -> GradCheckService:
    global _gradcheck_service
    if _gradcheck_service is None or kwargs:
        _gradcheck_service = GradCheckService(**kwargs)
    return _gradcheck_service
