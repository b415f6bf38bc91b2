"""
Central finite-difference oracle for autodiff gradients.
"""
import logging
from typing import Callable, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from app.errors import GradCheckError
from .tensor import Tensor, backward, graph_scope, no_grad

logger = logging.getLogger(__name__)


class GradCheckReport(BaseModel):
    op: str = ""
    max_rel_error: float = 0.0
    worst_index: Optional[int] = None
    checked: int = 0
    excluded: List[int] = Field(default_factory=list, description="Indices sitting on a kink")
    tolerance: float
    passed: bool


def _evaluate(f: Callable[[Tensor], Tensor], params: Tensor, index: int) -> float:
    with no_grad():
        value = float(np.sum(f(params).data))
    if not np.isfinite(value):
        raise GradCheckError(f"function value is not finite with perturbed index {index}", index=index)
    return value


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    params: Tensor,
    h: float = 1e-4,
    tol: float = 1e-4,
    kink_tol: float = 1e-3,
    max_checks: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    op: str = "",
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(params)`` with central differences.

    A coordinate whose forward and backward one-sided slopes disagree by more
    than ``kink_tol`` (relative) sits on a non-smooth point and is reported in
    ``excluded`` instead of counting as a failure.
    """
    params.requires_grad = True
    params.grad = None
    with graph_scope() as graph:
        loss = f(params)
        backward(graph, loss)
    analytic = params.grad.reshape(-1).copy() if params.grad is not None else np.zeros(params.size)

    flat = params.data.reshape(-1)
    indices = np.arange(flat.size)
    if max_checks is not None and flat.size > max_checks:
        rng = rng or np.random.default_rng(0)
        indices = np.sort(rng.choice(flat.size, size=max_checks, replace=False))

    f0 = _evaluate(f, params, -1)
    worst, worst_index, excluded = 0.0, None, []
    for i in indices:
        i = int(i)
        original = flat[i]
        flat[i] = original + h
        f_plus = _evaluate(f, params, i)
        flat[i] = original - h
        f_minus = _evaluate(f, params, i)
        flat[i] = original

        central = (f_plus - f_minus) / (2 * h)
        forward_slope = (f_plus - f0) / h
        backward_slope = (f0 - f_minus) / h
        if abs(forward_slope - backward_slope) > kink_tol * max(1.0, abs(central)):
            excluded.append(i)
            continue
        a = float(analytic[i])
        rel = abs(a - central) / max(abs(a), abs(central), floor)
        if rel > worst:
            worst, worst_index = rel, i

    report = GradCheckReport(
        op=op,
        max_rel_error=worst,
        worst_index=worst_index,
        checked=len(indices) - len(excluded),
        excluded=excluded,
        tolerance=tol,
        passed=worst < tol,
    )
    if excluded:
        logger.debug(f"gradcheck {op}: {len(excluded)} kink point(s) excluded")
    return report
