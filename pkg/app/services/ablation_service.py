"""
Ablation harness: trains every head variant row from scratch for each seed,
evaluates it on the validation scenes and reports the median over seeds.
"""
import logging
import os
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from app.models.config import ABLATION_ROWS, HeadVariant, RunConfig
from app.models.schemas import EvalReport
from app.services.evaluation_service import EvaluationService, validation_dataset
from app.services.training_service import TrainingService
from app.storage import RunDirectory, write_csv

logger = logging.getLogger(__name__)

COLUMNS = ["AP", "AP50", "AP75", "AP_M", "AP_L"]

# rows whose final keypoint loss is compared for the auxiliary-heatmap claim
HEATMAP_ON_ROW = "heatmap_8x"
HEATMAP_OFF_ROW = "finer_sampling"

ROW_LABELS = {
    "naive": "naive",
    "align": "+align",
    "align_disabled": "+align(aligner-disabled)",
    "grouped": "+grouped",
    "sep_features": "+sep-features",
    "finer_sampling": "+finer-sampling",
    "heatmap_8x": "+heatmap-aux(8x)",
    "heatmap_16x": "+heatmap-aux(16x)",
}


def row_variant(row: str, box_branch: bool = False) -> HeadVariant:
    """HeadVariant of one ablation row; refinements stack in row order."""
    if row not in ABLATION_ROWS:
        raise ValueError(f"Unknown ablation row {row}")
    flags = dict(
        align=False, grouped=False, separate_features=False, finer_sampling=False,
        heatmap_aux=False, heatmap_stride=8, aligner_disabled=False, box_branch=box_branch,
    )
    if row != "naive":
        flags["align"] = True
    if row == "align_disabled":
        flags["aligner_disabled"] = True
    stack = ["grouped", "sep_features", "finer_sampling", "heatmap_8x"]
    reached = ABLATION_ROWS.index(row)
    for step, flag in zip(stack, ("grouped", "separate_features", "finer_sampling", "heatmap_aux")):
        if reached >= ABLATION_ROWS.index(step):
            flags[flag] = True
    if row == "heatmap_16x":
        flags["heatmap_stride"] = 16
    return HeadVariant(**flags)


class AblationRow(BaseModel):
    row: str
    label: str
    variant: HeadVariant
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    AP_M: float = 0.0
    AP_L: float = 0.0
    per_seed: List[EvalReport] = Field(default_factory=list)
    final_kp_loss: Optional[float] = Field(default=None, description="Median over seeds at the last iteration")


class AblationTable(BaseModel):
    seeds: List[int]
    max_iter: int
    rows: List[AblationRow]
    loss_curve_rows: Dict[str, str] = Field(default_factory=dict)

    def get(self, row: str) -> AblationRow:
        for r in self.rows:
            if r.row == row:
                return r
        raise KeyError(row)


def cell_config(config: RunConfig, row: str, seed: int) -> RunConfig:
    train = config.train.model_copy(update={"seed": seed})
    model = config.model.model_copy(update={"init_seed": seed})
    return config.model_copy(update={
        "train": train,
        "model": model,
        "variant": row_variant(row, config.variant.box_branch),
    })


def run_ablation(config: RunConfig, run_dir: Optional[RunDirectory] = None) -> AblationTable:
    rows = config.ablation.rows
    seeds = config.ablation.seeds
    val = validation_dataset(config)
    curves: Dict[str, List[List[float]]] = {}
    table_rows: List[AblationRow] = []

    for row in rows:
        reports: List[EvalReport] = []
        final_kp: List[float] = []
        seed_curves: List[List[float]] = []
        for seed in seeds:
            cfg = cell_config(config, row, seed)
            cell_dir = RunDirectory(os.path.join(run_dir.path, "cells", row, f"seed{seed}")) if run_dir else None
            logger.info(f"Ablation cell {row} seed {seed}")
            trainer = TrainingService(cfg, cell_dir)
            trainer.train()
            seed_curves.append([r.kp for r in trainer.history])
            if trainer.history:
                final_kp.append(trainer.history[-1].kp)
            evaluator = EvaluationService(trainer.model, cfg.eval, cfg.train.batch_size)
            report, _ = evaluator.evaluate_dataset(val)
            reports.append(report)
        curves[row] = seed_curves
        medians = {c: float(np.median([getattr(r, c) for r in reports])) for c in COLUMNS}
        table_rows.append(AblationRow(
            row=row,
            label=ROW_LABELS[row],
            variant=row_variant(row, config.variant.box_branch),
            per_seed=reports,
            final_kp_loss=float(np.median(final_kp)) if final_kp else None,
            **medians,
        ))
        logger.info(f"✅ {ROW_LABELS[row]}: " + " ".join(f"{c} {medians[c]:.3f}" for c in COLUMNS))

    table = AblationTable(seeds=list(seeds), max_iter=config.train.max_iter, rows=table_rows)
    if run_dir is not None:
        write_table(run_dir, table)
        if HEATMAP_ON_ROW in curves and HEATMAP_OFF_ROW in curves:
            table.loss_curve_rows = {"heatmap_on": HEATMAP_ON_ROW, "heatmap_off": HEATMAP_OFF_ROW}
            write_loss_curves(run_dir, curves[HEATMAP_ON_ROW], curves[HEATMAP_OFF_ROW])
        run_dir.write_json("ablation.json", table)
    return table


def write_table(run_dir: RunDirectory, table: AblationTable) -> str:
    path = run_dir.file("ablation.csv")
    rows = [
        {"row": r.label, **{c: f"{getattr(r, c):.4f}" for c in COLUMNS},
         "final_kp_loss": "" if r.final_kp_loss is None else f"{r.final_kp_loss:.6f}"}
        for r in table.rows
    ]
    write_csv(path, rows, ["row"] + COLUMNS + ["final_kp_loss"])
    return path


def median_curve(curves: List[List[float]]) -> List[float]:
    length = min((len(c) for c in curves), default=0)
    if length == 0:
        return []
    return np.median(np.array([c[:length] for c in curves]), axis=0).tolist()


def write_loss_curves(run_dir: RunDirectory, heatmap_on: List[List[float]], heatmap_off: List[List[float]]) -> str:
    on, off = median_curve(heatmap_on), median_curve(heatmap_off)
    path = run_dir.file("loss_curves.csv")
    write_csv(
        path,
        ({"iter": i, "kp_heatmap_on": a, "kp_heatmap_off": b} for i, (a, b) in enumerate(zip(on, off))),
        ["iter", "kp_heatmap_on", "kp_heatmap_off"],
    )
    return path
