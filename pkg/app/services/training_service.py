"""
Training engine: batch assembly with flip augmentation, loss assembly,
SGD with momentum and weight decay under a linear LR decay, prefetching,
checkpointing and per-iteration metrics.

Every random draw is addressed by (seed, iteration, sample), so a batch is
a pure function of its iteration and a resumed run repeats the
uninterrupted one exactly.
"""
import logging
import queue
import threading
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.errors import NonFiniteLossError
from app.models.config import HeadVariant, RunConfig, TrainConfig
from app.network import HeadOutputs, KeypointNet
from app.services import rng as rng_streams
from app.services.checkpoint_service import load_checkpoint, restore_params, save_checkpoint
from app.services.geometry import flip_keypoints
from app.services.scene_generator import SyntheticDataset, dataset_manifest
from app.services.target_service import ImageTargets, TargetBuilder
from app.storage import MetricsWriter, RunDirectory
from app.tensorcore import (
    Tensor,
    abs as t_abs,
    add,
    backward,
    binary_cross_entropy_with_logits,
    binary_entropy,
    graph_scope,
    mul,
    scale,
    sigmoid_focal_loss,
    sub,
    sum as t_sum,
    zero_grad,
)

logger = logging.getLogger(__name__)

LOSS_TERMS = ("cls", "kp", "ctr", "hm", "box")


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear decay from base_lr at 0 to 0 at max_iter."""
    return cfg.base_lr * (1.0 - iteration / cfg.max_iter)


# ---------------------------------------------------------------- batches

class LevelBatch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    cls: np.ndarray           # [N, H, W]
    kp_offsets: np.ndarray    # [N, 2K, H, W]
    kp_mask: np.ndarray       # [N, 2K, H, W]
    centerness: np.ndarray    # [N, H, W]
    box_offsets: np.ndarray   # [N, 4, H, W]


class Batch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    iteration: int
    indices: List[int]
    flipped: List[bool]
    images: np.ndarray        # [N, 3, H, W]
    levels: List[LevelBatch]
    heatmap: Optional[np.ndarray] = None  # [N, K, H', W']
    heatmap_collisions: int = 0


def stack_targets(targets: Sequence[ImageTargets], dtype) -> Tuple[List[LevelBatch], Optional[np.ndarray], int]:
    levels = []
    for lv in range(len(targets[0].levels)):
        per = [t.levels[lv] for t in targets]
        levels.append(LevelBatch(
            cls=np.stack([p.cls for p in per]).astype(dtype),
            kp_offsets=np.stack([p.kp_offsets for p in per]).astype(dtype),
            kp_mask=np.stack([p.kp_mask for p in per]).astype(dtype),
            centerness=np.stack([p.centerness for p in per]).astype(dtype),
            box_offsets=np.stack([p.box_offsets for p in per]).astype(dtype),
        ))
    heatmap, collisions = None, 0
    if targets[0].heatmap is not None:
        heatmap = np.stack([t.heatmap.labels for t in targets]).astype(dtype)
        collisions = sum(t.heatmap.collisions for t in targets)
    return levels, heatmap, collisions


class BatchAssembler:
    """Builds the batch of one iteration from the dataset."""

    def __init__(self, dataset: SyntheticDataset, builder: TargetBuilder, cfg: TrainConfig, dtype=np.float32):
        self.dataset = dataset
        self.builder = builder
        self.cfg = cfg
        self.dtype = np.dtype(dtype)

    def indices(self, iteration: int) -> List[int]:
        rng = rng_streams.counter_rng(self.cfg.seed, rng_streams.BATCH, iteration)
        return [int(i) for i in rng.integers(0, len(self.dataset), size=self.cfg.batch_size)]

    def flip_decision(self, iteration: int, slot: int) -> bool:
        rng = rng_streams.counter_rng(self.cfg.seed, rng_streams.FLIP, iteration, slot)
        return bool(rng.random() < self.cfg.flip_prob)

    def assemble(self, iteration: int) -> Batch:
        indices = self.indices(iteration)
        images, targets, flips = [], [], []
        for slot, idx in enumerate(indices):
            sample = self.dataset[idx]
            image = sample.image
            annotations = sample.annotations
            flip = self.flip_decision(iteration, slot)
            if flip:
                width = image.shape[-1]
                image = np.ascontiguousarray(image[:, :, ::-1])
                annotations = [flip_keypoints(a, width) for a in annotations]
            images.append(image)
            targets.append(self.builder.build(annotations, image.shape[-2:]))
            flips.append(flip)
        levels, heatmap, collisions = stack_targets(targets, self.dtype)
        return Batch(
            iteration=iteration,
            indices=indices,
            flipped=flips,
            images=np.stack(images).astype(self.dtype),
            levels=levels,
            heatmap=heatmap,
            heatmap_collisions=collisions,
        )


class Prefetcher:
    """Background thread filling a bounded queue with batches in iteration order."""

    def __init__(self, assembler: BatchAssembler, start: int, stop: int, depth: int):
        self.assembler = assembler
        self.depth = depth
        self.next_iteration = start
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(depth, 1))
        self._stop = threading.Event()
        self._thread = None
        if depth > 0:
            self._thread = threading.Thread(target=self._run, args=(start, stop), daemon=True)
            self._thread.start()

    def _run(self, start: int, stop: int) -> None:
        for it in range(start, stop):
            if self._stop.is_set():
                return
            try:
                item = self.assembler.assemble(it)
            except Exception as e:  # surfaced on the consumer side
                item = e
            while not self._stop.is_set():
                try:
                    self._queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def get(self, iteration: int) -> Batch:
        if self._thread is None:
            return self.assembler.assemble(iteration)
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        if item.iteration != iteration:
            raise RuntimeError(f"Prefetch order broken: expected iteration {iteration}, got {item.iteration}")
        return item

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


# ---------------------------------------------------------------- loss

class LossRecord(BaseModel):
    iteration: int = 0
    lr: float = 0.0
    total: float = 0.0
    cls: float = 0.0
    kp: float = 0.0
    ctr: float = 0.0
    hm: float = 0.0
    box: float = 0.0
    num_pos: int = 0

    def row(self) -> Dict:
        return {
            "iter": self.iteration, "lr": self.lr, "total": self.total, "cls": self.cls,
            "kp": self.kp, "ctr": self.ctr, "hm": self.hm, "box": self.box,
        }


def total_loss(
    outputs: HeadOutputs,
    batch: Batch,
    cfg: TrainConfig,
    variant: HeadVariant,
    iteration: int = 0,
) -> Tuple[Tensor, LossRecord]:
    """Weighted sum of the per-term losses, each normalized by its positive count."""
    n_pos = sum(float(lv.cls.sum()) for lv in batch.levels)
    n_kp = sum(float((lv.kp_mask * lv.cls[:, None]).sum()) for lv in batch.levels)
    n_pos, n_kp = max(n_pos, 1.0), max(n_kp, 1.0)

    cls_sum = ctr_sum = kp_sum = box_sum = None
    for out, tgt in zip(outputs.levels, batch.levels):
        pos = tgt.cls[:, None]                                           # [N, 1, H, W]
        fl = t_sum(sigmoid_focal_loss(out.cls, pos, cfg.focal_alpha, cfg.focal_gamma))
        cls_sum = fl if cls_sum is None else add(cls_sum, fl)

        # BCE minus the target entropy: same gradient, zero at a perfect fit
        ctr_t = tgt.centerness[:, None]
        entropy = binary_entropy(ctr_t) * pos
        ctr = sub(t_sum(mul(binary_cross_entropy_with_logits(out.ctr, ctr_t), pos)), float(entropy.sum()))
        ctr_sum = ctr if ctr_sum is None else add(ctr_sum, ctr)

        kp_w = tgt.kp_mask * pos
        kp = t_sum(mul(t_abs(sub(out.kp, tgt.kp_offsets)), kp_w))
        kp_sum = kp if kp_sum is None else add(kp_sum, kp)

        if variant.box_branch and out.box is not None:
            bx = t_sum(mul(t_abs(sub(out.box, tgt.box_offsets)), pos))
            box_sum = bx if box_sum is None else add(box_sum, bx)

    terms: Dict[str, Tensor] = {
        "cls": scale(cls_sum, 1.0 / n_pos),
        "kp": scale(kp_sum, 1.0 / n_kp),
        "ctr": scale(ctr_sum, 1.0 / n_pos),
    }
    if box_sum is not None:
        terms["box"] = scale(box_sum, 1.0 / n_pos)
    if outputs.heatmap is not None and batch.heatmap is not None:
        n_hm = max(float(batch.heatmap.sum()), 1.0)
        hm = t_sum(sigmoid_focal_loss(outputs.heatmap, batch.heatmap, cfg.focal_alpha, cfg.focal_gamma))
        terms["hm"] = scale(hm, 1.0 / n_hm)

    weights = {"cls": cfg.lambda_cls, "kp": cfg.lambda_kp, "ctr": cfg.lambda_ctr, "hm": cfg.lambda_hm, "box": cfg.lambda_box}
    values = {}
    total = None
    for name, term in terms.items():
        value = term.item()
        if not np.isfinite(value):
            raise NonFiniteLossError(name, iteration)
        values[name] = value
        if weights[name] == 0:
            continue
        weighted = scale(term, weights[name])
        total = weighted if total is None else add(total, weighted)
    if total is None:
        total = scale(terms["cls"], 0.0)

    record = LossRecord(iteration=iteration, total=total.item(), num_pos=int(n_pos), **values)
    if not np.isfinite(record.total):
        raise NonFiniteLossError("total", iteration)
    return total, record


# ---------------------------------------------------------------- optimizer

class SGDState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    momentum: Dict[str, np.ndarray] = Field(default_factory=dict)


def sgd_step(named_params: Sequence[Tuple[str, Tensor]], state: SGDState, lr: float, cfg: TrainConfig) -> None:
    """v <- mu*v + g + wd*theta ; theta <- theta - lr*v. Missing gradients count as zero."""
    for name, p in named_params:
        dtype = p.data.dtype.type
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = state.momentum.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = dtype(cfg.momentum) * v + g.astype(p.data.dtype) + dtype(cfg.weight_decay) * p.data
        state.momentum[name] = v
        p.data = p.data - dtype(lr) * v


def train_step(
    model: KeypointNet,
    batch: Batch,
    state: SGDState,
    cfg: TrainConfig,
    iteration: int,
) -> LossRecord:
    lr = lr_at(iteration, cfg)
    params = model.params.named()
    zero_grad(model.params.tensors())
    with graph_scope() as graph:
        outputs = model.forward(Tensor(batch.images), training=True)
        loss, record = total_loss(outputs, batch, cfg, model.variant, iteration)
        backward(graph, loss)
    sgd_step(params, state, lr, cfg)
    record.lr = lr
    return record


# ---------------------------------------------------------------- service

class TrainResult(BaseModel):
    iterations: int
    final: Optional[LossRecord] = None
    checkpoint: Optional[str] = None
    seconds: float = 0.0


class TrainingService:
    """Owns the model, optimizer state and data pipeline of one training run."""

    def __init__(
        self,
        config: RunConfig,
        run_dir: Optional[RunDirectory] = None,
        dataset: Optional[SyntheticDataset] = None,
    ):
        self.config = config
        self.run_dir = run_dir
        self.train_cfg = config.train
        dtype = np.float32 if config.train.precision == "float32" else np.float64
        model_cfg = config.model
        self.model = KeypointNet(model_cfg, config.variant, dtype=dtype)
        self.state = SGDState()
        self.start_iteration = 0
        self.history: List[LossRecord] = []
        if dataset is None:
            dataset = SyntheticDataset(dataset_manifest(config.data.scene, config.data.train_count))
        self.dataset = dataset
        self.assembler = BatchAssembler(
            self.dataset, TargetBuilder(model_cfg, config.variant), config.train, dtype=dtype
        )
        logger.info(
            f"Training service initialized: {len(self.dataset)} scenes, batch {config.train.batch_size}, "
            f"max_iter {config.train.max_iter}, base_lr {config.train.base_lr}"
        )

    def resume(self, path: str) -> int:
        checkpoint = load_checkpoint(path)
        restore_params(self.model.params, checkpoint)
        self.state = SGDState(momentum={
            n: m.astype(self.model.dtype) for n, m in checkpoint.momentum.items()
        })
        self.start_iteration = checkpoint.manifest.iteration
        logger.info(f"Resumed from {path} at iteration {self.start_iteration}")
        return self.start_iteration

    def save(self, iteration: int) -> Optional[str]:
        if self.run_dir is None:
            return None
        return save_checkpoint(
            self.run_dir.checkpoint_path(iteration),
            self.model.params.state(),
            iteration=iteration,
            seed=self.train_cfg.seed,
            model=self.model.cfg,
            variant=self.model.variant,
            momentum=self.state.momentum,
        )

    def train(self, stop_at: Optional[int] = None) -> TrainResult:
        cfg = self.train_cfg
        stop = min(stop_at if stop_at is not None else cfg.max_iter, cfg.max_iter)
        writer: Optional[MetricsWriter] = None
        if self.run_dir is not None:
            writer = self.run_dir.metrics_writer()
            writer.truncate_after(self.start_iteration)

        prefetcher = Prefetcher(self.assembler, self.start_iteration, stop, cfg.prefetch)
        started = time.time()
        record, checkpoint = None, None
        try:
            for it in range(self.start_iteration, stop):
                batch = prefetcher.get(it)
                record = train_step(self.model, batch, self.state, cfg, it)
                self.history.append(record)
                if writer is not None:
                    writer.log(record.row())
                if it % cfg.log_every == 0 or it == stop - 1:
                    logger.info(
                        f"iter {it} lr {record.lr:.5f} total {record.total:.4f} cls {record.cls:.4f} "
                        f"kp {record.kp:.4f} ctr {record.ctr:.4f} hm {record.hm:.4f} box {record.box:.4f}"
                    )
                if (it + 1) % cfg.checkpoint_every == 0 and it + 1 < stop:
                    self.save(it + 1)
        finally:
            prefetcher.close()

        self.start_iteration = stop
        checkpoint = self.save(stop)
        elapsed = time.time() - started
        logger.info(f"✅ Training finished at iteration {stop} in {elapsed:.1f}s")
        return TrainResult(iterations=stop, final=record, checkpoint=checkpoint, seconds=elapsed)
