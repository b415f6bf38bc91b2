"""
Run configuration records. Every record forbids unknown keys so a typo in a
config file is an error rather than a silently ignored setting.
"""
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .skeleton import COCO_SIGMAS, DEFAULT_GROUPS, NUM_KEYPOINTS

FORMAT_VERSION = 1


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SceneSpec(StrictModel):
    seed: int = 0
    image_size: Tuple[int, int] = Field(default=(128, 128), description="(H, W) pixels")
    n_instances: Tuple[int, int] = Field(default=(1, 3), description="Inclusive instance-count range")
    scale_range: Tuple[float, float] = Field(default=(16.0, 96.0), description="Pseudo-box max side range")
    occlusion_prob: float = Field(default=0.3, ge=0.0, le=1.0)
    limb_thickness: int = Field(default=2, ge=1)
    max_placement_tries: int = Field(default=50, ge=1)

    @model_validator(mode="after")
    def check_ranges(self):
        h, w = self.image_size
        if h < 1 or w < 1:
            raise ValueError("image_size must be positive")
        lo, hi = self.n_instances
        if lo < 1 or hi < lo:
            raise ValueError("n_instances must satisfy 1 <= min <= max")
        s_lo, s_hi = self.scale_range
        if s_lo <= 0 or s_hi < s_lo:
            raise ValueError("scale_range must satisfy 0 < min_side <= max_side")
        if s_hi > min(h, w):
            raise ValueError(f"scale_range max_side {s_hi} exceeds min(H, W) = {min(h, w)}")
        return self


class DataConfig(StrictModel):
    scene: SceneSpec = Field(default_factory=SceneSpec)
    train_count: int = Field(default=500, ge=1)
    val_count: int = Field(default=100, ge=1)


class LevelAssignment(StrictModel):
    level: int = Field(..., ge=0, description="Index into the pyramid, 0 = finest")
    stride: int = Field(..., ge=1)
    size_range: Tuple[float, Optional[float]] = Field(..., description="(lo, hi] pixels; hi None = unbounded")

    def contains(self, size: float) -> bool:
        lo, hi = self.size_range
        above = size > lo or (self.level == 0 and size >= lo)
        return above and (hi is None or size <= hi)


DESK_RANGES: List[Tuple[float, Optional[float]]] = [(0.0, 32.0), (32.0, 64.0), (64.0, None)]
FCOS_RANGES: List[Tuple[float, Optional[float]]] = [
    (0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, 512.0), (512.0, None),
]


class ModelConfig(StrictModel):
    num_keypoints: int = NUM_KEYPOINTS
    stem_channels: List[int] = Field(default_factory=lambda: [8, 16])
    backbone_channels: List[int] = Field(default_factory=lambda: [16, 32, 64])
    fpn_channels: int = Field(default=64, ge=4)
    num_levels: int = Field(default=3, ge=1, le=5)
    tower_convs: int = Field(default=2, ge=0)
    heatmap_channels: int = Field(default=128, ge=1)
    naive_final_kernel: Literal[1, 3] = 3
    size_ranges: Optional[List[Tuple[float, Optional[float]]]] = None
    groups: List[List[int]] = Field(default_factory=lambda: [list(g) for g in DEFAULT_GROUPS])
    init_seed: int = 0

    @field_validator("groups")
    @classmethod
    def validate_groups(cls, v, info):
        k = info.data.get("num_keypoints", NUM_KEYPOINTS)
        flat = sorted(t for g in v for t in g)
        if flat != list(range(k)) or any(len(g) == 0 for g in v):
            raise ValueError(f"groups must be a partition of 0..{k - 1}")
        return v

    @model_validator(mode="after")
    def check_levels(self):
        if len(self.stem_channels) != 2:
            raise ValueError("stem_channels needs two entries (two stride-2 convs)")
        if len(self.backbone_channels) != 3:
            raise ValueError("backbone_channels needs one entry per stage (3 stages)")
        if self.fpn_channels % 4 != 0:
            raise ValueError("fpn_channels must be divisible by 4 for separate features")
        if self.size_ranges is not None and len(self.size_ranges) != self.num_levels:
            raise ValueError("size_ranges needs one (lo, hi) pair per level")
        return self

    @property
    def strides(self) -> List[int]:
        return [8 * 2 ** level for level in range(self.num_levels)]

    def level_assignments(self) -> List[LevelAssignment]:
        ranges = self.size_ranges
        if ranges is None:
            if self.num_levels == 3:
                ranges = DESK_RANGES
            elif self.num_levels == 5:
                ranges = FCOS_RANGES
            else:
                ranges = [(0.0 if i == 0 else 32.0 * 2 ** (i - 1), 32.0 * 2 ** i) for i in range(self.num_levels)]
                ranges[-1] = (ranges[-1][0], None)
        return [
            LevelAssignment(level=i, stride=s, size_range=tuple(r))
            for i, (s, r) in enumerate(zip(self.strides, ranges))
        ]


class HeadVariant(StrictModel):
    align: bool = True
    grouped: bool = True
    separate_features: bool = True
    finer_sampling: bool = True
    heatmap_aux: bool = True
    heatmap_stride: Literal[8, 16] = 8
    box_branch: bool = False
    aligner_disabled: bool = Field(default=False, description="Ignore locator output, sample at the location")

    @model_validator(mode="after")
    def check_flags(self):
        problems = variant_problems(self)
        if problems:
            raise ValueError("; ".join(problems))
        return self


def variant_problems(variant: HeadVariant) -> List[str]:
    problems = []
    if not variant.align:
        for flag in ("grouped", "separate_features", "finer_sampling", "aligner_disabled"):
            if getattr(variant, flag):
                problems.append(f"{flag} requires align = true")
    return problems


class TrainConfig(StrictModel):
    base_lr: float = Field(default=0.01, gt=0.0)
    max_iter: int = Field(default=3000, ge=1)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    batch_size: int = Field(default=4, ge=1)
    lambda_cls: float = Field(default=1.0, ge=0.0)
    lambda_kp: float = Field(default=1.0, ge=0.0)
    lambda_ctr: float = Field(default=1.0, ge=0.0)
    lambda_hm: float = Field(default=1.0, ge=0.0)
    lambda_box: float = Field(default=1.0, ge=0.0)
    focal_alpha: float = Field(default=0.25, gt=0.0, lt=1.0)
    focal_gamma: float = Field(default=2.0, ge=0.0)
    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    seed: int = 0
    checkpoint_every: int = Field(default=1000, ge=1)
    log_every: int = Field(default=50, ge=1)
    prefetch: int = Field(default=4, ge=0, description="Bounded batch queue size; 0 = synchronous")
    precision: Literal["float32", "float64"] = "float32"


class EvalSettings(StrictModel):
    score_thresh: float = Field(default=0.05, ge=0.0, le=1.0)
    topk_per_level: int = Field(default=100, ge=1)
    nms_thresh: float = Field(default=0.5, gt=0.0, le=1.0)
    max_detections: int = Field(default=20, ge=1)
    sigmas: List[float] = Field(default_factory=lambda: list(COCO_SIGMAS))
    area_medium: Tuple[float, float] = (32.0 ** 2, 96.0 ** 2)
    area_large: Tuple[float, Optional[float]] = (96.0 ** 2, None)

    @field_validator("sigmas")
    @classmethod
    def validate_sigmas(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("sigmas must be positive")
        return v


ABLATION_ROWS: List[str] = [
    "naive",
    "align",
    "align_disabled",
    "grouped",
    "sep_features",
    "finer_sampling",
    "heatmap_8x",
    "heatmap_16x",
]


class AblationSettings(StrictModel):
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    rows: List[str] = Field(default_factory=lambda: list(ABLATION_ROWS))

    @field_validator("rows")
    @classmethod
    def validate_rows(cls, v):
        unknown = [r for r in v if r not in ABLATION_ROWS]
        if unknown:
            raise ValueError(f"unknown ablation rows {unknown}; choose from {ABLATION_ROWS}")
        return v


class RunConfig(StrictModel):
    format_version: int = FORMAT_VERSION
    output_dir: str = Field(default="default", description="Relative paths resolve under KPALIGN_RUNS_DIR")
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    variant: HeadVariant = Field(default_factory=HeadVariant)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalSettings = Field(default_factory=EvalSettings)
    ablation: AblationSettings = Field(default_factory=AblationSettings)

    @field_validator("format_version")
    @classmethod
    def validate_version(cls, v):
        if v != FORMAT_VERSION:
            raise ValueError(f"format_version {v} is not supported (expected {FORMAT_VERSION})")
        return v
