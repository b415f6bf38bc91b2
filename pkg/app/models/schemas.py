"""
Records shared across packages: annotations, boxes, samples, detections
and evaluation reports.
"""
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Point = Tuple[float, float]


class Box(BaseModel):
    x0: float
    y0: float
    x1: float
    y1: float

    @model_validator(mode="after")
    def check_order(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"Box corners out of order: ({self.x0}, {self.y0}, {self.x1}, {self.y1})")
        return self

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


class InstanceAnnotation(BaseModel):
    keypoints: List[Point] = Field(..., description="(x, y) image pixels per keypoint")
    visibility: List[int] = Field(..., description="0=unlabeled, 1=labeled-occluded, 2=labeled-visible")
    area: float = Field(default=0.0, ge=0.0, description="Instance area in pixel^2")

    @field_validator("visibility")
    @classmethod
    def validate_visibility(cls, v):
        if any(flag not in (0, 1, 2) for flag in v):
            raise ValueError("Visibility flags must be 0, 1 or 2")
        if not any(flag > 0 for flag in v):
            raise ValueError("At least one keypoint must be labeled")
        return v

    @model_validator(mode="after")
    def check_lengths(self):
        if len(self.keypoints) != len(self.visibility):
            raise ValueError(
                f"{len(self.keypoints)} keypoints but {len(self.visibility)} visibility flags"
            )
        return self

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    def kp_array(self) -> np.ndarray:
        return np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)

    def vis_array(self) -> np.ndarray:
        return np.asarray(self.visibility, dtype=np.int64)


class Sample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray = Field(..., description="[3, H, W] float32 in [0, 1]")
    annotations: List[InstanceAnnotation]
    index: int = 0
    placement_warning: bool = Field(default=False, description="Fewer instances placed than requested")


class Detection(BaseModel):
    score: float
    keypoints: List[Point]
    box: Box
    level: int = 0
    location: Tuple[int, int] = (0, 0)
    location_center: Optional[Point] = None
    sample_points: Optional[List[Point]] = Field(
        default=None, description="Locator sample points in image pixels, one per keypoint group"
    )

    def kp_array(self) -> np.ndarray:
        return np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)


class EvalReport(BaseModel):
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    AP_M: float = 0.0
    AP_L: float = 0.0
    thresholds: List[float] = Field(default_factory=list)
    per_threshold_ap: List[float] = Field(default_factory=list)
    pr_curves: Dict[str, List[float]] = Field(
        default_factory=dict, description="Interpolated precision at 101 recall points per threshold"
    )
    AP_bb: Optional[float] = None
    AP_bb50: Optional[float] = None
    AP_bb75: Optional[float] = None
    num_images: int = 0
    num_detections: int = 0
    num_gt: int = 0
    ms_per_image: Optional[float] = None

    def headline(self) -> Dict[str, float]:
        return {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75, "AP_M": self.AP_M, "AP_L": self.AP_L}
