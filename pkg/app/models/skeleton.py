"""
17-keypoint person skeleton constants
"""
from typing import List, Tuple

NUM_KEYPOINTS = 17

KEYPOINT_NAMES: List[str] = [
    "nose",
    "left_eye", "right_eye",
    "left_ear", "right_ear",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip",
    "left_knee", "right_knee",
    "left_ankle", "right_ankle",
]

# index t moves to FLIP_PERMUTATION[t] under a horizontal flip
FLIP_PERMUTATION: List[int] = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15]

COCO_SIGMAS: List[float] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
]

# face; each shoulder; elbow+wrist per side; each hip; knee+ankle per side
DEFAULT_GROUPS: List[List[int]] = [
    [0, 1, 2, 3, 4],
    [5],
    [6],
    [7, 9],
    [8, 10],
    [11],
    [12],
    [13, 15],
    [14, 16],
]

UNGROUPED: List[List[int]] = [[t] for t in range(NUM_KEYPOINTS)]

LIMBS: List[Tuple[int, int]] = [
    (0, 1), (0, 2), (1, 3), (2, 4),
    (5, 6), (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 11), (6, 12), (11, 12),
    (11, 13), (13, 15), (12, 14), (14, 16),
]
