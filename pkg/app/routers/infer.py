"""
infer: run a checkpoint on image files and dump detections with locator points
"""
import logging
import os
from typing import List

import numpy as np
from PIL import Image

from app.errors import CheckpointError, DatasetError
from app.network import required_divisor
from app.services.config_service import config_from_args, resolve_output_dir
from app.services.evaluation_service import EvaluationService, detections_payload
from app.storage import open_run_directory

logger = logging.getLogger(__name__)

INFER_CONFIG = "infer_config.json"


def register(subparsers, parents):
    parser = subparsers.add_parser("infer", parents=parents, help="Detect keypoints in image files")
    parser.add_argument("images", nargs="+", help="Image files (any format PIL reads)")
    parser.add_argument("--checkpoint", help="Checkpoint manifest (default: newest in the run directory)")
    parser.set_defaults(handler=infer)


def load_image(path: str, divisor: int) -> np.ndarray:
    """RGB file to a float32 [3,H,W] array in [0,1], zero-padded right/bottom to ``divisor``."""
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DatasetError(f"Cannot read image {path}: {e}")
    h, w = rgb.shape[:2]
    ph, pw = -h % divisor, -w % divisor
    if ph or pw:
        rgb = np.pad(rgb, ((0, ph), (0, pw), (0, 0)))
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def infer(args) -> int:
    config = config_from_args(args)
    run = open_run_directory(config, resolve_output_dir(config, args.output_dir), INFER_CONFIG)
    path = args.checkpoint or run.latest_checkpoint()
    if path is None:
        raise CheckpointError(f"No checkpoint given and none found in {run.checkpoint_dir}")

    service = EvaluationService.from_checkpoint(path, config.eval, batch_size=1)
    divisor = required_divisor(service.model.cfg)
    detections: List = []
    for image_path in args.images:
        image = load_image(image_path, divisor)
        dets = service.predict(image[None])[0]
        logger.info(f"{image_path}: {len(dets)} detection(s)")
        detections.append(dets)

    names = [os.path.basename(p) for p in args.images]
    out = run.write_json("detections.json", detections_payload(detections, names))
    logger.info(f"✅ Detections with locator points written to {out}")
    return 0
