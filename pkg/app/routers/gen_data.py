"""
gen-data: write the train/val dataset manifests (and optional previews)
"""
import logging
import os

from app.services.config_service import config_from_args, resolve_output_dir
from app.services.evaluation_service import VAL_INDEX_OFFSET
from app.services.scene_generator import SyntheticDataset, dataset_manifest, write_manifest, write_preview
from app.storage import open_run_directory

logger = logging.getLogger(__name__)

TRAIN_MANIFEST = os.path.join("data", "train_manifest.json")
VAL_MANIFEST = os.path.join("data", "val_manifest.json")


def register(subparsers, parents):
    parser = subparsers.add_parser("gen-data", parents=parents, help="Write synthetic dataset manifests")
    parser.add_argument("--preview", type=int, default=0, metavar="N", help="Also save PNGs of the first N train scenes")
    parser.set_defaults(handler=gen_data)


def gen_data(args) -> int:
    config = config_from_args(args)
    run = open_run_directory(config, resolve_output_dir(config, args.output_dir))
    scene = config.data.scene

    train = dataset_manifest(scene, config.data.train_count)
    val = dataset_manifest(scene, config.data.val_count, first_index=VAL_INDEX_OFFSET)
    write_manifest(run.file(TRAIN_MANIFEST), train)
    write_manifest(run.file(VAL_MANIFEST), val)

    if args.preview > 0:
        preview_dir = run.file("previews")
        os.makedirs(preview_dir, exist_ok=True)
        dataset = SyntheticDataset(train)
        for i in range(min(args.preview, len(dataset))):
            write_preview(dataset[i], os.path.join(preview_dir, f"scene_{i:05d}.png"))
        logger.info(f"✅ Wrote {min(args.preview, len(dataset))} preview(s) to {preview_dir}")
    return 0
