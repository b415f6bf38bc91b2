"""
train: run the training loop, writing metrics and checkpoints
"""
import logging

from app.errors import CheckpointError
from app.services.config_service import config_from_args, resolve_output_dir
from app.services.scene_generator import SyntheticDataset, read_manifest
from app.services.training_service import TrainingService
from app.storage import open_run_directory

logger = logging.getLogger(__name__)


def register(subparsers, parents):
    parser = subparsers.add_parser("train", parents=parents, help="Train a model")
    parser.add_argument("--manifest", help="Dataset manifest written by gen-data (default: regenerate from config)")
    parser.add_argument(
        "--resume",
        nargs="?",
        const="latest",
        help="Checkpoint manifest to resume from; bare --resume picks the newest in the run directory",
    )
    parser.add_argument("--stop-at", type=int, default=None, help="Stop early at this iteration")
    parser.set_defaults(handler=train)


def train(args) -> int:
    config = config_from_args(args)
    run = open_run_directory(config, resolve_output_dir(config, args.output_dir))

    dataset = None
    if args.manifest:
        manifest = read_manifest(args.manifest)
        dataset = SyntheticDataset(manifest)
        logger.info(f"Training on manifest {args.manifest} ({manifest.count} scenes)")

    trainer = TrainingService(config, run, dataset=dataset)
    if args.resume:
        path = run.latest_checkpoint() if args.resume == "latest" else args.resume
        if path is None:
            raise CheckpointError(f"No checkpoint to resume from in {run.checkpoint_dir}")
        trainer.resume(path)

    result = trainer.train(stop_at=args.stop_at)
    run.write_json("train_result.json", result)
    logger.info(f"✅ Run directory: {run.path}")
    return 0
