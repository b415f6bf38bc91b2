"""
eval: score a checkpoint on the validation scenes
"""
import logging

from app.errors import CheckpointError
from app.services.config_service import config_from_args, resolve_output_dir
from app.services.evaluation_service import EvaluationService, detections_payload, validation_dataset
from app.services.scene_generator import SyntheticDataset, read_manifest
from app.storage import open_run_directory, write_csv

logger = logging.getLogger(__name__)

REPORT_JSON = "eval_report.json"
REPORT_CSV = "eval_report.csv"
EVAL_CONFIG = "eval_config.json"


def register(subparsers, parents):
    parser = subparsers.add_parser("eval", parents=parents, help="Evaluate a checkpoint (keypoint AP)")
    parser.add_argument("--checkpoint", help="Checkpoint manifest (default: newest in the run directory)")
    parser.add_argument("--manifest", help="Validation manifest written by gen-data (default: regenerate from config)")
    parser.add_argument("--dump-detections", action="store_true", help="Also write detections.json")
    parser.set_defaults(handler=evaluate)


def evaluate(args) -> int:
    config = config_from_args(args)
    run = open_run_directory(config, resolve_output_dir(config, args.output_dir), EVAL_CONFIG)
    path = args.checkpoint or run.latest_checkpoint()
    if path is None:
        raise CheckpointError(f"No checkpoint given and none found in {run.checkpoint_dir}")

    dataset = SyntheticDataset(read_manifest(args.manifest)) if args.manifest else validation_dataset(config)
    service = EvaluationService.from_checkpoint(path, config.eval, batch_size=config.train.batch_size)
    report, detections = service.evaluate_dataset(dataset)

    run.write_json(REPORT_JSON, report)
    rows = [{"metric": k, "value": f"{v:.6f}"} for k, v in report.headline().items()]
    rows += [{"metric": f"AP@{t:.2f}", "value": f"{ap:.6f}"} for t, ap in zip(report.thresholds, report.per_threshold_ap)]
    for key in ("AP_bb", "AP_bb50", "AP_bb75", "ms_per_image"):
        value = getattr(report, key)
        if value is not None:
            rows.append({"metric": key, "value": f"{value:.6f}"})
    write_csv(run.file(REPORT_CSV), rows, ["metric", "value"])
    if args.dump_detections:
        run.write_json("detections.json", detections_payload(detections))

    logger.info("✅ " + " ".join(f"{k} {v:.4f}" for k, v in report.headline().items()))
    return 0
