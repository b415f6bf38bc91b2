"""
ablate: train and evaluate every ablation row over several seeds
"""
import json
import logging

from app.services.ablation_service import COLUMNS, run_ablation
from app.services.config_service import config_from_args, resolve_output_dir
from app.storage import open_run_directory

logger = logging.getLogger(__name__)


def register(subparsers, parents):
    parser = subparsers.add_parser("ablate", parents=parents, help="Run the head ablation table")
    parser.add_argument("--rows", nargs="+", help="Subset of ablation rows (default: ablation.rows)")
    parser.add_argument("--seeds", nargs="+", type=int, help="Seeds per row (default: ablation.seeds)")
    parser.set_defaults(handler=ablate)


def ablate(args) -> int:
    overrides = list(args.overrides or [])
    if args.rows:
        overrides.append(f"ablation.rows={json.dumps(args.rows)}")
    if args.seeds:
        overrides.append(f"ablation.seeds={json.dumps(args.seeds)}")
    args.overrides = overrides
    config = config_from_args(args)
    run = open_run_directory(config, resolve_output_dir(config, args.output_dir))

    table = run_ablation(config, run)
    width = max(len(r.label) for r in table.rows)
    lines = [f"{'':{width}}  " + "  ".join(f"{c:>6}" for c in COLUMNS)]
    for r in table.rows:
        lines.append(f"{r.label:{width}}  " + "  ".join(f"{100 * getattr(r, c):6.1f}" for c in COLUMNS))
    summary = "\n".join(lines)
    logger.info(f"Ablation, median over seeds {table.seeds}:\n{summary}")
    return 0
