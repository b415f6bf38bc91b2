"""
gradcheck: finite-difference verification of every differentiable op
"""
import logging

from app.services.config_service import config_from_args, resolve_output_dir
from app.services.gradcheck_service import get_gradcheck_service
from app.storage import open_run_directory, write_csv

logger = logging.getLogger(__name__)


def register(subparsers, parents):
    parser = subparsers.add_parser("gradcheck", parents=parents, help="Check autodiff gradients against finite differences")
    parser.add_argument("--configurations", type=int, default=100, help="Random configurations per op")
    parser.add_argument("--model-configurations", type=int, default=100, help="Random configurations for the full model")
    parser.add_argument("--tol", type=float, default=1e-4, help="Max relative error")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--only", nargs="+", help="Restrict to these op names")
    parser.add_argument("--no-model", action="store_true", help="Skip the full-model composite")
    parser.set_defaults(handler=gradcheck)


def gradcheck(args) -> int:
    config = config_from_args(args)
    run = open_run_directory(config, resolve_output_dir(config, args.output_dir))
    service = get_gradcheck_service(
        configurations=args.configurations,
        model_configurations=args.model_configurations,
        tol=args.tol,
        seed=args.seed,
    )
    report = service.run(include_model=not args.no_model, only=args.only)

    run.write_json("gradcheck_report.json", report)
    write_csv(
        run.file("gradcheck_report.csv"),
        (op.model_dump() for op in report.ops),
        ["op", "configurations", "max_rel_error", "worst_configuration", "excluded_points", "passed"],
    )
    if not report.passed:
        logger.error(f"❌ Gradient check failed for: {', '.join(report.failures)}")
        return 1
    logger.info(f"✅ All {len(report.ops)} gradient checks passed in {report.seconds:.1f}s")
    return 0
