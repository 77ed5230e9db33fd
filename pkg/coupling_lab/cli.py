import argparse
import logging
import sys

from .config import COMMANDS, add_common_arguments, build_plan
from .errors import LabError
from .pipeline import run
from .streams import set_worker_cap

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Reflection-coupling contraction, Feynman-Kac value fields and Langevin transport maps."
    )
    parser.add_argument("command", choices=COMMANDS, help="Experiment to run.")
    add_common_arguments(parser)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        plan = build_plan(args)
        set_worker_cap(plan.threads)
        run(plan)
    except LabError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    finally:
        set_worker_cap(None)
    return 0


if __name__ == "__main__":
    sys.exit(main())
