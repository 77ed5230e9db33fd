import argparse
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import ConfigError

logger = logging.getLogger(__name__)

COMMANDS = ("constants", "bounds", "couple", "value", "transport", "verify")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
DEFAULT_TOL = 1e-10


@dataclass
class ExperimentPlan:
    scenario: Path
    command: str
    out: Path
    overrides: Dict[str, Any] = field(default_factory=dict)
    tol: float = DEFAULT_TOL
    log_level: str = "INFO"
    threads: Optional[int] = None
    debug: bool = False

    @property
    def seed(self) -> Optional[int]:
        return self.overrides.get("seed")


def _env_int(name: str) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        logger.warning("Invalid %s value %r; falling back to the scenario default.", name, raw)
        return None


def _env_level() -> str:
    raw = (os.getenv("COUPLING_LAB_LOG_LEVEL") or "INFO").strip().upper()
    if raw not in LOG_LEVELS:
        logger.warning("Invalid COUPLING_LAB_LOG_LEVEL value %r; falling back to INFO.", raw)
        return "INFO"
    return raw


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--scenario",
        default=os.getenv("COUPLING_LAB_SCENARIO"),
        help="Scenario TOML file (default: $COUPLING_LAB_SCENARIO).",
    )
    parser.add_argument(
        "--out",
        default=os.getenv("COUPLING_LAB_OUT", "out"),
        help="Output directory for CSV and JSON artifacts. Default: out or $COUPLING_LAB_OUT.",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=_env_int("COUPLING_LAB_SEED"),
        help="Base seed overriding [sim] seed (default: $COUPLING_LAB_SEED or the scenario value).",
    )
    parser.add_argument("--dt", type=float, default=None, help="Time step overriding [sim] dt.")
    parser.add_argument("--n-paths", dest="n_paths", type=int, default=None, help="Path count overriding [sim] n_paths.")
    parser.add_argument(
        "--tol",
        type=float,
        default=DEFAULT_TOL,
        help=f"Quadrature tolerance for the profile tables, in (0, 1e-2] (default {DEFAULT_TOL:g}).",
    )
    parser.add_argument(
        "--log-level",
        type=str.upper,
        choices=LOG_LEVELS,
        default=_env_level(),
        help="Logging level (default: $COUPLING_LAB_LOG_LEVEL or INFO).",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Worker cap for block-parallel simulation (default: $COUPLING_LAB_THREADS or min(4, cpus)).",
    )
    parser.add_argument(
        "--debug",
        action="store_true",
        help="Enable per-step internal assertions (reflection isometry).",
    )


def build_plan(args: argparse.Namespace) -> ExperimentPlan:
    if args.command not in COMMANDS:
        raise ConfigError(f"command must be one of {list(COMMANDS)}, got {args.command!r}")
    if not args.scenario:
        raise ConfigError("--scenario is required (or set COUPLING_LAB_SCENARIO).")

    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed must be non-negative, got {args.seed}")
        overrides["seed"] = args.seed
    if args.dt is not None:
        if not args.dt > 0:
            raise ConfigError(f"--dt must be positive, got {args.dt}")
        overrides["dt"] = args.dt
    if args.n_paths is not None:
        if args.n_paths < 2:
            raise ConfigError(f"--n-paths must be at least 2, got {args.n_paths}")
        overrides["n_paths"] = args.n_paths

    tol = args.tol
    if not 0.0 < tol <= 1e-2:
        raise ConfigError(f"--tol must lie in (0, 1e-2], got {tol}")

    threads = args.threads
    if threads is not None and threads < 1:
        raise ConfigError(f"--threads must be at least 1, got {threads}")

    return ExperimentPlan(
        scenario=Path(args.scenario),
        command=args.command,
        out=Path(args.out),
        overrides=overrides,
        tol=tol,
        log_level=args.log_level,
        threads=threads,
        debug=bool(args.debug),
    )
