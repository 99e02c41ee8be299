"""Command-line entry point: ``dame synth | run | report``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
Log verbosity comes from the ``DAME_LOG_LEVEL`` environment variable
(default ``WARNING``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from . import harness
from .data_model import DatasetError
from .federation import STRATEGIES, ConfigError, RoundError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4
LOG_ENV = "DAME_LOG_LEVEL"

log = logging.getLogger("dame")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dame", description="Federated social event detection simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic client datasets")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed-override", type=int, help="replace the generator seed")

    r = sub.add_parser("run", help="run all strategies for every repetition seed")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed-override", type=int, help="run this single seed only")
    r.add_argument("--strategy-override", choices=STRATEGIES,
                   help="run this strategy (plus the local baseline)")

    rep = sub.add_parser("report", help="write curves and comparison tables")
    rep.add_argument("--out", required=True)
    return p


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _dispatch(args) -> None:
    if args.command == "synth":
        cfg = harness.load_config(args.config)
        if args.seed_override is not None:
            cfg.synth.seed = args.seed_override
        path = harness.cmd_synth(cfg, args.out)
        print(f"wrote {cfg.synth.n_clients} client files and {path}")
    elif args.command == "run":
        cfg = harness.load_config(args.config, seed_override=args.seed_override,
                                  strategy_override=args.strategy_override)
        path = harness.cmd_run(cfg, args.out, progress=True)
        print(f"wrote {path}")
    else:
        for path in harness.cmd_report(args.out):
            print(f"wrote {path}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        _dispatch(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DatasetError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except RoundError as exc:
        log.error("runtime error: %s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.error("runtime error: %s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
