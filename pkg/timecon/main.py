import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from timecon.errors import TimeconError, UnknownExperimentError
from timecon.experiments import registry
from timecon.models import ExperimentConfig, ExperimentReport, Verdict
from timecon.settings import get_settings

logger = logging.getLogger("timecon")

EXIT_OK, EXIT_FAILED, EXIT_ERROR = 0, 1, 2

VERDICT_STYLES = {Verdict.PASS: "green", Verdict.FAIL: "bold red", Verdict.FLAGGED: "yellow"}


def configure_logging(verbose: bool = False) -> None:
    root = logging.getLogger()
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        root.addHandler(RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=True))
    root.setLevel(logging.DEBUG if verbose else get_settings().log_level)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timecon", description="Time-inconsistent BSDE experiments on scenario trees")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiment described by a KEY=value config file")
    run.add_argument("config", help="path to the config file")
    run.add_argument("-o", "--output", help="override the output root directory")

    sub.add_parser("list", help="list registered experiments")

    validate = sub.add_parser("validate", help="validate a config file without running it")
    validate.add_argument("config", help="path to the config file")
    return parser


def format_validation_error(error: ValidationError) -> List[str]:
    lines = []
    for item in error.errors():
        loc = ".".join(str(part) for part in item["loc"]) or "config"
        lines.append(f"{loc.upper()}: {item['msg']}")
    return lines


def render_report(report: ExperimentReport, console: Console) -> None:
    table = Table(title=f"{report.experiment}: {report.anchor}")
    table.add_column("check")
    table.add_column("verdict")
    table.add_column("measured", justify="right")
    table.add_column("tolerance", justify="right")
    table.add_column("detail")
    for check in report.checks:
        table.add_row(
            check.name,
            f"[{VERDICT_STYLES[check.verdict]}]{check.verdict.value}[/]",
            "" if check.measured is None else f"{check.measured:.6g}",
            "" if check.tolerance is None else f"{check.tolerance:.3g}",
            check.detail,
        )
    console.print(table)
    console.print(f"artifacts: {', '.join(report.artifacts)}")
    console.print(f"wall clock: {report.wall_clock:.2f}s")


def cmd_list(console: Console) -> int:
    for exp in registry.listing():
        line = f"{exp.name.value} → {exp.anchor}"
        console.print(f"{line}  ({exp.summary})" if exp.summary else line, highlight=False, soft_wrap=True)
    return EXIT_OK


def cmd_validate(path: str, console: Console) -> int:
    config = ExperimentConfig.from_file(path)
    registry.get(config.experiment)
    console.print(f"{path}: ok ({config.experiment.value}, hash {config.config_hash()})", highlight=False)
    return EXIT_OK


def cmd_run(path: str, output: Optional[str], console: Console) -> int:
    config = ExperimentConfig.from_file(path)
    report = registry.run(config, output)
    render_report(report, console)
    if not report.passed:
        console.print(f"[bold red]{len(report.failures())} check(s) failed[/]")
        return EXIT_FAILED
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    console = Console()
    err = Console(stderr=True)
    try:
        if args.command == "list":
            return cmd_list(console)
        if args.command == "validate":
            return cmd_validate(args.config, console)
        return cmd_run(args.config, args.output, console)
    except ValidationError as e:
        err.print(f"invalid config {args.config}:", highlight=False)
        for line in format_validation_error(e):
            err.print(f"  {line}", highlight=False)
        return EXIT_ERROR
    except UnknownExperimentError as e:
        err.print(str(e), highlight=False)
        return EXIT_ERROR
    except TimeconError as e:
        err.print(f"error: {e}", highlight=False)
        return EXIT_ERROR
    except OSError as e:
        err.print(f"I/O error: {e}", highlight=False)
        return EXIT_ERROR


def cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli()
