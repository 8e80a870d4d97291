"""
Main CLI application for the TOD/COD active learning lab.
Parses subcommands, merges config file, environment and flags, and maps outcomes to exit codes.
"""

import argparse
import logging
import sys
from pathlib import Path

import config
from errors import ConfigError, MissingInputError, RejectedInputError, TodLabError
from experiments import (
    apply_overrides,
    load_config,
    parse_grid,
    parse_value,
    run_al,
    run_compare,
    run_select_study,
    run_sweep,
    run_verify_bounds,
)
from models import RunStatus
from report import build_report


class UsageErrorParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with EXIT_USAGE instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(config.EXIT_USAGE)


def _csv_list(cast):
    def parse(text: str) -> list:
        try:
            return [cast(item.strip()) for item in text.split(",") if item.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}")
    return parse


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON experiment config (default: built-in defaults)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one config value, e.g. --set active.sampler=entropy (repeatable)")
    parser.add_argument("--noise.p", dest="noise_p", type=float, default=None,
                        help="Label-noise probability of the oracle")
    parser.add_argument("--seeds", type=_csv_list(int), default=None, help="Comma-separated seeds, e.g. 0,1,2")
    parser.add_argument("--output-dir", default=None,
                        help=f"Output directory (overrides ${config.OUTPUT_DIR_ENV} and the config file)")
    parser.add_argument("--jobs", type=int, default=None, help="Parallel worker processes")
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageErrorParser(
        description="Active learning and model selection with temporal output discrepancy",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py al run --config configs/two_moons.json
  python main.py al run --config configs/two_moons.json --noise.p 0.2 --seeds 0,1,2
  python main.py al compare --config configs/blobs.json --samplers cod,entropy
  python main.py al sweep --config configs/blobs.json --grid lambda=0,0.01,0.05,0.2 alpha=0.9,0.99,0.999
  python main.py verify bounds --trials 100 --eta 1e-2,1e-3,1e-4 --T 1,10,50
  python main.py select run --pool-size 10 --gap-epochs 1 --methods tod,train_loss,entropy
  python main.py report --input results
        """
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=UsageErrorParser)

    al = commands.add_parser("al", help="Active learning experiments")
    al_commands = al.add_subparsers(dest="action", required=True, parser_class=UsageErrorParser)
    al_run = al_commands.add_parser("run", help="Seeded multi-run experiment")
    _add_experiment_flags(al_run)
    al_compare = al_commands.add_parser("compare", help="Paired head-to-head comparison of samplers")
    _add_experiment_flags(al_compare)
    al_compare.add_argument("--samplers", type=_csv_list(str), required=True,
                            help="Comma-separated samplers; random is added as the reference")
    al_sweep = al_commands.add_parser("sweep", help="Full-factorial hyperparameter sweep")
    _add_experiment_flags(al_sweep)
    al_sweep.add_argument("--grid", nargs="+", required=True, metavar="KEY=V1,V2",
                          help="Grid axes: lambda, alpha or any dotted config path")

    verify = commands.add_parser("verify", help="Numerical verification harnesses")
    verify_commands = verify.add_subparsers(dest="action", required=True, parser_class=UsageErrorParser)
    bounds = verify_commands.add_parser("bounds", help="Output-discrepancy bounds and the ReLU Lipschitz check")
    bounds.add_argument("--trials", type=int, default=100, help="Trials per check (default: 100)")
    bounds.add_argument("--eta", type=_csv_list(float), default=list(config.DEFAULT_ETA_GRID),
                        help="Comma-separated learning rates (default: 1e-2,1e-3,1e-4)")
    bounds.add_argument("--T", dest="T", type=_csv_list(int), default=list(config.DEFAULT_T_GRID),
                        help="Comma-separated step windows (default: 1,10,50)")
    bounds.add_argument("--slack", type=float, default=config.DEFAULT_SLACK,
                        help=f"Relative slack on bound checks (default: {config.DEFAULT_SLACK})")
    bounds.add_argument("--seed", type=int, default=0, help="Harness seed (default: 0)")
    bounds.add_argument("--output-dir", default=None, help="Output directory")
    bounds.add_argument("--jobs", type=int, default=1, help="Parallel worker processes")
    bounds.add_argument("--verbose", action="store_true", help="Enable debug logging")

    select = commands.add_parser("select", help="Model selection studies")
    select_commands = select.add_subparsers(dest="action", required=True, parser_class=UsageErrorParser)
    select_run = select_commands.add_parser("run", help="Top-k hit rates and sample-level accuracy")
    _add_experiment_flags(select_run)
    select_run.add_argument("--pool-size", type=int, default=None, help="Candidates per pool")
    gap = select_run.add_mutually_exclusive_group()
    gap.add_argument("--gap-epochs", type=int, default=None, help="Baseline checkpoint gap in epochs")
    gap.add_argument("--gap-steps", type=int, default=None, help="Baseline checkpoint gap in optimizer steps")
    select_run.add_argument("--methods", type=_csv_list(str), default=None, help="Comma-separated selectors")
    select_run.add_argument("--topk", type=_csv_list(int), default=None, help="Comma-separated k values")
    select_run.add_argument("--draws", type=int, default=None, help="Pool draws per seed")

    report = commands.add_parser("report", help="Summary tables and plot data from stored records")
    report.add_argument("--input", required=True, help="Run directory with seed_<s>.jsonl files")
    report.add_argument("--output", default=None, help="Output directory (default: <input>/report)")
    report.add_argument("--verbose", action="store_true", help="Enable debug logging")
    return parser


def _flag_overrides(args: argparse.Namespace, base_pool_topk: list[int]) -> dict:
    """Dotted-path overrides from --set and the shortcut flags, in increasing precedence."""
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = parse_value(value.strip())
    if args.noise_p is not None:
        overrides["noise.p"] = args.noise_p
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.jobs is not None:
        overrides["jobs"] = args.jobs

    if getattr(args, "pool_size", None) is not None:
        overrides["selection.pool_size"] = args.pool_size
        if args.topk is None:
            overrides["selection.topk"] = [k for k in base_pool_topk if k <= args.pool_size] or [args.pool_size]
    if getattr(args, "gap_epochs", None) is not None:
        overrides["selection.gap_epochs"] = args.gap_epochs
        overrides["selection.gap_steps"] = None
    if getattr(args, "gap_steps", None) is not None:
        overrides["selection.gap_steps"] = args.gap_steps
        overrides["selection.gap_epochs"] = None
    for flag, path in (("methods", "selection.methods"), ("topk", "selection.topk"), ("draws", "selection.draws")):
        if getattr(args, flag, None) is not None:
            overrides[path] = getattr(args, flag)
    return overrides


def _exit_code(status: RunStatus) -> int:
    return config.EXIT_OK if status.status == "ok" else config.EXIT_RUNTIME


def _run_command(args: argparse.Namespace) -> int:
    if args.command == "report":
        build_report(args.input, args.output)
        print(f"✓ Report saved to: {Path(args.output) if args.output else Path(args.input) / 'report'}")
        return config.EXIT_OK

    if args.command == "verify":
        if args.trials < 1 or args.jobs < 1:
            raise ConfigError("--trials and --jobs must be positive")
        output_dir = config.resolve_output_dir(None, args.output_dir)
        status, problems = run_verify_bounds(args.trials, args.eta, args.T, args.slack, args.seed,
                                             output_dir, args.jobs)
        if status.status != "ok":
            return config.EXIT_RUNTIME
        if problems:
            print(f"⚠ Acceptance failed: {len(problems)} checks out of bounds")
            return config.EXIT_ACCEPTANCE
        print(f"✓ All checks within bounds. Results saved to: {output_dir}")
        return config.EXIT_OK

    base = load_config(args.config)
    overrides = _flag_overrides(args, base.selection.topk)
    cfg = apply_overrides(base, overrides)
    flag_dir = args.output_dir or (cfg.output_dir if "output_dir" in overrides else None)
    output_dir = config.resolve_output_dir(base.output_dir, flag_dir)
    logging.info(f"Command {args.command} {args.action}: output to {output_dir}")

    if args.command == "select":
        status = run_select_study(cfg, output_dir)
    elif args.action == "run":
        status = run_al(cfg, output_dir)
    elif args.action == "compare":
        status = run_compare(cfg, args.samplers, output_dir)
    else:
        status = run_sweep(cfg, parse_grid(args.grid), output_dir)

    if status.status == "ok":
        print(f"✓ Results saved to: {output_dir}")
    else:
        print(f"⚠ Run {status.status}: {len(status.failures)} job(s) failed, see {output_dir / 'run_status.json'}")
    return _exit_code(status)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    command = "_".join(part for part in (args.command, getattr(args, "action", None)) if part)
    log_file = config.setup_logging(command, args.verbose)
    print(f"Log file: {log_file}")

    try:
        return _run_command(args)
    except (ConfigError, MissingInputError, RejectedInputError) as e:
        print(f"Error: {e}", file=sys.stderr)
        logging.error(str(e))
        return config.EXIT_USAGE
    except TodLabError as e:
        print(f"Error: {e}", file=sys.stderr)
        logging.error(str(e))
        return config.EXIT_RUNTIME
    except Exception:
        logging.exception("Unexpected failure")
        return config.EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
