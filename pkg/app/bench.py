"""Command-line entry point of the identification benchmark.

    python app/bench.py run --preset desk --seed 42 --out results/desk
    python app/bench.py summarize --in results/desk
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from report import ReportError, emit_report, read_records, write_summary
from services import BenchmarkService, summarize_records
from settings import environment_defaults, load_config

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = 'results'


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='bench',
        description='Monte Carlo comparison of PEM, Empirical Bayes and Full Bayes identification.',
    )
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='Run a Monte Carlo study')
    run.add_argument('--config', type=Path, help='key = value configuration file')
    run.add_argument('--preset', help='Named preset from config/presets.json (desk, paper; full is an alias of paper)')
    run.add_argument('--out', type=Path, help='Output directory (default: $BENCH_OUT_DIR or ./results)')
    run.add_argument('--seed', type=int, help='Master seed')
    run.add_argument('--estimators', help='Comma-separated subset of eb,fb,pem-bic,pem-or')
    run.add_argument('--jobs', type=int, help='Worker processes (default: $BENCH_JOBS or 1)')
    run.add_argument('--runs', type=int, help='Number of Monte Carlo runs')
    run.add_argument('--dump-chains', action='store_true', help='Write every MCMC chain to <out>/chains')
    run.add_argument('-v', '--verbose', action='store_true', dest='run_verbose', help='Debug logging')

    summarize = commands.add_parser('summarize', help='Rebuild the summary files from records.csv')
    summarize.add_argument('--in', dest='in_dir', type=Path, required=True, help='Directory of a finished study')
    return parser


def run_command(args: argparse.Namespace) -> int:
    env = environment_defaults()
    overrides = {
        'master_seed': args.seed,
        'estimators': args.estimators,
        'jobs': args.jobs if args.jobs is not None else env['jobs'],
        'runs': args.runs,
        'dump_chains': True if args.dump_chains else None,
    }
    config = load_config(config_path=args.config, preset=args.preset, overrides=overrides)
    out_dir = args.out or Path(env['out_dir'] or DEFAULT_OUT_DIR)

    service = BenchmarkService(config)
    result = service.run_benchmark(chain_dir=out_dir / 'chains')
    summary = service.summarize(result.records)
    emit_report(result.records, summary, out_dir, config=config, envelopes=result.envelopes)
    print(f"Wrote {len(result.records)} records to {out_dir}")
    return 0


def summarize_command(args: argparse.Namespace) -> int:
    records = read_records(args.in_dir)
    write_summary(records, args.in_dir, summarize_records(records))
    print(f"Summarized {len(records)} records in {args.in_dir}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the command and map fatal errors to exit code 1."""
    args = build_parser().parse_args(argv)
    verbose = args.verbose or getattr(args, 'run_verbose', False)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    try:
        if args.command == 'run':
            return run_command(args)
        return summarize_command(args)
    except (ValueError, FileNotFoundError, ReportError) as e:
        logger.error(f"[Bench] {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
