#!/usr/bin/env python3
"""
Geodesic X-ray Experiment Runner

This script runs or describes a config-driven experiment. Every run gets
its own timestamped directory with CSV outputs, a log and a manifest.
"""
import argparse
import logging
import os
import sys
import time

from geodesic_engine.errors import ConfigError
from geodesic_engine.experiments import ExperimentRunner, describe
from ui.display import display_error, display_plan, display_summary
from utils.experiment_config import load_config
from utils.helpers import WarningCollector, build_manifest, create_run_directory, write_manifest

EXIT_SUCCESS = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'

logger = logging.getLogger(__name__)


def configure_logging(run_dir: str = None) -> WarningCollector:
    handlers = [logging.StreamHandler()]
    if run_dir is not None:
        handlers.append(logging.FileHandler(os.path.join(run_dir, 'run.log')))
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, handlers=handlers, force=True)
    collector = WarningCollector()
    logging.getLogger().addHandler(collector)
    return collector


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Geodesic X-ray transform experiments')
    subparsers = parser.add_subparsers(dest='command', required=True)

    run = subparsers.add_parser('run', help='Run the experiment a config selects')
    run.add_argument('config', type=str, help='Path to the experiment config file')
    run.add_argument('--runs-dir', type=str, default=None,
                     help='Root directory for run outputs (default: $GXR_RUNS_DIR or ./runs)')

    plan = subparsers.add_parser('describe', help='Validate a config and print the resolved plan')
    plan.add_argument('config', type=str, help='Path to the experiment config file')
    return parser


def command_describe(args) -> int:
    configure_logging()
    try:
        config = load_config(args.config)
        plan = describe(config)
    except ConfigError as e:
        logger.error(f"Invalid config: {e}")
        display_error(str(e))
        return EXIT_USAGE
    display_plan(plan.rows(), args.config)
    return EXIT_SUCCESS


def command_run(args) -> int:
    started = time.time()
    try:
        config = load_config(args.config)
    except ConfigError as e:
        run_dir = create_run_directory('invalid', args.runs_dir)
        collector = configure_logging(run_dir)
        logger.error(f"Invalid config: {e}")
        write_manifest(build_manifest({}, run_dir, [], started, 'invalid',
                                      collector.messages, error=str(e)), run_dir)
        display_error(str(e))
        return EXIT_USAGE

    run_dir = create_run_directory(config.selector, args.runs_dir)
    collector = configure_logging(run_dir)
    runner = None
    try:
        runner = ExperimentRunner(config, run_dir)
        result = runner.run()
    except ConfigError as e:
        logger.error(f"Invalid config: {e}")
        outputs = runner.outputs if runner else []
        write_manifest(build_manifest(config.as_dict(), run_dir, outputs, started, 'invalid',
                                      collector.messages, error=str(e)), run_dir)
        display_error(str(e))
        return EXIT_USAGE
    except KeyboardInterrupt:
        logger.info("Process interrupted by user")
        outputs = runner.outputs if runner else []
        write_manifest(build_manifest(config.as_dict(), run_dir, outputs, started, 'interrupted',
                                      collector.messages), run_dir)
        return EXIT_NUMERICAL
    except Exception as e:
        logger.error(f"Error: {str(e)}")
        outputs = runner.outputs if runner else []
        write_manifest(build_manifest(config.as_dict(), run_dir, outputs, started, 'error',
                                      collector.messages, error=str(e)), run_dir)
        display_error(str(e))
        return EXIT_NUMERICAL

    warnings = collector.messages + result.notes
    status = 'ok' if result.passed else 'failed'
    write_manifest(build_manifest(config.as_dict(), run_dir, result.outputs, started, status, warnings,
                                  result.summary), run_dir)
    display_summary(result.selector, result.passed, result.summary, run_dir, warnings)
    return EXIT_SUCCESS if result.passed else EXIT_NUMERICAL


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_SUCCESS
    if args.command == 'describe':
        return command_describe(args)
    return command_run(args)


if __name__ == "__main__":
    sys.exit(main())
