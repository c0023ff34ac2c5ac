#!/usr/bin/env python3
"""
CoopDet Management Tool

Command-line entry point of the cooperative-perception simulator:
generate datasets, train the attention matrix, compare communication
policies, inspect one frame's handshake and run the query/key ablation.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config.constants import EXIT_CODES, PATHS
from config.experiment import ExperimentConfig
from config.settings import Config
from services.experiment import ExperimentService
from utils.common import format_kb
from utils.errors import CoopDetError, ValidationError
from utils.logging import get_logger, set_log_level
from utils.validators import require, validate_policy_names


class CoopDetArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the configuration-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CODES['USAGE_ERROR'], f"{self.prog}: error: {message}\n")


def _policy_names(values: Optional[Sequence[str]]) -> Optional[List[str]]:
    if not values:
        return None
    names = [name for value in values for name in value.replace(",", " ").split()]
    return [policy.value for policy in require("--policies", validate_policy_names(names))]


class CoopDetManager:
    """Maps subcommands onto ExperimentService calls."""

    def __init__(self):
        self.config = Config()
        self.logger = get_logger('coopdet')

    def load_experiment(self, config_arg: Optional[str], dataset: Optional[str] = None) -> ExperimentConfig:
        """--config wins; otherwise the experiment file stored with the dataset, else defaults."""
        if config_arg:
            return ExperimentConfig.resolve(config_arg)
        if dataset:
            stored = Path(dataset) / PATHS['EXPERIMENT_FILE']
            if stored.is_file():
                return ExperimentConfig.load(stored)
        return ExperimentConfig()

    # ========== Commands ==========

    def generate(self, args) -> None:
        experiment = self.load_experiment(args.config)
        if args.frames is not None:
            experiment.scenario.frames = args.frames
        out = args.out or experiment.output.directory
        with ExperimentService(experiment, logger=self.logger) as service:
            manifest = service.generate(out, seed=args.seed, frames=args.frames)
        sizes = ', '.join(f"{name} {len(ids)}" for name, ids in manifest.splits.items())
        print(f"✅ {manifest.frame_count} {manifest.scenario} frames written to {out} ({sizes})")

    def train_attention(self, args) -> None:
        experiment = self.load_experiment(args.config, args.dataset)
        if args.seed is not None:
            experiment.attention.seed = args.seed
        with ExperimentService(experiment, logger=self.logger) as service:
            outcome = service.train_attention(args.dataset)
        losses = outcome.result.losses
        print(f"Trained on {outcome.train_frames} frames for {len(losses)} epochs")
        if losses:
            print(f"  Final loss:              {losses[-1]:.6f}")
        print(f"  Val selection accuracy:  {outcome.val_accuracy:.2%}")

    def compare(self, args) -> None:
        experiment = self.load_experiment(args.config, args.dataset)
        if args.seed is not None:
            experiment.compare.random_seed = args.seed
        names = _policy_names(args.policies)
        out = args.out or experiment.output.directory
        with ExperimentService(experiment, logger=self.logger) as service:
            report = service.compare(args.dataset, names, out)
        print(report.format_table())
        print(f"\nReports written to {out}")

    def inspect(self, args) -> None:
        experiment = self.load_experiment(args.config, args.dataset)
        names = _policy_names(args.policies)
        out = args.out or experiment.output.directory
        with ExperimentService(experiment, logger=self.logger) as service:
            results = service.inspect(args.dataset, args.frame, names, out)

        print("=" * 72)
        print(f"FRAME {args.frame}")
        print("=" * 72)
        for result in results:
            print(f"\n{result.policy}: selected {result.selected}, "
                  f"{format_kb(result.ledger.total_bytes)} KB counted, "
                  f"{result.ledger.gross_bytes} bytes gross, latency {result.latency:.6f}s")
            for kind, count in result.ledger.bytes_by_kind().items():
                if count:
                    print(f"  {kind.name:16} {count} bytes")
            for phase, seconds in result.latency_trace:
                print(f"  phase {phase:16} {seconds:.6f}s")
            print(f"  {len(result.messages)} messages traced")

    def ablate(self, args) -> None:
        experiment = self.load_experiment(args.config, args.dataset)
        out = args.out or experiment.output.directory
        with ExperimentService(experiment, logger=self.logger) as service:
            table = service.ablate(args.dataset, out)
        print(table.to_string(index=False))

    def config_show(self, args) -> None:
        experiment = self.load_experiment(args.config)
        with ExperimentService(experiment, logger=self.logger, config=self.config) as service:
            status = service.get_status()
        print(experiment.to_text())
        print(f"# digest {status['config_digest']}")
        print(f"# workers {status['workers']}")


def build_parser() -> argparse.ArgumentParser:
    common = CoopDetArgumentParser(add_help=False)
    common.add_argument('--config', help='Experiment file or preset name (roundabout, t_junction, occlusion_heavy)')
    common.add_argument('--seed', type=int, help='Master seed override')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--debug', action='store_true', help='Enable debug logging')

    parser = CoopDetArgumentParser(
        description='CoopDet cooperative perception simulator',
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    subparsers = parser.add_subparsers(dest='command', help='Commands')

    generate_parser = subparsers.add_parser('generate', parents=[common], help='Generate a dataset')
    generate_parser.add_argument('--frames', type=int, help='Number of frames')

    train_parser = subparsers.add_parser('train-attention', parents=[common],
                                         help='Train the attention matrix on a dataset')
    train_parser.add_argument('dataset', help='Dataset directory')

    compare_parser = subparsers.add_parser('compare', parents=[common], help='Compare communication policies')
    compare_parser.add_argument('dataset', help='Dataset directory')
    compare_parser.add_argument('--policies', nargs='+', help='Policy names')

    inspect_parser = subparsers.add_parser('inspect', parents=[common],
                                           help="Dump one frame's messages and ledger")
    inspect_parser.add_argument('dataset', help='Dataset directory')
    inspect_parser.add_argument('--frame', type=int, default=0, help='Frame id')
    inspect_parser.add_argument('--policies', nargs='+', help='Policy names')

    ablate_parser = subparsers.add_parser('ablate', parents=[common], help='Query/key size ablation')
    ablate_parser.add_argument('dataset', help='Dataset directory')

    subparsers.add_parser('config', parents=[common], help='Show the effective configuration')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_CODES['USAGE_ERROR']

    if args.debug:
        Config.update('LOG_LEVEL', 'DEBUG')
        set_log_level('DEBUG')

    manager = CoopDetManager()
    commands = {
        'generate': manager.generate,
        'train-attention': manager.train_attention,
        'compare': manager.compare,
        'inspect': manager.inspect,
        'ablate': manager.ablate,
        'config': manager.config_show,
    }

    try:
        commands[args.command](args)
    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        return EXIT_CODES['USAGE_ERROR']
    except ValidationError as e:
        manager.logger.error(f"Configuration error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CODES['USAGE_ERROR']
    except CoopDetError as e:
        manager.logger.error(f"Data error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CODES['DATA_ERROR']
    return EXIT_CODES['SUCCESS']


if __name__ == "__main__":
    sys.exit(main())
