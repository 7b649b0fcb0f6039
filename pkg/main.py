# main.py
"""Main script to coordinate data generation, two-stage training, evaluation and ablations"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from config import Config, DEFAULT_CONFIG, merge_overrides
from core_model import DataError, DatasetSplit, NumericError, UsageError
from dataset_io import DatasetStore, ROLES
from detector import GridDetector, ParameterVector
from ema_schedules import ModelState
from evaluator import evaluate_detailed, write_eval_report
from experiments import ExperimentPlan, ExperimentRunner, configure_variant
from synthetic_data import SyntheticVideoGenerator
from trainer import Trainer
import utils

import logging
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class WeakVideoDetectionSystem:
    """Main system coordinating all components"""

    def __init__(self, config: Config):
        self.config = config
        utils.setup_logging(config.log_level, config.log_file)
        self.store = DatasetStore(config.experiment.data_dir)
        self.output_dir = Path(config.experiment.output_dir)
        self.detector = GridDetector(config.detector)

    def generate(self, force: bool = False) -> str:
        """Write the synthetic splits and return the manifest hash"""
        generator = SyntheticVideoGenerator(self.config.generator)
        split = generator.generate_splits()
        self.store.write_split(split, force=force)
        digest = self.store.manifest_hash()
        logger.info(f"Dataset written to {self.store.root} (manifest sha256 {digest[:12]})")
        return digest

    def load_split(self) -> DatasetSplit:
        if not self.store.exists():
            raise DataError(f"No dataset in {self.store.root}; run 'generate' first")
        return self.store.read_split()

    def train(self, plan: ExperimentPlan) -> Dict:
        runner = ExperimentRunner(self.config, self.load_split(), self.output_dir)
        return runner.run_plan(plan)

    def burn_in(self, plan: ExperimentPlan) -> Dict:
        """Burn-in stage only, under the plan's variant switches"""
        config = Config.from_dict(merge_overrides(self.config.to_dict(), {'training': {'epochs_mutual': 0}}))
        runner = ExperimentRunner(config, self.load_split(), self.output_dir)
        return runner.run_plan(plan, config)

    def mutual_learn(self, plan: ExperimentPlan, init_checkpoint: Path) -> List[Dict]:
        """Mutual learning from a saved teacher checkpoint, once per seed"""
        split = self.load_split()
        if plan.label_fraction < 1.0:
            split = split.with_label_fraction(plan.label_fraction, self.config.generator.seed)
        params = ParameterVector.load(init_checkpoint, self.detector.parameter_count)
        results = []
        for seed in plan.seeds:
            config = configure_variant(self.config, plan.flags)
            config = Config.from_dict(merge_overrides(config.to_dict(), {'training': {'seed': seed}}))
            run_dir = self.output_dir / f"{plan.run_name}_mutual" / f"seed_{seed}"
            trainer = Trainer(config, self.detector, run_dir)
            state = trainer.run_mutual_learning(split, ModelState.initial(params))
            state.theta_epoch.save(run_dir / 'checkpoints' / 'final.theta_T')
            result = {
                'seed': seed,
                'val_map': trainer.evaluate(state.theta_epoch, split.validation),
                'test_map': trainer.evaluate(state.theta_epoch, split.test),
            }
            utils.save_results(result, run_dir / 'result.json')
            results.append(result)
        return results

    def evaluate(self, checkpoint: Path, role: str, output_dir: Optional[Path] = None) -> float:
        split = self.load_split()
        videos = dict(split.roles())[role]
        params = ParameterVector.load(checkpoint, self.detector.parameter_count)
        ev = self.config.evaluation
        result = evaluate_detailed(self.detector, params, videos, ev.conf_floor,
                                   self.config.detector.nms_iou, ev.iou_threshold)
        write_eval_report(result, output_dir or checkpoint.parent.parent,
                          {'checkpoint': str(checkpoint), 'split': role})
        return result.mean_ap

    def ablate(self, seeds: Sequence[int], table: bool = False) -> pd.DataFrame:
        runner = ExperimentRunner(self.config, self.load_split(), self.output_dir)
        ablation = runner.run_ablation(seeds, table=table)
        utils.plot_fraction_curve(ablation, self.output_dir / 'fraction_vs_map.png')
        return ablation

    def plot(self, run_dirs: Sequence[Path], ablation_csv: Optional[Path] = None):
        curves = utils.load_curves(run_dirs)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        utils.plot_learning_curves(curves, self.output_dir / 'learning_curves.png')
        if ablation_csv is not None:
            utils.plot_fraction_curve(pd.read_csv(ablation_csv), self.output_dir / 'fraction_vs_map.png')

    def display_results(self, summary: Dict):
        """Print the per-seed and aggregated mAP of a plan"""
        print("\n" + "=" * 60)
        print(f"RESULTS: {summary['variant']} (video-label fraction {summary['label_fraction']:g})")
        print("=" * 60)
        for run in summary['runs']:
            print(f"seed {run['seed']:3d}  val mAP {run['val_map']:.4f}  test mAP {run['test_map']:.4f}")
        print(f"\nValidation mAP: {utils.format_map(summary['val_map'])}")
        print(f"Test mAP:       {utils.format_map(summary['test_map'])}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Weakly semi-supervised video object detection")
    parser.add_argument('--config', type=str, help='Path to config file (YAML or JSON)')
    parser.add_argument('--data-dir', type=str, help='Dataset root')
    parser.add_argument('--output-dir', type=str, help='Run output root')
    parser.add_argument('--log-level', type=str, help='Logging level')

    hyper = parser.add_argument_group('hyperparameters')
    hyper.add_argument('--beta', type=float, help='pseudo-label confidence threshold')
    hyper.add_argument('--beta-l', type=float, help='lower threshold of the positive-video fallback')
    hyper.add_argument('--alpha-i', type=float, help='iteration-level EMA keep rate')
    hyper.add_argument('--alpha-e', type=float, help='fixed epoch-level EMA keep rate')
    hyper.add_argument('--alpha-e-min', type=float)
    hyper.add_argument('--alpha-e-max', type=float)
    hyper.add_argument('--alpha-inv-min', type=float)
    hyper.add_argument('--tau0', type=float)
    hyper.add_argument('--tau1', type=float)
    hyper.add_argument('--tau2', type=float)
    hyper.add_argument('--lambda-v-weak', type=float, help='weight of the video-level weak loss')
    hyper.add_argument('--n-fpv', type=int, help='frames sampled per weak video')
    hyper.add_argument('--epochs-burn-in', type=int)
    hyper.add_argument('--epochs-mutual', type=int)
    hyper.add_argument('--batch-size', type=int)
    hyper.add_argument('--lr', type=float)

    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('generate', help='Write the synthetic dataset')
    gen.add_argument('--force', action='store_true', help='Overwrite an existing dataset')
    gen.add_argument('--seed', type=int, help='Generator seed')

    for name, help_text in (('burn-in', 'Burn-in stage only'),
                            ('mutual-learn', 'Mutual learning from a checkpoint'),
                            ('train', 'Burn-in followed by mutual learning')):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument('--variant', type=str, help='Training variant')
        cmd.add_argument('--seeds', type=int, nargs='+', help='Seeds to run')
        cmd.add_argument('--repeats', type=int, help='Run seeds 0..repeats-1')
        cmd.add_argument('--fraction', type=float, help='Share of weak videos keeping their label')
        if name == 'mutual-learn':
            cmd.add_argument('--init', type=str, required=True, help='Teacher checkpoint to start from')

    ev = sub.add_parser('evaluate', help='Evaluate a checkpoint')
    ev.add_argument('--checkpoint', type=str, required=True)
    ev.add_argument('--split', type=str, default='test', choices=[r for r in ROLES if r != 'weakly_labeled'])
    ev.add_argument('--out', type=str, help='Directory for eval.json and pr_curve.csv')

    ab = sub.add_parser('ablate', help='Threshold, EMA-rate and video-label fraction grids')
    ab.add_argument('--seeds', type=int, nargs='+')
    ab.add_argument('--repeats', type=int)
    ab.add_argument('--table', action='store_true', help='Also run every variant with paired t-tests')

    pl = sub.add_parser('plot', help='Learning curves and fraction plot')
    pl.add_argument('run_dirs', nargs='+', help='Run directories holding curves.csv')
    pl.add_argument('--ablation', type=str, help='ablation.csv for the fraction plot')
    return parser


def resolve_config(args: argparse.Namespace) -> Config:
    """CLI flags > config file > defaults"""
    config_dict = utils.load_config(args.config) if args.config else DEFAULT_CONFIG.to_dict()
    get = lambda name: getattr(args, name, None)
    overrides = {
        'pseudo': {'beta': get('beta'), 'beta_l': get('beta_l')},
        'tsmr': {'alpha_i': get('alpha_i'), 'alpha_e_fixed': get('alpha_e'), 'alpha_e_min': get('alpha_e_min'),
                 'alpha_e_max': get('alpha_e_max'), 'alpha_inv_min': get('alpha_inv_min'),
                 'tau0': get('tau0'), 'tau1': get('tau1'), 'tau2': get('tau2')},
        'weights': {'lambda_v_weak': get('lambda_v_weak')},
        'training': {'frames_per_video': get('n_fpv'), 'epochs_burn_in': get('epochs_burn_in'),
                     'epochs_mutual': get('epochs_mutual'), 'batch_size': get('batch_size'),
                     'learning_rate': get('lr')},
        'generator': {'seed': get('seed')},
        'experiment': {'data_dir': get('data_dir'), 'output_dir': get('output_dir'),
                       'variant': get('variant'), 'repeats': get('repeats'),
                       'label_fraction': get('fraction')},
    }
    merged = merge_overrides(config_dict, overrides)
    if get('log_level'):
        merged['log_level'] = get('log_level')
    try:
        return Config.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise UsageError(f"Invalid configuration: {e}") from e


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    system = WeakVideoDetectionSystem(config)
    seeds = getattr(args, 'seeds', None) or config.experiment.resolved_seeds()

    if args.command == 'generate':
        system.generate(force=args.force)
    elif args.command in ('burn-in', 'train'):
        plan = ExperimentPlan(config.experiment.variant, tuple(seeds), config.experiment.label_fraction)
        summary = system.burn_in(plan) if args.command == 'burn-in' else system.train(plan)
        system.display_results(summary)
    elif args.command == 'mutual-learn':
        plan = ExperimentPlan(config.experiment.variant, tuple(seeds), config.experiment.label_fraction)
        for result in system.mutual_learn(plan, Path(args.init)):
            print(f"seed {result['seed']:3d}  val mAP {result['val_map']:.4f}  test mAP {result['test_map']:.4f}")
    elif args.command == 'evaluate':
        out = Path(args.out) if args.out else None
        mean_ap = system.evaluate(Path(args.checkpoint), args.split, out)
        print(f"{args.split} mAP@0.5: {mean_ap:.4f}")
    elif args.command == 'ablate':
        ablation = system.ablate(seeds, table=args.table)
        print(ablation.drop(columns=['test_values']).to_string(index=False))
    elif args.command == 'plot':
        system.plot([Path(d) for d in args.run_dirs], Path(args.ablation) if args.ablation else None)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        return run(args)
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        logger.error(f"Numeric failure: {e} (last good checkpoint: {e.checkpoint})")
        return EXIT_NUMERIC
    except Exception as e:
        logger.error(f"Run failed: {e}", exc_info=True)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
