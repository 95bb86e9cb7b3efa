#!/usr/bin/env python3
"""
Experiment driver for karyosim.

benchmark: every stage and arm over several seeds, with median metrics and
the expected arm orderings checked.
sweep: syn_star_eas over a grid of energy-loss weights and sampling intervals.
"""

import dataclasses
import logging
import sys
from pathlib import Path
from typing import Dict, List, Sequence

import click
import numpy as np

from config import RunConfig, configure_logging, load_run_config
from database import RunDatabase
from exceptions import KarySimError
from models import Arm
from pipeline import (
    cmd_phantom_gen, cmd_perturb, cmd_restore_train, cmd_restore_run,
    cmd_detect_train, cmd_evaluate,
)
from utils import format_metric

logger = logging.getLogger(__name__)


def prepare(run: RunConfig, arms: Sequence[Arm]):
    """Run the data and restoration stages the requested arms depend on."""
    print(f"🧬 Generating phantoms in {run.workdir}")
    cmd_phantom_gen(run)
    if any(arm.pool for arm in arms):
        print("✂️  Simulating abnormal chromosomes")
        cmd_perturb(run)
    if any(arm.pool == 'syn_star' for arm in arms):
        print("🔁 Training the restoration model")
        cmd_restore_train(run)
        restoration = cmd_restore_run(run)
        if 'psnr_restored' in restoration:
            lift = restoration['psnr_restored'] - restoration['psnr_rearranged']
            print(f"   PSNR lift {lift:+.2f} dB, SSIM improved on "
                  f"{restoration['ssim_improved_fraction']:.0%} of held-out pairs")


def run_arms(run: RunConfig, arms: Sequence[Arm]) -> Dict[Arm, Dict[str, float]]:
    """Train and evaluate each arm; returns mean metrics per arm."""
    results = {}
    for arm in arms:
        print(f"🏋️  Training arm {arm.value}")
        cmd_detect_train(run, arm.value)
        report = cmd_evaluate(run, arm.value)[0]
        results[arm] = {k: v['mean'] for k, v in report.aggregate.items()}
    return results


def _median(values: List[float]) -> float:
    finite = [v for v in values if not np.isnan(v)]
    return float(np.median(finite)) if finite else float('nan')


def _check(label: str, passed: bool):
    print(f"{'✅' if passed else '⚠️ '} {label}")


@click.group()
def main():
    """karyosim experiment driver."""
    configure_logging()


@main.command()
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True))
@click.option('--seeds', default='0,1,2,3,4', help='Comma-separated seeds')
@click.option('--arms', default=None, help='Comma-separated arms (default: configured arms)')
def benchmark(config_path, seeds, arms):
    """Run every stage and arm for several seeds and compare medians."""
    seed_list = [int(s) for s in seeds.split(',')]
    per_seed: Dict[Arm, List[Dict[str, float]]] = {}
    try:
        for seed in seed_list:
            run = load_run_config(config_path, seed)
            run = dataclasses.replace(run, workdir=str(Path(run.workdir) / f"seed_{seed}"))
            selected = [Arm(a) for a in (arms.split(',') if arms else run.arms)]
            print(f"\n🎲 Seed {seed}")
            prepare(run, selected)
            for arm, metrics in run_arms(run, selected).items():
                per_seed.setdefault(arm, []).append(metrics)
    except (KarySimError, ValueError) as e:
        print(f"❌ Benchmark failed: {e}")
        sys.exit(1)

    medians = {arm: {k: _median([m[k] for m in rows]) for k in rows[0]} for arm, rows in per_seed.items()}
    print(f"\n{'arm':<14} {'sen':>8} {'spe':>8} {'f1':>8} {'auc':>8} {'auc_E':>8}")
    print("-" * 60)
    for arm, m in medians.items():
        print(f"{arm.value:<14} " + ' '.join(
            f"{format_metric(m[k]):>8}" for k in ('sen', 'spe', 'f1', 'auc', 'auc_energy')))

    print()
    if Arm.BASELINE in medians:
        _check("baseline sensitivity collapses (median Sen < 0.5)", medians[Arm.BASELINE]['sen'] < 0.5)
    if Arm.BASELINE in medians and Arm.SYN_STAR_EAS in medians:
        _check("syn_star_eas F1 >= baseline F1 + 0.10",
               medians[Arm.SYN_STAR_EAS]['f1'] >= medians[Arm.BASELINE]['f1'] + 0.10)
    if Arm.SYN in medians and Arm.SYN_STAR in medians:
        _check("syn_star F1 >= syn F1", medians[Arm.SYN_STAR]['f1'] >= medians[Arm.SYN]['f1'])
    if Arm.SYN_STAR_EAS in medians:
        _check("syn_star_eas energy AUC > 0.9", medians[Arm.SYN_STAR_EAS]['auc_energy'] > 0.9)


@main.command()
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True))
@click.option('--seed', type=int, default=None)
@click.option('--weights', default='0.01,0.1,1.0', help='Comma-separated energy loss weights')
@click.option('--intervals', default='2,5,10', help='Comma-separated sampling intervals')
def sweep(config_path, seed, weights, intervals):
    """Train syn_star_eas across energy-loss weights and sampling intervals."""
    try:
        run = load_run_config(config_path, seed)
        prepare(run, [Arm.SYN_STAR_EAS])
        rows = []
        for weight in [float(w) for w in weights.split(',')]:
            for interval in [int(k) for k in intervals.split(',')]:
                eas = dataclasses.replace(run.eas, loss_weight=weight, interval=interval)
                eas.validate()
                setting = dataclasses.replace(run, eas=eas)
                metrics = run_arms(setting, [Arm.SYN_STAR_EAS])[Arm.SYN_STAR_EAS]
                rows.append({'loss_weight': weight, 'interval': interval, 'f1': metrics['f1'],
                             'sen': metrics['sen'], 'auc_energy': metrics['auc_energy']})
                print(f"   lambda={weight:<6} k={interval:<4} F1 {format_metric(metrics['f1'])}")
    except KarySimError as e:
        print(f"❌ Sweep failed: {e}")
        sys.exit(1)
    RunDatabase(run.root).save_rows(Path(run.root) / 'sweep.csv',
                                    ['loss_weight', 'interval', 'f1', 'sen', 'auc_energy'], rows)
    print(f"✅ Sweep written to {Path(run.root) / 'sweep.csv'}")


if __name__ == "__main__":
    main()
