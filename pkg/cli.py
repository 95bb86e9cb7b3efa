"""
Command-line interface for karyosim.
"""

import json
import logging
import sys
from typing import Callable, Any

import click

from config import Config, configure_logging, load_run_config
from exceptions import ValidationError
from models import Arm
from pipeline import (
    cmd_phantom_gen, cmd_perturb, cmd_restore_train, cmd_restore_run,
    cmd_detect_train, cmd_evaluate,
)
from utils import format_metric, get_application_info

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

config_option = click.option('--config', 'config_path', required=True, type=click.Path(),
                             help='Run configuration (JSON)')
seed_option = click.option('--seed', type=int, default=None, help='Override the configured seed')
class_option = click.option('--class', 'class_id', type=int, default=None, help='Restrict to one class')


def run_stage(name: str, config_path: str, seed: int, stage: Callable, **kwargs) -> Any:
    """
    Load the run configuration and execute one stage, mapping errors to exit codes.

    Validation errors exit with 1, every other failure with 2.
    """
    try:
        run = load_run_config(config_path, seed)
        return stage(run, **kwargs)
    except ValidationError as e:
        logger.error(f"{name} rejected its input: {e}")
        click.echo(f"❌ {e}", err=True)
        sys.exit(EXIT_VALIDATION)
    except Exception as e:
        logger.exception(f"{name} failed")
        click.echo(f"❌ {name} failed: {e}", err=True)
        sys.exit(EXIT_RUNTIME)


@click.group()
@click.version_option(version=Config.APP_VERSION)
@click.option('--log-level', default=None, help='Override KARYOSIM_LOG_LEVEL')
def cli(log_level):
    """Perturb-and-restore chromosome simulation and abnormality detection."""
    configure_logging(log_level.upper() if log_level else None)


# ============================================================================
# DATA STAGES
# ============================================================================

@cli.command('phantom-gen')
@config_option
@seed_option
def phantom_gen(config_path, seed):
    """Generate the phantom dataset."""
    result = run_stage('phantom-gen', config_path, seed, cmd_phantom_gen)
    click.echo(f"✅ Wrote {result['samples']} samples (manifest {result['manifest_sha256'][:12]})")
    for key, count in sorted(result['counts'].items()):
        click.echo(f"   {key:<16} {count}")


@cli.command()
@config_option
@seed_option
def perturb(config_path, seed):
    """Simulate structurally abnormal chromosomes (SYN pool)."""
    result = run_stage('perturb', config_path, seed, cmd_perturb)
    click.echo(f"✅ SYN pool written: {sum(result['produced'].values())} samples")
    for kind, count in sorted(result['kinds'].items()):
        click.echo(f"   {kind:<14} {count}")


# ============================================================================
# RESTORATION STAGES
# ============================================================================

@cli.command('restore-train')
@config_option
@seed_option
def restore_train(config_path, seed):
    """Train the restoration denoiser."""
    result = run_stage('restore-train', config_path, seed, cmd_restore_train)
    click.echo(f"✅ Denoiser trained on {result['pairs']} pairs, final loss {format_metric(result['final_loss'])}")


@cli.command('restore-run')
@config_option
@seed_option
def restore_run(config_path, seed):
    """Restore the SYN pool into SYN*."""
    result = run_stage('restore-run', config_path, seed, cmd_restore_run)
    click.echo(f"✅ Restored {result['restored']} samples into SYN*")
    for key in ('psnr_rearranged', 'psnr_restored', 'ssim_rearranged', 'ssim_restored', 'kid_syn', 'kid_syn_star'):
        if key in result:
            click.echo(f"   {key:<18} {format_metric(result[key])}")


# ============================================================================
# DETECTION STAGES
# ============================================================================

@cli.command('detect-train')
@config_option
@seed_option
@click.option('--arm', required=True, help='Training arm: ' + ', '.join(a.value for a in Arm))
@class_option
def detect_train(config_path, seed, arm, class_id):
    """Train per-class detectors for one arm."""
    results = run_stage('detect-train', config_path, seed, cmd_detect_train, arm=arm, class_id=class_id)
    click.echo(f"✅ Trained {len(results)} detector(s) for arm {arm}")
    for r in results:
        click.echo(f"   class {r['class']}: selected {r['selected']}, tau {format_metric(r['tau'])}")


@cli.command()
@config_option
@seed_option
@click.option('--arm', default=None, help='Arm to evaluate (default: every trained arm)')
@class_option
def evaluate(config_path, seed, arm, class_id):
    """Evaluate trained detectors on the test split."""
    reports = run_stage('evaluate', config_path, seed, cmd_evaluate, arm=arm, class_id=class_id)
    for report in reports:
        click.echo(f"\n{report.arm.value}")
        click.echo(f"{'class':<8} {'acc':>8} {'sen':>8} {'spe':>8} {'f1':>8} {'auc':>8}")
        click.echo("-" * 52)
        for row in report.rows:
            click.echo(f"{row['class']:<8} " + ' '.join(
                f"{format_metric(row[k]):>8}" for k in ('acc', 'sen', 'spe', 'f1', 'auc')))
        click.echo(f"{'mean':<8} " + ' '.join(
            f"{format_metric(report.aggregate[k]['mean']):>8}" for k in ('acc', 'sen', 'spe', 'f1', 'auc')))
    click.echo("\n✅ Evaluation complete")


@cli.command()
def info():
    """Show application information."""
    for key, value in get_application_info().items():
        click.echo(f"{key}: {value}")


@cli.command('show-config')
@config_option
@seed_option
def show_config(config_path, seed):
    """Validate a run configuration and print it with defaults filled in."""
    run = run_stage('show-config', config_path, seed, lambda r: r)
    click.echo(json.dumps(run.to_dict(), indent=2, sort_keys=True))


def main():
    cli()


if __name__ == '__main__':
    main()
