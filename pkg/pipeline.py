"""
End-to-end stages over on-disk artifacts.

Each cmd_* function takes a validated RunConfig, reads the artifacts of the
earlier stages from the work directory and writes its own. Every random
draw comes from a seed derived from (run seed, stage, class, index), so a
stage re-run with the same config rewrites byte-identical files.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import List, Dict, Any, Tuple, Optional, Sequence

import numpy as np
import torch

from config import RunConfig, get_config
from database import (
    DatasetDatabase, PoolDatabase, RunDatabase, save_checkpoint, load_checkpoint,
)
from detector import (
    train_detector, rebalance, predict_batch, detector_from_architecture, detector_energies,
)
from diffusion import (
    schedule_new, TrainingPair, TrainingConfig, train_denoiser, restore_batch,
    denoiser_from_architecture, smoothed,
)
from exceptions import KarySimError, MissingArtifact, ConfigInvalid
from imaging import binarize, largest_component, thin, extract_axis, fit_to_canvas
from metrics import (
    confusion_from_labels, classification_metrics, auc, roc_points, psnr, ssim,
    kid_features, mmd_kid, aggregate, UNDEFINED,
)
from models import (
    Arm, Label, Split, GrayImage, PerturbationKind, PerturbRecord, ScoredSample, ExperimentReport, Sample,
)
from perturb import simulate_abnormal, mac_score, filter_by_mac, rearrange
from phantom import build_dataset, register_default_classes
from plots import histogram_svg, roc_svg, loss_svg
from utils import derive_seed, sha256_file

logger = logging.getLogger(__name__)

PERTURB_STREAM = 101
PAIR_STREAM = 102
RESTORE_TRAIN_STREAM = 103
RESTORE_RUN_STREAM = 104
DETECT_STREAM = 105
DONORS_PER_CLASS = 25
RESTORE_CHUNK = 32

METRIC_KEYS = ['acc', 'sen', 'spe', 'pre_ab', 'pre_n', 'f1', 'auc', 'auc_energy']
LOG_FIELDS = ['epoch', 'ce_loss', 'energy_loss', 'tau', 'selected_count', 'mean_E_normal', 'mean_E_abnormal']
PREDICTION_FIELDS = ['run_id', 'arm', 'class', 'id', 'label', 'predicted', 'p_abnormal', 'energy']


def configure_torch():
    """Single-threaded, deterministic torch execution."""
    torch.set_num_threads(max(1, get_config().TORCH_THREADS))
    torch.use_deterministic_algorithms(True)


def run_id(run: RunConfig) -> str:
    return f"seed{run.seed}"


# ============================================================================
# PHANTOM DATASET
# ============================================================================

def cmd_phantom_gen(run: RunConfig) -> Dict[str, Any]:
    """Generate the phantom dataset and its manifest."""
    register_default_classes(max(run.classes) + 1, run.phantom.template_samples,
                             run.phantom.length_range, run.phantom.width_range)
    dataset = DatasetDatabase(run.root)
    manifest = build_dataset(run.classes, run.split, run.phantom, run.seed, dataset.save_image, dataset.save_mask)
    dataset.save_manifest(manifest)

    ratios = {}
    for class_id in run.classes:
        normals = len(manifest.select(class_id, Label.NORMAL, Split.TRAIN))
        abnormals = len(manifest.select(class_id, Label.ABNORMAL, Split.TRAIN))
        ratios[class_id] = normals / abnormals
    return {
        'samples': len(manifest.samples),
        'counts': manifest.counts(),
        'imbalance_ratio': ratios,
        'manifest_sha256': sha256_file(dataset.manifest_file),
    }


# ============================================================================
# PERTURBATION (SYN POOL)
# ============================================================================

def _straight_sources(run: RunConfig, dataset: DatasetDatabase,
                      samples: Sequence[Sample]) -> List[Tuple[Sample, GrayImage, float]]:
    """Normals whose MAC score clears the threshold; unusable skeletons are skipped."""
    p = run.perturb
    candidates = []
    for sample in samples:
        image = dataset.load_image(sample)
        try:
            mask = largest_component(binarize(image, p.binarize_threshold))
            axis = extract_axis(thin(mask), p.merge_distance, p.min_branch_length)
        except KarySimError as e:
            logger.warning(f"Skipping {sample.id}: {e}")
            continue
        candidates.append(((sample, image), axis))
    kept = filter_by_mac(candidates, p.mac_threshold, p.mac_samples, p.mac_normalization)
    return [(item[0], item[1], mac_score(axis, p.mac_samples, p.mac_normalization)) for item, axis in kept]


def cmd_perturb(run: RunConfig) -> Dict[str, Any]:
    """
    Build the SYN pool: MAC-filtered train normals, one structural edit each.

    Operator kinds are assigned round-robin per class; a failed simulation
    moves on to the next source with the same kind.
    """
    p = run.perturb
    dataset = DatasetDatabase(run.root)
    manifest = dataset.get_manifest()
    register_default_classes(max(run.classes) + 1, run.phantom.template_samples,
                             run.phantom.length_range, run.phantom.width_range)

    sources = {}
    for class_id in run.classes:
        sources[class_id] = _straight_sources(run, dataset, manifest.select(class_id, Label.NORMAL, Split.TRAIN))
        logger.info(f"Class {class_id}: {len(sources[class_id])} straight chromosomes above MAC {p.mac_threshold}")
    donors = [
        (sample.id, image, class_id)
        for class_id in run.classes
        for sample, image, _ in sources[class_id][:DONORS_PER_CLASS]
    ]

    entries, produced = [], {}
    for class_id in run.classes:
        kinds = list(PerturbationKind)
        if not any(d[2] != class_id for d in donors):
            logger.warning(f"Class {class_id}: no donor class available, translocation skipped")
            kinds.remove(PerturbationKind.TRANSLOCATION)
        rng = np.random.default_rng(derive_seed(run.seed, class_id, PERTURB_STREAM))
        order = rng.permutation(len(sources[class_id]))
        count = 0
        for position in order:
            if count == p.per_class:
                break
            sample, image, _ = sources[class_id][int(position)]
            kind = kinds[count % len(kinds)]
            op_seed = derive_seed(run.seed, class_id, PERTURB_STREAM, count, int(position))
            try:
                perturbed, record = simulate_abnormal(
                    image, class_id, kind, op_seed,
                    interval_fractions=tuple(p.interval_fractions),
                    donors=donors,
                    source_id=sample.id,
                    threshold=p.binarize_threshold,
                    merge_distance=p.merge_distance,
                    min_branch_length=p.min_branch_length,
                    mac_samples=p.mac_samples,
                    mac_normalization=p.mac_normalization,
                )
            except KarySimError as e:
                logger.warning(f"Skipping {sample.id} for {kind.value}: {e}")
                continue
            canvas_image = fit_to_canvas(perturbed, tuple(run.phantom.canvas))
            entries.append((f"syn_c{class_id}_{count:05d}", class_id, record, canvas_image))
            count += 1
        if count < p.per_class:
            logger.warning(f"Class {class_id}: only {count} of {p.per_class} synthetic abnormals generated")
        produced[class_id] = count

    PoolDatabase(run.root, 'syn').save_pool(entries)
    histogram = {}
    for _, _, record, _ in entries:
        histogram[record.op['kind']] = histogram.get(record.op['kind'], 0) + 1
    return {'produced': produced, 'kinds': histogram}


# ============================================================================
# RESTORATION
# ============================================================================

def build_pairs(run: RunConfig, dataset: DatasetDatabase) -> Tuple[List[TrainingPair], List[TrainingPair], List[Dict]]:
    """
    Pairs of straight normal chromosomes and their rearranged counterparts.

    Pairs never carry a perturbation; sources are split into a training set
    and a held-out set used for the restoration report.
    """
    p = run.perturb
    manifest = dataset.get_manifest()
    pool = []
    for class_id in run.classes:
        pool.extend(_straight_sources(run, dataset, manifest.select(class_id, Label.NORMAL, Split.TRAIN)))
    rng = np.random.default_rng(derive_seed(run.seed, PAIR_STREAM))
    needed = run.restore.train_pairs + run.restore.holdout_pairs
    train, holdout, descriptors = [], [], []
    for position in rng.permutation(len(pool)):
        if len(descriptors) == needed:
            break
        sample, image, _ = pool[int(position)]
        pair_seed = derive_seed(run.seed, PAIR_STREAM, int(position))
        try:
            stacked, interval = rearrange(image, pair_seed, tuple(p.interval_fractions), p.binarize_threshold,
                                          p.merge_distance, p.min_branch_length)
        except KarySimError as e:
            logger.warning(f"Skipping pair source {sample.id}: {e}")
            continue
        pair = TrainingPair(image, fit_to_canvas(stacked, image.shape))
        role = 'train' if len(train) < run.restore.train_pairs else 'holdout'
        (train if role == 'train' else holdout).append(pair)
        descriptors.append({'id': sample.id, 'seed': pair_seed, 'interval': interval, 'role': role})
    if not train:
        raise MissingArtifact("no straight normal chromosomes available for restoration pairs")
    if len(descriptors) < needed:
        logger.warning(f"Only {len(descriptors)} of {needed} restoration pairs available")
    return train, holdout, descriptors


def _schedule(run: RunConfig):
    s = run.schedule
    return schedule_new(s.steps, s.sigma_max, s.lam)


def cmd_restore_train(run: RunConfig) -> Dict[str, Any]:
    """Train the denoiser on rearranged/original pairs."""
    configure_torch()
    dataset = DatasetDatabase(run.root)
    store = RunDatabase(run.root)
    train, holdout, descriptors = build_pairs(run, dataset)
    r = run.restore
    training = TrainingConfig(
        iterations=r.iterations, batch_size=r.batch_size, learning_rate=r.learning_rate, norm=r.norm,
        optimizer=r.optimizer, betas=tuple(r.betas), clip_norm=r.clip_norm, decay_at=r.decay_at,
    )
    denoiser = train_denoiser(train, _schedule(run), training, seed=derive_seed(run.seed, RESTORE_TRAIN_STREAM),
                              widths=r.widths)

    directory = store.restore_dir()
    save_checkpoint(directory / 'denoiser.ckpt', 'denoiser', denoiser.architecture, denoiser.module)
    store.save_document(directory / 'pairs.json', {'pairs': descriptors})
    rows = [{'iteration': i, 'loss': loss} for i, loss in denoiser.loss_trace]
    store.save_rows(directory / 'loss.csv', ['iteration', 'loss'], rows)
    losses = [loss for _, loss in denoiser.loss_trace]
    store.save_text(directory / 'loss.svg', loss_svg(denoiser.loss_trace, 'Denoiser training loss', smoothed(losses)))
    return {
        'pairs': len(train),
        'holdout': len(holdout),
        'final_loss': float(np.mean(losses[-min(50, len(losses)):])),
        'finite': bool(np.all(np.isfinite(losses))),
    }


def load_denoiser(store: RunDatabase):
    header, vector = load_checkpoint(store.restore_dir() / 'denoiser.ckpt')
    denoiser = denoiser_from_architecture(header['architecture'])
    denoiser.load_parameters(vector)
    denoiser.module.eval()
    return denoiser


def _restore_all(images: Sequence[GrayImage], denoiser, schedule, rng, stochastic) -> List[GrayImage]:
    restored = []
    for start in range(0, len(images), RESTORE_CHUNK):
        restored.extend(restore_batch(images[start:start + RESTORE_CHUNK], denoiser, schedule, rng, stochastic))
    return restored


def cmd_restore_run(run: RunConfig) -> Dict[str, Any]:
    """Map the SYN pool to SYN* and report restoration fidelity on held-out pairs."""
    configure_torch()
    store = RunDatabase(run.root)
    dataset = DatasetDatabase(run.root)
    denoiser = load_denoiser(store)
    schedule = _schedule(run)
    if denoiser.architecture['steps'] != schedule.steps or denoiser.architecture['lam'] != schedule.lam:
        raise ConfigInvalid("schedule differs from the one the denoiser was trained with")

    syn = PoolDatabase(run.root, 'syn')
    entries, images = syn.load_images()
    rng = np.random.default_rng(derive_seed(run.seed, RESTORE_RUN_STREAM))
    restored = _restore_all([GrayImage(p) for p in images], denoiser, schedule, rng, run.restore.stochastic)

    syn_star = PoolDatabase(run.root, 'syn_star')
    syn_star.save_pool([
        (e['id'], e['class'], PerturbRecord.from_dict(e['record']), image)
        for e, image in zip(entries, restored)
    ])

    # held-out fidelity: rearranged vs restored, both against the original
    manifest = dataset.get_manifest()
    by_id = {s.id: s for s in manifest.samples}
    p = run.perturb
    rows = []
    holdout = [d for d in store.get_document(store.restore_dir() / 'pairs.json')['pairs'] if d['role'] == 'holdout']
    originals, rearranged = [], []
    for d in holdout:
        original = dataset.load_image(by_id[d['id']])
        stacked, _ = rearrange(original, d['seed'], tuple(p.interval_fractions), p.binarize_threshold,
                               p.merge_distance, p.min_branch_length)
        originals.append(original)
        rearranged.append(fit_to_canvas(stacked, original.shape))
    recovered = _restore_all(rearranged, denoiser, schedule, rng, run.restore.stochastic)
    for d, x, s, x_hat in zip(holdout, originals, rearranged, recovered):
        rows.append({
            'id': d['id'],
            'psnr_rearranged': psnr(s, x),
            'psnr_restored': psnr(x_hat, x),
            'ssim_rearranged': ssim(s, x),
            'ssim_restored': ssim(x_hat, x),
        })
    fields = ['id', 'psnr_rearranged', 'psnr_restored', 'ssim_rearranged', 'ssim_restored']
    summary = {'holdout': len(rows)}
    if rows:
        means = {k: float(np.mean([r[k] for r in rows])) for k in fields[1:]}
        rows.append({'id': 'mean', **means})
        summary.update(means)
        summary['ssim_improved_fraction'] = float(np.mean([r['ssim_restored'] > r['ssim_rearranged']
                                                           for r in rows[:-1]]))
    store.save_rows(store.restore_dir() / 'restoration.csv', fields, rows)

    test_abnormal = dataset.load_stack(manifest.select(None, Label.ABNORMAL, Split.TEST))
    if len(images) >= 2 and len(test_abnormal) >= 2:
        real = kid_features([GrayImage(x) for x in test_abnormal])
        summary['kid_syn'] = mmd_kid(kid_features([GrayImage(x) for x in images]), real)
        summary['kid_syn_star'] = mmd_kid(kid_features(restored), real)
    store.save_document(store.restore_dir() / 'summary.json', summary)
    summary['restored'] = len(restored)
    return summary


# ============================================================================
# DETECTOR TRAINING
# ============================================================================

def train_class(run: RunConfig, arm: Arm, class_id: int) -> Dict[str, Any]:
    """Train and persist the detector of one class for one arm."""
    configure_torch()
    dataset = DatasetDatabase(run.root)
    store = RunDatabase(run.root)
    _, normal = dataset.load_split(class_id, Label.NORMAL, Split.TRAIN)
    _, abnormal = dataset.load_split(class_id, Label.ABNORMAL, Split.TRAIN)
    pool = None
    if arm.pool:
        _, pool = PoolDatabase(run.root, arm.pool).load_images(class_id)
        if len(pool) == 0:
            logger.warning(f"Pool '{arm.pool}' has no entries for class {class_id}")
    seed = derive_seed(run.seed, class_id, DETECT_STREAM)
    if arm in (Arm.OVERSAMPLE, Arm.UNDERSAMPLE):
        normal, abnormal = rebalance(normal, abnormal, arm.value, np.random.default_rng(seed))

    detector, log, snapshots = train_detector(
        normal, abnormal, run.eas, seed, pool=pool if pool is not None and len(pool) else None,
        adaptive=arm.uses_eas, widths=run.detector.widths,
    )
    directory = store.detector_dir(arm.value, class_id)
    save_checkpoint(directory / 'detector.ckpt', 'detector', detector.architecture, detector.module)
    store.save_rows(directory / 'log.csv', LOG_FIELDS, log)
    store.save_document(directory / 'snapshots.json', {'snapshots': snapshots})
    return {'class': class_id, 'epochs': len(log), 'selected': log[-1]['selected_count'], 'tau': log[-1]['tau']}


def cmd_detect_train(run: RunConfig, arm: str, class_id: Optional[int] = None) -> List[Dict[str, Any]]:
    """Train per-class detectors for one arm, in parallel when workers > 1."""
    try:
        arm = Arm(arm)
    except ValueError:
        raise ConfigInvalid(f"unknown arm '{arm}'")
    classes = _classes(run, class_id)
    if arm.pool and not PoolDatabase(run.root, arm.pool).exists():
        raise MissingArtifact(f"arm '{arm.value}' needs the '{arm.pool}' pool; run the earlier stages first")
    if run.workers > 1 and len(classes) > 1:
        with ProcessPoolExecutor(max_workers=run.workers) as executor:
            results = list(executor.map(train_class, [run] * len(classes), [arm] * len(classes), classes))
    else:
        results = [train_class(run, arm, c) for c in classes]
    return results


def _classes(run: RunConfig, class_id: Optional[int]) -> List[int]:
    if class_id is None:
        return list(run.classes)
    if class_id not in run.classes:
        raise ConfigInvalid(f"class {class_id} is not configured (classes: {run.classes})")
    return [class_id]


# ============================================================================
# EVALUATION
# ============================================================================

def load_detector(store: RunDatabase, arm: str, class_id: int):
    header, vector = load_checkpoint(store.detector_dir(arm, class_id) / 'detector.ckpt')
    detector = detector_from_architecture(header['architecture'])
    detector.load_parameters(vector)
    return detector


def _auc_or_undefined(scores, labels) -> float:
    if len(set(labels)) < 2:
        return UNDEFINED
    return auc([ScoredSample(float(s), int(y)) for s, y in zip(scores, labels)])


def evaluate_arm(run: RunConfig, arm: Arm, classes: Sequence[int]) -> ExperimentReport:
    """Per-class test metrics, prediction rows and figures for one trained arm."""
    dataset = DatasetDatabase(run.root)
    store = RunDatabase(run.root)
    manifest = dataset.get_manifest()
    temperature = run.eas.temperature
    rows, predictions, energy_groups = [], [], {}
    report_dir = store.report_dir(arm.value)

    for class_id in classes:
        detector = load_detector(store, arm.value, class_id)
        samples = manifest.select(class_id, None, Split.TEST)
        labels_true = [int(s.label) for s in samples]
        predicted, probability, energies = predict_batch(detector, dataset.load_stack(samples), temperature)
        for sample, y, y_hat, p_ab, e in zip(samples, labels_true, predicted, probability, energies):
            predictions.append({
                'run_id': run_id(run), 'arm': arm.value, 'class': class_id, 'id': sample.id,
                'label': y, 'predicted': int(y_hat), 'p_abnormal': float(p_ab), 'energy': float(e),
            })
        metrics = classification_metrics(confusion_from_labels(labels_true, predicted))
        metrics['auc'] = _auc_or_undefined(probability, labels_true)
        metrics['auc_energy'] = _auc_or_undefined(energies, labels_true)
        rows.append({'run_id': run_id(run), 'class': class_id, 'arm': arm.value, **metrics})

        labels_array = np.array(labels_true)
        groups = {
            'normal': energies[labels_array == 0].tolist(),
            'abnormal (real)': energies[labels_array == 1].tolist(),
        }
        if arm.pool:
            _, pool = PoolDatabase(run.root, arm.pool).load_images(class_id)
            groups['synthetic'] = detector_energies(detector, pool, temperature).tolist()
        energy_groups[class_id] = groups
        store.save_text(report_dir / f'energy_class_{class_id}.svg',
                        histogram_svg(groups, f'Energy scores, class {class_id}, {arm.value}'))
        if len(set(labels_true)) == 2:
            points = roc_points([ScoredSample(float(p), y) for p, y in zip(probability, labels_true)])
            store.save_text(report_dir / f'roc_class_{class_id}.svg',
                            roc_svg(points, f'ROC class {class_id}, {arm.value} (AUC {metrics["auc"]:.3f})'))

        snapshots_file = store.detector_dir(arm.value, class_id) / 'snapshots.json'
        if snapshots_file.exists():
            for snapshot in store.get_document(snapshots_file)['snapshots']:
                store.save_text(
                    report_dir / f"energy_class_{class_id}_epoch_{snapshot['epoch']}.svg",
                    histogram_svg({'normal': snapshot['normal'], 'abnormal (real)': snapshot['abnormal'],
                                   'synthetic': snapshot['pool']},
                                  f"Energy at epoch {snapshot['epoch']}, class {class_id} (tau {snapshot['tau']:.2f})"),
                )

    summary = aggregate(rows, METRIC_KEYS)
    table = rows + [
        {'run_id': run_id(run), 'class': statistic, 'arm': arm.value,
         **{k: summary[k][statistic] for k in METRIC_KEYS}}
        for statistic in ('mean', 'std')
    ]
    store.save_rows(report_dir / 'metrics.csv', ['run_id', 'class', 'arm'] + METRIC_KEYS, table)
    store.save_rows(report_dir / 'predictions.csv', PREDICTION_FIELDS, predictions)
    logger.info(f"Evaluated {arm.value}: mean F1 {summary['f1']['mean']:.4f}, mean Sen {summary['sen']['mean']:.4f}")
    return ExperimentReport(run_id(run), arm, rows, summary, energy_groups)


def cmd_evaluate(run: RunConfig, arm: Optional[str] = None, class_id: Optional[int] = None) -> List[ExperimentReport]:
    """Evaluate one arm, or every configured arm that has trained detectors."""
    classes = _classes(run, class_id)
    store = RunDatabase(run.root)
    if arm is not None:
        try:
            arms = [Arm(arm)]
        except ValueError:
            raise ConfigInvalid(f"unknown arm '{arm}'")
    else:
        arms = [Arm(a) for a in run.arms if (store.detector_dir(a, classes[0]) / 'detector.ckpt').exists()]
        if not arms:
            raise MissingArtifact("no trained detectors found; run detect-train first")
    return [evaluate_arm(run, a, classes) for a in arms]
