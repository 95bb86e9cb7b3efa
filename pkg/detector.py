"""
Energy-based abnormality classifier and energy-guided adaptive sampling.

A detector is trained per chromosome class on normal and real abnormal
images. Synthetic abnormals enter training either all at once (static
augmentation) or through adaptive selection: at every sampling event the
threshold tau is re-estimated on real data and pool members whose energy
exceeds it join the training set for good.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Dict, Any, Sequence, Tuple, Optional, Set, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from config import EasConfig
from exceptions import NoAbnormalSamples, InvalidParameter, ShapeMismatch, NonFiniteLoss
from models import GrayImage, Label
from utils import sampling_epochs

logger = logging.getLogger(__name__)

PREDICT_CHUNK = 256


# ============================================================================
# CLASSIFIER
# ============================================================================

class EnergyClassifier(nn.Module):
    """Two conv blocks, global average pooling and a linear head with two logits."""

    def __init__(self, widths: Sequence[int] = (8, 16)):
        super().__init__()
        w0, w1 = widths
        self.features = nn.Sequential(
            nn.Conv2d(1, w0, 3, padding=1), nn.SiLU(), nn.AvgPool2d(2),
            nn.Conv2d(w0, w1, 3, padding=1), nn.SiLU(), nn.AvgPool2d(2),
        )
        self.head = nn.Linear(w1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x[:, None])
        return self.head(h.mean(dim=(2, 3)))


@dataclass
class EnergyDetector:
    """Classifier f_psi with its architecture descriptor."""
    architecture: Dict[str, Any]
    module: EnergyClassifier

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.architecture['shape'])

    @property
    def parameters(self) -> np.ndarray:
        return parameters_to_vector(self.module.parameters()).detach().cpu().numpy().copy()

    def load_parameters(self, vector: np.ndarray):
        vector_to_parameters(torch.as_tensor(np.asarray(vector, dtype=np.float64)), self.module.parameters())

    def logits(self, images: np.ndarray) -> np.ndarray:
        """Logits (B, 2) for a stack of images (B, H, W)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.shape[1:] != self.shape:
            raise ShapeMismatch(f"images {images.shape[1:]} do not match detector {self.shape}")
        self.module.eval()
        chunks = []
        with torch.no_grad():
            for start in range(0, len(images), PREDICT_CHUNK):
                chunks.append(self.module(torch.from_numpy(images[start:start + PREDICT_CHUNK])).numpy())
        return np.concatenate(chunks) if chunks else np.zeros((0, 2))


def build_detector(shape: Tuple[int, int], widths: Sequence[int] = (8, 16), seed: int = 0) -> EnergyDetector:
    architecture = {'kind': 'energy_classifier', 'shape': list(shape), 'widths': list(widths)}
    return detector_from_architecture(architecture, seed)


def detector_from_architecture(architecture: Dict[str, Any], seed: int = 0) -> EnergyDetector:
    torch.manual_seed(seed)
    module = EnergyClassifier(architecture['widths']).double()
    return EnergyDetector(dict(architecture), module)


# ============================================================================
# ENERGY OBJECTIVES
# ============================================================================

def _tensor(values) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values, dtype=np.float64)) if not torch.is_tensor(values) else values


def _unwrap(result: torch.Tensor, keep_tensor: bool):
    if keep_tensor:
        return result
    result = result.detach().numpy()
    return float(result) if result.ndim == 0 else result


def energy(logits, temperature: float = 1.0):
    """
    E(x) = -t log(exp(f0/t) + exp(f1/t)), via log-sum-exp.

    Accepts a tensor (returned as a tensor) or any array-like whose last
    axis holds the two logits.
    """
    if temperature <= 0:
        raise InvalidParameter(f"temperature must be > 0, got {temperature}")
    values = _tensor(logits)
    return _unwrap(-temperature * torch.logsumexp(values / temperature, dim=-1), torch.is_tensor(logits))


def energy_loss(energies, labels, margin_normal: float, margin_abnormal: float):
    """Squared hinge: normals pushed below m_n, abnormals above m_ab; an absent class contributes 0."""
    e = _tensor(energies)
    y = torch.as_tensor(np.asarray(labels)) if not torch.is_tensor(labels) else labels
    loss = torch.zeros((), dtype=torch.float64)
    normal = e[y == int(Label.NORMAL)]
    abnormal = e[y == int(Label.ABNORMAL)]
    if normal.numel():
        loss = loss + torch.clamp(normal - margin_normal, min=0).pow(2).mean()
    if abnormal.numel():
        loss = loss + torch.clamp(margin_abnormal - abnormal, min=0).pow(2).mean()
    return _unwrap(loss, torch.is_tensor(energies))


def total_loss(logits, labels, energies=None, config: EasConfig = None):
    """Cross-entropy plus loss_weight times the energy margin loss."""
    config = config or EasConfig()
    keep = torch.is_tensor(logits)
    f = _tensor(logits)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64) if not torch.is_tensor(labels) else labels.long()
    if energies is None:
        energies = energy(f, config.temperature)
    e = _tensor(energies)
    ce = F.cross_entropy(f, y)
    loss = ce + config.loss_weight * energy_loss(e, y, config.margin_normal, config.margin_abnormal)
    return _unwrap(loss, keep)


def estimate_threshold(energies: Sequence[float], labels: Sequence[int], recall_level: float) -> float:
    """
    Threshold whose abnormal recall (fraction with E > t) best matches recall_level.

    Candidates are the sorted unique energies plus one value just below the
    minimum, so full recall is always reachable. Ties go to the smallest t.
    With recall_level 1.0 the result is therefore nextafter(min energy, -inf)
    rather than the smallest energy itself, which E > t would exclude.

    Raises:
        NoAbnormalSamples: no abnormal energy given
    """
    e = np.asarray(energies, dtype=np.float64)
    y = np.asarray(labels)
    abnormal = e[y == int(Label.ABNORMAL)]
    if abnormal.size == 0:
        raise NoAbnormalSamples("threshold estimation needs at least one abnormal sample")
    candidates = np.concatenate([[np.nextafter(e.min(), -np.inf)], np.unique(e)])
    recall = (abnormal[None, :] > candidates[:, None]).mean(axis=1)
    return float(candidates[int(np.argmin(np.abs(recall - recall_level)))])


def select_synthetic(pool_energies: Sequence[float], tau: float) -> np.ndarray:
    """Indices of pool members with E > tau."""
    return np.flatnonzero(np.asarray(pool_energies, dtype=np.float64) > tau)


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class TrainingState:
    """Mutable state of one training run."""
    rng: np.random.Generator
    epoch: int = 0
    tau: float = math.inf
    selected: Set[int] = field(default_factory=set)
    previous_parameters: Optional[np.ndarray] = None

    def grow(self, indices: Sequence[int]) -> int:
        """Union new selections into the set; returns how many were new."""
        before = len(self.selected)
        self.selected |= {int(i) for i in indices}
        return len(self.selected) - before


def blend_parameters(previous: np.ndarray, current: np.ndarray, momentum: float) -> np.ndarray:
    """psi <- m psi_prev + (1 - m) psi_new; m = 1 and m = 0 return exact copies."""
    if momentum == 1.0:
        return previous.copy()
    if momentum == 0.0:
        return current.copy()
    return momentum * previous + (1.0 - momentum) * current


def detector_energies(detector: EnergyDetector, images: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if len(images) == 0:
        return np.zeros(0)
    return energy(detector.logits(images), temperature)


def rebalance(normal: np.ndarray, abnormal: np.ndarray, mode: str,
              rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Classical re-sampling baselines.

    'oversample' draws abnormals with replacement up to the normal count;
    'undersample' keeps a random subset of normals the size of the abnormal set.
    """
    if mode == 'oversample':
        extra = rng.integers(0, len(abnormal), size=max(0, len(normal) - len(abnormal)))
        return normal, np.concatenate([abnormal, abnormal[extra]])
    if mode == 'undersample':
        keep = np.sort(rng.choice(len(normal), size=min(len(normal), len(abnormal)), replace=False))
        return normal[keep], abnormal
    raise InvalidParameter(f"unknown rebalancing mode '{mode}'")


def _epoch_record(epoch, ce, en, tau, selected, e_normal, e_abnormal) -> Dict[str, float]:
    return {
        'epoch': epoch,
        'ce_loss': float(np.mean(ce)) if ce else float('nan'),
        'energy_loss': float(np.mean(en)) if en else float('nan'),
        'tau': tau,
        'selected_count': selected,
        'mean_E_normal': float(np.mean(e_normal)) if e_normal else float('nan'),
        'mean_E_abnormal': float(np.mean(e_abnormal)) if e_abnormal else float('nan'),
    }


def train_detector(normal: np.ndarray, abnormal: np.ndarray, config: EasConfig, seed: int = 0,
                   pool: Optional[np.ndarray] = None, adaptive: bool = False,
                   widths: Sequence[int] = (8, 16),
                   detector: EnergyDetector = None) -> Tuple[EnergyDetector, List[Dict], List[Dict]]:
    """
    Train one per-class detector.

    Args:
        normal: (N, H, W) normal training images
        abnormal: (M, H, W) real abnormal training images
        config: energy objective and schedule settings
        seed: seeds weight init and every random draw
        pool: synthetic abnormal images, or None
        adaptive: select from the pool by energy at sampling events; when
            False the whole pool is used from the first epoch
        widths: classifier channel widths
        detector: continue from an existing detector

    Returns:
        (detector, per-epoch log, energy snapshots taken at sampling events)
    """
    normal = np.asarray(normal, dtype=np.float64)
    abnormal = np.asarray(abnormal, dtype=np.float64)
    pool = np.zeros((0,) + normal.shape[1:]) if pool is None else np.asarray(pool, dtype=np.float64)
    if len(normal) == 0:
        raise InvalidParameter("detector training needs normal samples")
    if len(abnormal) == 0:
        raise NoAbnormalSamples("detector training needs real abnormal samples")
    for name, images in (('abnormal', abnormal), ('pool', pool)):
        if len(images) and images.shape[1:] != normal.shape[1:]:
            raise ShapeMismatch(f"{name} images {images.shape[1:]} differ from normals {normal.shape[1:]}")

    state = TrainingState(rng=np.random.default_rng(seed))
    detector = detector or build_detector(normal.shape[1:], widths, seed)
    module = detector.module
    optimizer = torch.optim.SGD(module.parameters(), lr=config.learning_rate, momentum=config.sgd_momentum)
    lr_schedule = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    events = set(sampling_epochs(config.epochs, config.warmup, config.interval)) if adaptive else set()
    if not adaptive:
        state.selected = set(range(len(pool)))

    log, snapshots = [], []
    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        do_momentum = False
        if epoch in events and len(pool):
            take = state.rng.choice(len(normal), size=min(config.normal_cap, len(normal)), replace=False)
            e_normal = detector_energies(detector, normal[np.sort(take)], config.temperature)
            e_abnormal = detector_energies(detector, abnormal, config.temperature)
            state.tau = estimate_threshold(
                np.concatenate([e_normal, e_abnormal]),
                np.concatenate([np.zeros(len(e_normal), int), np.ones(len(e_abnormal), int)]),
                config.recall_level,
            )
            e_pool = detector_energies(detector, pool, config.temperature)
            added = state.grow(select_synthetic(e_pool, state.tau))
            state.previous_parameters = detector.parameters
            do_momentum = True
            snapshots.append({
                'epoch': epoch,
                'tau': state.tau,
                'normal': e_normal.tolist(),
                'abnormal': e_abnormal.tolist(),
                'pool': e_pool.tolist(),
            })
            logger.debug(f"Epoch {epoch}: tau={state.tau:.3f}, +{added} synthetic, {len(state.selected)} total")

        chosen = np.array(sorted(state.selected), dtype=int)
        images = np.concatenate([normal, abnormal, pool[chosen]]) if len(chosen) else np.concatenate([normal, abnormal])
        labels = np.concatenate([
            np.zeros(len(normal), dtype=np.int64),
            np.ones(len(abnormal) + len(chosen), dtype=np.int64),
        ])
        real = np.concatenate([np.ones(len(normal) + len(abnormal), bool), np.zeros(len(chosen), bool)])

        module.train()
        ce_values, energy_values, e_normal_seen, e_abnormal_seen = [], [], [], []
        order = state.rng.permutation(len(images))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            x = torch.from_numpy(images[batch])
            y = torch.from_numpy(labels[batch])
            logits = module(x)
            e = energy(logits, config.temperature)
            ce = F.cross_entropy(logits, y)
            en = energy_loss(e, y, config.margin_normal, config.margin_abnormal)
            loss = ce + config.loss_weight * en
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"detector loss {loss.item()} at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            ce_values.append(ce.item())
            energy_values.append(en.item())
            batch_e = e.detach().numpy()
            batch_real = real[batch]
            e_normal_seen.extend(batch_e[(labels[batch] == 0) & batch_real].tolist())
            e_abnormal_seen.extend(batch_e[(labels[batch] == 1) & batch_real].tolist())
        lr_schedule.step()

        if do_momentum:
            detector.load_parameters(blend_parameters(state.previous_parameters, detector.parameters,
                                                      config.momentum))
        log.append(_epoch_record(epoch, ce_values, energy_values, state.tau, len(state.selected) if len(pool) else 0,
                                 e_normal_seen, e_abnormal_seen))

    module.eval()
    last = log[-1]
    logger.info(f"Detector trained: {config.epochs} epochs, ce={last['ce_loss']:.4f}, "
                f"selected={last['selected_count']}, tau={last['tau']}")
    return detector, log, snapshots


def eas_train(normal: np.ndarray, abnormal: np.ndarray, pool: np.ndarray, config: EasConfig, seed: int = 0,
              widths: Sequence[int] = (8, 16)) -> Tuple[EnergyDetector, List[Dict], List[Dict]]:
    """Train with energy-guided adaptive sampling from the synthetic pool."""
    return train_detector(normal, abnormal, config, seed, pool=pool, adaptive=True, widths=widths)


# ============================================================================
# INFERENCE
# ============================================================================

def predict_batch(detector: EnergyDetector, images: np.ndarray,
                  temperature: float = 1.0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Labels (argmax, ties normal), abnormal probabilities and energies for a stack of images."""
    logits = detector.logits(images)
    labels = (logits[:, 1] > logits[:, 0]).astype(int)
    probability = torch.softmax(torch.from_numpy(logits), dim=1)[:, 1].numpy()
    return labels, probability, energy(logits, temperature)


def predict(detector: EnergyDetector, image: Union[GrayImage, np.ndarray],
            temperature: float = 1.0) -> Tuple[int, float, float]:
    """(predicted label, abnormal probability, energy) for one image."""
    pixels = image.pixels if isinstance(image, GrayImage) else np.asarray(image, dtype=np.float64)
    labels, probability, energies = predict_batch(detector, pixels[None], temperature)
    return int(labels[0]), float(probability[0]), float(energies[0])


def decide(logits: Sequence[float], temperature: float = 1.0) -> Tuple[int, float, float]:
    """Decision rule on raw logits (f0, f1)."""
    f = np.asarray(logits, dtype=np.float64)
    label = int(f[1] > f[0])
    probability = float(torch.softmax(torch.from_numpy(f), dim=0)[1])
    return label, probability, energy(f, temperature)
