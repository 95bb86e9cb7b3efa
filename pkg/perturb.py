"""
Structural perturbation of rectified chromosomes and the MAC straightness score.
"""

import logging
import math
from typing import List, Sequence, Tuple, Union, Optional

import numpy as np
from skimage.transform import resize

from exceptions import (
    IndexOutOfRange, DonorShapeMismatch, SequenceTooShort, DegenerateAxis,
    InvalidParameter, NoDonorAvailable, KarySimError,
)
from imaging import (
    binarize, largest_component, thin, extract_axis, sample_axis,
    extract_patches, stack_patches, chromosome_height, rectify,
)
from models import (
    GrayImage, MedialAxis, Patch, PatchSequence, PerturbationKind,
    PerturbationOp, PerturbRecord,
)

logger = logging.getLogger(__name__)

DEFAULT_INTERVAL_FRACTIONS = (1 / 20, 1 / 5)


# ============================================================================
# PERTURBATION OPERATORS
# ============================================================================

def _resample_donor(donor: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    donor = np.asarray(donor, dtype=np.float64)
    if donor.ndim != 2 or donor.size == 0 or not np.all(np.isfinite(donor)):
        raise DonorShapeMismatch(f"donor patch of shape {donor.shape} cannot be resampled to {shape}")
    if donor.shape == tuple(shape):
        return donor.copy()
    return np.clip(resize(donor, shape, order=1, anti_aliasing=False, preserve_range=True), 0.0, 1.0)


def apply_perturbation(sequence: PatchSequence, op: PerturbationOp) -> PatchSequence:
    """
    Apply one structural edit to a patch sequence.

    Indices are 1-based. Deletion removes s_j, Duplication repeats s_j,
    Inversion reverses s_j..s_m and flips each patch along the axis,
    Translocation replaces s_j with a donor patch.
    """
    n = len(sequence)
    patches = list(sequence.patches)
    if not 1 <= op.j <= n:
        raise IndexOutOfRange(f"index j={op.j} outside [1, {n}]")

    if op.kind == PerturbationKind.DELETION:
        if n - 1 < 2:
            raise SequenceTooShort(f"deleting from {n} patches leaves fewer than 2")
        del patches[op.j - 1]
    elif op.kind == PerturbationKind.DUPLICATION:
        original = patches[op.j - 1]
        patches.insert(op.j, Patch(original.center, original.angle, original.pixels.copy()))
    elif op.kind == PerturbationKind.INVERSION:
        if op.m is None or not op.j <= op.m <= n:
            raise IndexOutOfRange(f"inversion span [{op.j}, {op.m}] invalid for {n} patches")
        span = [p.flipped() for p in reversed(patches[op.j - 1:op.m])]
        patches[op.j - 1:op.m] = span
    elif op.kind == PerturbationKind.TRANSLOCATION:
        if op.donor_patch is None:
            raise DonorShapeMismatch("translocation requires a donor patch")
        target = patches[op.j - 1]
        pixels = _resample_donor(op.donor_patch, target.pixels.shape)
        patches[op.j - 1] = Patch(target.center, target.angle, pixels)
    else:
        raise InvalidParameter(f"unsupported perturbation {op.kind}")
    return PatchSequence(patches)


# ============================================================================
# MAC SCORE
# ============================================================================

def _resample_uniform(axis: MedialAxis, count: int) -> np.ndarray:
    points = axis.points
    cumulative = np.concatenate([[0.0], np.cumsum(axis.segment_lengths)])
    positions = np.linspace(0.0, cumulative[-1], count)
    return np.column_stack([
        np.interp(positions, cumulative, points[:, 0]),
        np.interp(positions, cumulative, points[:, 1]),
    ])


def mac_score(axis: MedialAxis, samples: int = 6, normalization: str = 'literal') -> float:
    """
    Medial axis cosine score; 100 for a straight axis.

    Args:
        axis: ordered medial axis
        samples: number M of arc-length-uniform points
        normalization: 'literal' divides the M-1 deviations by M,
            'mean' divides by M-1

    Raises:
        DegenerateAxis: first and last points coincide
    """
    if samples < 2:
        raise InvalidParameter(f"MAC needs at least 2 samples, got {samples}")
    if normalization not in ('literal', 'mean'):
        raise InvalidParameter(f"unknown MAC normalization '{normalization}'")
    if axis.arc_length <= 0:
        raise DegenerateAxis("axis has zero arc length")
    points = _resample_uniform(axis, samples)
    global_direction = points[-1] - points[0]
    norm = np.linalg.norm(global_direction)
    if norm < 1e-12:
        raise DegenerateAxis("topmost and bottommost axis points coincide")
    global_direction /= norm
    local = np.diff(points, axis=0)
    lengths = np.linalg.norm(local, axis=1, keepdims=True)
    lengths[lengths == 0] = 1.0
    local /= lengths
    deviations = 1.0 - local @ global_direction
    divisor = samples if normalization == 'literal' else samples - 1
    return float((1.0 - np.abs(deviations).sum() / divisor) * 100.0)


def filter_by_mac(candidates: Sequence[Tuple[object, MedialAxis]], threshold: float = 85.0,
                  samples: int = 6, normalization: str = 'literal') -> List[Tuple[object, MedialAxis]]:
    """Keep the candidates whose MAC score is strictly above the threshold."""
    if not -100.0 <= threshold <= 100.0:
        raise InvalidParameter(f"MAC threshold must lie in [-100, 100], got {threshold}")
    return [c for c in candidates if mac_score(c[1], samples, normalization) > threshold]


# ============================================================================
# SIMULATION PIPELINE
# ============================================================================

def draw_interval(height: int, rng: np.random.Generator,
                  fractions: Tuple[float, float] = DEFAULT_INTERVAL_FRACTIONS) -> int:
    """Integer interval l drawn uniformly between the two fractions of the chromosome height."""
    low = max(2, int(math.ceil(height * fractions[0])))
    high = max(low, int(math.floor(height * fractions[1])))
    return int(rng.integers(low, high + 1))


def random_op(kind: PerturbationKind, n: int, rng: np.random.Generator) -> PerturbationOp:
    """Draw indices for a non-translocation operator on an n-patch sequence."""
    if kind == PerturbationKind.DELETION:
        if n < 3:
            raise SequenceTooShort(f"deletion needs at least 3 patches, got {n}")
        return PerturbationOp.deletion(int(rng.integers(1, n + 1)))
    if kind == PerturbationKind.DUPLICATION:
        return PerturbationOp.duplication(int(rng.integers(1, n + 1)))
    if kind == PerturbationKind.INVERSION:
        span = int(rng.integers(1, math.ceil(n / 2) + 1))
        j = int(rng.integers(1, n - span + 2))
        return PerturbationOp.inversion(j, j + span - 1)
    raise InvalidParameter(f"{kind} needs a donor; use draw_translocation")


def draw_translocation(n: int, interval: int, donors: Sequence[Tuple[str, GrayImage, int]],
                       class_id: int, rng: np.random.Generator, threshold: float,
                       merge_distance: float, min_branch_length: int) -> PerturbationOp:
    """Pick a donor chromosome of another class and one of its patches."""
    eligible = [d for d in donors if d[2] != class_id]
    if not eligible:
        raise NoDonorAvailable(f"no donor chromosome of a class other than {class_id}")
    for index in rng.permutation(len(eligible)):
        donor_id, donor_image, donor_class = eligible[int(index)]
        try:
            _, donor_sequence = rectify(donor_image, threshold, interval, merge_distance, min_branch_length)
        except KarySimError as e:
            logger.debug(f"Donor {donor_id} unusable: {e}")
            continue
        patch_index = int(rng.integers(0, len(donor_sequence)))
        j = int(rng.integers(1, n + 1))
        return PerturbationOp.translocation(
            j, donor_sequence[patch_index].pixels, donor_class, donor_id, patch_index + 1
        )
    raise NoDonorAvailable(f"none of {len(eligible)} donor chromosomes could be rectified")


def simulate_abnormal(image: GrayImage, class_id: int,
                      op: Union[PerturbationOp, PerturbationKind, None] = None,
                      seed: int = 0,
                      interval_fractions: Tuple[float, float] = DEFAULT_INTERVAL_FRACTIONS,
                      donors: Sequence[Tuple[str, GrayImage, int]] = (),
                      source_id: str = '',
                      threshold: float = 0.9,
                      merge_distance: float = 2.0,
                      min_branch_length: int = 8,
                      mac_samples: int = 6,
                      mac_normalization: str = 'literal',
                      interval: Optional[int] = None) -> Tuple[GrayImage, PerturbRecord]:
    """
    Simulate a structurally abnormal chromosome from a normal one.

    Args:
        image: straight (MAC-filtered) normal chromosome
        class_id: class of the source chromosome
        op: fixed operator, an operator kind to draw indices for, or None for a random kind
        seed: seed of the generator driving every random choice
        interval_fractions: bounds of l relative to the chromosome height
        donors: (id, image, class) chromosomes available for translocation
        interval: fixed l, overriding the random draw

    Returns:
        (stacked perturbed image s', provenance record)
    """
    rng = np.random.default_rng(seed)
    mask = largest_component(binarize(image, threshold))
    axis = extract_axis(thin(mask), merge_distance, min_branch_length)
    source_mac = mac_score(axis, mac_samples, mac_normalization)
    if interval is None:
        interval = draw_interval(chromosome_height(mask), rng, interval_fractions)
    centers = sample_axis(axis, interval)
    sequence = extract_patches(image, mask, centers, interval)
    n = len(sequence)

    if op is None:
        op = list(PerturbationKind)[int(rng.integers(0, len(PerturbationKind)))]
    if isinstance(op, PerturbationKind):
        if op == PerturbationKind.TRANSLOCATION:
            op = draw_translocation(n, interval, donors, class_id, rng, threshold,
                                    merge_distance, min_branch_length)
        else:
            op = random_op(op, n, rng)
    if op.kind == PerturbationKind.TRANSLOCATION and op.donor_class == class_id:
        raise InvalidParameter("translocation donor must belong to a different class")

    perturbed = stack_patches(apply_perturbation(sequence, op))
    record = PerturbRecord(
        source_id=source_id,
        class_id=class_id,
        op=op.to_dict(),
        source_mac=source_mac,
        interval=interval,
        seed=seed,
    )
    logger.debug(f"Simulated {op.kind.value} on {source_id or 'image'} with l={interval}, n={n}")
    return perturbed, record


def rearrange(image: GrayImage, seed: int = 0,
              interval_fractions: Tuple[float, float] = DEFAULT_INTERVAL_FRACTIONS,
              threshold: float = 0.9, merge_distance: float = 2.0,
              min_branch_length: int = 8) -> Tuple[GrayImage, int]:
    """Rearranged chromosome s with no perturbation applied (restoration training input)."""
    rng = np.random.default_rng(seed)
    mask = largest_component(binarize(image, threshold))
    axis = extract_axis(thin(mask), merge_distance, min_branch_length)
    interval = draw_interval(chromosome_height(mask), rng, interval_fractions)
    sequence = extract_patches(image, mask, sample_axis(axis, interval), interval)
    return stack_patches(sequence), interval
