"""
Procedural banded chromosome phantoms.

Each class owns a 1-D band template; a phantom sweeps that template along a
smooth spline axis with a tapered width, then blurs and adds noise. Abnormal
ground truth edits the template before rendering so the result carries no
patch seams.
"""

import logging
import math
from typing import Dict, List, Tuple, Optional, Union, Sequence, Callable

import numpy as np
from scipy import ndimage
from scipy.interpolate import make_interp_spline
from scipy.ndimage import gaussian_filter1d
from scipy.spatial import cKDTree

from config import PhantomConfig, SplitConfig
from exceptions import UnknownClass, InvalidParameter
from models import (
    GrayImage, BinaryMask, MedialAxis, BandProfile, ChromosomeSpec, PerturbationKind,
    Label, Split, Sample, DatasetManifest,
)
from utils import derive_seed

logger = logging.getLogger(__name__)

BACKGROUND_LEVEL = 0.97
# foreground level of the ground-truth mask, matching the binarize threshold used on phantoms
MASK_LEVEL = 0.9
TEMPLATE_SEED = 20240
BAND_INTENSITY = (0.1, 0.7)
MIN_TEMPLATE_DIFF = 0.1
MAX_TEMPLATE_CORR = 0.5
CONTROL_POSITIONS = (0.0, 0.25, 0.5, 0.75, 1.0)
SPAN_FRACTIONS = (0.1, 0.25)
MANIFEST_VERSION = 1

_REGISTRY: Dict[int, BandProfile] = {}


# ============================================================================
# CLASS REGISTRY
# ============================================================================

def _step_template(rng: np.random.Generator, samples: int) -> np.ndarray:
    bands = int(rng.integers(6, 11))
    cuts = np.sort(rng.choice(np.arange(2, samples - 2), size=bands - 1, replace=False))
    levels = rng.uniform(*BAND_INTENSITY, size=bands)
    template = np.repeat(levels, np.diff(np.concatenate([[0], cuts, [samples]])))
    return np.clip(gaussian_filter1d(template, 1.0, mode='nearest'), 0.0, 1.0)


def _distinct(template: np.ndarray, others: Sequence[np.ndarray]) -> bool:
    for other in others:
        if np.mean(np.abs(template - other)) <= MIN_TEMPLATE_DIFF:
            return False
        if np.corrcoef(template, other)[0, 1] >= MAX_TEMPLATE_CORR:
            return False
    return True


def register_default_classes(count: int = 4, samples: int = 64,
                             length_range: Tuple[int, int] = (34, 46),
                             width_range: Tuple[int, int] = (8, 11)) -> List[int]:
    """
    Register classes 0..count-1 with seeded templates.

    Templates depend only on the class id and the sample count, so ids are
    stable across runs. Each class is redrawn until it differs from every
    lower id by mean absolute difference and correlation.
    """
    accepted: List[np.ndarray] = []
    for class_id in range(count):
        for attempt in range(1000):
            rng = np.random.default_rng([TEMPLATE_SEED, samples, class_id, attempt])
            template = _step_template(rng, samples)
            if _distinct(template, accepted):
                break
        else:
            raise InvalidParameter(f"could not draw a distinct template for class {class_id}")
        accepted.append(template)
        _REGISTRY[class_id] = BandProfile(class_id, template, tuple(length_range), tuple(width_range))
    logger.debug(f"Registered {count} phantom classes with {samples}-sample templates")
    return list(range(count))


def band_profile(class_id: int) -> BandProfile:
    """Look up a registered class."""
    try:
        return _REGISTRY[class_id]
    except KeyError:
        raise UnknownClass(f"phantom class {class_id} is not registered (known: {sorted(_REGISTRY)})")


def registered_classes() -> List[int]:
    return sorted(_REGISTRY)


# ============================================================================
# RENDERING
# ============================================================================

def _as_rng(rng: Union[int, np.random.Generator]) -> Tuple[np.random.Generator, int]:
    if isinstance(rng, np.random.Generator):
        return rng, -1
    return np.random.default_rng(int(rng)), int(rng)


def _draw_spec(profile: BandProfile, rng: np.random.Generator, config: PhantomConfig, seed: int) -> ChromosomeSpec:
    length = int(rng.integers(profile.length_range[0], profile.length_range[1] + 1))
    width = int(rng.integers(profile.width_range[0], profile.width_range[1] + 1))
    if rng.random() < config.straight_fraction:
        offsets = np.zeros(len(CONTROL_POSITIONS))
    else:
        offsets = rng.uniform(-config.max_bend, config.max_bend, size=len(CONTROL_POSITIONS))
        offsets[[0, -1]] = 0.0
    control_points = [(float(t), float(o)) for t, o in zip(CONTROL_POSITIONS, offsets)]
    return ChromosomeSpec(profile.class_id, length, width, control_points, config.noise_std, seed)


def axis_points(spec: ChromosomeSpec, canvas: Tuple[int, int], length: float = None) -> np.ndarray:
    """
    Arc-length uniform points of the phantom axis.

    Control points are (t, lateral offset / length); rows run from top to
    bottom, centered on the canvas, and the unbent axis sits on column W // 2.
    """
    length = float(spec.length if length is None else length)
    t_ctrl, o_ctrl = np.array(spec.control_points).T
    spline = make_interp_spline(t_ctrl, o_ctrl, k=3)
    t = np.linspace(0.0, 1.0, 400)
    top = (canvas[0] - length) / 2.0
    dense = np.column_stack([top + t * length, canvas[1] // 2 + length * spline(t)])
    cumulative = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    count = max(2, int(math.ceil(cumulative[-1] * 4)))
    positions = np.linspace(0.0, cumulative[-1], count)
    return np.column_stack([
        np.interp(positions, cumulative, dense[:, 0]),
        np.interp(positions, cumulative, dense[:, 1]),
    ])


def half_width(u: np.ndarray, width: float) -> np.ndarray:
    """Smooth width profile, narrowing toward the telomeres."""
    return 0.5 * width * (1.0 - 0.3 * np.abs(2.0 * u - 1.0) ** 4)


def render(spec: ChromosomeSpec, template: np.ndarray, rng: np.random.Generator, config: PhantomConfig,
           length: float = None) -> Tuple[GrayImage, BinaryMask, MedialAxis]:
    """
    Sweep a band template along the chromosome axis.

    The ground-truth mask is the blurred, noise-free rendering below
    MASK_LEVEL, so it marks the pixels a threshold of that level would find
    without noise.

    Returns:
        (image, ground-truth mask, axis)
    """
    canvas = tuple(config.canvas)
    points = axis_points(spec, canvas, length)
    u_axis = np.linspace(0.0, 1.0, len(points))
    rows, cols = np.mgrid[0:canvas[0], 0:canvas[1]]
    grid = np.column_stack([rows.ravel(), cols.ravel()]).astype(np.float64)
    distance, nearest = cKDTree(points).query(grid)
    u = u_axis[nearest]
    hw = half_width(u, spec.width)

    jitter = 0.02 * gaussian_filter1d(rng.standard_normal(len(template)), 2.0, mode='nearest')
    profile = np.clip(template + jitter, 0.0, 1.0)
    band = np.interp(u, np.linspace(0.0, 1.0, len(profile)), profile)
    coverage = np.clip(hw - distance + 0.5, 0.0, 1.0)
    pixels = BACKGROUND_LEVEL - coverage * (BACKGROUND_LEVEL - band)
    pixels = pixels.reshape(canvas)
    if config.blur_sigma > 0:
        pixels = ndimage.gaussian_filter(pixels, config.blur_sigma, mode='nearest')
    mask = pixels < MASK_LEVEL
    pixels = pixels + spec.noise_std * rng.standard_normal(canvas)
    return GrayImage.clipped(pixels), BinaryMask(mask), MedialAxis(points)


def generate_normal(class_id: int, rng: Union[int, np.random.Generator],
                    config: PhantomConfig = None) -> Tuple[GrayImage, BinaryMask, MedialAxis, ChromosomeSpec]:
    """
    Render a normal phantom of a registered class.

    Args:
        class_id: registered class id
        rng: generator, or an integer seed recorded in the returned spec
        config: rendering parameters

    Returns:
        (image, ground-truth mask, ground-truth axis, spec)
    """
    config = config or PhantomConfig()
    profile = band_profile(class_id)
    rng, seed = _as_rng(rng)
    spec = _draw_spec(profile, rng, config, seed)
    image, mask, axis = render(spec, profile.template, rng, config)
    return image, mask, axis, spec


def edit_template(template: np.ndarray, kind: PerturbationKind, start: int, stop: int,
                  donor: np.ndarray = None) -> np.ndarray:
    """Apply a structural edit to the template span [start, stop)."""
    if not 0 <= start < stop <= len(template):
        raise InvalidParameter(f"template span [{start}, {stop}) invalid for {len(template)} samples")
    span = template[start:stop]
    if kind == PerturbationKind.DELETION:
        return np.concatenate([template[:start], template[stop:]])
    if kind == PerturbationKind.DUPLICATION:
        return np.concatenate([template[:stop], span, template[stop:]])
    if kind == PerturbationKind.INVERSION:
        return np.concatenate([template[:start], span[::-1], template[stop:]])
    if kind == PerturbationKind.TRANSLOCATION:
        if donor is None or len(donor) != stop - start:
            raise InvalidParameter("translocation needs a donor span of equal length")
        return np.concatenate([template[:start], donor, template[stop:]])
    raise InvalidParameter(f"unsupported perturbation {kind}")


def generate_abnormal_gt(class_id: int, kind: PerturbationKind, rng: Union[int, np.random.Generator],
                         config: PhantomConfig = None,
                         span: Optional[Tuple[float, float]] = None) -> Tuple[GrayImage, Dict]:
    """
    Render a ground-truth abnormal phantom.

    The edit is applied to the band template and the rendered length follows
    the edited template length. The chromosome shape is drawn exactly as
    generate_normal draws it, so equal seeds give the same source chromosome.

    Args:
        class_id: registered class id
        kind: structural edit
        rng: generator or integer seed
        config: rendering parameters
        span: optional (start, stop) fractions of the template to edit

    Returns:
        (image, abnormality descriptor)
    """
    config = config or PhantomConfig()
    profile = band_profile(class_id)
    rng, seed = _as_rng(rng)
    spec = _draw_spec(profile, rng, config, seed)
    samples = len(profile.template)

    if span is None:
        low, high = SPAN_FRACTIONS
        if kind == PerturbationKind.DUPLICATION:
            # the duplicated chromosome must still fit the canvas
            room = (config.canvas[0] - 2 - spec.width) / spec.length - 1.0
            high = max(1.0 / samples, min(high, room))
            low = min(low, high)
        q = rng.uniform(low, high)
        count = max(1, int(round(q * samples)))
        start = int(rng.integers(0, samples - count + 1))
        stop = start + count
    else:
        start = int(round(span[0] * samples))
        stop = max(start + 1, int(round(span[1] * samples)))

    donor_class = None
    donor = None
    if kind == PerturbationKind.TRANSLOCATION:
        others = [c for c in registered_classes() if c != class_id]
        if not others:
            raise UnknownClass("translocation needs a second registered class")
        donor_class = others[int(rng.integers(0, len(others)))]
        donor_template = band_profile(donor_class).template
        donor_start = int(rng.integers(0, len(donor_template) - (stop - start) + 1))
        donor = donor_template[donor_start:donor_start + stop - start]

    edited = edit_template(profile.template, kind, start, stop, donor)
    length = spec.length * len(edited) / samples
    image, _, _ = render(spec, edited, rng, config, length)
    descriptor = {
        'kind': kind.value,
        'start': start,
        'stop': stop,
        'fraction': (stop - start) / samples,
        'source_length': spec.length,
        'length': float(length),
        'width': spec.width,
    }
    if donor_class is not None:
        descriptor['donor_class'] = donor_class
    return image, descriptor


# ============================================================================
# DATASET
# ============================================================================

_SPLIT_STREAM = {Split.TRAIN: 0, Split.VAL: 1, Split.TEST: 2}


def _split_counts(split: SplitConfig) -> List[Tuple[Split, Label, int]]:
    return [
        (Split.TRAIN, Label.NORMAL, split.train_normal),
        (Split.TRAIN, Label.ABNORMAL, split.train_abnormal),
        (Split.VAL, Label.NORMAL, split.val_normal),
        (Split.VAL, Label.ABNORMAL, split.val_abnormal),
        (Split.TEST, Label.NORMAL, split.test_normal),
        (Split.TEST, Label.ABNORMAL, split.test_abnormal),
    ]


def sample_id(class_id: int, split: Split, label: Label, index: int) -> str:
    return f"c{class_id}_{split.value}_{label.name.lower()}_{index:05d}"


def build_dataset(classes: Sequence[int], split: SplitConfig, config: PhantomConfig, seed: int,
                  write_image: Callable[[str, GrayImage], None] = None,
                  write_mask: Callable[[str, BinaryMask], None] = None) -> DatasetManifest:
    """
    Generate the labeled splits of every class.

    Abnormal operator kinds are assigned round-robin within each split, so
    their histogram is balanced to within one. Each sample is rendered from
    its own derived seed.

    Args:
        classes: class ids to generate
        split: per-split counts and imbalance ratio
        config: rendering parameters
        seed: run seed
        write_image: callback persisting (relative path, image)
        write_mask: callback persisting (relative path, ground-truth mask)

    Returns:
        DatasetManifest describing every written sample
    """
    kinds = list(PerturbationKind)
    samples: List[Sample] = []
    for class_id in classes:
        band_profile(class_id)
        for split_name, label, count in _split_counts(split):
            for index in range(count):
                sample_seed = derive_seed(seed, class_id, _SPLIT_STREAM[split_name], int(label), index)
                identifier = sample_id(class_id, split_name, label, index)
                file = f"images/{identifier}.pgm"
                op = None
                mask_file = None
                if label == Label.NORMAL:
                    image, mask, _, _ = generate_normal(class_id, sample_seed, config)
                    mask_file = f"masks/{identifier}.pgm"
                    if write_mask:
                        write_mask(mask_file, mask)
                else:
                    image, op = generate_abnormal_gt(class_id, kinds[index % len(kinds)], sample_seed, config)
                if write_image:
                    write_image(file, image)
                samples.append(Sample(identifier, file, class_id, label, split_name, sample_seed, op, mask_file))
        logger.info(f"Generated class {class_id}: {sum(c for _, _, c in _split_counts(split))} samples")
    return DatasetManifest(MANIFEST_VERSION, list(classes), samples, tuple(config.canvas))


register_default_classes()
