"""
Data models for chromosome simulation, restoration and anomaly detection.
"""

from dataclasses import dataclass, field, asdict
from enum import Enum, IntEnum
from typing import List, Optional, Dict, Any, Tuple

import numpy as np

from exceptions import InvalidParameter, ShapeMismatch


BACKGROUND = 1.0


class Label(IntEnum):
    """Binary label space Y."""
    NORMAL = 0
    ABNORMAL = 1


class Split(Enum):
    """Dataset split."""
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class PerturbationKind(Enum):
    """Structural edit applied to a patch sequence or band profile."""
    DELETION = "deletion"
    DUPLICATION = "duplication"
    INVERSION = "inversion"
    TRANSLOCATION = "translocation"


class Arm(Enum):
    """Detector training arm."""
    BASELINE = "baseline"
    OVERSAMPLE = "oversample"
    UNDERSAMPLE = "undersample"
    SYN = "syn"
    SYN_EAS = "syn_eas"
    SYN_STAR = "syn_star"
    SYN_STAR_EAS = "syn_star_eas"

    @property
    def pool(self) -> Optional[str]:
        """Name of the synthetic pool the arm draws from, if any."""
        if self in (Arm.SYN, Arm.SYN_EAS):
            return "syn"
        if self in (Arm.SYN_STAR, Arm.SYN_STAR_EAS):
            return "syn_star"
        return None

    @property
    def uses_eas(self) -> bool:
        return self in (Arm.SYN_EAS, Arm.SYN_STAR_EAS)


@dataclass
class GrayImage:
    """Row-major intensity raster in [0, 1]."""
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise InvalidParameter(f"image must be a non-empty 2-D array, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise InvalidParameter("image contains non-finite intensities")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise InvalidParameter(
                f"intensities must lie in [0,1], got [{self.pixels.min():.4f}, {self.pixels.max():.4f}]"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape

    @classmethod
    def clipped(cls, pixels: np.ndarray) -> "GrayImage":
        """Build an image, clamping intensities into [0, 1]."""
        return cls(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0))


@dataclass
class BinaryMask:
    """Row-major foreground flags."""
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise InvalidParameter(f"mask must be 2-D, got shape {self.bits.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def matches(self, image: GrayImage) -> bool:
        return self.shape == image.shape


@dataclass
class MedialAxis:
    """Ordered sub-pixel (r, c) points from the topmost to the bottommost endpoint."""
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    @property
    def arc_length(self) -> float:
        return float(self.segment_lengths.sum())

    def reversed(self) -> "MedialAxis":
        return MedialAxis(self.points[::-1].copy())


@dataclass
class Patch:
    """One rotated rectangular segment; rows run along the axis."""
    center: Tuple[float, float]
    angle: float
    pixels: np.ndarray

    @property
    def length(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def flipped(self) -> "Patch":
        """Rows reversed along the axis direction (s^inv)."""
        return Patch(self.center, self.angle, self.pixels[::-1].copy())


@dataclass
class PatchSequence:
    """Ordered congruent patches sampled along a medial axis."""
    patches: List[Patch]

    def __post_init__(self):
        shapes = {p.pixels.shape for p in self.patches}
        if len(shapes) > 1:
            raise ShapeMismatch(f"patches must share one shape, got {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.patches)

    def __getitem__(self, index):
        return self.patches[index]

    @property
    def interval(self) -> int:
        return self.patches[0].length

    @property
    def width(self) -> int:
        return self.patches[0].width


@dataclass
class PerturbationOp:
    """A structural edit on a patch sequence; indices are 1-based."""
    kind: PerturbationKind
    j: int
    m: Optional[int] = None
    donor_patch: Optional[np.ndarray] = field(default=None, repr=False)
    donor_class: Optional[int] = None
    donor_id: Optional[str] = None
    donor_patch_index: Optional[int] = None

    @classmethod
    def deletion(cls, j: int) -> "PerturbationOp":
        return cls(PerturbationKind.DELETION, j)

    @classmethod
    def duplication(cls, j: int) -> "PerturbationOp":
        return cls(PerturbationKind.DUPLICATION, j)

    @classmethod
    def inversion(cls, j: int, m: int) -> "PerturbationOp":
        return cls(PerturbationKind.INVERSION, j, m)

    @classmethod
    def translocation(cls, j: int, donor_patch: np.ndarray, donor_class: int,
                      donor_id: str = None, donor_patch_index: int = None) -> "PerturbationOp":
        return cls(PerturbationKind.TRANSLOCATION, j, None, np.asarray(donor_patch, dtype=np.float64),
                   donor_class, donor_id, donor_patch_index)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to a JSON-ready dictionary; donor pixels are referenced, not embedded."""
        data = {'kind': self.kind.value, 'j': self.j}
        if self.m is not None:
            data['m'] = self.m
        if self.kind == PerturbationKind.TRANSLOCATION:
            data['donor_class'] = self.donor_class
            data['donor_id'] = self.donor_id
            data['donor_patch_index'] = self.donor_patch_index
        return data


@dataclass
class PerturbRecord:
    """Provenance of one simulated abnormal chromosome."""
    source_id: str
    class_id: int
    op: Dict[str, Any]
    source_mac: float
    interval: int
    seed: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PerturbRecord":
        return cls(**data)


@dataclass
class BandProfile:
    """Banding template of one phantom class along the normalized axis."""
    class_id: int
    template: np.ndarray
    length_range: Tuple[int, int]
    width_range: Tuple[int, int]

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        if len(self.template) < 16:
            raise InvalidParameter(f"band template needs >= 16 samples, got {len(self.template)}")


@dataclass
class ChromosomeSpec:
    """Everything needed to re-render one phantom chromosome."""
    class_id: int
    length: int
    width: int
    control_points: List[Tuple[float, float]]
    noise_std: float
    seed: int

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['control_points'] = [list(map(float, p)) for p in self.control_points]
        return data


@dataclass
class Sample:
    """One manifest entry."""
    id: str
    file: str
    class_id: int
    label: Label
    split: Split
    seed: int
    op: Optional[Dict[str, Any]] = None
    mask_file: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'id': self.id,
            'file': self.file,
            'class': self.class_id,
            'label': int(self.label),
            'split': self.split.value,
            'seed': self.seed,
        }
        if self.op is not None:
            data['op'] = self.op
        if self.mask_file is not None:
            data['mask_file'] = self.mask_file
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Sample":
        return cls(
            id=data['id'],
            file=data['file'],
            class_id=int(data['class']),
            label=Label(int(data['label'])),
            split=Split(data['split']),
            seed=int(data['seed']),
            op=data.get('op'),
            mask_file=data.get('mask_file'),
        )


@dataclass
class DatasetManifest:
    """Labeled splits D^n and D^ab of every class."""
    version: int
    classes: List[int]
    samples: List[Sample]
    canvas: Tuple[int, int] = (64, 64)

    def select(self, class_id: int = None, label: Label = None, split: Split = None) -> List[Sample]:
        """Filter samples; None matches anything."""
        return [
            s for s in self.samples
            if (class_id is None or s.class_id == class_id)
            and (label is None or s.label == label)
            and (split is None or s.split == split)
        ]

    def counts(self) -> Dict[str, int]:
        """Sample counts keyed by '<split>/<label>'."""
        counts: Dict[str, int] = {}
        for s in self.samples:
            key = f"{s.split.value}/{s.label.name.lower()}"
            counts[key] = counts.get(key, 0) + 1
        return counts

    def to_dict(self) -> Dict[str, Any]:
        return {
            'version': self.version,
            'classes': list(self.classes),
            'canvas': list(self.canvas),
            'samples': [s.to_dict() for s in self.samples],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        return cls(
            version=int(data['version']),
            classes=[int(c) for c in data['classes']],
            samples=[Sample.from_dict(s) for s in data['samples']],
            canvas=tuple(data.get('canvas', (64, 64))),
        )


@dataclass
class Confusion:
    """Binary confusion counts; the positive class is abnormal."""
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise InvalidParameter(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class ScoredSample:
    """Score (higher = more abnormal) with its true label."""
    score: float
    label: int


@dataclass
class ExperimentReport:
    """Per-class metric rows plus aggregates for one detector arm."""
    run_id: str
    arm: Arm
    rows: List[Dict[str, Any]]
    aggregate: Dict[str, Dict[str, float]]
    energy_groups: Dict[int, Dict[str, List[float]]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'run_id': self.run_id,
            'arm': self.arm.value,
            'rows': self.rows,
            'aggregate': self.aggregate,
        }
