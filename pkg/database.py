"""
File-based artifact storage: PGM images, JSON manifests, CSV logs and checkpoints.
"""

import csv
import json
import logging
import struct
from pathlib import Path
from typing import List, Dict, Any, Tuple, Sequence

import numpy as np
from PIL import Image

from exceptions import MissingArtifact, ValidationError, ShapeMismatch
from models import GrayImage, BinaryMask, DatasetManifest, Sample, Label, Split, PerturbRecord
from utils import format_metric

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KSIMCKPT"
CHECKPOINT_VERSION = 1
POOL_VERSION = 1


# ============================================================================
# IMAGES
# ============================================================================

def write_pgm(path: Path, image: GrayImage):
    """Write an 8-bit binary PGM."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(image.pixels * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format='PPM')


def read_pgm(path: Path) -> GrayImage:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"image not found: {path}")
    with Image.open(path) as img:
        data = np.asarray(img.convert('L'), dtype=np.float64)
    return GrayImage(data / 255.0)


def write_mask(path: Path, mask: BinaryMask):
    write_pgm(path, GrayImage(mask.bits.astype(np.float64)))


def read_mask(path: Path) -> BinaryMask:
    return BinaryMask(read_pgm(path).pixels > 0.5)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(path: Path, kind: str, architecture: Dict[str, Any], module) -> Path:
    """
    Serialize a torch module's parameters.

    Layout: magic, uint32 format version, uint32 header length, JSON header
    (architecture, parameter names and shapes), then little-endian float64
    parameters in header order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named = [(name, p.detach().cpu().numpy()) for name, p in module.named_parameters()]
    header = {
        'format_version': CHECKPOINT_VERSION,
        'kind': kind,
        'architecture': architecture,
        'parameters': [{'name': name, 'shape': list(value.shape)} for name, value in named],
        'count': int(sum(value.size for _, value in named)),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for _, value in named:
            f.write(np.ascontiguousarray(value, dtype='<f8').tobytes())
    logger.info(f"Saved {kind} checkpoint with {header['count']} parameters to {path}")
    return path


def load_checkpoint(path: Path) -> Tuple[Dict[str, Any], np.ndarray]:
    """
    Read a checkpoint container.

    Returns:
        (header, flat float64 parameter vector)
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path} is not a checkpoint container")
    offset = len(CHECKPOINT_MAGIC)
    version, header_length = struct.unpack_from('<II', data, offset)
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version} in {path}")
    offset += 8
    header = json.loads(data[offset:offset + header_length].decode('utf-8'))
    vector = np.frombuffer(data, dtype='<f8', offset=offset + header_length).astype(np.float64)
    if vector.size != header['count']:
        raise ShapeMismatch(f"{path}: expected {header['count']} parameters, found {vector.size}")
    return header, vector


# ============================================================================
# JSON / CSV STORAGE
# ============================================================================

class DatabaseManager:
    """Base manager for one artifact directory."""

    def __init__(self, data_dir: str):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.logger = logging.getLogger(__name__)

    def _read_json(self, file_path: Path) -> Any:
        """Read a JSON artifact; a missing file is a MissingArtifact."""
        if not file_path.exists():
            raise MissingArtifact(f"required artifact not found: {file_path}")
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            self.logger.error(f"Error reading {file_path}: {e}")
            raise MissingArtifact(f"artifact {file_path} is not valid JSON: {e}")

    def _write_json(self, file_path: Path, data: Any):
        """Write JSON with stable key order so reruns produce identical bytes."""
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
            f.write('\n')

    def _write_csv(self, file_path: Path, fieldnames: Sequence[str], rows: Sequence[Dict[str, Any]]):
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator='\n')
            writer.writeheader()
            for row in rows:
                writer.writerow({k: format_metric(v, 10) if isinstance(v, float) else v for k, v in row.items()})

    def _read_csv(self, file_path: Path) -> List[Dict[str, str]]:
        if not file_path.exists():
            raise MissingArtifact(f"required artifact not found: {file_path}")
        with open(file_path, 'r', encoding='utf-8', newline='') as f:
            return list(csv.DictReader(f))


class DatasetDatabase(DatabaseManager):
    """Phantom dataset: images, ground-truth masks and the manifest."""

    def __init__(self, root: str):
        super().__init__(Path(root) / 'dataset')
        self.manifest_file = self.data_dir / 'manifest.json'

    def save_image(self, relative: str, image: GrayImage):
        write_pgm(self.data_dir / relative, image)

    def save_mask(self, relative: str, mask: BinaryMask):
        write_mask(self.data_dir / relative, mask)

    def save_manifest(self, manifest: DatasetManifest):
        self._write_json(self.manifest_file, manifest.to_dict())
        self.logger.info(f"Wrote manifest with {len(manifest.samples)} samples to {self.manifest_file}")

    def get_manifest(self) -> DatasetManifest:
        return DatasetManifest.from_dict(self._read_json(self.manifest_file))

    def load_image(self, sample: Sample) -> GrayImage:
        return read_pgm(self.data_dir / sample.file)

    def load_stack(self, samples: Sequence[Sample]) -> np.ndarray:
        """Pixels of several samples as an (N, H, W) array."""
        if not samples:
            return np.zeros((0, 0, 0))
        return np.stack([self.load_image(s).pixels for s in samples])

    def load_split(self, class_id: int, label: Label, split: Split) -> Tuple[List[Sample], np.ndarray]:
        manifest = self.get_manifest()
        samples = manifest.select(class_id, label, split)
        return samples, self.load_stack(samples)


class PoolDatabase(DatabaseManager):
    """A synthetic abnormal pool (SYN or SYN*) with provenance records."""

    def __init__(self, root: str, name: str):
        super().__init__(Path(root) / 'pools' / name)
        self.name = name
        self.pool_file = self.data_dir / 'pool.json'

    def save_pool(self, entries: Sequence[Tuple[str, int, PerturbRecord, GrayImage]],
                  extra: Dict[str, Any] = None):
        """Persist (id, class, record, image) entries."""
        items = []
        for identifier, class_id, record, image in entries:
            relative = f"images/{identifier}.pgm"
            write_pgm(self.data_dir / relative, image)
            items.append({'id': identifier, 'class': class_id, 'file': relative, 'record': record.to_dict()})
        document = {'version': POOL_VERSION, 'name': self.name, 'entries': items}
        if extra:
            document.update(extra)
        self._write_json(self.pool_file, document)
        self.logger.info(f"Wrote pool '{self.name}' with {len(items)} entries")

    def get_entries(self, class_id: int = None) -> List[Dict[str, Any]]:
        entries = self._read_json(self.pool_file)['entries']
        return [e for e in entries if class_id is None or e['class'] == class_id]

    def get_document(self) -> Dict[str, Any]:
        return self._read_json(self.pool_file)

    def load_images(self, class_id: int = None) -> Tuple[List[Dict[str, Any]], np.ndarray]:
        entries = self.get_entries(class_id)
        if not entries:
            return entries, np.zeros((0, 0, 0))
        return entries, np.stack([read_pgm(self.data_dir / e['file']).pixels for e in entries])

    def exists(self) -> bool:
        return self.pool_file.exists()


class RunDatabase(DatabaseManager):
    """Restoration, detector and report artifacts of one work directory."""

    def __init__(self, root: str):
        super().__init__(root)

    def restore_dir(self) -> Path:
        return self.data_dir / 'restore'

    def detector_dir(self, arm: str, class_id: int) -> Path:
        return self.data_dir / 'detectors' / arm / f'class_{class_id}'

    def report_dir(self, arm: str) -> Path:
        return self.data_dir / 'reports' / arm

    def save_rows(self, file_path: Path, fieldnames: Sequence[str], rows: Sequence[Dict[str, Any]]):
        self._write_csv(file_path, fieldnames, rows)

    def get_rows(self, file_path: Path) -> List[Dict[str, str]]:
        return self._read_csv(file_path)

    def save_document(self, file_path: Path, data: Any):
        self._write_json(file_path, data)

    def get_document(self, file_path: Path) -> Any:
        return self._read_json(file_path)

    def save_text(self, file_path: Path, text: str):
        file_path.parent.mkdir(parents=True, exist_ok=True)
        file_path.write_text(text, encoding='utf-8')
