"""
Utility functions for karyosim.
"""

import hashlib
import math
from pathlib import Path
from typing import Dict, Any, Iterable, Sequence

import numpy as np

from config import Config


def derive_seed(*keys: int) -> int:
    """
    Derive an independent 32-bit seed from a tuple of integers.

    Args:
        keys: run seed followed by any stream identifiers (class, split, index...)

    Returns:
        Seed usable with numpy.random.default_rng
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def sha256_file(path: Path) -> str:
    """Hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(65536), b''):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def format_metric(value: float, digits: int = 4) -> str:
    """
    Format a metric for CSV and console output.

    NaN is written as 'nan' and infinities as 'inf'/'-inf' so undefined values stay visible.
    """
    if value is None:
        return ''
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return 'nan'
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return f"{value:.{digits}f}"


def mean_std(values: Iterable[float]) -> Dict[str, float]:
    """Mean and population standard deviation ignoring NaN; NaN when nothing is defined."""
    array = np.asarray(list(values), dtype=np.float64)
    finite = array[~np.isnan(array)]
    if finite.size == 0:
        return {'mean': float('nan'), 'std': float('nan')}
    return {'mean': float(finite.mean()), 'std': float(finite.std())}


def sampling_epochs(epochs: int, warmup: int, interval: int) -> Sequence[int]:
    """Epochs 1..T at which adaptive sampling fires: epoch >= w and (epoch - w) % k == 0."""
    return [e for e in range(1, epochs + 1) if e >= warmup and (e - warmup) % interval == 0]


def get_application_info() -> Dict[str, Any]:
    """
    Get basic information about the application.

    Returns:
        Dictionary containing application information
    """
    return {
        "name": Config.APP_NAME,
        "version": Config.APP_VERSION,
        "description": "Perturb-and-restore simulation of structurally abnormal chromosomes "
                       "with energy-guided adaptive sampling",
    }
