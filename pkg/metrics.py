"""
Classification, image-fidelity and distributional metrics.

Undefined ratios are reported as NaN, never as 0.
"""

import logging
import math
from typing import Dict, List, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix, roc_auc_score, roc_curve
from sklearn.metrics.pairwise import polynomial_kernel
from skimage.measure import block_reduce
from skimage.metrics import structural_similarity, mean_squared_error

from exceptions import ShapeMismatch, SingleClass, TooSmall, TooFewSamples
from models import Confusion, ScoredSample, GrayImage
from utils import mean_std

logger = logging.getLogger(__name__)

UNDEFINED = float('nan')
SSIM_SIGMA = 1.5
SSIM_MIN_SIZE = 11
KID_BLOCK = 4


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator > 0 else UNDEFINED


def confusion_from_labels(labels: Sequence[int], predictions: Sequence[int]) -> Confusion:
    """Confusion counts with abnormal (1) as the positive class."""
    tn, fp, fn, tp = confusion_matrix(list(labels), list(predictions), labels=[0, 1]).ravel()
    return Confusion(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))


def classification_metrics(conf: Confusion) -> Dict[str, float]:
    """
    Accuracy, sensitivity, specificity, both precisions and F1.

    Args:
        conf: confusion counts

    Returns:
        Dictionary with keys acc, sen, spe, pre_ab, pre_n, f1; NaN where a
        denominator is zero
    """
    sen = _ratio(conf.tp, conf.tp + conf.fn)
    spe = _ratio(conf.tn, conf.tn + conf.fp)
    pre_ab = _ratio(conf.tp, conf.tp + conf.fp)
    pre_n = _ratio(conf.tn, conf.tn + conf.fn)
    acc = _ratio(conf.tp + conf.tn, conf.total)
    if math.isnan(sen) or math.isnan(pre_ab):
        f1 = UNDEFINED
    else:
        f1 = _ratio(2 * pre_ab * sen, pre_ab + sen)
        if math.isnan(f1):
            f1 = 0.0 if conf.tp == 0 else UNDEFINED
    return {'acc': acc, 'sen': sen, 'spe': spe, 'pre_ab': pre_ab, 'pre_n': pre_n, 'f1': f1}


def _scores_labels(samples: Sequence[ScoredSample]):
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([int(s.label) for s in samples])
    if len(set(labels.tolist())) < 2:
        raise SingleClass(f"AUC needs both labels, got {sorted(set(labels.tolist()))}")
    return scores, labels


def auc(samples: Sequence[ScoredSample]) -> float:
    """Mann-Whitney AUC; ties count one half."""
    scores, labels = _scores_labels(samples)
    return float(roc_auc_score(labels, scores))


def roc_points(samples: Sequence[ScoredSample]) -> np.ndarray:
    """(fpr, tpr) polyline of the ROC curve."""
    scores, labels = _scores_labels(samples)
    fpr, tpr, _ = roc_curve(labels, scores)
    return np.column_stack([fpr, tpr])


def _check_pair(a: GrayImage, b: GrayImage):
    if a.shape != b.shape:
        raise ShapeMismatch(f"images differ in shape: {a.shape} vs {b.shape}")


def psnr(a: GrayImage, b: GrayImage, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    _check_pair(a, b)
    mse = mean_squared_error(a.pixels, b.pixels)
    if mse == 0:
        return float('inf')
    return float(10.0 * np.log10(peak ** 2 / mse))


def ssim(a: GrayImage, b: GrayImage, peak: float = 1.0) -> float:
    """Mean SSIM over an 11x11 Gaussian window (sigma 1.5, K1 0.01, K2 0.03)."""
    _check_pair(a, b)
    if min(a.shape) < SSIM_MIN_SIZE:
        raise TooSmall(f"SSIM needs both dimensions >= {SSIM_MIN_SIZE}, got {a.shape}")
    return float(structural_similarity(
        a.pixels, b.pixels,
        data_range=peak,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=0.01,
        K2=0.03,
    ))


def kid_features(images: Sequence[GrayImage], block: int = KID_BLOCK) -> np.ndarray:
    """Flattened block-averaged pixels, one row per image."""
    return np.stack([block_reduce(image.pixels, (block, block), np.mean).ravel() for image in images])


def mmd_kid(x: np.ndarray, y: np.ndarray, degree: int = 3) -> float:
    """
    Unbiased MMD^2 with the polynomial kernel k(a, b) = (a.b / d + 1)^degree.

    Args:
        x: (m, d) features
        y: (n, d) features

    Raises:
        TooFewSamples: either set has fewer than 2 rows
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise TooFewSamples(f"MMD needs at least 2 samples per set, got {m} and {n}")
    if x.shape[1] != y.shape[1]:
        raise ShapeMismatch(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    gamma = 1.0 / x.shape[1]
    k_xx = polynomial_kernel(x, x, degree=degree, gamma=gamma, coef0=1)
    k_yy = polynomial_kernel(y, y, degree=degree, gamma=gamma, coef0=1)
    k_xy = polynomial_kernel(x, y, degree=degree, gamma=gamma, coef0=1)
    np.fill_diagonal(k_xx, 0.0)
    np.fill_diagonal(k_yy, 0.0)
    return float(k_xx.sum() / (m * (m - 1)) + k_yy.sum() / (n * (n - 1)) - 2.0 * k_xy.mean())


def aggregate(rows: List[Dict[str, float]], keys: Sequence[str]) -> Dict[str, Dict[str, float]]:
    """Unweighted mean and std of each key over per-class rows, NaN-aware."""
    return {key: mean_std(row[key] for row in rows) for key in keys}
