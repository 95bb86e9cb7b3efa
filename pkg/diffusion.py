"""
Mean-reverting SDE restoration of rearranged chromosomes.

The forward process pulls an original chromosome x toward its rearranged
counterpart s; a conditional noise predictor learns to run it backwards.
Intensities are in [0,1] units throughout.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Tuple, Dict, Any, Sequence, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters, clip_grad_norm_

from exceptions import InvalidParameter, ShapeMismatch, ZeroVariance, NonFiniteLoss
from models import GrayImage

logger = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
STATIONARY_TOLERANCE = 0.01


# ============================================================================
# SCHEDULE AND CLOSED-FORM LAWS
# ============================================================================

@dataclass
class NoiseSchedule:
    """Discretized coefficients; index 0 is the clean state and carries zeros."""
    steps: int
    sigma_max: float
    lam: float
    sigmas: np.ndarray
    thetas: np.ndarray
    thetas_cumsum: np.ndarray

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    def mean_factor(self, i) -> np.ndarray:
        """exp(-theta_bar_i)."""
        return np.exp(-self.thetas_cumsum[i])

    def variance(self, i) -> np.ndarray:
        """v_i = lam^2 (1 - exp(-2 theta_bar_i))."""
        return self.lam ** 2 * (1.0 - np.exp(-2.0 * self.thetas_cumsum[i]))


def schedule_new(steps: int, sigma_max: float, lam: float) -> NoiseSchedule:
    """
    Cosine volatility ramp with drift tied to the stationary deviation.

    Args:
        steps: number of discrete steps T
        sigma_max: largest volatility, reached at i = T
        lam: stationary standard deviation

    Returns:
        NoiseSchedule with theta_i = sigma_i^2 / (2 lam^2)
    """
    if steps < 2 or sigma_max <= 0 or lam <= 0:
        raise InvalidParameter(f"schedule needs steps >= 2, sigma_max > 0, lam > 0 "
                               f"(got {steps}, {sigma_max}, {lam})")
    ramp = np.sin(0.5 * math.pi * (np.arange(1, steps + 1) / steps + COSINE_OFFSET) / (1 + COSINE_OFFSET))
    sigmas = np.concatenate([[0.0], sigma_max * ramp / ramp.max()])
    thetas = sigmas ** 2 / (2.0 * lam ** 2)
    thetas_cumsum = np.cumsum(thetas) / steps
    schedule = NoiseSchedule(steps, sigma_max, lam, sigmas, thetas, thetas_cumsum)
    if schedule.mean_factor(steps) >= STATIONARY_TOLERANCE:
        logger.warning(f"Schedule does not reach stationarity: exp(-theta_bar_T) = "
                       f"{schedule.mean_factor(steps):.4f}")
    return schedule


def marginal(x0: np.ndarray, s: np.ndarray, i: int, schedule: NoiseSchedule) -> Tuple[np.ndarray, float]:
    """Mean image m_i and scalar variance v_i of p_i(x | x0, s)."""
    x0 = np.asarray(x0, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if x0.shape != s.shape:
        raise ShapeMismatch(f"x0 {x0.shape} and s {s.shape} differ")
    if not 0 <= i <= schedule.steps:
        raise InvalidParameter(f"step {i} outside [0, {schedule.steps}]")
    mean = s + (x0 - s) * schedule.mean_factor(i)
    return mean, float(schedule.variance(i))


def forward_sample(x0: np.ndarray, s: np.ndarray, i: int, schedule: NoiseSchedule,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw x_i = m_i + sqrt(v_i) eps_i; returns (x_i, eps_i)."""
    if i < 1:
        raise InvalidParameter(f"forward sampling needs i >= 1, got {i}")
    mean, variance = marginal(x0, s, i, schedule)
    noise = rng.standard_normal(mean.shape)
    return mean + math.sqrt(variance) * noise, noise


def exact_score(x: np.ndarray, mean: np.ndarray, variance: float) -> np.ndarray:
    """Gaussian score -(x - m) / v."""
    if variance <= 0:
        raise ZeroVariance(f"score undefined for variance {variance}")
    return -(np.asarray(x, dtype=np.float64) - mean) / variance


def reverse_step(x: np.ndarray, s: np.ndarray, score: np.ndarray, i: int, schedule: NoiseSchedule,
                 rng: Optional[np.random.Generator] = None, stochastic: bool = True) -> np.ndarray:
    """Euler-Maruyama step of the reverse-time SDE from i to i-1."""
    if not 1 <= i <= schedule.steps:
        raise InvalidParameter(f"reverse step {i} outside [1, {schedule.steps}]")
    dt = schedule.dt
    drift = schedule.thetas[i] * (s - x) - schedule.sigmas[i] ** 2 * score
    x_prev = x - drift * dt
    if stochastic:
        x_prev = x_prev + schedule.sigmas[i] * math.sqrt(dt) * rng.standard_normal(np.shape(x))
    return x_prev


# ============================================================================
# DENOISER
# ============================================================================

def timestep_embedding(steps: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps."""
    half = dim // 2
    frequencies = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    arguments = steps.to(torch.float64)[:, None] * frequencies[None, :]
    return torch.cat([torch.sin(arguments), torch.cos(arguments)], dim=1)


def _block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, padding=1), nn.SiLU())


class ConditionalUNet(nn.Module):
    """
    Three-level encoder-decoder predicting the noise of x_i given s and i.

    The two input channels are x_i - s (scaled by the stationary deviation)
    and s; the step embedding is added at the bottleneck.
    """

    def __init__(self, widths: Sequence[int] = (8, 16, 32), embedding_dim: int = 32, lam: float = 2 / 255):
        super().__init__()
        w0, w1, w2 = widths
        self.lam = lam
        self.embedding_dim = embedding_dim
        self.inc = _block(2, w0)
        self.down1 = nn.Sequential(nn.Conv2d(w0, w1, 3, stride=2, padding=1), nn.SiLU(), _block(w1, w1))
        self.down2 = nn.Sequential(nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.SiLU(), _block(w2, w2))
        self.down3 = nn.Sequential(nn.Conv2d(w2, w2, 3, stride=2, padding=1), nn.SiLU())
        self.time = nn.Sequential(nn.Linear(embedding_dim, w2), nn.SiLU(), nn.Linear(w2, w2))
        self.mid = _block(w2, w2)
        self.up3 = _block(w2 + w2, w2)
        self.up2 = _block(w2 + w1, w1)
        self.up1 = _block(w1 + w0, w0)
        self.out = nn.Conv2d(w0, 1, 3, padding=1)

    def forward(self, x: torch.Tensor, s: torch.Tensor, steps: torch.Tensor) -> torch.Tensor:
        h0 = self.inc(torch.stack([(x - s) / self.lam, s], dim=1))
        h1 = self.down1(h0)
        h2 = self.down2(h1)
        h3 = self.down3(h2)
        h3 = self.mid(h3 + self.time(timestep_embedding(steps, self.embedding_dim))[:, :, None, None])
        u = self.up3(torch.cat([F.interpolate(h3, scale_factor=2, mode='nearest'), h2], dim=1))
        u = self.up2(torch.cat([F.interpolate(u, scale_factor=2, mode='nearest'), h1], dim=1))
        u = self.up1(torch.cat([F.interpolate(u, scale_factor=2, mode='nearest'), h0], dim=1))
        return self.out(u)[:, 0]


@dataclass
class Denoiser:
    """Noise predictor eps_phi with its architecture descriptor."""
    architecture: Dict[str, Any]
    module: ConditionalUNet
    loss_trace: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.architecture['shape'])

    @property
    def parameters(self) -> np.ndarray:
        return parameters_to_vector(self.module.parameters()).detach().cpu().numpy().copy()

    def load_parameters(self, vector: np.ndarray):
        vector = torch.as_tensor(np.asarray(vector, dtype=np.float64))
        vector_to_parameters(vector, self.module.parameters())

    def predict(self, x: np.ndarray, s: np.ndarray, i) -> np.ndarray:
        """Predicted noise for one image (H, W) or a batch (B, H, W)."""
        single = np.ndim(x) == 2
        x_t = torch.as_tensor(np.atleast_3d(x) if not single else x[None], dtype=torch.float64)
        s_t = torch.as_tensor(np.atleast_3d(s) if not single else s[None], dtype=torch.float64)
        steps = torch.as_tensor(np.broadcast_to(np.asarray(i), (x_t.shape[0],)).copy(), dtype=torch.int64)
        with torch.no_grad():
            out = self.module(x_t, s_t, steps).numpy()
        return out[0] if single else out


def build_denoiser(shape: Tuple[int, int], schedule: NoiseSchedule, widths: Sequence[int] = (8, 16, 32),
                   embedding_dim: int = 32, seed: int = 0) -> Denoiser:
    """Create a freshly initialized denoiser; spatial sizes must be divisible by 8."""
    if shape[0] % 8 or shape[1] % 8:
        raise ShapeMismatch(f"denoiser shape {shape} must be divisible by 8")
    architecture = {
        'kind': 'conditional_unet',
        'shape': list(shape),
        'widths': list(widths),
        'embedding_dim': embedding_dim,
        'lam': schedule.lam,
        'sigma_max': schedule.sigma_max,
        'steps': schedule.steps,
    }
    return denoiser_from_architecture(architecture, seed)


def denoiser_from_architecture(architecture: Dict[str, Any], seed: int = 0) -> Denoiser:
    torch.manual_seed(seed)
    module = ConditionalUNet(architecture['widths'], architecture['embedding_dim'], architecture['lam']).double()
    return Denoiser(dict(architecture), module)


@dataclass
class TrainingPair:
    """Original chromosome x and its rearranged counterpart s."""
    x: GrayImage
    s: GrayImage

    def __post_init__(self):
        if self.x.shape != self.s.shape:
            raise ShapeMismatch(f"pair shapes differ: {self.x.shape} vs {self.s.shape}")


@dataclass
class TrainingConfig:
    """Score-matching optimization settings."""
    iterations: int = 5000
    batch_size: int = 8
    learning_rate: float = 0.05
    gammas: Optional[np.ndarray] = None
    norm: str = 'l1'
    optimizer: str = 'sgd'
    betas: Tuple[float, float] = (0.9, 0.99)
    clip_norm: float = 1.0
    decay_at: Optional[int] = None
    log_every: int = 500


def noise_loss(predicted: torch.Tensor, noise: torch.Tensor, weights: torch.Tensor, norm: str = 'l1') -> torch.Tensor:
    """Weighted batch mean of the per-sample L1 or L2 noise error."""
    difference = predicted - noise
    per_pixel = difference.abs() if norm == 'l1' else difference ** 2
    return (weights * per_pixel.flatten(1).mean(dim=1)).mean()


def _make_optimizer(module: nn.Module, config: TrainingConfig) -> torch.optim.Optimizer:
    if config.optimizer == 'adam':
        return torch.optim.Adam(module.parameters(), lr=config.learning_rate, betas=tuple(config.betas))
    if config.optimizer == 'sgd':
        return torch.optim.SGD(module.parameters(), lr=config.learning_rate, momentum=0.0)
    raise InvalidParameter(f"unknown optimizer '{config.optimizer}'")


def train_denoiser(pairs: Sequence[TrainingPair], schedule: NoiseSchedule, config: TrainingConfig,
                   seed: int = 0, denoiser: Denoiser = None, widths: Sequence[int] = (8, 16, 32)) -> Denoiser:
    """
    Fit eps_phi by stochastic gradient descent on the weighted noise objective.

    Steps are drawn uniformly from 1..T per batch element; the loss trace is
    stored on the returned denoiser.

    Raises:
        ShapeMismatch: pairs of different shapes
        NonFiniteLoss: the loss became NaN or infinite
    """
    if not pairs:
        raise InvalidParameter("training needs at least one pair")
    shapes = {p.x.shape for p in pairs}
    if len(shapes) > 1:
        raise ShapeMismatch(f"all pairs must share one shape, got {sorted(shapes)}")
    if config.norm not in ('l1', 'l2'):
        raise InvalidParameter(f"unknown norm '{config.norm}'")
    shape = shapes.pop()
    rng = np.random.default_rng(seed)
    if denoiser is None:
        denoiser = build_denoiser(shape, schedule, widths, seed=seed)
    elif denoiser.shape != shape:
        raise ShapeMismatch(f"denoiser shape {denoiser.shape} differs from pair shape {shape}")
    gammas = np.ones(schedule.steps + 1) if config.gammas is None else np.asarray(config.gammas, dtype=np.float64)

    originals = np.stack([p.x.pixels for p in pairs])
    references = np.stack([p.s.pixels for p in pairs])
    module = denoiser.module
    module.train()
    optimizer = _make_optimizer(module, config)
    milestones = [config.decay_at] if config.decay_at else []
    lr_schedule = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=milestones, gamma=0.1)

    trace = []
    for iteration in range(1, config.iterations + 1):
        index = rng.integers(0, len(pairs), size=config.batch_size)
        steps = rng.integers(1, schedule.steps + 1, size=config.batch_size)
        noise = rng.standard_normal((config.batch_size,) + shape)
        x0, s = originals[index], references[index]
        factor = schedule.mean_factor(steps)[:, None, None]
        std = np.sqrt(schedule.variance(steps))[:, None, None]
        x_t = s + (x0 - s) * factor + std * noise

        predicted = module(torch.from_numpy(x_t), torch.from_numpy(s), torch.from_numpy(steps))
        loss = noise_loss(predicted, torch.from_numpy(noise), torch.from_numpy(gammas[steps]), config.norm)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"loss {loss.item()} at iteration {iteration} (steps {steps.tolist()})")
        optimizer.zero_grad()
        loss.backward()
        if config.clip_norm:
            clip_grad_norm_(module.parameters(), config.clip_norm)
        optimizer.step()
        lr_schedule.step()
        trace.append((iteration, float(loss.item())))
        if config.log_every and iteration % config.log_every == 0:
            logger.info(f"Denoiser iteration {iteration}/{config.iterations}: "
                        f"loss {np.mean([t[1] for t in trace[-config.log_every:]]):.4f}")

    module.eval()
    denoiser.loss_trace.extend(trace)
    return denoiser


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average."""
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(values)))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode='valid')


# ============================================================================
# RESTORATION
# ============================================================================

def restore_batch(references: Sequence[GrayImage], denoiser: Denoiser, schedule: NoiseSchedule,
                  rng: np.random.Generator, stochastic: bool = True) -> List[GrayImage]:
    """Run the learned reverse SDE from s' + lam z for a batch of rearranged images."""
    for image in references:
        if image.shape != denoiser.shape:
            raise ShapeMismatch(f"image {image.shape} does not match denoiser {denoiser.shape}")
    s = np.stack([image.pixels for image in references])
    x = s + schedule.lam * rng.standard_normal(s.shape)
    for i in range(schedule.steps, 0, -1):
        noise = denoiser.predict(x, s, i)
        score = -noise / math.sqrt(schedule.variance(i))
        x = reverse_step(x, s, score, i, schedule, rng, stochastic)
    return [GrayImage.clipped(restored) for restored in x]


def restore(s_prime: GrayImage, denoiser: Denoiser, schedule: NoiseSchedule,
            rng: np.random.Generator, stochastic: bool = True) -> GrayImage:
    """Restore one perturbed chromosome."""
    return restore_batch([s_prime], denoiser, schedule, rng, stochastic)[0]
