"""
Noise schedules for both modalities.

Numerical columns use a per-feature power-mean sigma(t); the token stream
uses an absorbing mask process whose survival probability is alpha_bar(t).
"""
from dataclasses import dataclass, field
import math
import logging

import numpy as np
import torch
from django.db import models

logger = logging.getLogger(__name__)

SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
DEFAULT_RHO = 7.0


class MaskScheduleKind(models.TextChoices):
    LINEAR = 'linear', 'Linear survival'
    COSINE = 'cosine', 'Cosine survival'


def _check_time(t):
    if isinstance(t, torch.Tensor):
        if torch.any(t < 0) or torch.any(t > 1):
            raise ValueError("t must lie in [0, 1]")
    elif not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")


def power_mean_sigma(t, rho, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX):
    """Power-mean interpolation between sigma_min and sigma_max.

    Works on python floats and on broadcastable tensors alike.
    """
    lo = sigma_min ** (1.0 / rho)
    hi = sigma_max ** (1.0 / rho)
    return (lo + t * (hi - lo)) ** rho


@dataclass(frozen=True)
class PowerMeanSchedule:
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    rho: tuple = (DEFAULT_RHO,)

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(
                f"Need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        rho = tuple(float(r) for r in self.rho)
        if any(not r > 0 for r in rho):
            raise ValueError(f"Every rho must be positive, got {rho}")
        object.__setattr__(self, 'rho', rho)

    @classmethod
    def uniform(cls, num_features, rho=DEFAULT_RHO, **kwargs):
        return cls(rho=(rho,) * num_features, **kwargs)

    @property
    def num_features(self):
        return len(self.rho)

    def sigma_at(self, t, feature_index):
        _check_time(t)
        if not 0 <= feature_index < self.num_features:
            raise ValueError(
                f"feature_index {feature_index} out of range for {self.num_features} features"
            )
        # closed-form endpoints
        if t == 0:
            return self.sigma_min
        if t == 1:
            return self.sigma_max
        return power_mean_sigma(t, self.rho[feature_index], self.sigma_min, self.sigma_max)

    def sigmas(self, t):
        """Per-feature noise levels for a batch of times: (B,) -> (B, M)."""
        rho = torch.tensor(self.rho, dtype=t.dtype, device=t.device)
        return power_mean_sigma(t[:, None], rho[None, :], self.sigma_min, self.sigma_max)


def sigma_at(t, feature_index, schedule):
    return schedule.sigma_at(t, feature_index)


@dataclass(frozen=True)
class MaskSchedule:
    kind: str = MaskScheduleKind.LINEAR

    def __post_init__(self):
        if self.kind not in MaskScheduleKind.values:
            raise ValueError(f"Unknown mask schedule '{self.kind}'")

    def alpha_bar(self, t):
        _check_time(t)
        if self.kind == MaskScheduleKind.LINEAR:
            return 1.0 - t
        if isinstance(t, torch.Tensor):
            out = torch.cos(0.5 * math.pi * t)
            return torch.where(t >= 1, torch.zeros_like(out), out)
        return 0.0 if t == 1 else math.cos(0.5 * math.pi * t)


def alpha_bar(t, schedule=None):
    return (schedule or MaskSchedule()).alpha_bar(t)


@dataclass(frozen=True)
class ChurnConfig:
    """EDM churn settings; s_churn = 0 gives the deterministic sampler."""
    s_churn: float = 0.0
    s_tmin: float = 0.0
    s_tmax: float = float('inf')
    s_noise: float = 1.0

    def __post_init__(self):
        if self.s_churn < 0 or self.s_noise <= 0 or self.s_tmin > self.s_tmax:
            raise ValueError(f"Invalid churn configuration {self}")

    def gamma(self, sigma, steps):
        if self.s_churn == 0 or not self.s_tmin <= sigma <= self.s_tmax:
            return 0.0
        return min(self.s_churn / steps, math.sqrt(2.0) - 1.0)


@dataclass(frozen=True)
class DiscretizedSchedule:
    """Reverse-time levels indexed by step t = 0..T.

    sigma_levels[t] is sigma_t (shape (T+1, M)) with sigma_0 = 0;
    churned_levels[t] is sigma_hat_t >= sigma_t.
    """
    steps: int
    sigma_levels: np.ndarray
    churned_levels: np.ndarray
    churn: ChurnConfig = field(default_factory=ChurnConfig)

    def sigma(self, t):
        return self.sigma_levels[t]

    def sigma_hat(self, t):
        return self.churned_levels[t]


def discretize(schedule, steps, churn_config=None):
    if not isinstance(steps, (int, np.integer)) or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps}")
    churn_config = churn_config or ChurnConfig()

    levels = np.zeros((steps + 1, schedule.num_features), dtype=np.float64)
    churned = np.zeros_like(levels)
    for t in range(1, steps + 1):
        for j in range(schedule.num_features):
            sigma = schedule.sigma_at(t / steps, j)
            levels[t, j] = sigma
            churned[t, j] = sigma * (1.0 + churn_config.gamma(sigma, steps))

    logger.debug(f"Discretized schedule with T={steps}, churn={churn_config.s_churn}")
    return DiscretizedSchedule(
        steps=steps, sigma_levels=levels, churned_levels=churned, churn=churn_config
    )


class PowerMeanNoise(torch.nn.Module):
    """Torch view of the power-mean schedule used during training.

    In learnable mode rho is trained through log(rho) so it stays positive.
    """

    def __init__(self, num_features, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX,
                 rho_init=DEFAULT_RHO, learnable=False):
        super().__init__()
        if not 0 < sigma_min < sigma_max:
            raise ValueError(f"Need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.learnable = learnable
        log_rho = torch.full((num_features,), math.log(rho_init))
        if learnable:
            self.log_rho = torch.nn.Parameter(log_rho)
        else:
            self.register_buffer('log_rho', log_rho)

    @property
    def num_features(self):
        return self.log_rho.shape[0]

    def forward(self, t):
        """(B,) times -> (B, M) noise levels."""
        rho = self.log_rho.exp().to(t.dtype)
        return power_mean_sigma(t[:, None], rho[None, :], self.sigma_min, self.sigma_max)

    def snapshot(self):
        return PowerMeanSchedule(
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
            rho=tuple(self.log_rho.detach().exp().double().tolist()),
        )
