"""Variance-preserving cosine noise schedule with a resolution shift.

The base schedule is alpha = cos(pi t / 2), sigma = sin(pi t / 2). Its
log-SNR is shifted by 2 ln(base_resolution / image_resolution) so that
the noise level is calibrated for a reference resolution of 32, and
alpha/sigma are recovered from the shifted log-SNR under the constraint
alpha^2 + sigma^2 = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScheduleConfig:
    image_resolution: int
    base_resolution: int = 32
    t_min_clip: float = 1e-4
    t_max_clip: float = 1.0 - 1e-4

    def __post_init__(self):
        if self.base_resolution <= 0 or self.image_resolution <= 0:
            raise ValueError("resolutions must be positive")
        if not (0.0 < self.t_min_clip < self.t_max_clip < 1.0):
            raise ValueError("need 0 < t_min_clip < t_max_clip < 1")


@dataclass(frozen=True)
class SchedulePoint:
    t: float
    alpha: float
    sigma: float
    log_snr: float

    @property
    def snr(self):
        return math.exp(self.log_snr)


def log_snr_shift(cfg: ScheduleConfig) -> float:
    """The constant added to the base cosine log-SNR for this resolution."""
    return 2.0 * math.log(cfg.base_resolution / cfg.image_resolution)


def schedule_at(cfg: ScheduleConfig, t: float) -> SchedulePoint:
    """Evaluate the shifted cosine schedule at time t in [t_min_clip, t_max_clip]."""
    if not (cfg.t_min_clip <= t <= cfg.t_max_clip):
        raise ValueError(f"t={t} outside clipped range [{cfg.t_min_clip}, {cfg.t_max_clip}]")
    # base cosine: log SNR = 2 ln(cos / sin) = -2 ln tan(pi t / 2)
    log_snr = -2.0 * math.log(math.tan(math.pi * t / 2.0)) + log_snr_shift(cfg)
    # recover alpha, sigma from log SNR under alpha^2 + sigma^2 = 1:
    # alpha^2 = sigmoid(log_snr), sigma^2 = sigmoid(-log_snr)
    alpha = math.sqrt(_sigmoid(log_snr))
    sigma = math.sqrt(_sigmoid(-log_snr))
    return SchedulePoint(t=t, alpha=alpha, sigma=sigma, log_snr=log_snr)


def sampling_times(cfg: ScheduleConfig, num_steps: int) -> list[float]:
    """Uniform time grid 1, 1-1/N, ..., 0 clamped into the clipped range."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    ts = [1.0 - i / num_steps for i in range(num_steps + 1)]
    return [min(max(t, cfg.t_min_clip), cfg.t_max_clip) for t in ts]


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)
