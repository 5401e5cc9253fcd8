"""Shifted cosine schedule identities."""

import math

import numpy as np
import pytest

from varidiff.schedule import ScheduleConfig, log_snr_shift, sampling_times, schedule_at


def test_midpoint_no_shift():
    cfg = ScheduleConfig(image_resolution=32)
    sp = schedule_at(cfg, 0.5)
    assert abs(sp.log_snr) < 1e-9
    assert abs(sp.alpha - math.sqrt(0.5)) < 1e-9
    assert abs(sp.sigma - math.sqrt(0.5)) < 1e-9


def test_resolution_16_shift_is_2_ln_2():
    cfg = ScheduleConfig(image_resolution=16)
    assert abs(log_snr_shift(cfg) - 2.0 * math.log(2.0)) < 1e-9
    # at t = 0.5 the base cosine log-SNR is zero, so only the shift remains
    assert abs(schedule_at(cfg, 0.5).log_snr - 2.0 * math.log(2.0)) < 1e-9


@pytest.mark.parametrize("resolution", [8, 16, 32, 64])
def test_variance_preserving_on_grid(resolution):
    cfg = ScheduleConfig(image_resolution=resolution)
    ts = np.linspace(cfg.t_min_clip, cfg.t_max_clip, 1000)
    for t in ts:
        sp = schedule_at(cfg, float(t))
        assert abs(sp.alpha**2 + sp.sigma**2 - 1.0) < 1e-6


def test_log_snr_strictly_decreasing():
    cfg = ScheduleConfig(image_resolution=16)
    ts = np.linspace(cfg.t_min_clip, cfg.t_max_clip, 1000)
    vals = [schedule_at(cfg, float(t)).log_snr for t in ts]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_t_outside_clip_rejected():
    cfg = ScheduleConfig(image_resolution=16)
    with pytest.raises(ValueError):
        schedule_at(cfg, 0.0)
    with pytest.raises(ValueError):
        schedule_at(cfg, 1.0)


def test_snr_matches_alpha_sigma_ratio():
    cfg = ScheduleConfig(image_resolution=16)
    for t in (0.1, 0.4, 0.9):
        sp = schedule_at(cfg, t)
        assert abs(sp.snr - sp.alpha**2 / sp.sigma**2) < 1e-6 * sp.snr


def test_sampling_times_grid():
    cfg = ScheduleConfig(image_resolution=16)
    ts = sampling_times(cfg, 4)
    assert len(ts) == 5
    assert ts[0] == cfg.t_max_clip
    assert ts[-1] == cfg.t_min_clip
    assert ts[1] == 0.75 and ts[2] == 0.5
    assert all(a > b for a, b in zip(ts, ts[1:]))


def test_bad_configs_rejected():
    with pytest.raises(ValueError):
        ScheduleConfig(image_resolution=0)
    with pytest.raises(ValueError):
        ScheduleConfig(image_resolution=16, t_min_clip=0.5, t_max_clip=0.4)
