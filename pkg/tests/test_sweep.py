import pytest

from slimsched.config import ExperimentConfig
from slimsched.sweep import SweepPoint, knee_ratio, measure_point, run_sweep


@pytest.fixture(scope="module")
def fast_sweep():
    cfg = ExperimentConfig()
    s = cfg.sweep
    return run_sweep(cfg.build_cluster(), 0, s.batch_grid, s.think_time, s.horizon, s.warmup,
                     cfg.seed)


def test_grid_is_complete(fast_sweep):
    cfg = ExperimentConfig()
    assert len(fast_sweep) == len(cfg.knobs.widths) * len(cfg.sweep.batch_grid)


def test_utilization_rises_with_offered_load(fast_sweep):
    for w in (0.25, 0.5, 0.75, 1.0):
        us = [p.utilization for p in fast_sweep if p.width == w]
        assert all(a <= b + 1e-12 for a, b in zip(us, us[1:]))


def test_latency_non_decreasing_in_utilization(fast_sweep):
    for w in (0.25, 0.5, 0.75, 1.0):
        pts = sorted((p for p in fast_sweep if p.width == w),
                     key=lambda p: (p.utilization, p.batch))
        lat = [p.mean_latency for p in pts]
        assert all(a <= b for a, b in zip(lat, lat[1:]))


def test_power_tracks_utilization(fast_sweep):
    # power follows the sampled sliding-window utilization, so only roughly the busy fraction
    for p in fast_sweep:
        assert p.mean_power == pytest.approx(60.0 + 190.0 * p.utilization, rel=0.02)


def test_single_client_latency_is_pure_service():
    cfg = ExperimentConfig()
    p = measure_point(cfg.build_cluster(), 0, 3, 1, 0.05, 6.0, 2.0, 0)
    svc = sum(0.002 + 0.001 * c for c in (1.0, 1.5, 2.0, 1.0))
    # a lone client only waits on cold loads after idle unloading
    assert svc - 1e-9 <= p.mean_latency < svc + 0.01


def test_knee_ratio_uses_region_means():
    pts = [SweepPoint(0.5, 1, 0.2, 1.0, 0, 1), SweepPoint(0.5, 2, 0.6, 3.0, 0, 1),
           SweepPoint(0.5, 4, 0.96, 8.0, 0, 1), SweepPoint(0.5, 8, 1.0, 12.0, 0, 1)]
    assert knee_ratio(pts, 0.5) == pytest.approx(10.0 / 2.0)
    with pytest.raises(ValueError):
        knee_ratio(pts[:2], 0.5)


def test_bad_device_index():
    cfg = ExperimentConfig()
    with pytest.raises(ValueError):
        run_sweep(cfg.build_cluster(), 5, [1], 0.05, 3.0, 1.0, 0)
