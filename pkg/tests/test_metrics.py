import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajsim.detectability import DetectabilityMap
from trajsim.metrics import (
    EvalReport,
    MetricError,
    StepRecord,
    accumulated_detectability,
    angular_distance_error,
    annulus_masks,
    detectability_degradation,
    metal_exclusion,
    step_records,
    streak_index,
    trajectory_distance,
    volume_rmse,
)
from trajsim.phantom import build_sphere_phantom
from trajsim.planner import PlannerError, Trajectory
from trajsim.recon import ReconVolume, ground_truth_volume

thetas = st.sampled_from([float(t) for t in range(65, 120, 5)])


def test_angular_error_examples():
    assert angular_distance_error(90, 100) == 10.0
    assert angular_distance_error(115, 65) == 50.0


@given(thetas, thetas, thetas)
def test_angular_error_metric(a, b, c):
    assert angular_distance_error(a, b) == angular_distance_error(b, a)
    assert angular_distance_error(a, c) <= angular_distance_error(a, b) + angular_distance_error(b, c)


def test_degradation_examples():
    assert detectability_degradation(5.0, 5.0) == 0.0
    assert detectability_degradation(3.0, 4.0) == 25.0
    with pytest.raises(MetricError):
        detectability_degradation(1.0, 0.0)


@given(st.lists(st.floats(0.1, 100.0), min_size=11, max_size=11), st.integers(0, 10))
def test_degradation_zero_iff_argmax(vals, pick):
    best = max(vals)
    d = detectability_degradation(vals[pick], best)
    assert (d == 0.0) == (vals[pick] == best)
    assert d >= 0


def _traj(ths):
    return Trajectory([(5.0 * k, t) for k, t in enumerate(ths)], slew_limit_deg=None)


def test_trajectory_distance():
    a = _traj([90, 95, 100])
    b = _traj([90, 90, 90])
    assert trajectory_distance(a, b) == pytest.approx(5.0)
    assert trajectory_distance(a, a) == 0.0
    with pytest.raises(PlannerError):
        trajectory_distance(a, _traj([90]))


@given(st.lists(st.tuples(thetas, thetas, thetas), min_size=1, max_size=8))
def test_trajectory_distance_metric(rows):
    a, b, c = (_traj([r[i] for r in rows]) for i in range(3))
    assert trajectory_distance(a, b) == trajectory_distance(b, a)
    assert trajectory_distance(a, c) <= trajectory_distance(a, b) + trajectory_distance(b, c) + 1e-12


def _map():
    phis = np.arange(0.0, 30.0, 5.0)
    ths = np.arange(65.0, 120.0, 5.0)
    d2 = np.add.outer(phis, ths)
    return DetectabilityMap(phis, ths, d2)


def test_accumulated_detectability():
    m = _map()
    t = _traj([90, 95, 100])
    assert accumulated_detectability(m, t) == (0 + 90) + (5 + 95) + (10 + 100)


def test_accumulated_is_additive():
    m = _map()
    head = Trajectory([(0, 90), (5, 95)])
    tail = Trajectory([(10, 100), (15, 95)])
    whole = Trajectory(head.views + tail.views)
    assert accumulated_detectability(m, whole) == accumulated_detectability(m, head) + accumulated_detectability(m, tail)


def test_accumulated_off_grid():
    m = _map()
    t = Trajectory([(2.5, 92.5)])
    with pytest.raises(MetricError):
        accumulated_detectability(m, t)
    assert accumulated_detectability(m, t, interpolate=True) == pytest.approx(95.0)


def test_truth_scores_zero(chest1):
    geom = ReconVolume.centered(32, 6.0)
    truth = ground_truth_volume(chest1, geom)
    assert streak_index(truth, chest1, truth) == 0.0
    assert volume_rmse(truth, chest1, truth) == 0.0


def test_noise_raises_streak_and_rmse(chest1):
    geom = ReconVolume.centered(32, 6.0)
    truth = ground_truth_volume(chest1, geom)
    noisy = truth.like(truth.values + np.random.default_rng(0).normal(0, 0.01, geom.dims))
    assert streak_index(noisy, chest1, truth) > 0
    assert volume_rmse(noisy, chest1, truth) == pytest.approx(0.01, rel=0.1)


def test_metal_masks(chest1):
    geom = ReconVolume.centered(32, 6.0)
    excl = metal_exclusion(chest1, geom)
    for prim in chest1.metal:
        idx = tuple(int((c - o) // geom.voxel_mm) for c, o in zip(prim.center_mm, geom.origin_mm))
        assert excl[idx]
    for m in annulus_masks(chest1, geom):
        assert m.any() and not (m & excl).any()


def test_grid_mismatch_rejected(chest1):
    a = ReconVolume.centered(8, 6.0)
    b = ReconVolume.centered(8, 5.0)
    with pytest.raises(MetricError):
        volume_rmse(a, chest1, b)
    with pytest.raises(MetricError):
        streak_index(a, chest1, b)


def test_rmse_without_metal():
    ph = build_sphere_phantom()
    geom = ReconVolume.centered(8, 10.0)
    truth = ground_truth_volume(ph, geom)
    assert volume_rmse(geom.like(truth.values + 0.5), ph, truth) == pytest.approx(0.5)


def test_report_rejects_impossible_record():
    with pytest.raises(MetricError):
        EvalReport([StepRecord(0, 90, 95, 2.0, 1.0)])


def test_report_aggregates_and_files(tmp_path):
    recs = [StepRecord(0, 90, 95, 3.0, 4.0), StepRecord(5, 95, 95, 4.0, 4.0)]
    rep = EvalReport(recs, {400000: (1.0, 0.5), 100000: (0.5, 0.2)})
    agg = rep.aggregates()
    assert agg["angular_error_mean"] == 2.5 and agg["degradation_mean"] == 12.5 and agg["n_steps"] == 2
    rep.write_csv(tmp_path / "r.csv")
    head = (tmp_path / "r.csv").read_text().splitlines()[0].split(",")
    assert head[:5] == ["phi", "theta_pred", "theta_opt", "d2_pred", "d2_opt"]
    text = rep.summary()
    assert "i0=100000" in text and "smaller than at higher fluence" in text
    assert "8.35" in text
    assert EvalReport().aggregates() == {}


def test_step_records_self_eval_is_perfect():
    vals = [np.arange(11.0), np.arange(11.0)[::-1]]
    t = Trajectory([(0, 90), (5, 95)])
    recs = step_records(t, vals, vals)
    assert all(r.angular_error == 0 and r.degradation == 0 for r in recs)
    wrong = step_records(t, [vals[1], vals[0]], vals)
    assert wrong[0].theta_pred == 65.0 and wrong[0].theta_opt == 115.0
    assert wrong[0].degradation == 100.0
