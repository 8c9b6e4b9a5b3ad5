import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from conftest import small_scenario
from fluorocal.data import simulate_captures
from fluorocal.exceptions import IdMismatch
from fluorocal.geometry import Pose, Quaternion
from fluorocal.quality import (
    ErrorReport,
    evaluate_out_of_sample,
    improvement,
    object_space_report,
    pose_report,
    reprojection_report,
    residual_histogram,
    residual_scatter,
    rmse,
    rows_to_csv,
    rows_to_text,
    table_rows,
)
from fluorocal.robust_solver import ResidualRecords
from fluorocal.self_calibration import CalibrationResult, CalibrationRun


def make_records(res, cov=None):
    n = len(res)
    return ResidualRecords(
        np.array(["1"] * n), np.array([str(i) for i in range(n)]),
        np.array([f"T{i}" for i in range(n)]), np.zeros((n, 2)), np.zeros((n, 2)),
        np.asarray(res, dtype=float),
        np.broadcast_to(np.eye(2), (n, 2, 2)).copy() if cov is None else cov,
        np.zeros(n), np.ones(n, dtype=bool), np.zeros(n, dtype=bool), np.ones(n))


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 30), st.integers(1, 3)),
              elements=st.floats(-1e3, 1e3)))
def test_rmse_matches_direct_formula(a):
    expect = np.array([np.sqrt(sum(v * v for v in col) / len(col)) for col in a.T])
    assert np.allclose(rmse(a), expect, rtol=1e-12, atol=1e-300)


def test_rmse_rejects_bad_shapes():
    with pytest.raises(ValueError):
        rmse(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        rmse(np.zeros(3))


def test_improvement_sign_and_value():
    assert np.allclose(improvement([2.0, 1.0], [0.5, 1.5]), [75.0, -50.0])


def test_reprojection_cost_is_mahalanobis(rng):
    r = rng.normal(size=(20, 2))
    A = rng.normal(size=(20, 2, 2))
    cov = A @ A.transpose(0, 2, 1) + 0.5 * np.eye(2)
    rep = reprojection_report(make_records(r, cov))
    expect = sum(float(r[i] @ np.linalg.inv(cov[i]) @ r[i]) for i in range(20))
    assert rep.cost == pytest.approx(expect, rel=1e-10)
    assert np.allclose(rep.image_rmse, np.sqrt(np.mean(r**2, axis=0)))
    assert rep.counts["image"] == 20


def test_object_report_and_missing_truth():
    est = {"a": np.array([1.0, 2.0, 3.0]), "b": np.array([0.0, 0.0, 0.0])}
    truth = {"a": np.zeros(3), "b": np.array([1.0, 0.0, -1.0]), "c": np.ones(3)}
    rep = object_space_report(est, truth)
    assert np.allclose(rep.object_rmse, np.sqrt([1.0, 2.0, 5.0]))
    with pytest.raises(IdMismatch):
        object_space_report({"z": np.zeros(3)}, truth)


def test_pose_report_rotation_angle_matches_scipy(rng):
    est, truth, angles = {}, {}, []
    for i in range(6):
        rt = Rotation.random(random_state=i)
        delta = Rotation.from_rotvec(rng.normal(scale=0.05, size=3))
        re = delta * rt
        angles.append(delta.magnitude())
        xyzw = lambda r: np.roll(r.as_quat(), 1)  # noqa: E731
        key = ("1", str(i))
        truth[key] = Pose(np.zeros(3), Quaternion.from_array(xyzw(rt)))
        est[key] = Pose(np.array([1.0, -2.0, 0.5]), Quaternion.from_array(xyzw(re)))
    rep = pose_report(est, truth)
    assert np.allclose(rep.pose_rmse, [1.0, 2.0, 0.5])
    assert rep.rotation_rmse_deg == pytest.approx(
        np.degrees(np.sqrt(np.mean(np.square(angles)))), rel=1e-9)


def test_table_rows_improvement_relative_to_first():
    reps = [ErrorReport("Before", object_rmse=np.array([2.0, 4.0, 1.0])),
            ErrorReport("After", object_rmse=np.array([1.0, 1.0, 2.0]))]
    rows = table_rows(reps, "object")
    assert rows[0]["impr_X_pct"] == 0.0
    assert rows[1]["impr_X_pct"] == 50.0
    assert rows[1]["impr_Y_pct"] == 75.0
    assert rows[1]["impr_Z_pct"] == -100.0
    csv = rows_to_csv(rows)
    assert csv.splitlines()[0].startswith("label,rmse_X_mm,rmse_Y_mm,rmse_Z_mm")
    assert "After" in rows_to_text(rows, "object")
    with pytest.raises(ValueError):
        table_rows(reps, "volume")
    with pytest.raises(ValueError):
        table_rows([ErrorReport("x")], "image")


def test_histogram_counts_every_observation(rng):
    rec = make_records(rng.normal(size=(57, 2)) * 3)
    lines = residual_histogram(rec, bins=9, limit=2.0).splitlines()
    counts = np.array([[int(v) for v in ln.split(",")[2:]] for ln in lines[1:]])
    assert len(counts) == 9
    assert counts.sum(axis=0).tolist() == [57, 57]
    assert len(residual_scatter(rec).splitlines()) == 58


def test_out_of_sample_at_truth_is_exact():
    scn = small_scenario(field_scale=0.0, noise_sigma_px=0.0)
    sim = simulate_captures(scn)
    t = sim.truth
    roles = {p.id: p.role for p in sim.phantom}
    result = CalibrationResult(
        dict(t.iop), {}, {k: t.poses[k] for k in sim.train.frames}, {},
        dict(t.targets), {}, roles, {"1": None}, CalibrationRun("before", [], True, ""))
    rep = evaluate_out_of_sample(result, sim.test, t, sim.init_poses)
    assert rep.sample == "out_of_sample"
    assert np.all(rep.object_rmse < 1e-6)
    assert np.all(rep.pose_rmse < 1e-6)
    assert np.all(rep.image_rmse < 1e-6)
    with pytest.raises(ValueError):
        evaluate_out_of_sample(result, sim.test, t, sim.init_poses, resect_on="ties")
