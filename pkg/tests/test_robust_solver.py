import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import small_scenario
from fluorocal.data import simulate_captures
from fluorocal.exceptions import NonPositiveVariance, SingularNormalMatrix
from fluorocal.geometry import Pose
from fluorocal.robust_solver import (
    ParameterVector,
    ResidualRecords,
    SolverConfig,
    _objective,
    bundle_adjust,
    classify_inliers,
    intersect_points,
    resect_pose,
    student_t_nll,
)
from fluorocal.self_calibration import initial_parameters


@pytest.fixture(scope="module")
def clean():
    scn = small_scenario(field_scale=0.0, noise_sigma_px=0.0)
    sim = simulate_captures(scn)
    return scn, sim


def truth_params(scn, sim, free_ties=True):
    t = sim.truth
    ties = [p.id for p in sim.phantom if p.role == "tie"] if free_ties else None
    pts = {k: v for k, v in t.targets.items() if k in set(sim.train.target_id)}
    return ParameterVector.build({"1": t.iop["1"]},
                                 {k: t.poses[k] for k in sim.train.frames}, pts,
                                 free_points=ties)


def test_nll_matches_scipy_multivariate_t():
    rng = np.random.default_rng(0)
    for nu in (1.0, 4.0, 30.0):
        for d in (1, 2, 3):
            A = rng.normal(size=(d, d))
            C = A @ A.T + d * np.eye(d)
            r = rng.normal(size=d) * 2
            ref = -stats.multivariate_t(loc=np.zeros(d), shape=C, df=nu).logpdf(r)
            assert student_t_nll(r, C, nu) == pytest.approx(ref, rel=1e-10)


def test_nll_rows_sum_independent_terms():
    rng = np.random.default_rng(1)
    r = rng.normal(size=(7, 2))
    var = rng.uniform(0.5, 2.0, size=(7, 2))
    total = sum(-stats.multivariate_t(loc=np.zeros(2), shape=np.diag(v), df=4.0).logpdf(x)
                for x, v in zip(r, var))
    assert student_t_nll(r, var, 4.0) == pytest.approx(total, rel=1e-10)


def test_nll_gaussian_limit():
    r = np.array([0.7, -1.2])
    C = np.diag([1.5, 0.8])
    gauss = -stats.multivariate_normal(np.zeros(2), C).logpdf(r)
    assert student_t_nll(r, C, 1e12) == pytest.approx(gauss, rel=1e-10)


def test_nll_rejects_bad_variance():
    with pytest.raises(NonPositiveVariance):
        student_t_nll([1.0, 2.0], [1.0, 0.0], 4.0)
    with pytest.raises(ValueError):
        student_t_nll([1.0], [1.0], 0.0)


@given(st.floats(0.5, 100.0), st.floats(0.0, 50.0))
def test_irls_weight_is_cost_slope(nu, q):
    # dF/dQ = w / 2 for the per-point Student-t cost
    r = np.array([[np.sqrt(q), 0.0]])
    _, _, w = _objective(r, np.array([1.0]), nu)
    h = 1e-6 * max(q, 1.0)
    Fp = 0.5 * (nu + 2) * np.log1p((q + h) / nu)
    Fm = 0.5 * (nu + 2) * np.log1p(max(q - h, 0.0) / nu)
    slope = (Fp - Fm) / (h + min(h, q))
    assert w[0] == pytest.approx(2 * slope, rel=1e-5)


def test_at_truth_stays_put(clean):
    scn, sim = clean
    p0 = truth_params(scn, sim)
    res = bundle_adjust(sim.train, None, p0, SolverConfig())
    assert res.iterations <= 2
    assert res.F < 1e-12
    assert np.abs(res.params.P - p0.P).max() < 1e-9
    assert np.abs(res.params.iop - p0.iop).max() < 1e-9


def test_recovers_truth_from_perturbed_start(clean):
    scn, sim = clean
    init = initial_parameters(sim.train, sim.init_poses, scn.nominal_iop, sim.phantom)
    res = bundle_adjust(sim.train, None, init, SolverConfig())
    truth = truth_params(scn, sim)
    assert np.abs(res.params.iop - truth.iop).max() < 1e-6
    assert np.abs(res.params.T - truth.T).max() < 1e-6
    assert np.abs(res.params.P - truth.P).max() < 1e-6
    F = [row[1] for row in res.trace]
    assert all(b <= a for a, b in zip(F, F[1:]))


def test_datum_deficiency_is_named(clean):
    scn, sim = clean
    p = truth_params(scn, sim)
    p = p.with_flags(point_free=True)
    with pytest.raises(SingularNormalMatrix, match="control"):
        bundle_adjust(sim.train, None, p, SolverConfig())


def test_gross_error_is_flagged_and_downweighted(clean):
    scn, sim = clean
    obs = sim.train.with_xy(sim.train.xy.copy())
    obs.xy[5] += [25.0, -25.0]
    rng = np.random.default_rng(2)
    obs.xy[:] += rng.normal(0, 0.3, obs.xy.shape)
    p0 = truth_params(scn, sim)
    robust = bundle_adjust(obs, None, p0, SolverConfig(nu=4.0))
    gauss = bundle_adjust(obs, None, p0, SolverConfig(nu=1e6))
    assert not robust.records.inlier[5]
    assert robust.records.inlier.mean() > 0.97
    assert robust.records.weight[5] < 0.05
    err_r = np.abs(robust.params.P - p0.P).max()
    err_g = np.abs(gauss.params.P - p0.P).max()
    assert err_r < err_g


def test_covariance_blocks_are_psd(clean):
    scn, sim = clean
    obs = sim.train.with_xy(sim.train.xy + np.random.default_rng(3).normal(
        0, 0.3, sim.train.xy.shape))
    res = bundle_adjust(obs, None, truth_params(scn, sim), SolverConfig())
    C = res.covariance.camera
    assert np.allclose(C, C.T)
    assert np.linalg.eigvalsh(C).min() > 0
    assert np.all(np.linalg.eigvalsh(res.covariance.points) > 0)
    assert np.all(res.records.cov[:, 0, 0] > 0)
    assert all(v[2] > 0 for v in res.sigma_iop().values())


def _records(n=200):
    rng = np.random.default_rng(4)
    norm = rng.standard_t(3, size=(n, 2))
    ids = np.array(["1"] * n, dtype=object)
    return ResidualRecords(ids, ids, ids, np.zeros((n, 2)), np.zeros((n, 2)), norm,
                           np.broadcast_to(np.eye(2), (n, 2, 2)), norm,
                           np.ones(n, bool), np.zeros(n, bool), np.ones(n))


RECORDS = _records()


@given(st.floats(0.5, 5.0), st.floats(0.5, 5.0))
@settings(max_examples=30)
def test_inlier_gate_monotone(t1, t2):
    lo, hi = sorted((t1, t2))
    a = classify_inliers(RECORDS, lo).inlier
    b = classify_inliers(RECORDS, hi).inlier
    assert np.all(b[a])
    assert np.array_equal(a, np.abs(RECORDS.normalized).max(axis=1) <= lo)


def test_resection_and_intersection(clean):
    scn, sim = clean
    t = sim.truth
    key = sim.test.frames[0]
    fobs = sim.test.select_frames([key])
    pose, cov = resect_pose(t.iop["1"], None, fobs, t.targets, sim.init_poses[key])
    assert np.abs(pose.T - t.poses[key].T).max() < 1e-6
    assert np.allclose(cov, cov.T) and np.linalg.eigvalsh(cov).min() > 0
    keys = sim.test.frames[:4]
    sub = sim.test.select_frames(keys)
    start = {k: v + 2.0 for k, v in t.targets.items()}
    pts, res = intersect_points(t.iop, {k: t.poses[k] for k in keys}, None, sub, start)
    counts = {}
    for tid in sub.target_id:
        counts[tid] = counts.get(tid, 0) + 1
    for tid, n in counts.items():
        if n >= 2:
            assert np.abs(pts[tid] - t.targets[tid]).max() < 1e-6
        else:
            assert np.array_equal(pts[tid], start[tid])


def test_iteration_cap_reported(clean):
    scn, sim = clean
    init = initial_parameters(sim.train, sim.init_poses, scn.nominal_iop, sim.phantom)
    res = bundle_adjust(sim.train, None, init, SolverConfig(max_iter=1))
    assert res.reason == "max_iter"


def test_pose_type():
    assert isinstance(Pose([0, 0, 1.0]), Pose)
