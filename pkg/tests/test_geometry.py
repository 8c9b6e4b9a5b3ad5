import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from fluorocal.exceptions import DepthDegenerate
from fluorocal.geometry import (
    InteriorOrientation,
    Pose,
    Quaternion,
    apply_rotation_increment,
    look_at_pose,
    project,
    project_arrays,
    project_jacobian,
    quat_canonical,
    quat_conjugate,
    quat_from_matrix,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    quat_to_rotvec,
    rotation_local_jacobian,
)

finite = st.floats(-1.0, 1.0, allow_nan=False)
quats = st.tuples(finite, finite, finite, finite).filter(
    lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: quat_normalize(np.array(v)))


def scipy_matrix(q):
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


@given(quats)
def test_matrix_matches_scipy(q):
    assert np.allclose(quat_to_matrix(q), scipy_matrix(q), atol=1e-12)


@given(quats)
def test_matrix_roundtrip_up_to_sign(q):
    back = quat_from_matrix(quat_to_matrix(q))
    err = min(np.abs(back - q).max(), np.abs(back + q).max())
    assert err < 1e-9


@given(quats, quats)
def test_multiply_composes_rotations(a, b):
    assert np.allclose(quat_to_matrix(quat_multiply(a, b)),
                       quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)


@given(quats, st.tuples(finite, finite, finite))
def test_rotate_preserves_norm(q, v):
    v = np.array(v)
    assert np.isclose(np.linalg.norm(quat_rotate(q, v)), np.linalg.norm(v), atol=1e-12)


@given(quats)
def test_conjugate_inverts(q):
    assert np.allclose(quat_canonical(quat_multiply(q, quat_conjugate(q))), [1, 0, 0, 0],
                       atol=1e-12)


@given(st.tuples(finite, finite, finite))
def test_rotvec_roundtrip(v):
    v = np.array(v) * 3.0
    if np.linalg.norm(v) >= np.pi:
        return
    assert np.allclose(quat_to_rotvec(quat_from_rotvec(v)), v, atol=1e-10)
    ref = Rotation.from_rotvec(v).as_matrix()
    assert np.allclose(quat_to_matrix(quat_from_rotvec(v)), ref, atol=1e-12)


def test_canonical_sign():
    q = np.array([-0.5, 0.5, -0.5, 0.5])
    assert quat_canonical(q)[0] > 0


def oracle_project(iop, pose, P):
    u = scipy_matrix(pose.q.as_array()) @ (np.asarray(P) - pose.T)
    return np.array([iop[0] - iop[2] * u[0] / u[2], iop[1] - iop[2] * u[1] / u[2]])


def test_projection_matches_collinearity_oracle(rng):
    iop = np.array([510.0, 515.0, 3000.0])
    for _ in range(200):
        pose = look_at_pose(rng.normal(size=3) * 50 + [0, 0, 900], rng.normal(size=3) * 10,
                            rng.uniform(-0.5, 0.5))
        P = rng.uniform(-100, 100, 3)
        assert np.allclose(project(iop, None, pose, P), oracle_project(iop, pose, P),
                           atol=1e-9)


def test_look_at_target_hits_principal_point():
    iop = InteriorOrientation(511.5, 511.5, 3000.0)
    pose = look_at_pose([800.0, 100.0, 50.0], [1.0, 2.0, 3.0], roll=0.3)
    assert np.allclose(project(iop, None, pose, [1.0, 2.0, 3.0]), [511.5, 511.5], atol=1e-9)
    u3 = (pose.R @ (np.zeros(3) - pose.T))[2]
    assert u3 < 0


def test_additional_parameters_add():
    iop = InteriorOrientation(500.0, 500.0, 2000.0)
    pose = look_at_pose([0, 0, 1000.0], [0, 0, 0])
    P = [10.0, -5.0, 2.0]
    assert np.allclose(project(iop, [1.5, -2.0], pose, P) - project(iop, None, pose, P),
                       [1.5, -2.0])


def test_depth_degenerate():
    pose = Pose(np.zeros(3), Quaternion(1.0, 0.0, 0.0, 0.0))
    with pytest.raises(DepthDegenerate):
        project([0, 0, 1000.0], None, pose, [5.0, 5.0, 0.0])


def test_jacobian_small_central_differences(rng):
    iop = np.array([505.0, 517.0, 3050.0])
    pose = look_at_pose([0, 850.0, 40.0], [3, -2, 1], 0.2)
    P = np.array([40.0, -70.0, 20.0])
    J = project_jacobian(iop, None, pose, P)
    h = 1e-6
    q = pose.q.as_array()

    def f(iop_, T_, q_, P_):
        return project_arrays(iop_, np.zeros(2), T_, q_, P_)[0]

    for name, base in (("iop", iop), ("T", pose.T), ("q", q), ("P", P)):
        num = np.zeros((2, base.size))
        for j in range(base.size):
            e = np.zeros(base.size)
            e[j] = h
            args = {"iop": iop, "T": pose.T, "q": q, "P": P}
            args[name] = base + e
            hi = f(args["iop"], args["T"], args["q"], args["P"])
            args[name] = base - e
            lo = f(args["iop"], args["T"], args["q"], args["P"])
            num[:, j] = (hi - lo) / (2 * h)
        assert np.allclose(J[name], num, rtol=1e-5, atol=1e-6 * np.abs(num).max())


@given(quats)
@settings(max_examples=50)
def test_rotation_local_jacobian(q):
    G = rotation_local_jacobian(q)
    h = 1e-7
    for j in range(3):
        t = np.zeros(3)
        t[j] = h
        num = (apply_rotation_increment(q, t) - apply_rotation_increment(q, -t)) / (2 * h)
        assert np.allclose(G[:, j], num, atol=1e-6)
