"""Quaternion algebra and the collinearity projection.

Conventions used throughout the package:

* quaternions are stored ``[w, x, y, z]``;
* a pose ``(T, q)`` maps an object point ``P`` into the sensor frame as
  ``u = q (P - T) q^c``;
* image coordinates follow ``x = x_p + dx - c * u1 / u3`` and
  ``y = y_p + dy - c * u2 / u3`` where ``(dx, dy)`` is the additional
  (distortion) correction at that location.

All batch functions broadcast over leading axes, so the solver can evaluate
thousands of observations without Python loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DepthDegenerate

EPS_DEPTH = 1e-9


# ---------------------------------------------------------------------------
# quaternion helpers (array level)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-300):
        raise ValueError("cannot normalize a zero quaternion")
    # leave unit quaternions bit-for-bit alone so file round trips are exact
    norm = np.where(np.abs(norm - 1.0) <= 4 * np.finfo(float).eps, 1.0, norm)
    return q / norm


def quat_canonical(q):
    """Normalize and flip sign so that ``w >= 0``."""
    q = quat_normalize(q)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a, b):
    """Hamilton product ``a * b`` (broadcasting)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_from_rotvec(rotvec):
    """Exponential map from a rotation vector (radians) to a unit quaternion."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(half)/angle -> 1/2 as angle -> 0
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    scale = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), scale * rotvec], axis=-1)


def quat_to_rotvec(q):
    q = quat_canonical(q)
    vec = q[..., 1:]
    s = np.linalg.norm(vec, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-12
    safe = np.where(small, 1.0, s)
    return np.where(small, 2.0 * vec, vec * angle / safe)


def quat_to_matrix(q):
    """Rotation matrix ``R`` with ``R @ v == q v q^c`` for unit ``q``."""
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def quat_from_matrix(R):
    """Inverse of :func:`quat_to_matrix` for a single proper rotation."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
             (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
             (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
             (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_canonical(np.array(q))


def _sandwich(q, v):
    # q v q^c expanded; valid for non-unit q too (scales by |q|^2)
    w = q[..., :1]
    qv = q[..., 1:]
    return ((w * w - np.sum(qv * qv, axis=-1, keepdims=True)) * v
            + 2.0 * np.sum(qv * v, axis=-1, keepdims=True) * qv
            + 2.0 * w * np.cross(qv, v))


def quat_rotate(q, v):
    """Rotate vector(s) ``v`` by unit quaternion(s) ``q``: ``q v q^c``."""
    if isinstance(q, Quaternion):
        q = q.as_array()
    return _sandwich(np.asarray(q, dtype=float), np.asarray(v, dtype=float))


def _sandwich_jacobian(q, d):
    """d(q d q^c)/dq on the 4-parameter ambient representation, (..., 3, 4)."""
    w = q[..., 0]
    qv = q[..., 1:]
    dw = 2.0 * w[..., None] * d + 2.0 * np.cross(qv, d)
    vd = np.sum(qv * d, axis=-1)
    eye = np.eye(3)
    dx, dy, dz = np.moveaxis(d, -1, 0)
    zero = np.zeros_like(dx)
    skew_d = np.stack([zero, -dz, dy, dz, zero, -dx, -dy, dx, zero],
                      axis=-1).reshape(d.shape[:-1] + (3, 3))
    dv = (-2.0 * d[..., :, None] * qv[..., None, :]
          + 2.0 * qv[..., :, None] * d[..., None, :]
          + 2.0 * vd[..., None, None] * eye
          - 2.0 * w[..., None, None] * skew_d)
    return np.concatenate([dw[..., :, None], dv], axis=-1)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Quaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        w, x, y, z = (float(v) for v in quat_canonical(q))
        return cls(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def normalized(self) -> "Quaternion":
        return Quaternion.from_array(self.as_array())


@dataclass(frozen=True)
class Pose:
    """Exterior orientation of one exposure (translation in mm)."""

    T: np.ndarray
    q: Quaternion = field(default_factory=Quaternion)

    def __post_init__(self):
        object.__setattr__(self, "T", np.asarray(self.T, dtype=float).reshape(3))
        if not isinstance(self.q, Quaternion):
            object.__setattr__(self, "q", Quaternion.from_array(self.q))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q.as_array())


@dataclass(frozen=True)
class InteriorOrientation:
    x_p: float = 0.0
    y_p: float = 0.0
    c: float = 1.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"principal distance must be positive, got {self.c}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_p, self.y_p, self.c])


@dataclass(frozen=True)
class ObjectPoint:
    id: str
    P: np.ndarray
    role: str = "tie"

    def __post_init__(self):
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float).reshape(3))
        if self.role not in ("control", "tie"):
            raise ValueError(f"role must be 'control' or 'tie', got {self.role!r}")


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def _as_arrays(iop, ap, pose, P):
    if isinstance(iop, InteriorOrientation):
        iop = iop.as_array()
    if isinstance(pose, Pose):
        T, q = pose.T, pose.q.as_array()
    else:
        T, q = pose
    if isinstance(q, Quaternion):
        q = q.as_array()
    ap = np.zeros(2) if ap is None else np.asarray(ap, dtype=float)
    return (np.asarray(iop, dtype=float), ap, np.asarray(T, dtype=float),
            np.asarray(q, dtype=float), np.asarray(P, dtype=float))


def _check_depth(u3):
    bad = np.abs(u3) <= EPS_DEPTH
    if np.any(bad):
        raise DepthDegenerate(
            f"{int(np.count_nonzero(bad))} point(s) on the perspective-centre plane")


def project_arrays(iop, ap, T, q, P):
    """Batch projection on raw arrays; returns ``(xy, u)``.

    ``iop`` is ``(..., 3)``, ``ap`` ``(..., 2)``, ``T``/``P`` ``(..., 3)``,
    ``q`` ``(..., 4)`` (unit norm assumed).
    """
    u = _sandwich(q, P - T)
    _check_depth(u[..., 2])
    ratio = u[..., :2] / u[..., 2:3]
    xy = iop[..., :2] + ap - iop[..., 2:3] * ratio
    return xy, u


def project(iop, ap, pose, P):
    """Image coordinates (pixels) of object point(s) ``P`` seen from ``pose``.

    ``ap`` is the additional-parameter correction ``(dx, dy)``; pass ``None``
    for an undistorted projection.

    Raises
    ------
    DepthDegenerate
        if ``|u3| <= EPS_DEPTH`` for any point.
    """
    iop, ap, T, q, P = _as_arrays(iop, ap, pose, P)
    xy, _ = project_arrays(iop, ap, T, q, P)
    return xy


def project_jacobian_arrays(iop, T, q, P):
    """Analytic partials of ``(x, y)`` for batches of observations.

    Returns a dict with ``iop`` (..., 2, 3), ``T`` (..., 2, 3),
    ``q`` (..., 2, 4) and ``P`` (..., 2, 3).  The quaternion partials are on
    the ambient 4-vector; the projection is invariant to the scale of ``q``
    so the radial direction lies in their null space.
    """
    d = P - T
    u = _sandwich(q, d)
    _check_depth(u[..., 2])
    c = iop[..., 2]
    u1, u2, u3 = u[..., 0], u[..., 1], u[..., 2]
    inv3 = 1.0 / u3

    zeros = np.zeros_like(u1)
    ones = np.ones_like(u1)
    d_iop = np.stack([
        np.stack([ones, zeros, -u1 * inv3], axis=-1),
        np.stack([zeros, ones, -u2 * inv3], axis=-1),
    ], axis=-2)

    # d(x, y)/du
    d_u = np.stack([
        np.stack([-c * inv3, zeros, c * u1 * inv3**2], axis=-1),
        np.stack([zeros, -c * inv3, c * u2 * inv3**2], axis=-1),
    ], axis=-2)

    # |q|^2 R for the sandwich; R exactly for unit q
    qn2 = np.sum(q * q, axis=-1)[..., None, None]
    R = quat_to_matrix(q) * qn2
    d_P = d_u @ R
    d_q = d_u @ _sandwich_jacobian(q, d)
    return {"iop": d_iop, "T": -d_P, "q": d_q, "P": d_P}


def project_jacobian(iop, ap, pose, P):
    """Partials of the projection w.r.t. IOP, T, q (4-vector) and P.

    ``ap`` enters additively and does not change any partial; it is accepted
    for signature symmetry with :func:`project`.
    """
    iop, ap, T, q, P = _as_arrays(iop, ap, pose, P)
    return project_jacobian_arrays(iop, T, q, P)


def rotation_local_jacobian(q):
    """``dq/dtheta`` for the left update ``q <- exp(theta) * q`` at theta=0.

    Shape ``(..., 4, 3)``.  Chaining the 4-vector partials through this gives
    partials on a minimal 3-parameter rotation increment.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    # right-multiplication matrix of q applied to [0, theta/2]
    M = np.stack([
        -x, -y, -z,
        w, z, -y,
        -z, w, x,
        y, -x, w,
    ], axis=-1).reshape(q.shape[:-1] + (4, 3))
    return 0.5 * M


def apply_rotation_increment(q, theta):
    """``exp(theta) * q`` renormalized."""
    return quat_normalize(quat_multiply(quat_from_rotvec(theta), q))


def look_at_pose(center, target, roll=0.0, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose of a sensor at ``center`` looking at ``target``.

    The sensor looks along its own -z axis so visible points have ``u3 < 0``
    and image axes keep their handedness (no mirror flip).
    """
    center = np.asarray(center, dtype=float)
    target = np.asarray(target, dtype=float)
    back = center - target
    z_axis = back / np.linalg.norm(back)
    up = np.asarray(up, dtype=float)
    if abs(np.dot(up, z_axis)) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    x_axis = np.cross(up, z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    R = np.stack([x_axis, y_axis, z_axis])
    if roll:
        cr, sr = np.cos(roll), np.sin(roll)
        R = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]]) @ R
    return Pose(center, Quaternion.from_array(quat_from_matrix(R)))
