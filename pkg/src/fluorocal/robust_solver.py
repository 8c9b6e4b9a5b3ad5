"""Robust (Student-t) bundle adjustment with Levenberg-Marquardt.

The objective is the negative log-likelihood of independent bivariate
Student-t densities, one per image point::

    F = sum_i (nu + 2)/2 * log(1 + r_i^T C_i^{-1} r_i / nu)

Each iteration solves the IRLS-weighted Gauss-Newton normal equations with
Marquardt damping; tie points are eliminated through their 3x3 blocks
(Schur complement) so only the interior/exterior orientation system is
solved densely.  Rotations are updated multiplicatively with a 3-parameter
rotation vector and quaternions renormalized after every step.

The same engine resects poses (object points and IOP frozen) and intersects
object points (poses and IOP frozen).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import betaln, gammaln

from .data import ObservationSet, id_key
from .exceptions import DivergenceError, NonPositiveVariance, SingularNormalMatrix
from .geometry import (
    InteriorOrientation,
    Pose,
    Quaternion,
    apply_rotation_increment,
    project_arrays,
    project_jacobian_arrays,
    quat_canonical,
    rotation_local_jacobian,
)

log = logging.getLogger(__name__)

EPS_VAR = 1e-12
MODES = ("iop_parametric", "iop_learned")


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def student_t_nll(residuals, C_l, nu, constant=True):
    """Negative log of the multivariate Student-t density.

    ``residuals`` of shape ``(D,)`` is one D-dimensional observation; shape
    ``(n, d)`` is ``n`` independent d-dimensional observations whose NLLs are
    summed.  ``C_l`` holds the matching variances (same shape as
    ``residuals``) or, for a single observation, a full ``(D, D)`` matrix.
    ``constant=False`` drops the parameter-independent terms.
    """
    r = np.asarray(residuals, dtype=float)
    C = np.asarray(C_l, dtype=float)
    if not nu > 0:
        raise ValueError("nu must be positive")
    if r.ndim == 1:
        r = r[None, :]
        C = C[None, ...]
    d = r.shape[-1]
    if C.shape == r.shape:
        if np.any(C <= 0):
            raise NonPositiveVariance("C_l has a non-positive variance")
        quad = np.sum(r * r / C, axis=-1)
        logdet = np.sum(np.log(C), axis=-1)
    else:
        if np.any(np.diagonal(C, axis1=-2, axis2=-1) <= 0):
            raise NonPositiveVariance("C_l has a non-positive variance")
        sign, logdet = np.linalg.slogdet(C)
        if np.any(sign <= 0):
            raise NonPositiveVariance("C_l is not positive definite")
        quad = np.einsum("ni,ni->n", r, np.linalg.solve(C, r[..., None])[..., 0])
    nll = 0.5 * (nu + d) * np.log1p(quad / nu)
    if constant:
        # lgamma(nu/2) - lgamma((nu+d)/2) via betaln: no cancellation at large nu
        nll = nll + (betaln(0.5 * nu, 0.5 * d) - gammaln(0.5 * d)
                     + 0.5 * d * np.log(nu * np.pi) + 0.5 * logdet)
    return float(np.sum(nll))


# ---------------------------------------------------------------------------
# configuration and parameter container
# ---------------------------------------------------------------------------

@dataclass
class SolverConfig:
    nu: float = 4.0
    max_iter: int = 100
    ftol: float = 1e-12
    gtol: float = 1e-10
    xtol: float = 1e-12
    damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.2
    max_rejections: int = 25
    inlier_tau: float = 3.0
    mode: str = "iop_parametric"

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.inlier_tau > 0:
            raise ValueError("inlier_tau must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class ParameterVector:
    """Unknowns of an adjustment plus flags saying which blocks are free.

    Control points and frozen blocks keep their values; only free blocks
    enter the normal equations.
    """

    systems: list
    iop: np.ndarray          # (ns, 3): x_p, y_p, c
    frames: list             # [(system_id, frame_id)]
    T: np.ndarray            # (nf, 3)
    q: np.ndarray            # (nf, 4)
    point_ids: list
    P: np.ndarray            # (np, 3)
    iop_free: np.ndarray     # (ns,) bool
    pose_free: np.ndarray    # (nf,) bool
    point_free: np.ndarray   # (np,) bool

    def __post_init__(self):
        self.systems = [str(s) for s in self.systems]
        self.frames = [(str(s), str(f)) for s, f in self.frames]
        self.point_ids = [str(p) for p in self.point_ids]
        self.iop = np.array(self.iop, dtype=float).reshape(-1, 3)
        self.T = np.array(self.T, dtype=float).reshape(-1, 3)
        self.q = np.array(self.q, dtype=float).reshape(-1, 4)
        self.P = np.array(self.P, dtype=float).reshape(-1, 3)
        self.iop_free = np.array(self.iop_free, dtype=bool).reshape(-1)
        self.pose_free = np.array(self.pose_free, dtype=bool).reshape(-1)
        self.point_free = np.array(self.point_free, dtype=bool).reshape(-1)

    @classmethod
    def build(cls, iop: dict, poses: dict, points: dict, estimate_iop=True,
              free_points=None, free_frames=None) -> "ParameterVector":
        """Assemble from dicts ``{system: IOP}``, ``{(s, f): Pose}``, ``{id: P}``.

        ``free_points`` defaults to none; pass the tie-point ids to estimate.
        """
        systems = sorted(iop, key=id_key)
        frames = sorted(poses, key=lambda k: (id_key(k[0]), id_key(k[1])))
        pids = sorted(points, key=id_key)
        free_points = set() if free_points is None else {str(p) for p in free_points}
        free_frames = set(frames) if free_frames is None else set(free_frames)

        def iop_arr(v):
            return v.as_array() if isinstance(v, InteriorOrientation) else np.asarray(v)

        return cls(
            systems,
            np.array([iop_arr(iop[s]) for s in systems]),
            frames,
            np.array([poses[k].T for k in frames]).reshape(-1, 3),
            np.array([poses[k].q.as_array() for k in frames]).reshape(-1, 4),
            pids,
            np.array([np.asarray(points[p], dtype=float) for p in pids]).reshape(-1, 3),
            np.full(len(systems), bool(estimate_iop)),
            np.array([k in free_frames for k in frames], dtype=bool),
            np.array([p in free_points for p in pids], dtype=bool),
        )

    def copy(self) -> "ParameterVector":
        return replace(self, iop=self.iop.copy(), T=self.T.copy(), q=self.q.copy(),
                       P=self.P.copy())

    def iop_dict(self) -> dict:
        return {s: InteriorOrientation(*self.iop[i]) for i, s in enumerate(self.systems)}

    def pose_dict(self) -> dict:
        return {k: Pose(self.T[i], Quaternion.from_array(self.q[i]))
                for i, k in enumerate(self.frames)}

    def point_dict(self) -> dict:
        return {p: self.P[i].copy() for i, p in enumerate(self.point_ids)}

    def with_flags(self, iop_free=None, pose_free=None, point_free=None):
        out = self.copy()
        if iop_free is not None:
            out.iop_free = np.broadcast_to(np.asarray(iop_free, dtype=bool),
                                           out.iop_free.shape).copy()
        if pose_free is not None:
            out.pose_free = np.broadcast_to(np.asarray(pose_free, dtype=bool),
                                            out.pose_free.shape).copy()
        if point_free is not None:
            out.point_free = np.broadcast_to(np.asarray(point_free, dtype=bool),
                                             out.point_free.shape).copy()
        return out

    def n_free(self) -> int:
        return int(3 * self.iop_free.sum() + 6 * self.pose_free.sum()
                   + 3 * self.point_free.sum())


@dataclass
class Covariance:
    """Parameter covariance in the solver's local coordinates.

    ``camera`` is the dense block over free IOP and pose increments
    (``labels`` names each column); ``points`` holds the 3x3 marginal blocks
    of the free object points, aligned with ``point_index``.
    """

    camera: np.ndarray
    labels: list
    points: np.ndarray
    point_index: np.ndarray


@dataclass
class ResidualRecords:
    """Per-observation residual data (columnar).

    ``location`` is the measured position minus the applied correction,
    i.e. the best estimate of the undistorted image location.
    """

    system_id: np.ndarray
    frame_id: np.ndarray
    target_id: np.ndarray
    xy: np.ndarray
    correction: np.ndarray
    residual: np.ndarray
    cov: np.ndarray
    normalized: np.ndarray
    inlier: np.ndarray
    clamped: np.ndarray
    weight: np.ndarray

    @property
    def location(self) -> np.ndarray:
        return self.xy - self.correction

    def __len__(self):
        return len(self.xy)

    def subset(self, mask) -> "ResidualRecords":
        mask = np.asarray(mask)
        return ResidualRecords(**{k: getattr(self, k)[mask] for k in self.__dataclass_fields__})


@dataclass
class BundleResult:
    params: ParameterVector
    covariance: Covariance | None
    records: ResidualRecords
    F: float
    iterations: int
    reason: str
    trace: list = field(default_factory=list)

    def sigma_iop(self) -> dict:
        out = {}
        for i, s in enumerate(self.params.systems):
            cols = [self.covariance.labels.index(("iop", s, j)) if ("iop", s, j)
                    in self.covariance.labels else None for j in range(3)]
            out[s] = np.array([np.sqrt(self.covariance.camera[c, c]) if c is not None else 0.0
                               for c in cols])
        return out

    def sigma_poses(self) -> dict:
        """Std-devs ``(sX, sY, sZ, s_rx, s_ry, s_rz)``; rotations in radians."""
        out = {}
        lab = {l: i for i, l in enumerate(self.covariance.labels)}
        for key in self.params.frames:
            idx = [lab.get(("pose", key, j)) for j in range(6)]
            out[key] = np.array([np.sqrt(self.covariance.camera[c, c]) if c is not None else 0.0
                                 for c in idx])
        return out

    def sigma_points(self) -> dict:
        out = {p: np.zeros(3) for p in self.params.point_ids}
        for blk, i in zip(self.covariance.points, self.covariance.point_index):
            out[self.params.point_ids[i]] = np.sqrt(np.clip(np.diagonal(blk), 0.0, None))
        return out


# ---------------------------------------------------------------------------
# problem assembly
# ---------------------------------------------------------------------------

class _Problem:
    """Index bookkeeping between observations and parameter blocks."""

    def __init__(self, obs: ObservationSet, params: ParameterVector, corrections=None):
        self.obs = obs
        self.params = params
        n = len(obs)
        sys_index = {s: i for i, s in enumerate(params.systems)}
        frame_index = {k: i for i, k in enumerate(params.frames)}
        point_index = {p: i for i, p in enumerate(params.point_ids)}
        try:
            self.si = np.array([sys_index[s] for s in obs.system_id], dtype=np.intp)
            self.fi = np.array([frame_index[k] for k in zip(obs.system_id, obs.frame_id)],
                               dtype=np.intp)
            self.pi = np.array([point_index[t] for t in obs.target_id], dtype=np.intp)
        except KeyError as exc:
            raise ValueError(f"observation references unknown parameter block {exc}") from None
        self.sigma = obs.sigma
        if np.any(self.sigma <= 0):
            raise NonPositiveVariance("sigma_px must be positive")
        self.correction = np.zeros((n, 2)) if corrections is None else np.asarray(corrections,
                                                                                   dtype=float)
        self.l = obs.xy - self.correction

        # column layout of the reduced (camera) system
        labels = []
        iop_col = np.full(len(params.systems), -1, dtype=np.intp)
        for i, s in enumerate(params.systems):
            if params.iop_free[i]:
                iop_col[i] = len(labels)
                labels.extend(("iop", s, j) for j in range(3))
        pose_col = np.full(len(params.frames), -1, dtype=np.intp)
        for i, k in enumerate(params.frames):
            if params.pose_free[i]:
                pose_col[i] = len(labels)
                labels.extend(("pose", k, j) for j in range(6))
        self.labels = labels
        self.nc = len(labels)
        self.iop_col = iop_col
        self.pose_col = pose_col
        free_pts = np.flatnonzero(params.point_free)
        self.free_points = free_pts
        pcol = np.full(len(params.point_ids), -1, dtype=np.intp)
        pcol[free_pts] = np.arange(len(free_pts))
        self.point_slot = pcol
        self.npf = len(free_pts)

        # observation-level column indices (n, 9) for camera, -1 if frozen
        cam_idx = np.full((n, 9), -1, dtype=np.intp)
        ic = iop_col[self.si]
        has_iop = ic >= 0
        cam_idx[has_iop, :3] = ic[has_iop, None] + np.arange(3)
        pc = pose_col[self.fi]
        has_pose = pc >= 0
        cam_idx[has_pose, 3:] = pc[has_pose, None] + np.arange(6)
        self.cam_idx = cam_idx
        self.obs_slot = pcol[self.pi]

    def residuals(self, params: ParameterVector):
        f, _ = project_arrays(params.iop[self.si], np.zeros(2), params.T[self.fi],
                              params.q[self.fi], params.P[self.pi])
        return self.l - f

    def jacobians(self, params: ParameterVector):
        """Camera (n, 2, 9) and point (n, 2, 3) partials of the model f."""
        q = params.q[self.fi]
        J = project_jacobian_arrays(params.iop[self.si], params.T[self.fi], q,
                                    params.P[self.pi])
        d_rot = J["q"] @ rotation_local_jacobian(q)
        A_c = np.concatenate([J["iop"], J["T"], d_rot], axis=-1)
        return A_c, J["P"]

    def apply_step(self, params: ParameterVector, delta_c, delta_p) -> ParameterVector:
        out = params.copy()
        for i in np.flatnonzero(self.iop_col >= 0):
            c = self.iop_col[i]
            out.iop[i] += delta_c[c:c + 3]
        idx = np.flatnonzero(self.pose_col >= 0)
        if len(idx):
            cols = self.pose_col[idx][:, None] + np.arange(6)
            d = delta_c[cols]
            out.T[idx] += d[:, :3]
            out.q[idx] = apply_rotation_increment(out.q[idx], d[:, 3:])
        if self.npf:
            out.P[self.free_points] += delta_p.reshape(-1, 3)
        return out


def _objective(r, sigma, nu):
    Q = np.sum(r * r, axis=1) / sigma**2
    F = float(np.sum(0.5 * (nu + 2.0) * np.log1p(Q / nu)))
    w = (nu + 2.0) / (nu + Q)
    return F, Q, w


class _Normal:
    """Whitened normal equations split into camera and point blocks.

    Blocks are scatter-added per observation; the camera/point coupling
    ``W`` is kept dense, which is cheap at desk scale.
    """

    def __init__(self, prob: _Problem, A_c, A_p, r, w):
        s = np.sqrt(w) / prob.sigma
        Jc = A_c * s[:, None, None]
        Jp = A_p * s[:, None, None]
        rw = r * s[:, None]
        self.prob = prob
        nc, npf = prob.nc, prob.npf
        idx = prob.cam_idx
        ok = idx >= 0
        Jc = np.where(ok[:, None, :], Jc, 0.0)
        safe = np.where(ok, idx, 0)

        if nc:
            pair = ok[:, :, None] & ok[:, None, :]
            flat = safe[:, :, None] * nc + safe[:, None, :]
            blocks = np.matmul(Jc.swapaxes(1, 2), Jc)
            self.Ncc = np.bincount(flat[pair], blocks[pair], minlength=nc * nc).reshape(nc, nc)
            self.bc = np.bincount(safe[ok], np.einsum("nki,nk->ni", Jc, rw)[ok], minlength=nc)
        else:
            self.Ncc = np.zeros((0, 0))
            self.bc = np.zeros(0)

        slot = prob.obs_slot
        has_p = slot >= 0
        V = np.zeros((npf, 3, 3))
        bp = np.zeros((npf, 3))
        self.W = None
        if npf:
            sl = slot[has_p]
            np.add.at(V, sl, np.matmul(Jp[has_p].swapaxes(1, 2), Jp[has_p]))
            np.add.at(bp, sl, np.einsum("nki,nk->ni", Jp[has_p], rw[has_p]))
            if nc:
                blk = np.matmul(Jc[has_p].swapaxes(1, 2), Jp[has_p])       # (m, 9, 3)
                flat = (safe[has_p][:, :, None] * (3 * npf)
                        + 3 * sl[:, None, None] + np.arange(3))
                mask = np.broadcast_to(ok[has_p][:, :, None], blk.shape)
                self.W = np.bincount(flat[mask], blk[mask],
                                     minlength=nc * 3 * npf).reshape(nc, npf, 3)
        self.V = V
        self.bp = bp.reshape(-1)
        self.grad_inf = max(np.max(np.abs(self.bc), initial=0.0),
                            np.max(np.abs(self.bp), initial=0.0))

    def schur(self, lam):
        """Return (S, rhs, Vinv, E) for damping ``lam`` (Marquardt scaling).

        ``E = W V^-1`` with shape (nc, npf, 3), or ``None`` without coupling.
        """
        Ncc = self.Ncc.copy()
        V = self.V.copy()
        if lam:
            Ncc[np.diag_indices_from(Ncc)] *= 1.0 + lam
            V[:, [0, 1, 2], [0, 1, 2]] *= 1.0 + lam
        Vinv = _inv3(V) if len(V) else V
        S, rhs, E = Ncc, self.bc.copy(), None
        if self.W is not None:
            E = np.einsum("cmi,mij->cmj", self.W, Vinv)
            nc = self.prob.nc
            S = Ncc - E.reshape(nc, -1) @ self.W.reshape(nc, -1).T
            rhs = rhs - E.reshape(nc, -1) @ self.bp
        return S, rhs, Vinv, E

    def solve(self, lam):
        S, rhs, Vinv, _ = self.schur(lam)
        dc = _spd_solve(S, rhs) if self.prob.nc else np.zeros(0)
        if self.prob.npf:
            rhs_p = self.bp.copy()
            if self.W is not None:
                rhs_p -= dc @ self.W.reshape(self.prob.nc, -1)
            dp = np.einsum("mij,mj->mi", Vinv, rhs_p.reshape(-1, 3)).reshape(-1)
        else:
            dp = np.zeros(0)
        return dc, dp

    def predicted_reduction(self, dc, dp):
        # decrease of 0.5*|r - J d|^2 predicted by the linear model
        lin = dc @ self.bc + dp @ self.bp
        quad = dc @ self.Ncc @ dc if self.prob.nc else 0.0
        if self.prob.npf:
            d3 = dp.reshape(-1, 3)
            quad += np.einsum("mi,mij,mj->", d3, self.V, d3)
            if self.W is not None:
                quad += 2.0 * dc @ (self.W.reshape(self.prob.nc, -1) @ dp)
        return lin - 0.5 * quad


def _inv3(V):
    try:
        return np.linalg.inv(V)
    except np.linalg.LinAlgError:
        raise SingularNormalMatrix(
            "an object point block is singular (point seen from too few rays)") from None


def _spd_solve(S, rhs):
    try:
        c = linalg.cho_factor(S, check_finite=False)
        return linalg.cho_solve(c, rhs, check_finite=False)
    except linalg.LinAlgError:
        return linalg.lstsq(S, rhs, check_finite=False)[0]


def _gauge_description(prob: _Problem, nullity: int) -> str:
    params = prob.params
    fixed_seen = {params.point_ids[i] for i in np.unique(prob.pi) if not params.point_free[i]}
    if params.point_free.any() and not fixed_seen:
        return (f"datum deficiency ({nullity} free directions): no control points are "
                "observed, so translation (3), rotation (3) and scale (1) of the "
                "network are unconstrained")
    if not params.point_free.any() and params.pose_free.any():
        return (f"{nullity} pose direction(s) unconstrained: a frame observes too few "
                "non-collinear known targets")
    return f"{nullity} parameter direction(s) unconstrained by the observations"


def _check_rank(prob: _Problem, normal: _Normal, rcond=1e-11):
    """Raise SingularNormalMatrix if the undamped system is rank deficient."""
    if normal.prob.npf:
        Vd = np.sqrt(np.clip(np.diagonal(normal.V, axis1=1, axis2=2), 1e-300, None))
        Vs = normal.V / (Vd[:, :, None] * Vd[:, None, :])
        ev = np.linalg.eigvalsh(Vs)
        bad = ev[:, 0] <= rcond * ev[:, -1]
        if np.any(bad):
            n_bad = int(bad.sum())
            raise SingularNormalMatrix(
                f"{n_bad} object point(s) are not determined (fewer than 2 "
                "intersecting rays)")
    if not prob.nc:
        return
    S, _, _, _ = normal.schur(0.0)
    d = np.sqrt(np.clip(np.diag(S), 1e-300, None))
    Ss = S / np.outer(d, d)
    ev = np.linalg.eigvalsh(0.5 * (Ss + Ss.T))
    nullity = int(np.sum(ev <= rcond * ev[-1]))
    if nullity:
        raise SingularNormalMatrix(_gauge_description(prob, nullity))


def _covariance(prob: _Problem, normal: _Normal) -> Covariance:
    S, _, Vinv, E = normal.schur(0.0)
    if prob.nc:
        try:
            c = linalg.cho_factor(S, check_finite=False)
            Sinv = linalg.cho_solve(c, np.eye(prob.nc), check_finite=False)
        except linalg.LinAlgError:
            raise SingularNormalMatrix(_gauge_description(prob, 1)) from None
    else:
        Sinv = np.zeros((0, 0))
    if prob.npf:
        Pcov = Vinv
        if E is not None:
            SE = np.einsum("ab,bmj->amj", Sinv, E)
            Pcov = Vinv + np.einsum("ami,amj->mij", E, SE)
    else:
        Pcov = np.zeros((0, 3, 3))
    cov = Covariance(Sinv, list(prob.labels), Pcov, prob.free_points.copy())
    cov._E = E  # cached for residual covariance
    return cov


def _residual_cov(prob: _Problem, cov: Covariance, A_c, A_p):
    """Blockwise C_r = C_l - A Sigma A^T for every observation."""
    n = len(A_c)
    ASA = np.zeros((n, 2, 2))
    slot = prob.obs_slot
    has_p = slot >= 0
    E = getattr(cov, "_E", None)
    if prob.nc and (E is None or not np.any(has_p)):
        # no coupling through points: each row touches at most 9 columns
        idx = prob.cam_idx
        ok = idx >= 0
        safe = np.where(ok, idx, 0)
        Ac = np.where(ok[:, None, :], A_c, 0.0)
        Sg = cov.camera[safe[:, :, None], safe[:, None, :]]
        ASA += np.einsum("nki,nij,nlj->nkl", Ac, Sg, Ac)
    elif prob.nc:
        G = np.zeros((n, 2, prob.nc))
        idx = prob.cam_idx
        for k in range(9):
            ok = idx[:, k] >= 0
            G[ok, :, idx[ok, k]] = A_c[ok, :, k]
        # g = a_c - a_p E_i^T
        Ei = E[:, slot[has_p], :]                           # (nc, m, 3)
        G[has_p] -= np.einsum("mki,ami->mka", A_p[has_p], Ei)
        GS = np.einsum("nka,ab->nkb", G, cov.camera)
        ASA += np.einsum("nka,nla->nkl", GS, G)
    if prob.npf and np.any(has_p):
        Pc = cov.points[slot[has_p]]
        ASA[has_p] += np.einsum("nki,nij,nlj->nkl", A_p[has_p], Pc, A_p[has_p])
    Cl = np.einsum("n,ij->nij", prob.sigma**2, np.eye(2))
    Cr = Cl - ASA
    Cr = 0.5 * (Cr + np.swapaxes(Cr, 1, 2))
    diag = np.diagonal(Cr, axis1=1, axis2=2).copy()
    clamped = np.any(diag <= EPS_VAR, axis=1)
    if np.any(clamped):
        fixed = np.clip(diag, EPS_VAR, None)
        Cr[:, 0, 0] = fixed[:, 0]
        Cr[:, 1, 1] = fixed[:, 1]
        # keep blocks positive definite after clamping the diagonal
        lim = 0.999 * np.sqrt(fixed[:, 0] * fixed[:, 1])
        Cr[:, 0, 1] = np.clip(Cr[:, 0, 1], -lim, lim)
        Cr[:, 1, 0] = Cr[:, 0, 1]
    return Cr, clamped


def classify_inliers(records: ResidualRecords, tau: float) -> ResidualRecords:
    """Flag observations whose normalized residuals both lie within ``tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    out = replace(records)
    out.inlier = np.max(np.abs(records.normalized), axis=1) <= tau
    return out


def _make_records(prob: _Problem, r, Cr, clamped, w, tau) -> ResidualRecords:
    sd = np.sqrt(np.diagonal(Cr, axis1=1, axis2=2))
    norm = r / sd
    obs = prob.obs
    rec = ResidualRecords(obs.system_id.copy(), obs.frame_id.copy(), obs.target_id.copy(),
                          obs.xy.copy(), prob.correction.copy(), r, Cr, norm,
                          np.ones(len(r), dtype=bool), clamped, w)
    return classify_inliers(rec, tau)


def residual_covariance(params: ParameterVector, covariance: Covariance,
                        obs: ObservationSet, corrections=None):
    """``(C_r, clamped)`` blocks for ``obs`` at the adjusted parameters."""
    prob = _Problem(obs, params, corrections)
    A_c, A_p = prob.jacobians(params)
    if covariance.points is not None and len(covariance.points) and getattr(
            covariance, "_E", None) is None and prob.nc:
        # recompute the coupling term when the covariance came from elsewhere
        r = prob.residuals(params)
        _, _, w = _objective(r, prob.sigma, 1e300)
        covariance = _covariance(prob, _Normal(prob, A_c, A_p, r, w))
    return _residual_cov(prob, covariance, A_c, A_p)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt driver
# ---------------------------------------------------------------------------

def bundle_adjust(obs: ObservationSet, corrections, init: ParameterVector,
                  cfg: SolverConfig | None = None, check_rank=True) -> BundleResult:
    """Minimize the Student-t objective over the free blocks of ``init``.

    ``corrections`` is an ``(n, 2)`` array of additional-parameter
    corrections already evaluated at each observation (held fixed), or
    ``None``.  Returns the adjusted parameters, their covariance, residual
    records (with C_r and inlier flags) and the final cost.

    Convergence is reported in ``reason``: ``"cost"`` (relative decrease
    below ``ftol``), ``"gradient"``, ``"step"`` or ``"max_iter"``.
    """
    cfg = cfg or SolverConfig()
    prob = _Problem(obs, init, corrections)
    params = init.copy()
    nu = cfg.nu
    r = prob.residuals(params)
    F, Q, w = _objective(r, prob.sigma, nu)
    if not np.isfinite(F):
        raise ValueError("initial cost is not finite")
    lam = cfg.damping
    trace = []
    reason = "max_iter"
    it = 0
    rejections = 0
    A_c, A_p = prob.jacobians(params)
    normal = _Normal(prob, A_c, A_p, r, w)
    if check_rank:
        _check_rank(prob, normal)
    while it < cfg.max_iter:
        if normal.grad_inf <= cfg.gtol:
            reason = "gradient"
            break
        dc, dp = normal.solve(lam)
        step = np.sqrt(dc @ dc + dp @ dp)
        scale = np.sqrt(np.sum(params.T**2) + np.sum(params.P[params.point_free]**2)
                        + np.sum(params.iop**2))
        cand = prob.apply_step(params, dc, dp)
        r_new = prob.residuals(cand)
        F_new, Q_new, w_new = _objective(r_new, prob.sigma, nu)
        accepted = np.isfinite(F_new) and F_new < F
        it += 1
        trace.append((it, F_new if accepted else F, lam, step, bool(accepted)))
        if accepted:
            rel = (F - F_new) / max(F, 1e-300)
            params, r, F, w = cand, r_new, F_new, w_new
            lam = max(lam * cfg.damping_down, 1e-12)
            rejections = 0
            A_c, A_p = prob.jacobians(params)
            normal = _Normal(prob, A_c, A_p, r, w)
            if rel <= cfg.ftol:
                reason = "cost"
                break
            if step <= cfg.xtol * (scale + cfg.xtol):
                reason = "step"
                break
        else:
            pred = normal.predicted_reduction(dc, dp)
            if pred <= cfg.ftol * max(F, 1e-300) or step <= cfg.xtol * (scale + cfg.xtol):
                reason = "cost" if pred <= cfg.ftol * max(F, 1e-300) else "step"
                break
            lam *= cfg.damping_up
            rejections += 1
            if rejections >= cfg.max_rejections:
                raise DivergenceError(
                    f"{rejections} consecutive rejected steps (cost {F:.6g}, damping {lam:.3g})")
    params.q = quat_canonical(params.q)
    A_c, A_p = prob.jacobians(params)
    normal = _Normal(prob, A_c, A_p, r, w)
    cov = _covariance(prob, normal)
    Cr, clamped = _residual_cov(prob, cov, A_c, A_p)
    records = _make_records(prob, r, Cr, clamped, w, cfg.inlier_tau)
    log.debug("bundle_adjust: F=%.6g after %d iterations (%s)", F, it, reason)
    return BundleResult(params, cov, records, F, it, reason, trace)


# ---------------------------------------------------------------------------
# resection and intersection
# ---------------------------------------------------------------------------

def resect_poses(iop: dict, corrections, obs: ObservationSet, points: dict, init_poses: dict,
                 cfg: SolverConfig | None = None):
    """Resect every frame in ``obs`` with IOP, corrections and points fixed.

    Frames are independent, so they share one LM run with a block-diagonal
    reduced system.  Returns ``({frame: Pose}, {frame: 6x6 covariance},
    BundleResult)``.
    """
    frames = list(obs.frames)
    params = ParameterVector.build({s: iop[s] for s in obs.systems},
                                   {k: init_poses[k] for k in frames},
                                   {t: points[t] for t in set(obs.target_id)},
                                   estimate_iop=False)
    res = bundle_adjust(obs, corrections, params, cfg)
    poses = res.params.pose_dict()
    covs = {}
    for i, key in enumerate(res.params.frames):
        c = res.covariance.labels.index(("pose", key, 0))
        covs[key] = res.covariance.camera[c:c + 6, c:c + 6].copy()
    return poses, covs, res


def resect_pose(iop, corrections, frame_obs: ObservationSet, points: dict, init_pose: Pose,
                cfg: SolverConfig | None = None):
    """Single-frame spatial resection; returns ``(Pose, 6x6 covariance)``."""
    frames = frame_obs.frames
    if len(frames) != 1:
        raise ValueError(f"expected observations of exactly one frame, got {len(frames)}")
    key = frames[0]
    if isinstance(iop, InteriorOrientation):
        iop = {key[0]: iop}
    poses, covs, _ = resect_poses(iop, corrections, frame_obs, points, {key: init_pose}, cfg)
    return poses[key], covs[key]


def intersect_points(iop: dict, poses: dict, corrections, obs: ObservationSet,
                     init_points: dict, free_ids=None, cfg: SolverConfig | None = None):
    """Estimate object points from fixed poses/IOP (multi-ray intersection).

    Points observed in fewer than two frames are left at their initial
    values and excluded from the adjustment.
    """
    counts = {}
    for t in obs.target_id:
        counts[t] = counts.get(t, 0) + 1
    free = {t for t, n in counts.items() if n >= 2}
    if free_ids is not None:
        free &= {str(t) for t in free_ids}
    mask = np.array([t in free for t in obs.target_id], dtype=bool)
    sub = obs.subset(mask)
    corr = None if corrections is None else np.asarray(corrections)[mask]
    params = ParameterVector.build({s: iop[s] for s in sub.systems},
                                   {k: poses[k] for k in sub.frames},
                                   {t: init_points[t] for t in free},
                                   estimate_iop=False, free_points=free,
                                   free_frames=set())
    res = bundle_adjust(sub, corr, params, cfg)
    out = dict(init_points)
    out.update(res.params.point_dict())
    return out, res
