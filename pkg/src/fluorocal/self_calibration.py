"""Alternating robust bundle adjustment and kNN distortion learning.

Each outer iteration runs a bundle adjustment with the current corrections
applied to the measurements, then fits a new cumulative correction model
per system on the inlier residuals.  The loop stops once the relative
changes of the bundle cost F and the cross-validation cost G both stay
below ``eps_conv`` for ``patience`` consecutive iterations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import ObservationSet, _fmt, _parse_float, _read_csv_rows, id_key, parse_key_values
from .distortion_knn import (
    CvConfig,
    DistortionModel,
    correction_at_measured,
    fit_distortion,
    load_model,
    save_model,
)
from .exceptions import NonConvergence, ValidationError
from .geometry import InteriorOrientation, Pose, Quaternion
from .robust_solver import (
    BundleResult,
    ParameterVector,
    ResidualRecords,
    SolverConfig,
    bundle_adjust,
)
from .validation import check_points

log = logging.getLogger(__name__)

TRACE_HEADER = "iter,F,G,F_rel,G_rel,blend"
IOP_HEADER = "system_id,x_p,y_p,c,sigma_x_p,sigma_y_p,sigma_c"
POSE_SIGMA_HEADER = ("system_id,frame_id,X_mm,Y_mm,Z_mm,qw,qx,qy,qz,"
                     "sigma_X,sigma_Y,sigma_Z,sigma_rx,sigma_ry,sigma_rz")
POINT_HEADER = "target_id,X_mm,Y_mm,Z_mm,role,sigma_X,sigma_Y,sigma_Z"


@dataclass
class CalibrationConfig:
    """Outer-loop settings.

    The loop stops once the relative changes of F and G both stay below
    ``eps_conv`` for ``patience`` iterations.  If refitting the field raises
    F, the previous state is kept and the loop ends; that counts as
    converged when the last accepted changes were below ``eps_stall``.
    """

    solver: SolverConfig = field(default_factory=SolverConfig)
    cv: CvConfig = field(default_factory=CvConfig)
    eps_conv: float = 1e-4
    eps_stall: float = 1e-3
    patience: int = 3
    max_outer: int = 50
    weighting: str = "uniform"
    gauge: str = "auto"

    def __post_init__(self):
        if not self.eps_conv > 0 or not self.eps_stall > 0:
            raise ValueError("eps_conv and eps_stall must be positive")
        if self.patience < 1 or self.max_outer < 1:
            raise ValueError("patience and max_outer must be at least 1")

    @property
    def mode(self) -> str:
        return self.solver.mode


@dataclass
class TraceRow:
    iter: int
    F: float
    G: float
    F_rel: float
    G_rel: float
    blend: float


@dataclass
class CalibrationRun:
    mode: str
    trace: list
    converged: bool
    reason: str

    @property
    def iterations(self) -> int:
        return len(self.trace)


@dataclass
class CalibrationResult:
    """Adjusted orientation, object points and per-system correction models."""

    iop: dict
    iop_sigma: dict
    poses: dict
    pose_sigma: dict
    points: dict
    point_sigma: dict
    roles: dict
    models: dict
    run: CalibrationRun
    F: float = float("nan")
    records: ResidualRecords | None = None
    bundle: BundleResult | None = None

    @property
    def systems(self) -> list:
        return sorted(self.iop, key=id_key)

    def corrections(self, obs: ObservationSet) -> np.ndarray:
        """Corrections to subtract from each measurement in ``obs``."""
        out = np.zeros((len(obs), 2))
        for s in obs.systems:
            mask = obs.system_id == s
            out[mask] = correction_at_measured(self.models.get(s), obs.xy[mask])
        return out

    def for_system(self, system_id) -> "CalibrationResult":
        s = str(system_id)
        return CalibrationResult(
            {s: self.iop[s]}, {s: self.iop_sigma[s]},
            {k: v for k, v in self.poses.items() if k[0] == s},
            {k: v for k, v in self.pose_sigma.items() if k[0] == s},
            self.points, self.point_sigma, self.roles, {s: self.models.get(s)},
            self.run, self.F,
            None if self.records is None else self.records.subset(self.records.system_id == s),
        )


# ---------------------------------------------------------------------------
# initialization helpers
# ---------------------------------------------------------------------------

def initial_parameters(obs: ObservationSet, init_poses: dict, nominal_iop,
                       phantom=None) -> ParameterVector:
    """Nominal IOP, approximate poses, phantom coordinates; ties free."""
    phantom = obs.phantom if phantom is None else phantom
    if phantom is None:
        raise ValidationError("a phantom is required to initialize object points")
    seen = set(obs.target_id.tolist())
    pts = {p.id: p.P for p in phantom if p.id in seen}
    ties = [p.id for p in phantom if p.role == "tie" and p.id in seen]
    if not isinstance(nominal_iop, dict):
        nominal_iop = {s: nominal_iop for s in obs.systems}
    missing = [k for k in obs.frames if k not in init_poses]
    if missing:
        raise ValidationError(f"no initial pose for frame {missing[0]}")
    return ParameterVector.build({s: nominal_iop[s] for s in obs.systems},
                                 {k: init_poses[k] for k in obs.frames}, pts,
                                 free_points=ties)


def _roles(obs: ObservationSet, params: ParameterVector) -> dict:
    if obs.phantom is not None:
        lookup = {p.id: p.role for p in obs.phantom}
        return {p: lookup.get(p, "tie") for p in params.point_ids}
    return {p: ("tie" if f else "control") for p, f in zip(params.point_ids, params.point_free)}


def _result_from_bundle(res: BundleResult, obs, models, run) -> CalibrationResult:
    p = res.params
    return CalibrationResult(
        p.iop_dict(), res.sigma_iop(), p.pose_dict(), res.sigma_poses(),
        p.point_dict(), res.sigma_points(), _roles(obs, p), dict(models), run, res.F,
        res.records, res)


# ---------------------------------------------------------------------------
# the alternating loop
# ---------------------------------------------------------------------------

def _rel_change(new, old, floor=1.0):
    """Change relative to ``max(|old|, floor)``; costs near zero count as converged."""
    if not np.isfinite(old):
        return np.inf
    return abs(new - old) / max(abs(old), floor)


GAUGE_COMPONENTS = {
    "none": (),
    "rotation": ("rotation",),
    "scale_rotation": ("scale", "rotation"),
    "similarity": ("shift", "scale", "rotation"),
}


def similarity_component(locations, values, center, components=("shift", "scale", "rotation")):
    """Least-squares fit of an image-plane similarity field to ``values``.

    The basis fields are a shift, a scale about ``center`` and a rotation
    about ``center``; returns the fitted (n, 2) field.
    """
    d = np.asarray(locations, dtype=float) - np.asarray(center, dtype=float)
    n = len(d)
    basis = []
    if "shift" in components:
        basis.append(np.column_stack([np.ones(n), np.zeros(n)]))
        basis.append(np.column_stack([np.zeros(n), np.ones(n)]))
    if "scale" in components:
        basis.append(d)
    if "rotation" in components:
        basis.append(np.column_stack([-d[:, 1], d[:, 0]]))
    if not basis:
        return np.zeros_like(d)
    A = np.stack([b.reshape(-1) for b in basis], axis=1)
    coef, *_ = np.linalg.lstsq(A, np.asarray(values, dtype=float).reshape(-1), rcond=None)
    return (A @ coef).reshape(n, 2)


def _gauge(cfg: CalibrationConfig) -> tuple:
    name = cfg.gauge
    if name == "auto":
        name = "similarity" if cfg.mode == "iop_parametric" else "scale_rotation"
    return GAUGE_COMPONENTS[name]


def _fit_models(records: ResidualRecords, priors: dict, cfg: CalibrationConfig,
                centers: dict):
    models = {}
    comps = _gauge(cfg)
    for s in sorted(set(records.system_id.tolist()), key=id_key):
        sub = records.subset(records.system_id == s)

        def detrend(loc, values, c=centers[s]):
            return values - similarity_component(loc, values, c, comps)

        models[s] = fit_distortion(sub, prior=priors.get(s), cfg=cfg.cv,
                                   weighting=cfg.weighting,
                                   detrend=detrend if comps else None)
    return models


def _alternate(obs: ObservationSet, init, cfg: CalibrationConfig, init_models=None,
               history=None) -> CalibrationResult:
    if isinstance(init, CalibrationResult):
        init_models = init.models if init_models is None else init_models
        history = init.run.trace if history is None else history
        init = init.bundle.params if init.bundle is not None else init
    params = init.with_flags(iop_free=cfg.mode == "iop_parametric")
    models = dict(init_models or {})
    F0 = G0 = None
    F_prev = G_prev = np.inf
    quiet = 0
    if history:
        last = history[-1]
        F_prev, G_prev = last.F, last.G
        F0, G0 = history[0].F, history[0].G
        quiet = cfg.patience - 1  # the initializing run already satisfied its window
    trace = []
    last_res = None
    last_models = models
    converged = False
    reason = "max_outer"
    dF = dG = np.inf
    for it in range(1, cfg.max_outer + 1):
        corr = _corrections(obs, models)
        res = bundle_adjust(obs, corr, params, cfg.solver)
        F = res.F
        if np.isfinite(F_prev) and F > F_prev + 1e-9 * max(F_prev, 1.0):
            # the refitted field made things worse: keep the previous state
            converged = dF < cfg.eps_stall and dG < cfg.eps_stall
            reason = "stalled" if converged else "cost_increase"
            log.info("outer %d: F=%.9g rose above %.9g, stopping (%s)", it, F, F_prev, reason)
            break
        centers = {s: res.params.iop[i, :2] for i, s in enumerate(res.params.systems)}
        new_models = _fit_models(res.records, models, cfg, centers)
        G = float(sum(m.G for m in new_models.values()))
        if F0 is None:
            F0, G0 = F, G
        f_rel, g_rel = F / F0 if F0 else 0.0, G / G0 if G0 else 0.0
        trace.append(TraceRow(it, F, G, f_rel, g_rel, 0.5 * (f_rel + g_rel)))
        dF, dG = _rel_change(F, F_prev), _rel_change(G, G_prev)
        log.info("outer %d: F=%.9g G=%.9g dF=%.2e dG=%.2e k=%s", it, F, G, dF, dG,
                 {s: m.k for s, m in new_models.items()})
        log.debug("iop %s", res.params.iop.tolist())
        last_res, last_models = res, models
        quiet = quiet + 1 if (dF < cfg.eps_conv and dG < cfg.eps_conv) else 0
        if quiet >= cfg.patience:
            converged, reason = True, "converged"
            break
        F_prev, G_prev = F, G
        params = res.params
        models = new_models
    if last_res is None:
        raise NonConvergence("the first outer iteration already raised the cost")
    run = CalibrationRun(cfg.mode, trace, converged, reason)
    result = _result_from_bundle(last_res, obs, last_models, run)
    if not converged:
        what = (f"after {cfg.max_outer} outer iterations" if reason == "max_outer"
                else f"cost rose at outer iteration {len(trace) + 1}")
        raise NonConvergence(f"no convergence {what}", result=result)
    return result


def _corrections(obs: ObservationSet, models: dict) -> np.ndarray:
    out = np.zeros((len(obs), 2))
    for s, m in models.items():
        mask = obs.system_id == s
        if m is not None and mask.any():
            out[mask] = correction_at_measured(m, obs.xy[mask])
    return out


def self_calibrate(obs: ObservationSet, init, cfg: CalibrationConfig | None = None,
                   init_models=None) -> CalibrationResult:
    """Calibrate one imaging system.

    ``init`` is a :class:`ParameterVector` (see :func:`initial_parameters`)
    or a previous :class:`CalibrationResult` to continue from.  In
    ``iop_learned`` mode the IOP stay at their initial (nominal) values.
    Raises :class:`NonConvergence` carrying the last result when the loop
    does not converge.
    """
    cfg = cfg or CalibrationConfig()
    if len(obs.systems) != 1:
        raise ValidationError(
            f"self_calibrate expects one system, got {len(obs.systems)}; use calibrate_joint")
    return _alternate(obs, init, cfg, init_models)


def calibrate_joint(obs: ObservationSet, init, cfg: CalibrationConfig | None = None,
                    init_models=None) -> CalibrationResult:
    """Calibrate several systems in one adjustment with shared object points.

    One correction model is trained per system; use
    :meth:`CalibrationResult.for_system` to split the result.
    """
    cfg = cfg or CalibrationConfig()
    if len(obs.systems) < 2:
        raise ValidationError("calibrate_joint needs observations from at least two systems")
    return _alternate(obs, init, cfg, init_models)


def baseline_adjust(obs: ObservationSet, init: ParameterVector,
                    cfg: CalibrationConfig | None = None) -> CalibrationResult:
    """Robust adjustment without corrections and with IOP fixed at ``init``.

    This is the uncalibrated reference ("before") for the quality tables.
    """
    cfg = cfg or CalibrationConfig()
    params = init.with_flags(iop_free=False)
    res = bundle_adjust(obs, None, params, cfg.solver)
    row = TraceRow(1, res.F, float("nan"), 1.0, float("nan"), float("nan"))
    run = CalibrationRun("before", [row], True, "single_adjustment")
    return _result_from_bundle(res, obs, {s: None for s in obs.systems}, run)


def readjust(result: CalibrationResult, obs: ObservationSet,
             cfg: CalibrationConfig | None = None) -> CalibrationResult:
    """One adjustment of ``obs`` started at ``result`` with its models fixed.

    Restores residual records for a result read back with
    :func:`load_result`; at a converged result nothing moves.
    """
    cfg = cfg or CalibrationConfig()
    free = [p for p in result.points if result.roles.get(p, "tie") == "tie"]
    frames = [k for k in obs.frames if k in result.poses]
    if len(frames) != len(obs.frames):
        missing = [k for k in obs.frames if k not in result.poses][0]
        raise ValidationError(f"result has no pose for frame {missing}")
    params = ParameterVector.build({s: result.iop[s] for s in obs.systems},
                                   {k: result.poses[k] for k in frames},
                                   {p: result.points[p] for p in result.points
                                    if p in set(obs.target_id.tolist())},
                                   free_points=free)
    params = params.with_flags(iop_free=result.run.mode == "iop_parametric")
    res = bundle_adjust(obs, result.corrections(obs), params, cfg.solver)
    return _result_from_bundle(res, obs, result.models, result.run)


# ---------------------------------------------------------------------------
# applying a model
# ---------------------------------------------------------------------------

def apply_correction(model: DistortionModel | None, points=None, grid=None, chunk=65536):
    """Corrected locations, or a dense correction map.

    With ``points`` (n, 2) returns ``points - correction``.  With
    ``grid=(width, height)`` returns an array ``(height, width, 2)`` holding
    the predicted correction at every pixel centre ``(col, row)``.
    """
    if (points is None) == (grid is None):
        raise ValueError("pass exactly one of points or grid")
    if points is not None:
        pts = check_points(points)
        return pts - correction_at_measured(model, pts)
    width, height = (int(v) for v in grid)
    if model is None:
        return np.zeros((height, width, 2))
    yy, xx = np.mgrid[0:height, 0:width]
    q = np.column_stack([xx.ravel(), yy.ravel()]).astype(float)
    out = np.empty_like(q)
    for start in range(0, len(q), chunk):
        out[start:start + chunk] = model.predict(q[start:start + chunk])
    return out.reshape(height, width, 2)


# ---------------------------------------------------------------------------
# estimator facade
# ---------------------------------------------------------------------------

class SelfCalibrator(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`self_calibrate` / :func:`calibrate_joint`.

    ``fit(obs, init=...)`` runs the calibration; ``transform(points)``
    corrects image points of a single-system calibration.
    """

    def __init__(self, mode="iop_parametric", nu=4.0, inlier_tau=3.0, k_grid=None,
                 folds=10, random_state=0, eps_conv=1e-4, eps_stall=1e-3, patience=3,
                 max_outer=50):
        self.mode = mode
        self.nu = nu
        self.inlier_tau = inlier_tau
        self.k_grid = k_grid
        self.folds = folds
        self.random_state = random_state
        self.eps_conv = eps_conv
        self.eps_stall = eps_stall
        self.patience = patience
        self.max_outer = max_outer

    def _config(self) -> CalibrationConfig:
        return CalibrationConfig(
            SolverConfig(nu=self.nu, inlier_tau=self.inlier_tau, mode=self.mode),
            CvConfig(None if self.k_grid is None else tuple(self.k_grid), self.folds,
                     self.random_state),
            eps_conv=self.eps_conv, eps_stall=self.eps_stall, patience=self.patience,
            max_outer=self.max_outer)

    def fit(self, X: ObservationSet, y=None, init=None):
        if init is None:
            raise ValueError("init (ParameterVector or CalibrationResult) is required")
        cfg = self._config()
        fn = self_calibrate if len(X.systems) == 1 else calibrate_joint
        self.result_ = fn(X, init, cfg)
        self.systems_ = self.result_.systems
        return self

    def transform(self, X, system_id=None):
        check_is_fitted(self, "result_")
        if system_id is None:
            if len(self.systems_) != 1:
                raise ValueError("system_id is required for a joint calibration")
            system_id = self.systems_[0]
        return apply_correction(self.result_.models[str(system_id)], points=X)


# ---------------------------------------------------------------------------
# result bundle I/O
# ---------------------------------------------------------------------------

def _write(path: Path, lines) -> None:
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


def dumps_trace(run: CalibrationRun) -> str:
    rows = [TRACE_HEADER]
    for t in run.trace:
        rows.append(",".join([str(t.iter)] + [_fmt(v) for v in (t.F, t.G, t.F_rel, t.G_rel,
                                                                  t.blend)]))
    return "\n".join(rows) + "\n"


def save_result(result: CalibrationResult, outdir) -> list:
    """Write the result bundle into ``outdir``; returns the written paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    lines = [IOP_HEADER]
    for s in result.systems:
        v = result.iop[s].as_array()
        sd = result.iop_sigma.get(s, np.zeros(3))
        lines.append(",".join([s] + [_fmt(x) for x in (*v, *sd)]))
    _write(out / "iop.csv", lines)
    written.append(out / "iop.csv")

    lines = [POSE_SIGMA_HEADER]
    for key in sorted(result.poses, key=lambda k: (id_key(k[0]), id_key(k[1]))):
        pose = result.poses[key]
        sd = result.pose_sigma.get(key, np.zeros(6))
        vals = (*pose.T, *pose.q.as_array(), *sd)
        lines.append(",".join([key[0], key[1]] + [_fmt(x) for x in vals]))
    _write(out / "poses.csv", lines)
    written.append(out / "poses.csv")

    lines = [POINT_HEADER]
    for pid in sorted(result.points, key=id_key):
        P = result.points[pid]
        sd = result.point_sigma.get(pid, np.zeros(3))
        lines.append(",".join([pid, *(_fmt(x) for x in P), result.roles.get(pid, "tie"),
                               *(_fmt(x) for x in sd)]))
    _write(out / "object_points.csv", lines)
    written.append(out / "object_points.csv")

    for s, model in result.models.items():
        if model is not None:
            save_model(model, out / f"distortion_{s}.csv")
            written.append(out / f"distortion_{s}.csv")

    (out / "trace.csv").write_text(dumps_trace(result.run), encoding="utf-8", newline="\n")
    written.append(out / "trace.csv")
    meta = [f"mode={result.run.mode}", f"converged={str(result.run.converged).lower()}",
            f"reason={result.run.reason}", f"iterations={result.run.iterations}",
            f"F={_fmt(result.F)}"]
    _write(out / "run.txt", meta)
    written.append(out / "run.txt")
    return written


def load_result(outdir) -> CalibrationResult:
    """Read a bundle written by :func:`save_result` (without records)."""
    out = Path(outdir)
    iop, iop_sigma = {}, {}
    for lineno, row in _read_csv_rows(out / "iop.csv", IOP_HEADER, 7):
        vals = [_parse_float(v, lineno, "iop") for v in row[1:]]
        iop[row[0]] = InteriorOrientation(*vals[:3])
        iop_sigma[row[0]] = np.array(vals[3:])
    poses, pose_sigma = {}, {}
    for lineno, row in _read_csv_rows(out / "poses.csv", POSE_SIGMA_HEADER, 15):
        vals = [_parse_float(v, lineno, "pose") for v in row[2:]]
        key = (row[0], row[1])
        poses[key] = Pose(np.array(vals[:3]), Quaternion.from_array(vals[3:7]))
        pose_sigma[key] = np.array(vals[7:])
    points, point_sigma, roles = {}, {}, {}
    for lineno, row in _read_csv_rows(out / "object_points.csv", POINT_HEADER, 8):
        points[row[0]] = np.array([_parse_float(v, lineno, "X") for v in row[1:4]])
        roles[row[0]] = row[4]
        point_sigma[row[0]] = np.array([_parse_float(v, lineno, "sigma") for v in row[5:]])
    models = {}
    for s in iop:
        path = out / f"distortion_{s}.csv"
        models[s] = load_model(path) if path.exists() else None
    trace = []
    tpath = out / "trace.csv"
    if tpath.exists():
        for lineno, row in _read_csv_rows(tpath, TRACE_HEADER, 6):
            trace.append(TraceRow(int(row[0]), *(_parse_float(v, lineno, "trace")
                                                 for v in row[1:])))
    meta = {}
    rpath = out / "run.txt"
    if rpath.exists():
        meta = parse_key_values(rpath.read_text(encoding="utf-8"))
    run = CalibrationRun(meta.get("mode", "unknown"), trace,
                         meta.get("converged", "false") == "true", meta.get("reason", ""))
    F = float(meta["F"]) if "F" in meta else float("nan")
    return CalibrationResult(iop, iop_sigma, poses, pose_sigma, points, point_sigma, roles,
                             models, run, F)
