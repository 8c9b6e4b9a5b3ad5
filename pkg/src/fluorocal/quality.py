"""Accuracy reports: reprojection, object-space and pose errors.

Rows follow the usual Before / After / After w/ IOP layout; improvement is
``100 * (before - after) / before`` and may be negative.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .data import ObservationSet, TruthRecord, _fmt, id_key
from .exceptions import IdMismatch
from .geometry import quat_conjugate, quat_multiply, quat_to_rotvec
from .robust_solver import ResidualRecords, SolverConfig, intersect_points, resect_poses

IMAGE_COLUMNS = ("rmse_x_px", "rmse_y_px")
OBJECT_COLUMNS = ("rmse_X_mm", "rmse_Y_mm", "rmse_Z_mm")
POSE_COLUMNS = ("rmse_Xo_mm", "rmse_Yo_mm", "rmse_Zo_mm")


@dataclass
class ErrorReport:
    """Per-axis RMSE values; ``None`` for parts that were not evaluated.

    ``rotation_rmse_deg`` is auxiliary (angle of the rotation error).
    """

    label: str = ""
    sample: str = "in_sample"
    image_rmse: np.ndarray | None = None
    cost: float | None = None
    object_rmse: np.ndarray | None = None
    pose_rmse: np.ndarray | None = None
    rotation_rmse_deg: float | None = None
    counts: dict = field(default_factory=dict)

    def merged(self, other: "ErrorReport") -> "ErrorReport":
        """Fill unset parts of ``self`` from ``other``."""
        out = ErrorReport(self.label or other.label, self.sample, self.image_rmse, self.cost,
                          self.object_rmse, self.pose_rmse, self.rotation_rmse_deg,
                          {**other.counts, **self.counts})
        for name in ("image_rmse", "cost", "object_rmse", "pose_rmse", "rotation_rmse_deg"):
            if getattr(out, name) is None:
                setattr(out, name, getattr(other, name))
        return out


def rmse(values) -> np.ndarray:
    """Per-column root mean square of an ``(n, d)`` array."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2 or len(arr) == 0:
        raise ValueError("rmse needs a non-empty (n, d) array")
    return np.sqrt(np.mean(arr * arr, axis=0))


def improvement(before, after):
    """``100 * (before - after) / before`` elementwise."""
    b = np.asarray(before, dtype=float)
    a = np.asarray(after, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return 100.0 * (b - a) / b


def reprojection_report(records: ResidualRecords, label="", sample="in_sample") -> ErrorReport:
    if len(records) == 0:
        raise ValueError("no residual records")
    r = records.residual
    sol = np.linalg.solve(records.cov, r[..., None])[..., 0]
    cost = float(np.sum(r * sol))
    return ErrorReport(label, sample, image_rmse=rmse(r), cost=cost,
                       counts={"image": len(r)})


def object_space_report(estimated: dict, truth: dict, label="",
                        sample="in_sample") -> ErrorReport:
    """RMSE of estimated object points against truth (same datum, no alignment)."""
    if not estimated:
        raise ValueError("no object points to compare")
    missing = [k for k in estimated if k not in truth]
    if missing:
        raise IdMismatch(f"target {missing[0]!r} has no truth coordinates")
    ids = sorted(estimated, key=id_key)
    d = np.array([np.asarray(estimated[i], dtype=float) - np.asarray(truth[i], dtype=float)
                  for i in ids])
    return ErrorReport(label, sample, object_rmse=rmse(d), counts={"object": len(ids)})


def pose_report(estimated: dict, truth: dict, label="", sample="in_sample") -> ErrorReport:
    """Translation RMSE per axis plus auxiliary rotation-angle RMSE (degrees)."""
    if not estimated:
        raise ValueError("no poses to compare")
    missing = [k for k in estimated if k not in truth]
    if missing:
        raise IdMismatch(f"frame {missing[0]!r} has no truth pose")
    keys = sorted(estimated, key=lambda k: (id_key(k[0]), id_key(k[1])))
    dT = np.array([estimated[k].T - truth[k].T for k in keys])
    qe = np.array([estimated[k].q.normalized().as_array() for k in keys])
    qt = np.array([truth[k].q.normalized().as_array() for k in keys])
    ang = np.linalg.norm(quat_to_rotvec(quat_multiply(qe, quat_conjugate(qt))), axis=1)
    rot = float(np.degrees(np.sqrt(np.mean(ang**2))))
    return ErrorReport(label, sample, pose_rmse=rmse(dT), rotation_rmse_deg=rot,
                       counts={"pose": len(keys)})


def _tie_ids(result) -> list:
    return [p for p, role in result.roles.items() if role == "tie"]


def evaluate_in_sample(result, truth: TruthRecord, label="") -> ErrorReport:
    """Training reprojection, tie-point and training-pose errors."""
    rep = ErrorReport(label, "in_sample")
    if result.records is not None:
        rep = rep.merged(reprojection_report(result.records, label))
    ties = {p: result.points[p] for p in _tie_ids(result)}
    if ties:
        rep = rep.merged(object_space_report(ties, truth.targets, label))
    rep = rep.merged(pose_report(result.poses, truth.poses, label))
    rep.sample = "in_sample"
    return rep


@dataclass
class OutOfSample:
    report: ErrorReport
    poses: dict
    points: dict
    records: ResidualRecords


def evaluate_out_of_sample(result, test: ObservationSet, truth: TruthRecord, init_poses: dict,
                           cfg: SolverConfig | None = None, label="", resect_on="control",
                           details=False):
    """Errors on frames never used for calibration.

    Test measurements are corrected with the trained models and each test
    frame is resected with the IOP and corrections fixed.  ``resect_on``
    selects the known points used for resection: ``"control"`` (surveyed
    control points only, default) or ``"all"`` (control plus calibrated tie
    points).  Tie points are then re-intersected from all test frames with
    the resected poses fixed.
    """
    cfg = cfg or SolverConfig()
    corr = result.corrections(test)
    if resect_on == "control":
        known = {p: result.points[p] for p, role in result.roles.items() if role == "control"}
    elif resect_on == "all":
        known = result.points
    else:
        raise ValueError(f"resect_on must be 'control' or 'all', got {resect_on!r}")
    m = np.isin(test.target_id, list(known))
    poses, _, _ = resect_poses(result.iop, corr[m], test.subset(m), known, init_poses, cfg)
    points, res = intersect_points(result.iop, poses, corr, test, result.points,
                                   free_ids=_tie_ids(result), cfg=cfg)
    ties = {p: points[p] for p in _tie_ids(result) if p in set(res.params.point_ids)}
    rep = reprojection_report(res.records, label, "out_of_sample")
    rep = rep.merged(object_space_report(ties, truth.targets, label))
    rep = rep.merged(pose_report(poses, truth.poses, label))
    rep.sample = "out_of_sample"
    if details:
        return OutOfSample(rep, poses, points, res.records)
    return rep


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def table_rows(reports: list, kind: str) -> list:
    """Rows of one table with improvements relative to the first report.

    ``kind`` is ``"image"``, ``"object"`` or ``"pose"``.
    """
    if kind == "image":
        attr, cols = "image_rmse", IMAGE_COLUMNS
    elif kind == "object":
        attr, cols = "object_rmse", OBJECT_COLUMNS
    elif kind == "pose":
        attr, cols = "pose_rmse", POSE_COLUMNS
    else:
        raise ValueError(f"unknown table kind {kind!r}")
    base = getattr(reports[0], attr)
    rows = []
    for rep in reports:
        vals = getattr(rep, attr)
        if vals is None:
            raise ValueError(f"report {rep.label!r} has no {attr}")
        row = {"label": rep.label}
        if kind == "image":
            row["cost"] = rep.cost
        for c, v in zip(cols, vals):
            row[c] = float(v)
        for c, v in zip(cols, improvement(base, vals)):
            row["impr_" + c.split("_")[1] + "_pct"] = float(v)
        if kind == "pose":
            row["rot_rmse_deg_aux"] = rep.rotation_rmse_deg
        rows.append(row)
    return rows


def rows_to_csv(rows: list) -> str:
    buf = io.StringIO()
    keys = list(rows[0])
    buf.write(",".join(keys) + "\n")
    for row in rows:
        buf.write(",".join(row[k] if isinstance(row[k], str) else _fmt(row[k]) for k in keys)
                  + "\n")
    return buf.getvalue()


def rows_to_text(rows: list, title="") -> str:
    """Aligned plain-text table, numbers rounded to 3 decimals."""
    keys = list(rows[0])
    cells = [keys] + [[r[k] if isinstance(r[k], str) else f"{r[k]:.3f}" for k in keys]
                      for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(keys))]
    lines = [title] if title else []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# figure data
# ---------------------------------------------------------------------------

def residual_histogram(records: ResidualRecords, bins=41, limit=None) -> str:
    """Histogram CSV of x and y residuals.

    Values beyond ``limit`` fall into the outermost bins, so each column
    sums to the number of observations.
    """
    r = records.residual
    if limit is None:
        limit = float(np.max(np.abs(r))) if len(r) else 1.0
        limit = limit if limit > 0 else 1.0
    edges = np.linspace(-limit, limit, bins + 1)
    clipped = np.clip(r, -limit, limit)
    cx, _ = np.histogram(clipped[:, 0], edges)
    cy, _ = np.histogram(clipped[:, 1], edges)
    lines = ["bin_lo_px,bin_hi_px,count_x,count_y"]
    for lo, hi, a, b in zip(edges[:-1], edges[1:], cx, cy):
        lines.append(f"{_fmt(lo)},{_fmt(hi)},{a},{b}")
    return "\n".join(lines) + "\n"


def residual_scatter(records: ResidualRecords) -> str:
    """Per-observation location and residual CSV."""
    lines = ["system_id,frame_id,target_id,x_px,y_px,rx_px,ry_px,inlier"]
    loc = records.location
    for i in range(len(records)):
        lines.append(",".join([records.system_id[i], records.frame_id[i], records.target_id[i],
                               _fmt(loc[i, 0]), _fmt(loc[i, 1]),
                               _fmt(records.residual[i, 0]), _fmt(records.residual[i, 1]),
                               "1" if records.inlier[i] else "0"]))
    return "\n".join(lines) + "\n"
