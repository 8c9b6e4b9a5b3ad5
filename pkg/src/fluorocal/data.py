"""Observation data model, CSV I/O and the synthetic scenario generator."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import DepthDegenerate, InfeasibleSpacing, ParseError, ValidationError
from .geometry import (
    InteriorOrientation,
    ObjectPoint,
    Pose,
    Quaternion,
    apply_rotation_increment,
    look_at_pose,
    project_arrays,
)

log = logging.getLogger(__name__)

OBS_HEADER = "system_id,frame_id,target_id,x_px,y_px,sigma_px"
PHANTOM_HEADER = "target_id,X_mm,Y_mm,Z_mm,role"
POSE_HEADER = "system_id,frame_id,X_mm,Y_mm,Z_mm,qw,qx,qy,qz"


def id_key(value):
    """Sort key that orders numeric ids numerically and the rest lexically."""
    s = str(value)
    try:
        return (0, int(s), s)
    except ValueError:
        return (1, 0, s)


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageObservation:
    system_id: str
    frame_id: str
    target_id: str
    x: float
    y: float
    sigma: float = 1.0


@dataclass
class ObservationSet:
    """Columnar store of image measurements, kept in canonical order.

    Rows are sorted by (system, frame, target).  ``phantom`` is optional;
    when present every observed target must exist in it.
    """

    system_id: np.ndarray
    frame_id: np.ndarray
    target_id: np.ndarray
    xy: np.ndarray
    sigma: np.ndarray
    phantom: list | None = None

    def __post_init__(self):
        self.system_id = np.asarray(self.system_id, dtype=object).astype(str).astype(object)
        self.frame_id = np.asarray(self.frame_id, dtype=object).astype(str).astype(object)
        self.target_id = np.asarray(self.target_id, dtype=object).astype(str).astype(object)
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(-1)
        n = len(self.xy)
        if not (len(self.system_id) == len(self.frame_id) == len(self.target_id)
                == len(self.sigma) == n):
            raise ValidationError("observation columns differ in length")
        order = sorted(range(n), key=lambda i: (id_key(self.system_id[i]),
                                                id_key(self.frame_id[i]),
                                                id_key(self.target_id[i])))
        if order != list(range(n)):
            order = np.array(order, dtype=np.intp)
            self.system_id = self.system_id[order]
            self.frame_id = self.frame_id[order]
            self.target_id = self.target_id[order]
            self.xy = self.xy[order]
            self.sigma = self.sigma[order]

    def __len__(self):
        return len(self.xy)

    @classmethod
    def from_observations(cls, observations, phantom=None) -> "ObservationSet":
        obs = list(observations)
        return cls([o.system_id for o in obs], [o.frame_id for o in obs],
                   [o.target_id for o in obs], [[o.x, o.y] for o in obs],
                   [o.sigma for o in obs], phantom)

    @property
    def observations(self) -> list:
        return [ImageObservation(s, f, t, float(x), float(y), float(sg))
                for s, f, t, (x, y), sg in zip(self.system_id, self.frame_id,
                                               self.target_id, self.xy, self.sigma)]

    @property
    def frames(self) -> list:
        seen = dict.fromkeys(zip(self.system_id, self.frame_id))
        return list(seen)

    @property
    def systems(self) -> list:
        return list(dict.fromkeys(self.system_id))

    @property
    def frame_keys(self) -> np.ndarray:
        return np.array(list(zip(self.system_id, self.frame_id)), dtype=object)

    def phantom_by_id(self) -> dict:
        return {p.id: p for p in (self.phantom or [])}

    def subset(self, mask) -> "ObservationSet":
        mask = np.asarray(mask)
        return ObservationSet(self.system_id[mask], self.frame_id[mask],
                              self.target_id[mask], self.xy[mask], self.sigma[mask],
                              self.phantom)

    def select_frames(self, frames) -> "ObservationSet":
        wanted = {(str(s), str(f)) for s, f in frames}
        mask = np.array([(s, f) in wanted for s, f in zip(self.system_id, self.frame_id)],
                        dtype=bool)
        return self.subset(mask)

    def select_systems(self, systems) -> "ObservationSet":
        wanted = {str(s) for s in systems}
        return self.subset(np.array([s in wanted for s in self.system_id], dtype=bool))

    def with_xy(self, xy) -> "ObservationSet":
        return replace(self, xy=np.asarray(xy, dtype=float).copy())

    def validate(self) -> "ObservationSet":
        """Check key uniqueness, sigma, target membership and frame geometry."""
        keys = list(zip(self.system_id, self.frame_id, self.target_id))
        seen = set()
        for key in keys:
            if key in seen:
                raise ValidationError(
                    f"duplicate observation (system={key[0]}, frame={key[1]}, target={key[2]})")
            seen.add(key)
        if np.any(~(self.sigma > 0)):
            raise ValidationError("sigma_px must be positive")
        if not np.all(np.isfinite(self.xy)):
            raise ValidationError("non-finite image coordinates")
        phantom = self.phantom_by_id() if self.phantom is not None else None
        if phantom is not None:
            unknown = sorted(set(self.target_id) - set(phantom), key=id_key)
            if unknown:
                raise ValidationError(f"unknown target id(s): {', '.join(unknown[:5])}")
        for s, f in self.frames:
            rows = np.flatnonzero((self.system_id == s) & (self.frame_id == f))
            if len(rows) < 3:
                raise ValidationError(
                    f"frame (system={s}, frame={f}) observes {len(rows)} targets; need >= 3")
            if _collinear(self.xy[rows]):
                raise ValidationError(
                    f"frame (system={s}, frame={f}): observed targets are collinear in the image")
            if phantom is not None:
                pts = np.array([phantom[t].P for t in self.target_id[rows]])
                if _collinear(pts):
                    raise ValidationError(
                        f"frame (system={s}, frame={f}): observed targets are collinear")
        return self


def _collinear(points, rtol=1e-9):
    pts = np.asarray(points, dtype=float)
    centred = pts - pts.mean(axis=0)
    s = np.linalg.svd(centred, compute_uv=False)
    if s[0] == 0.0:
        return True
    return s[1] <= rtol * s[0]


def _read_csv_rows(path, header, ncols):
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].rstrip("\r") != header:
        raise ParseError(f"expected header {header!r}", 1)
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != ncols:
            raise ParseError(f"expected {ncols} fields, got {len(parts)}", lineno)
        yield lineno, [p.strip() for p in parts]


def _parse_float(text, lineno, name):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{name}: {text!r} is not a number", lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"{name}: non-finite value", lineno)
    return value


def load_observations(path, phantom=None) -> ObservationSet:
    """Read and validate an observation CSV.

    ``phantom`` may be a list of :class:`ObjectPoint` or a path to a phantom
    CSV.  Raises :class:`ParseError` on malformed rows and
    :class:`ValidationError` on invariant violations.
    """
    if phantom is not None and not isinstance(phantom, list):
        phantom = load_phantom(phantom)
    cols = ([], [], [], [], [])
    for lineno, (s, f, t, x, y, sg) in _read_csv_rows(path, OBS_HEADER, 6):
        if not (s and f and t):
            raise ParseError("empty id field", lineno)
        cols[0].append(s)
        cols[1].append(f)
        cols[2].append(t)
        cols[3].append([_parse_float(x, lineno, "x_px"), _parse_float(y, lineno, "y_px")])
        cols[4].append(_parse_float(sg, lineno, "sigma_px"))
    obs = ObservationSet(cols[0], cols[1], cols[2], np.array(cols[3]).reshape(-1, 2),
                         cols[4], phantom)
    return obs.validate()


def dumps_observations(obs: ObservationSet) -> str:
    buf = io.StringIO()
    buf.write(OBS_HEADER + "\n")
    for s, f, t, (x, y), sg in zip(obs.system_id, obs.frame_id, obs.target_id,
                                   obs.xy.tolist(), obs.sigma.tolist()):
        buf.write(f"{s},{f},{t},{_fmt(x)},{_fmt(y)},{_fmt(sg)}\n")
    return buf.getvalue()


def save_observations(obs: ObservationSet, path) -> None:
    Path(path).write_text(dumps_observations(obs), encoding="utf-8", newline="\n")


def load_phantom(path) -> list:
    points, seen = [], set()
    for lineno, (t, X, Y, Z, role) in _read_csv_rows(path, PHANTOM_HEADER, 5):
        if t in seen:
            raise ValidationError(f"duplicate target id {t}")
        if role not in ("control", "tie"):
            raise ParseError(f"role must be control or tie, got {role!r}", lineno)
        seen.add(t)
        points.append(ObjectPoint(t, [_parse_float(X, lineno, "X_mm"),
                                      _parse_float(Y, lineno, "Y_mm"),
                                      _parse_float(Z, lineno, "Z_mm")], role))
    return sorted(points, key=lambda p: id_key(p.id))


def save_phantom(points, path) -> None:
    buf = io.StringIO()
    buf.write(PHANTOM_HEADER + "\n")
    for p in sorted(points, key=lambda p: id_key(p.id)):
        X, Y, Z = p.P.tolist()
        buf.write(f"{p.id},{_fmt(X)},{_fmt(Y)},{_fmt(Z)},{p.role}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def load_poses(path) -> dict:
    """``{(system_id, frame_id): Pose}`` from a pose CSV."""
    poses = {}
    for lineno, row in _read_csv_rows(path, POSE_HEADER, 9):
        vals = [_parse_float(v, lineno, "pose") for v in row[2:]]
        poses[(row[0], row[1])] = Pose(vals[:3], Quaternion.from_array(vals[3:]))
    return poses


def save_poses(poses: dict, path) -> None:
    buf = io.StringIO()
    buf.write(POSE_HEADER + "\n")
    for (s, f) in sorted(poses, key=lambda k: (id_key(k[0]), id_key(k[1]))):
        pose = poses[(s, f)]
        vals = list(pose.T) + list(pose.q.as_array())
        buf.write(f"{s},{f}," + ",".join(_fmt(v) for v in vals) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

def generate_phantom(side_mm=200.0, n_targets=500, seed=0, max_rounds=1000) -> list:
    """Targets on a cube of side ``side_mm`` centred at the origin.

    The 8 corners come first and form the control (datum) subset.  Remaining
    targets are drawn on faces (70%), edges (10%) and the interior (20%) by
    rejection sampling with minimum spacing ``side/(2 * n**(1/3))``.
    """
    if n_targets < 8:
        raise ValueError("need at least 8 targets (the cube corners)")
    if not side_mm > 0:
        raise ValueError("side_mm must be positive")
    rng = np.random.default_rng(seed)
    h = 0.5 * side_mm
    corners = np.array([[sx, sy, sz] for sx in (-h, h) for sy in (-h, h) for sz in (-h, h)])
    d_min = side_mm / (2.0 * n_targets ** (1.0 / 3.0))
    pts = np.empty((n_targets, 3))
    pts[:8] = corners
    count = 8
    while count < n_targets:
        for _ in range(max_rounds):
            kind = rng.random()
            cand = rng.uniform(-h, h, 3)
            if kind < 0.7:
                axis = rng.integers(3)
                cand[axis] = h if rng.random() < 0.5 else -h
            elif kind < 0.8:
                axes = rng.choice(3, size=2, replace=False)
                cand[axes] = np.where(rng.random(2) < 0.5, -h, h)
            else:
                cand *= 0.8
            d2 = np.sum((pts[:count] - cand) ** 2, axis=1)
            if d2.min() >= d_min * d_min:
                pts[count] = cand
                count += 1
                break
        else:
            raise InfeasibleSpacing(
                f"could not place target {count + 1} of {n_targets} with spacing "
                f"{d_min:.3f} mm after {max_rounds} rounds")
    return [ObjectPoint(str(i + 1), pts[i], "control" if i < 8 else "tie")
            for i in range(n_targets)]


# ---------------------------------------------------------------------------
# synthetic distortion field
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DistortionField:
    """Smooth analytic image-error field (pixels).

    ``dx = radial * r^2 (x - x0) + wave * sin(2 pi (y - y0) / wavelength)``
    and symmetrically for ``dy`` with x and y swapped in the sine term.
    """

    radial: float = 0.0
    wave: float = 0.0
    x0: float = 511.5
    y0: float = 511.5
    wavelength: float = 700.0

    def __call__(self, xy):
        xy = np.asarray(xy, dtype=float)
        dx = xy[..., 0] - self.x0
        dy = xy[..., 1] - self.y0
        r2 = dx * dx + dy * dy
        k = 2.0 * np.pi / self.wavelength
        return np.stack([self.radial * r2 * dx + self.wave * np.sin(k * dy),
                         self.radial * r2 * dy + self.wave * np.sin(k * dx)], axis=-1)

    def scaled(self, factor: float) -> "DistortionField":
        return replace(self, radial=self.radial * factor, wave=self.wave * factor)

    def as_list(self):
        return [self.radial, self.wave, self.x0, self.y0, self.wavelength]


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemSpec:
    """True interior orientation, distortion and pose layout of one imager."""

    iop: InteriorOrientation
    field: DistortionField
    azimuth_offset_deg: float = 0.0


def _default_systems():
    return (
        SystemSpec(InteriorOrientation(511.5 + 6.0, 511.5 - 9.0, 3060.0),
                   DistortionField(radial=2.4e-8)),
        SystemSpec(InteriorOrientation(511.5 - 8.0, 511.5 + 5.0, 2945.0),
                   DistortionField(radial=2.2e-8, x0=530.0, y0=500.0),
                   azimuth_offset_deg=90.0),
    )


@dataclass(frozen=True)
class SyntheticScenario:
    """Everything needed to synthesize a calibration data set.

    Image coordinates are pixel column (x) and row (y) indices of a
    ``width x height`` frame; the nominal principal point is the frame
    centre and ``c_nominal`` the nominal principal distance.

    The default ``field_scale`` was found with :func:`tune_field_scale` so
    that an uncalibrated adjustment of the seed-42 training set has a
    reprojection RMSE of about 1.15 px (mean over x and y).
    """

    side_mm: float = 200.0
    n_targets: int = 500
    n_systems: int = 1
    frames_total: int = 150
    frames_train: int = 15
    noise_sigma_px: float = 0.3
    sigma_prior_px: float = 1.0
    width: int = 1024
    height: int = 1024
    c_nominal: float = 3000.0
    distance_mm: float = 840.0
    distance_jitter_mm: float = 40.0
    elevation_deg: float = 25.0
    roll_deg: float = 15.0
    lookat_jitter_mm: float = 10.0
    field_scale: float = 3.12
    phantom_tolerance_mm: float = 0.5
    init_translation_mm: float = 5.0
    init_rotation_deg: float = 2.0
    gross_fraction: float = 0.0
    gross_sigmas: float = 10.0
    seed: int = 42
    systems: tuple = field(default_factory=_default_systems)

    def __post_init__(self):
        if self.frames_train > self.frames_total:
            raise ValueError("train exceeds total")
        if self.frames_train < 1:
            raise ValueError("need at least one training frame")
        if self.n_systems < 1 or self.n_systems > len(self.systems):
            raise ValueError(f"n_systems must be 1..{len(self.systems)}")
        if not self.noise_sigma_px >= 0 or not self.sigma_prior_px > 0:
            raise ValueError("noise sigma must be >= 0 and prior sigma > 0")

    @property
    def nominal_iop(self) -> InteriorOrientation:
        return InteriorOrientation((self.width - 1) / 2.0, (self.height - 1) / 2.0,
                                   self.c_nominal)

    def system_ids(self):
        return [str(s + 1) for s in range(self.n_systems)]

    def true_iop(self, system_id) -> InteriorOrientation:
        return self.systems[int(system_id) - 1].iop

    def true_field(self, system_id) -> DistortionField:
        return self.systems[int(system_id) - 1].field.scaled(self.field_scale)


@dataclass
class TruthRecord:
    seed: int
    noise_sigma_px: float
    sigma_prior_px: float
    iop: dict
    fields: dict
    poses: dict
    targets: dict
    train_frames: list
    test_frames: list
    gross: set = field(default_factory=set)
    nominal_iop: InteriorOrientation | None = None
    image_size: tuple = (1024, 1024)


@dataclass
class Simulation:
    """Output of :func:`simulate_captures`.

    ``phantom`` holds the surveyed control points and *nominal* tie-point
    coordinates (design values with manufacturing scatter); the exact target
    positions live in ``truth.targets``.
    """

    train: ObservationSet
    test: ObservationSet
    truth: TruthRecord
    phantom: list
    init_poses: dict
    ideal_train: np.ndarray | None = None


def _orbit_poses(scn: SyntheticScenario, spec: SystemSpec, rng):
    poses = []
    n = scn.frames_total
    step = 2.0 * np.pi / n
    for j in range(n):
        az = np.deg2rad(spec.azimuth_offset_deg) + step * (j + rng.uniform(-0.4, 0.4))
        el = np.deg2rad(rng.uniform(-scn.elevation_deg, scn.elevation_deg))
        dist = scn.distance_mm + rng.uniform(-scn.distance_jitter_mm, scn.distance_jitter_mm)
        centre = dist * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        target = rng.uniform(-scn.lookat_jitter_mm, scn.lookat_jitter_mm, 3)
        roll = np.deg2rad(rng.uniform(-scn.roll_deg, scn.roll_deg))
        poses.append(look_at_pose(centre, target, roll))
    return poses


def split_frames(n_total, n_train, rng):
    """Uniformly spaced training frames with a random phase; rest are test."""
    step = n_total / n_train
    offset = rng.uniform(0.0, step)
    train = sorted({int(math.floor(offset + i * step)) % n_total for i in range(n_train)})
    test = [j for j in range(n_total) if j not in set(train)]
    return train, test


def perturb_pose(pose: Pose, rng, translation_mm, rotation_deg) -> Pose:
    dT = rng.uniform(-translation_mm, translation_mm, 3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-rotation_deg, rotation_deg))
    q = apply_rotation_increment(pose.q.as_array(), axis * angle)
    return Pose(pose.T + dT, Quaternion.from_array(q))


def simulate_captures(scn: SyntheticScenario) -> Simulation:
    """Synthesize train/test observation sets for ``scn``.

    Each target is projected with the true IOP, shifted by the true
    distortion evaluated at its ideal location, and perturbed with i.i.d.
    Gaussian noise.  A target is visible when its ideal projection falls
    inside the frame and in front of the sensor.
    """
    rng = np.random.default_rng(scn.seed)
    targets = generate_phantom(scn.side_mm, scn.n_targets, int(rng.integers(2**31)))
    P = np.array([t.P for t in targets])
    ids = np.array([t.id for t in targets], dtype=object)

    nominal = []
    for t in targets:
        if t.role == "control":
            nominal.append(t)
        else:
            nominal.append(ObjectPoint(
                t.id, t.P + rng.normal(0.0, scn.phantom_tolerance_mm, 3), "tie"))

    rows = {"s": [], "f": [], "t": [], "xy": [], "ideal": [], "train": []}
    true_poses, init_poses = {}, {}
    train_frames, test_frames = [], []
    for sid in scn.system_ids():
        spec = scn.systems[int(sid) - 1]
        iop = spec.iop.as_array()
        fld = scn.true_field(sid)
        poses = _orbit_poses(scn, spec, rng)
        train_idx, _ = split_frames(scn.frames_total, scn.frames_train, rng)
        train_set = set(train_idx)
        for j, pose in enumerate(poses):
            fid = str(j)
            true_poses[(sid, fid)] = pose
            init_poses[(sid, fid)] = perturb_pose(pose, rng, scn.init_translation_mm,
                                                  scn.init_rotation_deg)
            (train_frames if j in train_set else test_frames).append((sid, fid))
            try:
                ideal, u = project_arrays(iop, np.zeros(2), pose.T, pose.q.as_array(), P)
            except DepthDegenerate:
                u = np.array([(pose.R @ (p - pose.T)) for p in P])
                keep = np.abs(u[:, 2]) > 1e-6
                log.warning("system %s frame %s: dropping %d degenerate targets",
                            sid, fid, int((~keep).sum()))
                ideal = np.full((len(P), 2), np.nan)
                ideal[keep], _ = project_arrays(iop, np.zeros(2), pose.T,
                                                pose.q.as_array(), P[keep])
            visible = ((u[:, 2] < 0) & (ideal[:, 0] >= 0) & (ideal[:, 0] <= scn.width - 1)
                       & (ideal[:, 1] >= 0) & (ideal[:, 1] <= scn.height - 1))
            vis = np.flatnonzero(visible)
            noise = rng.normal(0.0, 1.0, (len(vis), 2)) * scn.noise_sigma_px
            observed = ideal[vis] + fld(ideal[vis]) + noise
            rows["s"].extend([sid] * len(vis))
            rows["f"].extend([fid] * len(vis))
            rows["t"].extend(ids[vis])
            rows["xy"].append(observed)
            rows["ideal"].append(ideal[vis])
            rows["train"].extend([j in train_set] * len(vis))

    xy = np.concatenate(rows["xy"])
    ideal = np.concatenate(rows["ideal"])
    is_train = np.array(rows["train"], dtype=bool)
    sigma = np.full(len(xy), scn.sigma_prior_px)
    s = np.array(rows["s"], dtype=object)
    f = np.array(rows["f"], dtype=object)
    t = np.array(rows["t"], dtype=object)

    gross = set()
    if scn.gross_fraction > 0:
        tr = np.flatnonzero(is_train)
        n_bad = int(round(scn.gross_fraction * len(tr)))
        bad = np.sort(rng.choice(tr, size=n_bad, replace=False))
        signs = rng.choice([-1.0, 1.0], size=(n_bad, 2))
        xy[bad] += signs * scn.gross_sigmas * scn.sigma_prior_px
        gross = {(s[i], f[i], t[i]) for i in bad}

    train = ObservationSet(s[is_train], f[is_train], t[is_train], xy[is_train],
                           sigma[is_train], nominal)
    test = ObservationSet(s[~is_train], f[~is_train], t[~is_train], xy[~is_train],
                          sigma[~is_train], nominal)
    ideal_train = ObservationSet(s[is_train], f[is_train], t[is_train], ideal[is_train],
                                 sigma[is_train]).xy

    truth = TruthRecord(
        seed=scn.seed,
        noise_sigma_px=scn.noise_sigma_px,
        sigma_prior_px=scn.sigma_prior_px,
        iop={sid: scn.true_iop(sid) for sid in scn.system_ids()},
        fields={sid: scn.true_field(sid) for sid in scn.system_ids()},
        poses=true_poses,
        targets={tp.id: tp.P for tp in targets},
        train_frames=train_frames,
        test_frames=test_frames,
        gross=gross,
        nominal_iop=scn.nominal_iop,
        image_size=(scn.width, scn.height),
    )
    return Simulation(train, test, truth, nominal, init_poses, ideal_train)


# ---------------------------------------------------------------------------
# truth record file
# ---------------------------------------------------------------------------

def dumps_truth(truth: TruthRecord) -> str:
    lines = ["# synthetic scenario truth record"]
    lines.append(f"seed = {truth.seed}")
    lines.append(f"noise_sigma_px = {_fmt(truth.noise_sigma_px)}")
    lines.append(f"sigma_prior_px = {_fmt(truth.sigma_prior_px)}")
    lines.append(f"image_size = {truth.image_size[0]} {truth.image_size[1]}")
    if truth.nominal_iop is not None:
        lines.append("nominal_iop = " + " ".join(_fmt(v) for v in truth.nominal_iop.as_array()))
    for sid in sorted(truth.iop, key=id_key):
        lines.append(f"system.{sid}.iop = " + " ".join(_fmt(v) for v in truth.iop[sid].as_array()))
        lines.append(f"system.{sid}.field = " + " ".join(_fmt(v) for v in truth.fields[sid].as_list()))
    train = set(truth.train_frames)
    for key in sorted(truth.poses, key=lambda k: (id_key(k[0]), id_key(k[1]))):
        pose = truth.poses[key]
        vals = list(pose.T) + list(pose.q.as_array())
        lines.append(f"frame.{key[0]}.{key[1]}.pose = " + " ".join(_fmt(v) for v in vals))
        lines.append(f"frame.{key[0]}.{key[1]}.split = {'train' if key in train else 'test'}")
    for tid in sorted(truth.targets, key=id_key):
        lines.append(f"target.{tid} = " + " ".join(_fmt(v) for v in truth.targets[tid]))
    for key in sorted(truth.gross, key=lambda k: tuple(id_key(v) for v in k)):
        lines.append(f"gross.{key[0]}.{key[1]}.{key[2]} = 1")
    return "\n".join(lines) + "\n"


def save_truth(truth: TruthRecord, path) -> None:
    Path(path).write_text(dumps_truth(truth), encoding="utf-8", newline="\n")


def parse_key_values(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno)
        out[key] = value
    return out


def load_truth(path) -> TruthRecord:
    kv = parse_key_values(Path(path).read_text(encoding="utf-8"))

    def floats(v):
        return [float(x) for x in v.split()]

    iop, fields, poses, targets, gross = {}, {}, {}, {}, set()
    train, test = [], []
    for key, value in kv.items():
        parts = key.split(".")
        if parts[0] == "system" and parts[-1] == "iop":
            iop[parts[1]] = InteriorOrientation(*floats(value))
        elif parts[0] == "system" and parts[-1] == "field":
            fields[parts[1]] = DistortionField(*floats(value))
        elif parts[0] == "frame" and parts[-1] == "pose":
            v = floats(value)
            poses[(parts[1], parts[2])] = Pose(v[:3], Quaternion.from_array(v[3:]))
        elif parts[0] == "frame" and parts[-1] == "split":
            (train if value == "train" else test).append((parts[1], parts[2]))
        elif parts[0] == "target":
            targets[".".join(parts[1:])] = np.array(floats(value))
        elif parts[0] == "gross":
            gross.add((parts[1], parts[2], ".".join(parts[3:])))
    size = tuple(int(v) for v in kv.get("image_size", "1024 1024").split())
    nominal = InteriorOrientation(*floats(kv["nominal_iop"])) if "nominal_iop" in kv else None
    return TruthRecord(int(kv.get("seed", 0)), float(kv.get("noise_sigma_px", "nan")),
                       float(kv.get("sigma_prior_px", "nan")), iop, fields, poses, targets,
                       train, test, gross, nominal, size)


def tune_field_scale(measure, target, lo=0.0, hi=4.0, tol=1e-3, max_iter=60):
    """Bisection for the field scale at which ``measure(scale)`` hits ``target``.

    ``measure`` must be increasing in the scale (e.g. the uncalibrated
    reprojection RMSE of a scenario with that field scale).
    """
    f_lo, f_hi = measure(lo) - target, measure(hi) - target
    if f_lo > 0 or f_hi < 0:
        raise ValueError("target not bracketed by [lo, hi]")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = measure(mid) - target
        if f_mid > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)
