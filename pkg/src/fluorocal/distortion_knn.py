"""Non-parametric distortion field: kNN regression over a 2-D KD-tree.

The additional-parameter field ``(dx, dy)`` is represented by a cloud of
samples at image locations.  A prediction is the plain mean of the ``k``
nearest sample values; ``k`` is picked by k-fold cross-validation on a grid,
scoring each candidate with the covariance-weighted squared error of the
held-out samples.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import GridTooLarge, InsufficientSamples, ParseError
from .validation import check_points, check_values

DEFAULT_K_GRID = (1, 2, 3, 5, 8, 13, 21, 34, 55, 89)


class KDTreeIndex:
    """Exact k-nearest-neighbour index over 2-D locations.

    Neighbour lists are ordered by distance, with equal distances broken by
    the smaller sample index, so results never depend on tree layout.
    """

    def __init__(self, locations):
        self.locations = check_points(locations, "locations")
        if len(self.locations) == 0:
            raise InsufficientSamples("cannot index an empty location set")
        self._tree = cKDTree(self.locations, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.locations)

    def query(self, points, k):
        """Indices ``(m, k)`` and distances ``(m, k)`` of the nearest samples."""
        points = check_points(points, "points")
        n = len(self.locations)
        if not 1 <= k <= n:
            raise InsufficientSamples(f"k={k} needs 1..{n} samples")
        m = len(points)
        idx = np.empty((m, k), dtype=np.intp)
        pending = np.arange(m)
        pad = 4
        while len(pending):
            kq = min(n, k + pad)
            _, cand = self._tree.query(points[pending], k=kq)
            cand = np.asarray(cand).reshape(len(pending), kq)
            diff = self.locations[cand] - points[pending, None, :]
            d2 = np.einsum("mki,mki->mk", diff, diff)
            order = np.lexsort((cand, d2), axis=-1)
            d2 = np.take_along_axis(d2, order, axis=-1)
            cand = np.take_along_axis(cand, order, axis=-1)
            # the candidate list is complete unless the k-th distance is tied
            # with the last candidate returned by the tree
            if kq == n:
                done = np.ones(len(pending), dtype=bool)
            else:
                done = d2[:, kq - 1] > d2[:, k - 1]
            idx[pending[done]] = cand[done, :k]
            pending = pending[~done]
            pad *= 4
        diff = self.locations[idx] - points[:, None, :]
        dist = np.sqrt(np.einsum("mki,mki->mk", diff, diff))
        return idx, dist


def kdtree_build(locations) -> KDTreeIndex:
    return KDTreeIndex(locations)


def _neighbour_mean(values, idx, dist=None, weighting="uniform"):
    if weighting == "uniform":
        return values[idx].mean(axis=1)
    w = 1.0 / (dist + 1e-9)
    return np.einsum("mk,mki->mi", w, values[idx]) / w.sum(axis=1)[:, None]


@dataclass
class DistortionModel:
    """Sample set plus the selected neighbour count.

    ``values`` are cumulative corrections in pixels at ``locations``; ``G`` is
    the cross-validation cost at the chosen ``k`` (``nan`` when unknown, e.g.
    after loading from disk).
    """

    locations: np.ndarray
    values: np.ndarray
    k: int
    G: float = float("nan")
    cov: np.ndarray | None = None
    cv_table: dict = field(default_factory=dict)
    weighting: str = "uniform"

    def __post_init__(self):
        self.locations = check_points(self.locations, "locations")
        self.values = check_values(self.values, len(self.locations))
        self.k = int(self.k)
        if not 1 <= self.k <= len(self.locations):
            raise InsufficientSamples(
                f"k={self.k} but only {len(self.locations)} samples")
        self._index = None

    @property
    def index(self) -> KDTreeIndex:
        if self._index is None:
            self._index = KDTreeIndex(self.locations)
        return self._index

    def __len__(self):
        return len(self.locations)

    def predict(self, points) -> np.ndarray:
        points = check_points(points, "points")
        idx, dist = self.index.query(points, self.k)
        return _neighbour_mean(self.values, idx, dist, self.weighting)


def knn_predict(model: DistortionModel, query) -> np.ndarray:
    """Predicted ``(dx, dy)`` at one location ``(2,)`` or many ``(m, 2)``."""
    q = np.asarray(query, dtype=float)
    if len(model) < model.k:
        raise InsufficientSamples(f"model has {len(model)} samples, k={model.k}")
    out = model.predict(q.reshape(-1, 2))
    return out[0] if q.ndim == 1 else out


def correction_at_measured(model: DistortionModel | None, xy) -> np.ndarray:
    """Correction to subtract from measured points ``xy``.

    Model samples live at corrected locations, so the prediction is
    re-evaluated once at ``xy - prediction``.
    """
    xy = check_points(xy, "xy")
    if model is None:
        return np.zeros_like(xy)
    first = model.predict(xy)
    return model.predict(xy - first)


@dataclass
class CvConfig:
    k_grid: tuple | None = None
    folds: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.k_grid is not None:
            grid = tuple(int(k) for k in self.k_grid)
            if not grid:
                raise ValueError("k grid must be non-empty")
            if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 1:
                raise ValueError(f"k grid must be strictly increasing positive ints: {grid}")
            self.k_grid = grid
        if self.folds < 2:
            raise ValueError("need at least 2 folds")


def fold_assignment(n, folds, seed):
    """Fold label of every sample: a seeded shuffle dealt round-robin."""
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=np.intp)
    labels[perm] = np.arange(n) % folds
    return labels


def _inverse_blocks(cov, n):
    if cov is None:
        return np.broadcast_to(np.eye(2), (n, 2, 2))
    cov = np.asarray(cov, dtype=float)
    if cov.shape == (n, 2):
        return np.einsum("ni,ij->nij", 1.0 / cov, np.eye(2))
    return np.linalg.inv(cov)


def cv_select_k(locations, values, cov=None, cfg: CvConfig | None = None,
                weighting="uniform"):
    """Choose ``k`` by cross-validation.

    Parameters
    ----------
    locations, values : (n, 2) arrays
    cov : (n, 2, 2) or (n, 2) array, optional
        Residual covariance per sample; identity if omitted.

    Returns
    -------
    k_best : int
    table : dict mapping each candidate k to its cost G(k)

    Ties in G go to the smaller k.
    """
    cfg = cfg or CvConfig()
    locations = check_points(locations, "locations")
    values = check_values(values, len(locations))
    n = len(locations)
    if n < cfg.folds:
        raise InsufficientSamples(f"{n} samples for {cfg.folds}-fold CV")
    labels = fold_assignment(n, cfg.folds, cfg.seed)
    min_train = n - np.bincount(labels, minlength=cfg.folds).max()
    if cfg.k_grid is None:
        grid = tuple(k for k in DEFAULT_K_GRID if k <= min_train)
    else:
        grid = cfg.k_grid
        if grid[-1] > min_train:
            raise GridTooLarge(
                f"k={grid[-1]} exceeds smallest training fold ({min_train} samples)")
    W = _inverse_blocks(cov, n)
    kmax = grid[-1]
    cost = np.zeros(len(grid))
    for f in range(cfg.folds):
        test = np.flatnonzero(labels == f)
        train = np.flatnonzero(labels != f)
        index = KDTreeIndex(locations[train])
        idx, dist = index.query(locations[test], kmax)
        neigh = values[train][idx]
        if weighting == "uniform":
            csum = np.cumsum(neigh, axis=1)
        else:
            w = 1.0 / (dist + 1e-9)
            csum = np.cumsum(neigh * w[..., None], axis=1)
            wsum = np.cumsum(w, axis=1)
        for j, k in enumerate(grid):
            if weighting == "uniform":
                pred = csum[:, k - 1] / k
            else:
                pred = csum[:, k - 1] / wsum[:, k - 1, None]
            e = values[test] - pred
            cost[j] += np.einsum("ni,nij,nj->", e, W[test], e)
    table = {k: float(g) for k, g in zip(grid, cost)}
    best = grid[int(np.argmin(cost))]  # argmin returns the first minimum
    return best, table


def fit_distortion(records, prior: DistortionModel | None = None,
                   cfg: CvConfig | None = None, weighting="uniform",
                   detrend=None) -> DistortionModel:
    """Train a cumulative correction model from (inlier) residual records.

    ``records`` needs ``location`` (n, 2), ``residual`` (n, 2), ``cov``
    (n, 2, 2) and ``inlier`` (n,) attributes.  Sample values are the prior
    correction at each location plus the new residual, so the returned model
    predicts the accumulated correction, not the increment.  ``detrend``,
    if given, maps ``(locations, values)`` to adjusted values before the
    neighbour count is tuned.
    """
    cfg = cfg or CvConfig()
    mask = np.asarray(records.inlier, dtype=bool)
    loc = np.asarray(records.location, dtype=float)[mask]
    res = np.asarray(records.residual, dtype=float)[mask]
    cov = None if records.cov is None else np.asarray(records.cov)[mask]
    if len(loc) < cfg.folds:
        raise InsufficientSamples(
            f"{len(loc)} inlier residuals, need at least {cfg.folds}")
    values = res if prior is None else prior.predict(loc) + res
    if detrend is not None:
        values = detrend(loc, values)
    k, table = cv_select_k(loc, values, cov, cfg, weighting=weighting)
    return DistortionModel(loc, values, k, G=table[k], cov=cov, cv_table=table,
                           weighting=weighting)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def dumps_model(model: DistortionModel) -> str:
    buf = io.StringIO()
    buf.write(f"k={model.k}\n")
    buf.write("x_px,y_px,dx_px,dy_px\n")
    for (x, y), (dx, dy) in zip(model.locations.tolist(), model.values.tolist()):
        buf.write(f"{x!r},{y!r},{dx!r},{dy!r}\n")
    return buf.getvalue()


def save_model(model: DistortionModel, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8", newline="\n")


def load_model(path) -> DistortionModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("k="):
        raise ParseError("expected 'k=<value>' header", 1)
    try:
        k = int(lines[0][2:])
    except ValueError:
        raise ParseError(f"bad k value {lines[0][2:]!r}", 1) from None
    if len(lines) < 2 or lines[1].strip() != "x_px,y_px,dx_px,dy_px":
        raise ParseError("expected column header x_px,y_px,dx_px,dy_px", 2)
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, got {len(parts)}", lineno)
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    return DistortionModel(arr[:, :2], arr[:, 2:], k)


# ---------------------------------------------------------------------------
# estimator facade
# ---------------------------------------------------------------------------

class KNNDistortionRegressor(RegressorMixin, BaseEstimator):
    """kNN field regressor with cross-validated ``k``.

    Parameters
    ----------
    k_grid : sequence of int, optional
        Candidate neighbour counts; defaults to a Fibonacci-like grid capped
        at the smallest training fold.
    folds : int
    random_state : int
        Seed for the fold shuffle.
    weighting : {"uniform", "distance"}

    Attributes
    ----------
    model_ : DistortionModel
    k_ : int
    cv_results_ : dict
    """

    def __init__(self, k_grid=None, folds=10, random_state=0, weighting="uniform"):
        self.k_grid = k_grid
        self.folds = folds
        self.random_state = random_state
        self.weighting = weighting

    def fit(self, X, y, sample_cov=None):
        X = check_points(X, "X")
        y = check_values(y, len(X))
        cfg = CvConfig(self.k_grid, self.folds, self.random_state)
        k, table = cv_select_k(X, y, sample_cov, cfg, weighting=self.weighting)
        self.model_ = DistortionModel(X, y, k, G=table[k], cov=sample_cov,
                                      cv_table=table, weighting=self.weighting)
        self.k_ = k
        self.cv_results_ = table
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(X)

    def score(self, X, y, sample_weight=None):
        # r2 averaged over the two components
        return super().score(X, y, sample_weight=sample_weight)
