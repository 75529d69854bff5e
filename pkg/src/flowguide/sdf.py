"""Voxel occupancy, exact Euclidean distance transforms and continuous queries.

Distances are unsigned: zero on occupied voxels, positive elsewhere, measured
between voxel centres. Grid nodes sit at voxel centres,
``origin + (index + 0.5) * voxel_size``.
"""

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _fastpath
from ._validation import check_points, check_positive

logger = logging.getLogger(__name__)

_BIG = 1e20


@dataclass
class PointCloud:
    """Points (M, 3) with optional per-point relevance scores and labels.

    ``relevance_filters`` records ``(scorer, percentile, threshold)`` for each
    relevance filter already applied, so that re-applying one is a no-op.
    """

    points: np.ndarray
    scores: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    relevance_filters: tuple = ()

    def __post_init__(self):
        self.points = check_points(self.points)
        n = len(self.points)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
            if len(self.scores) != n:
                raise ValueError("scores must have one entry per point")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=object).reshape(-1)
            if len(self.labels) != n:
                raise ValueError("labels must have one entry per point")

    def __len__(self):
        return len(self.points)

    def subset(self, mask):
        return PointCloud(self.points[mask],
                          None if self.scores is None else self.scores[mask],
                          None if self.labels is None else self.labels[mask],
                          self.relevance_filters)

    @classmethod
    def concatenate(cls, clouds):
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return cls(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        scores = None
        if all(c.scores is not None for c in clouds):
            scores = np.concatenate([c.scores for c in clouds])
        labels = None
        if any(c.labels is not None for c in clouds):
            labels = np.concatenate([c.labels if c.labels is not None
                                     else np.full(len(c), "", dtype=object) for c in clouds])
        return cls(pts, scores, labels)


@dataclass
class OccupancyGrid:
    dims: tuple
    voxel_size: float
    origin: np.ndarray
    occupied: np.ndarray
    dropped: int = 0

    def node_positions(self):
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def voxel_index(self, points):
        return np.floor((np.asarray(points, dtype=float) - self.origin) / self.voxel_size).astype(np.int64)


@dataclass
class SdfGrid:
    """Per-voxel distances in metres plus the source grid metadata.

    ``squared_voxels`` keeps the exact integer squared distances in voxel
    units; ``distances`` is ``sqrt(squared_voxels) * voxel_size``. An empty
    grid has ``distances == inf`` everywhere.
    """

    distances: np.ndarray
    squared_voxels: np.ndarray
    voxel_size: float
    origin: np.ndarray
    barrier_d: float = 0.15
    empty: bool = False
    _node_grad: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dims(self):
        return self.distances.shape

    @property
    def upper(self):
        return self.origin + np.asarray(self.dims) * self.voxel_size

    def node_gradients(self):
        """Forward differences on nodes, (3, nx, ny, nz); backward at the last node."""
        if self._node_grad is None:
            D = self.distances
            g = np.zeros((3,) + D.shape)
            if not self.empty:
                for a in range(3):
                    n = D.shape[a]
                    if n < 2:
                        continue
                    diff = np.diff(D, axis=a) / self.voxel_size
                    sl_all = [slice(None)] * 3
                    sl_all[a] = slice(0, n - 1)
                    g[a][tuple(sl_all)] = diff
                    sl_last = [slice(None)] * 3
                    sl_last[a] = slice(n - 1, n)
                    sl_prev = [slice(None)] * 3
                    sl_prev[a] = slice(n - 2, n - 1)
                    g[a][tuple(sl_last)] = diff[tuple(sl_prev)]
            self._node_grad = g
        return self._node_grad


def build_occupancy(cloud, voxel_size, bounds):
    """Mark every voxel containing at least one in-bounds point.

    ``bounds`` is ``(lower[3], upper[3])``. The grid spans
    ``ceil((upper - lower) / voxel_size)`` voxels per axis from ``lower``;
    points outside are dropped and counted in ``OccupancyGrid.dropped``.
    """
    voxel_size = check_positive(voxel_size, "voxel_size")
    lower = np.asarray(bounds[0], dtype=float).reshape(3)
    upper = np.asarray(bounds[1], dtype=float).reshape(3)
    if np.any(upper <= lower):
        raise ValueError("bounds must satisfy lower < upper on every axis")
    dims = tuple(int(max(1, math.ceil((upper[a] - lower[a]) / voxel_size - 1e-9))) for a in range(3))
    occ = np.zeros(dims, dtype=bool)
    pts = cloud.points if isinstance(cloud, PointCloud) else check_points(cloud)
    idx = np.floor((pts - lower) / voxel_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1) if len(pts) else np.zeros(0, bool)
    dropped = int(len(pts) - inside.sum())
    if dropped:
        logger.debug("dropped %d out-of-bounds points", dropped)
    idx = idx[inside]
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return OccupancyGrid(dims, voxel_size, lower, occ, dropped)


@numba.njit(cache=True)
def _edt_rows(f):
    """Squared 1-D distance transform of every row of ``f`` (lower envelope of parabolas)."""
    m, n = f.shape
    out = np.empty_like(f)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    for r in range(m):
        row = f[r]
        k = 0
        v[0] = 0
        z[0] = -np.inf
        z[1] = np.inf
        for q in range(1, n):
            s = ((row[q] + q * q) - (row[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
            while s <= z[k]:
                k -= 1
                s = ((row[q] + q * q) - (row[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            d = q - v[k]
            out[r, q] = d * d + row[v[k]]
    return out


def _edt_axis(f, axis):
    moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
    shape = moved.shape
    res = _edt_rows(moved.reshape(-1, shape[-1])).reshape(shape)
    return np.moveaxis(res, -1, axis)


def squared_edt(occupied):
    """Exact squared Euclidean distance (voxel units) to the nearest occupied voxel."""
    f = np.where(occupied, 0.0, _BIG)
    for axis in range(f.ndim):
        f = _edt_axis(f, axis)
    return f


def compute_sdf(grid, barrier_d=0.15):
    """Exact separable distance transform of an occupancy grid."""
    if not grid.occupied.any():
        sq = np.full(grid.dims, np.inf)
        return SdfGrid(np.full(grid.dims, np.inf), sq, grid.voxel_size, grid.origin.copy(),
                       barrier_d, empty=True)
    sq = squared_edt(grid.occupied)
    return SdfGrid(np.sqrt(sq) * grid.voxel_size, sq, grid.voxel_size, grid.origin.copy(), barrier_d)


def _interp_setup(sdf, x):
    x = np.asarray(x, dtype=float)
    dims = np.asarray(sdf.dims)
    u = (x - sdf.origin) / sdf.voxel_size - 0.5
    uc = np.clip(u, 0.0, dims - 1)
    offset = (u - uc) * sdf.voxel_size
    i0 = np.minimum(np.floor(uc).astype(np.int64), np.maximum(dims - 2, 0))
    frac = uc - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    return i0, i1, frac, offset


def _trilinear(values, i0, i1, frac):
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    x1, y1, z1 = i1[..., 0], i1[..., 1], i1[..., 2]
    c00 = values[x0, y0, z0] * (1 - fx) + values[x1, y0, z0] * fx
    c01 = values[x0, y0, z1] * (1 - fx) + values[x1, y0, z1] * fx
    c10 = values[x0, y1, z0] * (1 - fx) + values[x1, y1, z0] * fx
    c11 = values[x0, y1, z1] * (1 - fx) + values[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def query_sdf(sdf, x):
    """Trilinear distance at points ``x`` (..., 3).

    Outside the node lattice the query is clamped to the boundary and the
    Euclidean offset to the clamped point is added.
    """
    x = np.asarray(x, dtype=float)
    if sdf.empty:
        return np.full(x.shape[:-1], np.inf)
    i0, i1, frac, offset = _interp_setup(sdf, x)
    return _trilinear(sdf.distances, i0, i1, frac) + np.linalg.norm(offset, axis=-1)


def query_sdf_gradient(sdf, x):
    """Trilinearly interpolated forward-difference gradient at ``x`` (..., 3)."""
    x = np.asarray(x, dtype=float)
    if sdf.empty:
        return np.zeros(x.shape)
    i0, i1, frac, offset = _interp_setup(sdf, x)
    G = sdf.node_gradients()
    g = np.stack([_trilinear(G[a], i0, i1, frac) for a in range(3)], axis=-1)
    norm = np.linalg.norm(offset, axis=-1, keepdims=True)
    outside = np.abs(offset) > 0
    if np.any(outside):
        unit = np.divide(offset, norm, out=np.zeros_like(offset), where=norm > 0)
        g = np.where(outside, unit, g)
    return g


def query_sdf_with_gradient(sdf, x):
    """Distance and gradient in one pass, sharing the interpolation setup."""
    x = np.asarray(x, dtype=float)
    if sdf.empty:
        return np.full(x.shape[:-1], np.inf), np.zeros(x.shape)
    if x.dtype == np.float64:
        d, g = _fastpath.trilinear_value_grad(sdf.distances, sdf.node_gradients(), sdf.origin,
                                              float(sdf.voxel_size), np.ascontiguousarray(x.reshape(-1, 3)))
        return d.reshape(x.shape[:-1]), g.reshape(x.shape)
    i0, i1, frac, offset = _interp_setup(sdf, x)
    norm = np.linalg.norm(offset, axis=-1)
    d = _trilinear(sdf.distances, i0, i1, frac) + norm
    G = sdf.node_gradients()
    g = np.stack([_trilinear(G[a], i0, i1, frac) for a in range(3)], axis=-1)
    outside = np.abs(offset) > 0
    if np.any(outside):
        unit = np.divide(offset, norm[..., None], out=np.zeros_like(offset), where=norm[..., None] > 0)
        g = np.where(outside, unit, g)
    return d, g


class SignedDistanceGrid(BaseEstimator):
    """Estimator wrapper: ``fit`` a point cloud, then query distances.

    ``predict(X)`` returns distances at (n, 3) query points and
    ``gradient(X)`` the interpolated finite-difference gradients.
    """

    def __init__(self, voxel_size=0.02, bounds=None, barrier_d=0.15):
        self.voxel_size = voxel_size
        self.bounds = bounds
        self.barrier_d = barrier_d

    def fit(self, X, y=None):
        cloud = X if isinstance(X, PointCloud) else PointCloud(X)
        bounds = self.bounds
        if bounds is None:
            if len(cloud) == 0:
                raise ValueError("bounds are required for an empty cloud")
            pad = self.barrier_d + self.voxel_size
            bounds = (cloud.points.min(axis=0) - pad, cloud.points.max(axis=0) + pad)
        self.occupancy_ = build_occupancy(cloud, self.voxel_size, bounds)
        self.sdf_ = compute_sdf(self.occupancy_, self.barrier_d)
        return self

    def predict(self, X):
        check_is_fitted(self, "sdf_")
        return query_sdf(self.sdf_, X)

    def gradient(self, X):
        check_is_fitted(self, "sdf_")
        return query_sdf_gradient(self.sdf_, X)


class LabelScorer:
    """Score 1 for points carrying ``label``, 0 otherwise."""

    def __init__(self, label):
        self.label = label

    def __call__(self, cloud):
        if cloud.labels is None:
            return np.zeros(len(cloud))
        return (cloud.labels == self.label).astype(float)

    def __eq__(self, other):
        return isinstance(other, LabelScorer) and other.label == self.label

    def __hash__(self):
        return hash(("label", self.label))

    def __repr__(self):
        return f"LabelScorer({self.label!r})"


def label_scorer(label):
    return LabelScorer(label)


def column_scorer(cloud):
    """Use the per-point score column stored on the cloud."""
    if cloud.scores is None:
        raise ValueError("cloud has no score column")
    return cloud.scores


def _safe_scores(cloud, scorer):
    try:
        scores = np.asarray(scorer(cloud), dtype=float).reshape(-1)
    except Exception as exc:  # scorer failure taints every point
        warnings.warn(f"relevance scorer failed ({exc}); treating all scores as 0")
        return np.zeros(len(cloud))
    if len(scores) != len(cloud):
        raise ValueError("scorer must return one score per point")
    bad = ~np.isfinite(scores)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} relevance scores were not finite; treating them as 0")
        scores = np.where(bad, 0.0, scores)
    return scores


class TaskRelevanceFilter(BaseEstimator, TransformerMixin):
    """Drop points whose relevance exceeds a percentile of the fitted scores.

    ``fit`` fixes ``threshold_`` at the given percentile of the scores; points
    scoring strictly above it are removed by ``transform``. Equal scores
    therefore never remove anything, and re-applying ``transform`` is a no-op.
    """

    def __init__(self, scorer=column_scorer, percentile=95.0):
        self.scorer = scorer
        self.percentile = percentile

    def fit(self, X, y=None):
        if not 0 < self.percentile < 100:
            raise ValueError("percentile must lie in (0, 100)")
        scores = _safe_scores(X, self.scorer)
        self.threshold_ = float(np.percentile(scores, self.percentile)) if len(scores) else np.inf
        return self

    def transform(self, X):
        check_is_fitted(self, "threshold_")
        if len(X) == 0:
            return X
        scores = _safe_scores(X, self.scorer)
        return X.subset(scores <= self.threshold_)


def filter_task_relevant(cloud, scorer, percentile=95.0):
    """Remove points scoring strictly above the ``percentile`` of their scores.

    The threshold is remembered on the returned cloud; filtering it again
    with an equal scorer and percentile reuses that threshold, which keeps
    every remaining point.
    """
    for prev_scorer, prev_pct, threshold in cloud.relevance_filters:
        if prev_scorer == scorer and prev_pct == percentile:
            flt = TaskRelevanceFilter(scorer, percentile)
            flt.threshold_ = threshold
            return flt.transform(cloud)
    flt = TaskRelevanceFilter(scorer, percentile).fit(cloud)
    out = flt.transform(cloud)
    out.relevance_filters = cloud.relevance_filters + ((scorer, percentile, flt.threshold_),)
    return out


def robot_self_filter(cloud, model, state, margin):
    """Remove points within ``margin`` of any robot probe point."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if len(cloud) == 0:
        return cloud
    probes = np.asarray(model.probe_positions(state), dtype=float).reshape(-1, 3)
    d = np.linalg.norm(cloud.points[:, None, :] - probes[None, :, :], axis=-1)
    return cloud.subset(~np.any(d <= margin, axis=1))


@dataclass
class NormalizationEstimate:
    z: float
    z_stderr: float
    volume: float
    bound: float
    n_samples: int


def normalization_bound(sdf, n_samples=200_000, seed=0, barrier_d=None):
    """Monte-Carlo estimate of the integral of the distance over the risk shell.

    The shell is ``{0 < dist <= d}`` inside the grid box. Returns the estimate,
    its standard error, the shell volume and the bound ``d * volume``.
    """
    d = sdf.barrier_d if barrier_d is None else barrier_d
    if sdf.empty:
        return NormalizationEstimate(0.0, 0.0, 0.0, 0.0, 0)
    rng = np.random.default_rng(seed)
    lo, hi = sdf.origin, sdf.upper
    box = float(np.prod(hi - lo))
    pts = lo + rng.random((n_samples, 3)) * (hi - lo)
    vals = query_sdf(sdf, pts)
    inside = (vals > 0) & (vals <= d)
    integrand = np.where(inside, vals, 0.0) * box
    z = float(integrand.mean())
    se = float(integrand.std(ddof=1) / np.sqrt(n_samples))
    volume = float(inside.mean() * box)
    return NormalizationEstimate(z, se, volume, d * volume, n_samples)


def read_ply(path):
    """ASCII PLY with vertex properties x, y, z and optional score, label."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError("not a PLY file")
    n_vertex, props, i = 0, [], 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError("only ASCII PLY is supported")
        if tok[:2] == ["element", "vertex"]:
            n_vertex = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[-1])
        elif tok[0] == "end_header":
            break
    rows = [ln.split() for ln in lines[i:i + n_vertex]]
    return _cloud_from_rows(props, rows)


def _cloud_from_rows(columns, rows):
    col = {name: k for k, name in enumerate(columns)}
    for req in ("x", "y", "z"):
        if req not in col:
            raise ValueError(f"missing column {req!r}")
    pts = np.array([[float(r[col["x"]]), float(r[col["y"]]), float(r[col["z"]])] for r in rows]).reshape(-1, 3)
    scores = np.array([float(r[col["score"]]) for r in rows]) if "score" in col else None
    labels = np.array([r[col["label"]] for r in rows], dtype=object) if "label" in col else None
    return PointCloud(pts, scores, labels)


def write_ply(path, cloud):
    props = ["x", "y", "z"]
    with open(path, "w") as fh:
        fh.write(f"ply\nformat ascii 1.0\nelement vertex {len(cloud)}\n")
        for p in props:
            fh.write(f"property float {p}\n")
        if cloud.scores is not None:
            fh.write("property float score\n")
        if cloud.labels is not None:
            fh.write("property string label\n")
        fh.write("end_header\n")
        for i, p in enumerate(cloud.points):
            row = [repr(float(v)) for v in p]
            if cloud.scores is not None:
                row.append(repr(float(cloud.scores[i])))
            if cloud.labels is not None:
                row.append(str(cloud.labels[i]))
            fh.write(" ".join(row) + "\n")


def read_cloud_csv(path):
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if r]
    return _cloud_from_rows(header, rows)


def read_cloud(path):
    path = str(path)
    if path.endswith(".ply"):
        return read_ply(path)
    return read_cloud_csv(path)


def export_grid(sdf, path_prefix):
    """Write ``<prefix>.bin`` (float64, C order) and ``<prefix>.json`` metadata."""
    np.ascontiguousarray(sdf.distances, dtype="<f8").tofile(f"{path_prefix}.bin")
    meta = {"dims": list(sdf.dims), "voxel_size": sdf.voxel_size, "origin": sdf.origin.tolist(),
            "barrier_d": sdf.barrier_d, "dtype": "float64-le", "order": "C", "empty": sdf.empty,
            "node": "voxel-centre"}
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    return meta


def load_grid(path_prefix):
    with open(f"{path_prefix}.json") as fh:
        meta = json.load(fh)
    dist = np.fromfile(f"{path_prefix}.bin", dtype="<f8").reshape(meta["dims"])
    sq = (dist / meta["voxel_size"]) ** 2
    return SdfGrid(dist, np.rint(sq), meta["voxel_size"], np.asarray(meta["origin"]),
                   meta["barrier_d"], empty=meta.get("empty", False))
