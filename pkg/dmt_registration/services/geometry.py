"""
Geometric kernels shared by every other service.

IMPORTANT FOR DEVELOPERS:
- All geometry runs in float64; the model may use float32 internally, but the
  Chamfer comparisons that drive pseudo-label filtering must stay in float64
- Nearest-neighbor queries are exact (scipy cKDTree plus explicit tie
  resolution); ties go to the lowest point index
- Chamfer distance is a SUM over points, not a mean - it scales with cloud size
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

# Rows of a target x source matrix evaluated per chunk in gaussian_weights
_MAX_CHUNK_ELEMENTS = 1 << 22

# Extra candidates fetched from the KD-tree so ties at the k-th rank resolve
_TIE_MARGIN = 4

# Relative slack used to detect (near-)equal distances reported by the tree
_TIE_RTOL = 1e-12


def _as_points(points) -> np.ndarray:
    """Coerce array-like input to a float64 (N, 3) array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"Expected an (N, 3) array of points, got shape {arr.shape}")
    return arr


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise squared Euclidean distance between broadcastable point arrays."""
    return ((a - b) ** 2).sum(axis=-1)


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of 3-D points in millimeters (read-only after construction)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(
                f"PointCloud expects an (N, 3) array of points, got shape {pts.shape}"
            )
        if pts.shape[0] == 0:
            raise ValueError("PointCloud requires at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("PointCloud coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, indices) -> "PointCloud":
        """Return the points at the given indices, in that order."""
        return PointCloud(self.points[np.asarray(indices, dtype=np.int64)])

    def warped(self, field: "DisplacementField") -> "PointCloud":
        """Return the cloud displaced point-wise by ``field``."""
        field.check_matches(self)
        return PointCloud(self.points + field.vectors)


@dataclass(frozen=True)
class DisplacementField:
    """One 3-D displacement vector (mm) per point of an associated moving cloud."""

    vectors: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[1] != 3:
            raise ValueError(
                f"DisplacementField expects an (N, 3) array, got shape {vec.shape}"
            )
        if not np.all(np.isfinite(vec)):
            raise ValueError("DisplacementField components must be finite")
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def zeros(cls, n: int) -> "DisplacementField":
        return cls(np.zeros((n, 3)))

    def subset(self, indices) -> "DisplacementField":
        return DisplacementField(self.vectors[np.asarray(indices, dtype=np.int64)])

    def check_matches(self, cloud: PointCloud) -> None:
        """Raise ValueError unless the field has one vector per cloud point."""
        if len(self) != len(cloud):
            raise ValueError(
                f"Displacement field length {len(self)} does not match "
                f"cloud length {len(cloud)}"
            )


class NeighborIndex:
    """
    Exact spatial index over a PointCloud.

    Wraps scipy's cKDTree. The tree orders candidates by floating-point
    Euclidean distance; this class re-ranks candidates by squared distance
    computed from coordinates and breaks ties by the lowest point index, so
    results equal an exhaustive scan.
    """

    def __init__(self, cloud: PointCloud):
        self.cloud = cloud
        self._points = cloud.points
        self._tree = cKDTree(self._points)

    def __len__(self) -> int:
        return len(self.cloud)

    def nearest(self, queries) -> np.ndarray:
        """Index of the nearest cloud point for every query point."""
        q = _as_points(queries)
        n = len(self)
        if n == 1:
            return np.zeros(q.shape[0], dtype=np.int64)

        _, idx = self._tree.query(q, k=2)
        d0 = squared_distances(self._points[idx[:, 0]], q)
        d1 = squared_distances(self._points[idx[:, 1]], q)
        best = idx[:, 0].astype(np.int64)

        # Rows whose two best candidates are (nearly) tied need an exact scan
        # of the tie ball to apply the lowest-index rule.
        tied = np.flatnonzero(d1 <= d0 * (1.0 + _TIE_RTOL))
        for row in tied:
            radius = np.sqrt(min(d0[row], d1[row])) * (1.0 + 1e-9) + 1e-12
            cand = np.asarray(self._tree.query_ball_point(q[row], r=radius))
            d = squared_distances(self._points[cand], q[row])
            best[row] = cand[d == d.min()].min()
        return best

    def query(self, queries, k: int) -> np.ndarray:
        """
        k nearest cloud points per query, sorted by ascending distance.

        Returns an int array of shape (Q, min(k, N)); ties are broken by the
        lowest point index.
        """
        if k < 1:
            raise ValueError("k must be at least 1")
        q = _as_points(queries)
        n = len(self)
        k_eff = min(k, n)
        n_cand = min(n, k_eff + _TIE_MARGIN)

        _, idx = self._tree.query(q, k=list(range(1, n_cand + 1)))
        idx = np.asarray(idx, dtype=np.int64).reshape(q.shape[0], n_cand)
        d = squared_distances(self._points[idx], q[:, np.newaxis, :])
        order = np.lexsort((idx, d), axis=-1)
        idx = np.take_along_axis(idx, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)

        if n_cand < n:
            overflow = np.flatnonzero(
                d[:, k_eff - 1] * (1.0 + _TIE_RTOL) >= d[:, n_cand - 1]
            )
            for row in overflow:
                full = squared_distances(self._points, q[row])
                idx[row, :k_eff] = np.lexsort((np.arange(n), full))[:k_eff]
        return idx[:, :k_eff]


def build_index(cloud: PointCloud) -> NeighborIndex:
    """Build an exact nearest-neighbor index over ``cloud``."""
    return NeighborIndex(cloud)


def _one_sided_chamfer(source: PointCloud, target_index: NeighborIndex) -> float:
    nn = target_index.nearest(source.points)
    return float(squared_distances(source.points, target_index.cloud.points[nn]).sum())


def chamfer_distance(x: PointCloud, y: PointCloud) -> float:
    """
    Symmetric Chamfer distance in mm².

    Sum over x of the squared distance to the nearest point of y, plus the
    same sum with the roles swapped.
    """
    if len(x) == 0 or len(y) == 0:
        raise ValueError("Chamfer distance requires non-empty clouds")
    return _one_sided_chamfer(x, build_index(y)) + _one_sided_chamfer(
        y, build_index(x)
    )


def gaussian_weights(sources, targets, sigma: float) -> np.ndarray:
    """
    Row-normalized isotropic Gaussian weights of shape (T, S).

    Rows whose weight sum underflows to zero fall back to a one-hot weight on
    the nearest source.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    src = _as_points(sources)
    tgt = _as_points(targets)
    n_src = src.shape[0]
    weights = np.empty((tgt.shape[0], n_src))
    chunk = max(1, _MAX_CHUNK_ELEMENTS // max(n_src, 1))
    inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma)

    for start in range(0, tgt.shape[0], chunk):
        block = tgt[start : start + chunk]
        w = np.exp(-cdist(block, src, metric="sqeuclidean") * inv_two_sigma_sq)
        total = w.sum(axis=1)
        empty = total == 0.0
        if np.any(empty):
            nn = build_index(PointCloud(src)).nearest(block[empty])
            w[empty] = 0.0
            w[np.flatnonzero(empty), nn] = 1.0
            total[empty] = 1.0
        weights[start : start + chunk] = w / total[:, np.newaxis]
    return weights


def gaussian_interpolate(
    sources: PointCloud,
    values: DisplacementField,
    targets: PointCloud,
    sigma: float,
) -> DisplacementField:
    """Interpolate per-source vectors to target points with a Gaussian kernel."""
    values.check_matches(sources)
    w = gaussian_weights(sources.points, targets.points, sigma)
    return DisplacementField(w @ values.vectors)


@dataclass(frozen=True)
class RasterGrid:
    """Dense displacement grid: values[i, j, k] sits at origin + (i, j, k) * spacing."""

    values: np.ndarray
    origin: np.ndarray
    spacing: float

    @property
    def shape(self) -> tuple:
        return self.values.shape[:3]

    def voxel_centers(self) -> np.ndarray:
        axes = [self.origin[a] + self.spacing * np.arange(n) for a, n in enumerate(self.shape)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)


def _grid_axes(
    cloud: PointCloud, spacing: float, sigma: float
) -> tuple[np.ndarray, tuple[int, int, int]]:
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    origin = np.empty(3)
    shape = []
    for a in range(3):
        if hi[a] == lo[a]:
            # Collapsed axis: a single voxel at the cloud coordinate
            origin[a] = lo[a]
            shape.append(1)
        else:
            origin[a] = lo[a] - 2.0 * sigma
            extent = (hi[a] + 2.0 * sigma) - origin[a]
            shape.append(int(np.ceil(extent / spacing)) + 1)
    return origin, tuple(shape)


def rasterize_displacement(
    cloud: PointCloud,
    field: DisplacementField,
    spacing: float,
    sigma: float,
    origin: Optional[np.ndarray] = None,
    shape: Optional[tuple] = None,
) -> RasterGrid:
    """
    Interpolate a sparse displacement field onto a regular grid.

    The grid covers the cloud bounding box padded by 2·sigma on every axis
    with non-zero extent; ``origin``/``shape`` override the automatic layout.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    field.check_matches(cloud)
    if origin is None or shape is None:
        origin, shape = _grid_axes(cloud, spacing, sigma)
    grid = RasterGrid(
        values=np.zeros((*shape, 3)), origin=np.asarray(origin, float), spacing=spacing
    )
    centers = PointCloud(grid.voxel_centers())
    logger.debug("Rasterizing %d points onto a %s grid", len(cloud), shape)
    values = gaussian_interpolate(cloud, field, centers, sigma).vectors
    return RasterGrid(values=values.reshape(*shape, 3), origin=grid.origin, spacing=spacing)
