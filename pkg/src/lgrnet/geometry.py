"""Point-cloud data structuring: centroid sampling and local point sets.

Region members are drawn from a stateless per-region stream keyed by
``(seed, region index)``, so evaluating regions in any order or split gives
bit-identical results.
"""

from dataclasses import dataclass

import numpy as np

from lgrnet import kernels
from lgrnet.errors import InvalidArgument

QUERY_KINDS = ("cube", "ball")

# radius of the ball with the same volume as a cube of half-edge 1
BALL_RADIUS_FACTOR = (6.0 / np.pi) ** (1.0 / 3.0)


@dataclass
class PointCloud:
    coords: np.ndarray
    feats: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        feats = np.asarray(self.feats)
        if feats.ndim == 1:
            feats = feats[:, None]
        self.feats = feats
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise InvalidArgument(f"coords must be N x 3, got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise InvalidArgument("point cloud is empty")
        if feats.shape[0] != self.coords.shape[0]:
            raise InvalidArgument(
                f"coords and feats disagree on N: {self.coords.shape[0]} vs {feats.shape[0]}")
        if not np.all(np.isfinite(self.coords)):
            raise InvalidArgument("non-finite coordinates")

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def c(self):
        return self.feats.shape[1]


@dataclass(frozen=True)
class RegionSpec:
    num_regions: int
    half_edge: float
    neighbors: int
    query_kind: str = "cube"

    def __post_init__(self):
        if self.num_regions < 1 or self.neighbors < 1:
            raise InvalidArgument("num_regions and neighbors must be >= 1")
        if not self.half_edge > 0:
            raise InvalidArgument("half_edge must be positive")
        if self.query_kind not in QUERY_KINDS:
            raise InvalidArgument(f"query_kind must be one of {QUERY_KINDS}")

    @property
    def radius(self):
        """Normalization length: E for cubes, the equal-volume radius for balls."""
        if self.query_kind == "ball":
            return ball_radius(self.half_edge)
        return self.half_edge


@dataclass
class LocalRegionBatch:
    centroids: np.ndarray       # M x 3
    centroid_feats: np.ndarray  # M x C
    local_coords: np.ndarray    # M x K x 3, in [-1, 1]
    local_feats: np.ndarray     # M x K x C
    valid_counts: np.ndarray    # M
    member_idx: np.ndarray      # M x K indices into the source cloud

    @property
    def num_regions(self):
        return self.local_coords.shape[0]

    @property
    def k(self):
        return self.local_coords.shape[1]


def ball_radius(half_edge):
    """Radius of the ball whose volume equals the cube of half-edge ``half_edge``."""
    return half_edge * BALL_RADIUS_FACTOR


def farthest_point_sample(pc, n_out, seed=0, first=None):
    """Greedy max-min subsampling.

    The first index comes from ``np.random.default_rng(seed)`` unless given
    explicitly; ties on the max-min distance go to the lowest index.
    """
    coords = pc.coords if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    n = coords.shape[0]
    if n_out < 1:
        raise InvalidArgument("n_out must be >= 1")
    if n_out > n:
        raise InvalidArgument(f"cannot sample {n_out} points from {n}")
    if first is None:
        first = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= first < n:
        raise InvalidArgument(f"first index {first} out of range")
    return kernels.get_backend().fps(np.ascontiguousarray(coords), int(n_out), int(first))


def _seed64(seed):
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def _query(pc, centroids, radius, k, seed, metric, offset=0):
    if not radius > 0:
        raise InvalidArgument("query radius must be positive")
    if k < 1:
        raise InvalidArgument("K must be >= 1")
    centroids = np.ascontiguousarray(np.asarray(centroids, dtype=np.float64).reshape(-1, 3))
    idx, counts = kernels.get_backend().query(
        np.ascontiguousarray(pc.coords), centroids, float(radius), int(k), _seed64(seed), metric, int(offset))
    local_coords = (pc.coords[idx] - centroids[:, None, :]) / radius
    empty = counts == 0
    if np.any(empty):
        # centroid stands in as its own member, carrying its nearest point's features
        local_coords[empty] = 0.0
        counts = np.where(empty, 1, counts)
    closest = np.argmin(np.einsum("mkx,mkx->mk", local_coords, local_coords), axis=1)
    nearest = idx[np.arange(idx.shape[0]), closest]
    return LocalRegionBatch(
        centroids=centroids,
        centroid_feats=pc.feats[nearest],
        local_coords=local_coords,
        local_feats=pc.feats[idx],
        valid_counts=counts,
        member_idx=idx,
    )


def cube_query(pc, centroids, half_edge, k, seed=0, offset=0):
    """Members within Chebyshev distance ``half_edge``; coordinates scaled by it."""
    return _query(pc, centroids, half_edge, k, seed, kernels.METRIC_CHEBYSHEV, offset)


def ball_query(pc, centroids, half_edge_equiv, k, seed=0, offset=0):
    """Members within the ball whose volume equals the cube of half-edge ``half_edge_equiv``."""
    return _query(pc, centroids, ball_radius(half_edge_equiv), k, seed,
                  kernels.METRIC_EUCLIDEAN, offset)


def radius_query(pc, centroids, radius, k, seed=0, offset=0):
    """Plain Euclidean ball grouping with an explicit radius."""
    return _query(pc, centroids, radius, k, seed, kernels.METRIC_EUCLIDEAN, offset)


def query_regions(pc, centroids, spec, seed=0):
    if spec.query_kind == "ball":
        return ball_query(pc, centroids, spec.half_edge, spec.neighbors, seed)
    return cube_query(pc, centroids, spec.half_edge, spec.neighbors, seed)


def structure(pc, spec, seed=0):
    """Sample ``spec.num_regions`` centroids and build their local point sets."""
    centers = farthest_point_sample(pc, spec.num_regions, seed)
    regions = query_regions(pc, pc.coords[centers], spec, seed)
    regions.centroid_feats = pc.feats[centers]
    return centers, regions
