"""Local grid rendering: rasterize centroid-normalized point sets onto small
regular voxel grids.

Each voxel value is a kernel-weighted average of member point features,

    I(v, c) = sum_i k(|theta_i - v|) f_ic / sum_i k(|theta_i - v|),
    k(m)    = max(0, 1 - (m / r) ** p),

and exactly zero where no point lies within ``r`` of the voxel.
"""

from dataclasses import dataclass, field

import numpy as np

from lgrnet import kernels
from lgrnet.errors import InvalidArgument, InvalidState
from lgrnet.nncore.tensor import Tensor, as_tensor

AGGREGATIONS = {
    "interpolation": kernels.AGG_INTERPOLATION,
    "avg_pool": kernels.AGG_AVG_POOL,
    "nearest_neighbor": kernels.AGG_NEAREST,
}


def default_radius(resolution):
    """Half the diagonal of one voxel cell for voxels spanning [-1, 1]."""
    steps = [2.0 / (n - 1) for n in resolution]
    return 0.5 * float(np.sqrt(sum(s * s for s in steps)))


@dataclass(frozen=True)
class GridSpec:
    resolution: tuple = (5, 5, 5)
    radius_scale: float = 1.0
    power: float = 1.0
    aggregation: str = "interpolation"
    radius: float = None  # explicit override of the kernel radius

    def __post_init__(self):
        res = self.resolution
        if isinstance(res, int):
            res = (res, res, res)
        object.__setattr__(self, "resolution", tuple(int(n) for n in res))
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise InvalidArgument("grid resolution needs three axes of >= 2 voxels")
        if not self.power > 0:
            raise InvalidArgument("kernel power must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise InvalidArgument(f"aggregation must be one of {sorted(AGGREGATIONS)}")
        if not self.r > 0:
            raise InvalidArgument("kernel radius must be positive")

    @property
    def r(self):
        if self.radius is not None:
            return float(self.radius)
        return self.radius_scale * default_radius(self.resolution)

    @property
    def num_voxels(self):
        w, h, l = self.resolution
        return w * h * l


def kernel(m, r, p=1.0):
    """Interpolation weight ``max(0, 1 - (m/r)**p)`` for distance ``m``."""
    m = np.asarray(m, dtype=np.float64)
    return np.maximum(0.0, 1.0 - (m / r) ** p)


def voxel_coordinates(spec):
    """W x H x L x 3 voxel centers, each axis spanning [-1, 1] with both endpoints."""
    axes = [np.linspace(-1.0, 1.0, n) for n in spec.resolution]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass
class RenderedGrid:
    """Batch of M rendered grids.

    ``values`` is M x W x H x L x C; ``weight_sums`` (M x W x H x L) is the
    per-voxel normalizer kept for the backward pass.
    """

    values: np.ndarray
    weight_sums: np.ndarray
    spec: GridSpec
    local_coords: np.ndarray = field(repr=False, default=None)
    local_feats: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return self.values.shape[0]

    @property
    def active(self):
        return self.weight_sums > 0


def _check_inputs(local_coords, local_feats, spec):
    lc = np.asarray(local_coords)
    f = np.asarray(local_feats)
    if lc.ndim != 3 or lc.shape[-1] != 3:
        raise InvalidArgument(f"local coordinates must be M x K x 3, got {lc.shape}")
    if f.ndim != 3 or f.shape[:2] != lc.shape[:2]:
        raise InvalidArgument(f"local features {f.shape} do not match coordinates {lc.shape}")
    if f.shape[2] < 1:
        raise InvalidArgument("need at least one feature channel")
    if not isinstance(spec, GridSpec):
        raise InvalidArgument("spec must be a GridSpec")
    if not np.issubdtype(f.dtype, np.floating):
        f = f.astype(np.float64)
    dtype = f.dtype if f.dtype in (np.float32, np.float64) else np.float64
    return (np.ascontiguousarray(lc, dtype=dtype), np.ascontiguousarray(f, dtype=dtype))


def _render_arrays(lc, f, spec):
    vox = np.ascontiguousarray(voxel_coordinates(spec).reshape(-1, 3), dtype=f.dtype)
    values, wsum = kernels.get_backend().render_forward(
        lc, f, vox, spec.r, float(spec.power), AGGREGATIONS[spec.aggregation])
    return values, wsum


def render(regions, spec, local_feats=None):
    """Render each local point set to a grid.

    ``regions`` is a :class:`~lgrnet.geometry.LocalRegionBatch`, or an
    M x K x 3 coordinate array when ``local_feats`` is given.
    """
    if local_feats is None:
        local_coords, local_feats = regions.local_coords, regions.local_feats
    else:
        local_coords = regions
    lc, f = _check_inputs(local_coords, local_feats, spec)
    values, wsum = _render_arrays(lc, f, spec)
    m, c = f.shape[0], f.shape[2]
    shape = (m,) + spec.resolution
    return RenderedGrid(values.reshape(shape + (c,)), wsum.reshape(shape), spec, lc, f)


def render_backward(rendered, upstream_grad, need_coords=True):
    """Gradients of a scalar loss w.r.t. member features and local coordinates.

    ``upstream_grad`` has the shape of ``rendered.values``. Returns
    ``(grad_feats M x K x C, grad_coords M x K x 3)``. Coordinate gradients
    are only defined for interpolation; the kernel kink at ``m = r`` and the
    point ``m = 0`` get a zero subgradient.
    """
    if (rendered is None or rendered.weight_sums is None or rendered.local_coords is None
            or rendered.local_feats is None):
        raise InvalidState("render_backward needs the cached forward pass")
    spec = rendered.spec
    lc, f = rendered.local_coords, rendered.local_feats
    m, c = f.shape[0], f.shape[2]
    g = np.ascontiguousarray(np.asarray(upstream_grad, dtype=f.dtype).reshape(m, -1, c))
    vox = np.ascontiguousarray(voxel_coordinates(spec).reshape(-1, 3), dtype=f.dtype)
    return kernels.get_backend().render_backward(
        lc, f, vox, spec.r, float(spec.power), AGGREGATIONS[spec.aggregation],
        np.ascontiguousarray(rendered.values.reshape(m, -1, c)),
        np.ascontiguousarray(rendered.weight_sums.reshape(m, -1)), g, bool(need_coords))


def render_tensor(local_coords, local_feats, spec, channels_last=False):
    """Differentiable rendering for the network.

    Returns an M x C x W x H x L tensor, or M x W x H x L x C when
    ``channels_last``. ``local_feats`` is a Tensor (M x K x C);
    ``local_coords`` may be a plain array or a Tensor that requires gradients.
    """
    feats = as_tensor(local_feats)
    coords = local_coords if isinstance(local_coords, Tensor) else Tensor(local_coords)
    rendered = render(coords.data, spec, feats.data)
    out_data = rendered.values if channels_last else np.moveaxis(rendered.values, -1, 1)

    def backward(g):
        g = g if channels_last else np.moveaxis(g, 1, -1)
        gf, gc = render_backward(rendered, g, need_coords=coords.requires_grad)
        feats._accum(gf)
        if coords.requires_grad:
            coords._accum(gc)

    return Tensor._make(out_data, (feats, coords), backward, "render")
