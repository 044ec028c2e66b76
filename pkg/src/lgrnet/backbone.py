"""Set Perception modules, feature propagation and the four-stage LGR-Net.

All network inputs are batched: coordinates are B x N x 3 arrays and
features are B x N x C tensors. Every scene in a batch carries its own
integer seed, which drives FPS and the neighborhood sampling of each stage.
"""

from dataclasses import dataclass, field

import numpy as np

from lgrnet import geometry
from lgrnet.errors import InvalidArgument
from lgrnet.geometry import PointCloud, RegionSpec
from lgrnet.lgr import GridSpec, render_tensor
from lgrnet.nncore import (
    BatchNorm, Conv3d, Module, SharedMLP, Tensor, concat, gather_rows, is_grad_enabled)
from lgrnet.nncore import functional as F

FP_EPS = 1e-8
# regions per mini-CNN call during inference; bounds the im2col buffers
INFERENCE_CHUNK = 64


@dataclass(frozen=True)
class SPConfig:
    region: RegionSpec
    grid: GridSpec = field(default_factory=GridSpec)
    conv_channels: tuple = (128, 256)
    kernel_size: int = 3

    def __post_init__(self):
        if len(self.conv_channels) != 2 or min(self.conv_channels) < 1:
            raise InvalidArgument("conv_channels must be two positive widths")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidArgument("kernel_size must be odd and positive")

    @property
    def out_channels(self):
        return self.conv_channels[1]


DEFAULT_STAGES = (
    SPConfig(RegionSpec(2048, 0.15, 64), conv_channels=(64, 128)),
    SPConfig(RegionSpec(1024, 0.3, 32), conv_channels=(128, 256)),
    SPConfig(RegionSpec(512, 0.6, 16), conv_channels=(128, 256)),
    SPConfig(RegionSpec(256, 1.0, 16), conv_channels=(128, 256)),
)


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple = DEFAULT_STAGES
    fp_widths: tuple = (256, 256)
    in_channels: int = 1

    def __post_init__(self):
        if len(self.stages) != 4:
            raise InvalidArgument("the backbone has exactly four SP stages")
        counts = [s.region.num_regions for s in self.stages]
        if any(a < b for a, b in zip(counts, counts[1:])):
            raise InvalidArgument(f"stage sizes must not increase: {counts}")

    @property
    def num_seeds(self):
        return self.stages[1].region.num_regions

    @property
    def seed_channels(self):
        return self.fp_widths[-1]


@dataclass
class SeedSet:
    coords: np.ndarray      # B x S x 3
    feats: Tensor           # B x S x F
    input_idx: np.ndarray   # B x S indices into the input cloud
    stage_shapes: list      # (name, input shape, output shape) per stage, first scene


def stage_seed(seed, stage):
    return int(seed) * 16 + stage


class MiniCNN(Module):
    """Two conv-BN-ReLU blocks followed by a global max pool over the grid."""

    def __init__(self, in_channels, channels, kernel_size=3, rng=None, dtype=np.float32,
                 momentum=0.9):
        super().__init__()
        c1, c2 = channels
        self.conv1 = Conv3d(in_channels, c1, kernel_size, rng=rng, dtype=dtype,
                            channels_last=True)
        self.bn1 = BatchNorm(c1, axis=-1, momentum=momentum, dtype=dtype)
        self.conv2 = Conv3d(c1, c2, kernel_size, rng=rng, dtype=dtype, channels_last=True)
        self.bn2 = BatchNorm(c2, axis=-1, momentum=momentum, dtype=dtype)

    def embed(self, grids):
        """Per-voxel features before pooling: M x W x H x L x C'."""
        h = self.bn1(self.conv1(grids)).relu()
        return self.bn2(self.conv2(h)).relu()

    def forward(self, grids):
        if self.training or is_grad_enabled() or grids.shape[0] <= INFERENCE_CHUNK:
            return F.global_max_pool(self.embed(grids), channels_last=True)
        # running statistics make regions independent, so chunking is exact
        parts = [F.global_max_pool(self.embed(grids[s:s + INFERENCE_CHUNK]), channels_last=True)
                 for s in range(0, grids.shape[0], INFERENCE_CHUNK)]
        return concat(parts, axis=0)


class SetPerception(Module):
    def __init__(self, cfg, in_channels, rng=None, dtype=np.float32, momentum=0.9):
        super().__init__()
        self.cfg = cfg
        self.cnn = MiniCNN(in_channels, cfg.conv_channels, cfg.kernel_size, rng=rng,
                           dtype=dtype, momentum=momentum)

    def group(self, coords, feats_data, seeds, centers=None):
        """Sample centroids and query neighborhoods for every scene.

        Returns (centers B x M, member_idx B x M x K, local_coords B x M x K x 3).
        """
        region = self.cfg.region
        b, n = coords.shape[:2]
        if n < region.num_regions:
            raise InvalidArgument(
                f"stage needs {region.num_regions} centroids but the input has {n} points")
        all_centers, all_idx, all_local = [], [], []
        for i in range(b):
            pc = PointCloud(coords[i], feats_data[i])
            if centers is None:
                c = geometry.farthest_point_sample(pc, region.num_regions, seed=seeds[i])
            else:
                c = np.asarray(centers[i])
            reg = geometry.query_regions(pc, pc.coords[c], region, seed=seeds[i])
            all_centers.append(c)
            all_idx.append(reg.member_idx)
            all_local.append(reg.local_coords)
        return np.stack(all_centers), np.stack(all_idx), np.stack(all_local)

    def forward(self, coords, feats, seeds, centers=None):
        """coords B x N x 3, feats B x N x C -> (B x N' x 3, B x N' x C', centers)."""
        centers, member_idx, local = self.group(coords, feats.data, seeds, centers)
        b, m, k = member_idx.shape
        local_feats = gather_rows(feats, member_idx).reshape(b * m, k, feats.shape[-1])
        grids = render_tensor(local.reshape(b * m, k, 3).astype(feats.dtype), local_feats,
                              self.cfg.grid, channels_last=True)
        out = self.cnn(grids).reshape(b, m, self.cfg.out_channels)
        new_coords = np.take_along_axis(coords, centers[..., None], axis=1)
        return new_coords, out, centers


def sp_forward(pc, cfg, seed=0, module=None, rng=None):
    """Run one SP stage on a single cloud; returns (N' x 3, N' x C') arrays.

    ``module`` is a :class:`SetPerception`; a freshly initialized one is
    built from ``cfg`` when omitted.
    """
    if module is None:
        module = SetPerception(cfg, pc.c, rng=rng)
    dtype = module.cnn.conv1.weight.dtype
    feats = Tensor(pc.feats[None].astype(dtype))
    coords, out, _ = module(pc.coords[None], feats, [seed])
    return coords[0], out.data[0]


def three_nn(src_coords, dst_coords):
    """Indices (D x k) and distances of the up-to-3 nearest sources per destination."""
    src = np.asarray(src_coords, dtype=np.float64)
    dst = np.asarray(dst_coords, dtype=np.float64)
    if src.shape[0] == 0:
        raise InvalidArgument("feature propagation needs at least one source point")
    k = min(3, src.shape[0])
    d = np.sqrt(((dst[:, None, :] - src[None, :, :]) ** 2).sum(-1))
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d, idx, axis=1)


def interpolation_weights(dist):
    w = 1.0 / np.maximum(dist, FP_EPS)
    return w / w.sum(axis=-1, keepdims=True)


def feature_propagation(src_coords, src_feats, dst_coords, skip_feats=None):
    """Inverse-distance 3-NN interpolation with optional skip concatenation.

    Accepts single clouds (S x 3, S x C, D x 3) or batches (B x S x 3, ...);
    features may be arrays or Tensors. Returns the pre-MLP destination
    features, as a Tensor.
    """
    single = np.ndim(src_coords) == 2
    if single:
        src_coords, dst_coords = np.asarray(src_coords)[None], np.asarray(dst_coords)[None]
        src_feats = _lift(src_feats)
        skip_feats = None if skip_feats is None else _lift(skip_feats)
    src_feats = src_feats if isinstance(src_feats, Tensor) else Tensor(src_feats)
    idx, wts = [], []
    for s, d in zip(src_coords, dst_coords):
        i, dist = three_nn(s, d)
        idx.append(i)
        wts.append(interpolation_weights(dist))
    idx, wts = np.stack(idx), np.stack(wts).astype(src_feats.dtype)
    out = (gather_rows(src_feats, idx) * wts[..., None]).sum(axis=2)
    if skip_feats is not None:
        skip = skip_feats if isinstance(skip_feats, Tensor) else Tensor(
            np.asarray(skip_feats, dtype=out.dtype))
        out = concat([out, skip], axis=-1)
    if single:
        out = out.reshape(*out.shape[1:])
    return out


def _lift(f):
    return f.reshape(1, *f.shape) if isinstance(f, Tensor) else np.asarray(f)[None]


class FeaturePropagation(Module):
    def __init__(self, in_channels, widths, rng=None, dtype=np.float32, momentum=0.9):
        super().__init__()
        self.mlp = SharedMLP((in_channels,) + tuple(widths), rng=rng, dtype=dtype,
                             momentum=momentum)

    def forward(self, src_coords, src_feats, dst_coords, skip_feats=None):
        return self.mlp(feature_propagation(src_coords, src_feats, dst_coords, skip_feats))


class LGRNet(Module):
    """Four SP stages, then FP (stage 4 -> stage 3) and FP (-> stage 2 points)."""

    def __init__(self, cfg=None, rng=None, dtype=np.float32, momentum=0.9):
        super().__init__()
        cfg = cfg if cfg is not None else BackboneConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.dtype = dtype
        self.stages = []
        c = cfg.in_channels
        for sc in cfg.stages:
            self.stages.append(SetPerception(sc, c, rng=rng, dtype=dtype, momentum=momentum))
            c = sc.out_channels
        c2, c3, c4 = (s.out_channels for s in cfg.stages[1:])
        self.fp1 = FeaturePropagation(c4 + c3, cfg.fp_widths, rng=rng, dtype=dtype,
                                      momentum=momentum)
        self.fp2 = FeaturePropagation(cfg.fp_widths[-1] + c2, cfg.fp_widths, rng=rng,
                                      dtype=dtype, momentum=momentum)

    def forward(self, coords, feats, seeds, centers=None):
        """coords B x N x 3 array, feats B x N x C (array or Tensor) -> SeedSet.

        ``centers`` optionally forces the FPS picks of each stage (a list of
        four B x N' index arrays).
        """
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim == 2:
            coords = coords[None]
        feats = feats if isinstance(feats, Tensor) else Tensor(
            np.asarray(feats, dtype=self.dtype).reshape(coords.shape[0], coords.shape[1], -1))
        if feats.shape[-1] != self.cfg.in_channels:
            raise InvalidArgument(
                f"expected {self.cfg.in_channels} input feature channels, got {feats.shape[-1]}")
        b = coords.shape[0]
        if len(seeds) != b:
            raise InvalidArgument("need one seed per scene")
        xyz, f = coords, feats
        outs, shapes = [], []
        input_idx = np.broadcast_to(np.arange(coords.shape[1]), coords.shape[:2])
        for s, stage in enumerate(self.stages):
            in_shape = f.shape[1:]
            forced = None if centers is None else centers[s]
            xyz, f, picked = stage(xyz, f, [stage_seed(x, s) for x in seeds], forced)
            input_idx = np.take_along_axis(input_idx, picked, axis=1)
            outs.append((xyz, f, input_idx))
            shapes.append((f"SP{s + 1}", tuple(in_shape), tuple(f.shape[1:])))
        (x2, f2, i2), (x3, f3, _), (x4, f4, _) = outs[1:]
        g3 = self.fp1(x4, f4, x3, f3)
        shapes.append(("FP1", tuple(f4.shape[1:]), tuple(g3.shape[1:])))
        g2 = self.fp2(x3, g3, x2, f2)
        shapes.append(("FP2", tuple(g3.shape[1:]), tuple(g2.shape[1:])))
        return SeedSet(coords=x2, feats=g2, input_idx=i2, stage_shapes=shapes)


def lgr_net_forward(pc, seed=0, net=None, cfg=None):
    """Single-cloud convenience wrapper returning a :class:`SeedSet` (batch of one)."""
    if pc.c != 1:
        raise InvalidArgument("LGR-Net takes the height feature as its only input channel")
    net = net if net is not None else LGRNet(cfg)
    return net(pc.coords[None], pc.feats[None], [seed])
