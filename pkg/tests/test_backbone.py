import numpy as np
import pytest

from lgrnet.backbone import (
    BackboneConfig,
    LGRNet,
    SPConfig,
    SetPerception,
    DEFAULT_STAGES,
    feature_propagation,
    lgr_net_forward,
    sp_forward,
)
from lgrnet.errors import InvalidArgument
from lgrnet.geometry import PointCloud, RegionSpec
from lgrnet.lgr import GridSpec
from lgrnet.nncore import Tensor, no_grad
from gradcheck import gradcheck
from oracles import conv3d_oracle, knn3_idw_oracle, render_oracle

TINY = BackboneConfig(
    stages=(
        SPConfig(RegionSpec(32, 0.3, 8), conv_channels=(4, 6)),
        SPConfig(RegionSpec(16, 0.6, 8), conv_channels=(6, 8)),
        SPConfig(RegionSpec(8, 1.0, 8), conv_channels=(6, 8)),
        SPConfig(RegionSpec(4, 2.0, 8), conv_channels=(6, 8)),
    ),
    fp_widths=(12, 10),
)


def scene(rng, n, extent=(3.0, 3.0, 1.0)):
    pts = rng.uniform((0, 0, 0), extent, size=(n, 3))
    return PointCloud(pts, pts[:, 2:] - pts[:, 2].min())


def test_default_stages():
    got = [(s.region.num_regions, s.region.half_edge, s.region.neighbors, s.conv_channels)
           for s in DEFAULT_STAGES]
    assert got == [(2048, 0.15, 64, (64, 128)), (1024, 0.3, 32, (128, 256)),
                   (512, 0.6, 16, (128, 256)), (256, 1.0, 16, (128, 256))]
    for s in DEFAULT_STAGES:
        assert s.kernel_size == 3
        assert s.grid.resolution == (5, 5, 5)
    assert BackboneConfig().num_seeds == 1024


def test_default_shapes_small_scene(rng):
    net = LGRNet().eval()
    with no_grad():
        seeds = lgr_net_forward(scene(rng, 4096), seed=1, net=net)
    assert [s[1:] for s in seeds.stage_shapes] == [
        ((4096, 1), (2048, 128)),
        ((2048, 128), (1024, 256)),
        ((1024, 256), (512, 256)),
        ((512, 256), (256, 256)),
        ((256, 256), (512, 256)),
        ((512, 256), (1024, 256)),
    ]
    assert seeds.coords.shape == (1, 1024, 3)
    assert seeds.feats.shape == (1, 1024, 256)
    assert np.all(np.isfinite(seeds.feats.data))


def test_too_few_points(rng):
    with pytest.raises(InvalidArgument):
        lgr_net_forward(scene(rng, 20), net=LGRNet(TINY))


def test_needs_height_only(rng):
    pts = rng.random((64, 3))
    with pytest.raises(InvalidArgument):
        lgr_net_forward(PointCloud(pts, pts), net=LGRNet(TINY))


class TestSetPerception:
    def test_output_shape(self, rng):
        cfg = SPConfig(RegionSpec(64, 0.3, 16), conv_channels=(4, 8))
        coords, feats = sp_forward(scene(rng, 500), cfg, seed=2)
        assert coords.shape == (64, 3) and feats.shape == (64, 8)

    def test_full_coverage(self, rng):
        pc = scene(rng, 12)
        cfg = SPConfig(RegionSpec(12, 100.0, 8), conv_channels=(2, 2))
        sp = SetPerception(cfg, 1)
        centers, idx, _ = sp.group(pc.coords[None], pc.feats[None], [0])
        assert sorted(centers[0]) == list(range(12))
        assert all(len(set(row)) == 8 for row in idx[0])
        cfg = SPConfig(RegionSpec(12, 100.0, 32), conv_channels=(2, 2))
        _, idx, _ = SetPerception(cfg, 1).group(pc.coords[None], pc.feats[None], [0])
        assert all(set(row) == set(range(12)) for row in idx[0])

    def test_single_region_matches_oracle_composition(self, rng):
        # three hand-placed points; E = 1 puts all of them in every cube
        pts = np.array([[0.0, 0.0, 0.0], [0.2, -0.1, 0.3], [-0.4, 0.4, 0.1]])
        feats = np.array([[0.5, 1.0], [1.5, -1.0], [-0.7, 2.0]])
        pc = PointCloud(pts, feats)
        cfg = SPConfig(RegionSpec(1, 1.0, 3), conv_channels=(3, 4))
        sp = SetPerception(cfg, 2, rng=rng, dtype=np.float64).eval()
        cnn = sp.cnn
        for bn in (cnn.bn1, cnn.bn2):
            bn.gamma.data[:] = rng.uniform(0.5, 1.5, bn.gamma.shape)
            bn.beta.data[:] = rng.normal(size=bn.beta.shape)
            bn.running_mean[:] = rng.normal(size=bn.running_mean.shape)
            bn.running_var[:] = rng.uniform(0.5, 2.0, bn.running_var.shape)
        _, out = sp_forward(pc, cfg, seed=0, module=sp)

        first = int(np.random.default_rng(0).integers(3))
        lc = (pts - pts[first])[None]
        grid = render_oracle(lc, feats[None], (5, 5, 5), cfg.grid.r, 1.0)
        x = grid.transpose(0, 4, 1, 2, 3)

        def block(x, conv, bn):
            y = conv3d_oracle(x, conv.weight.data, conv.bias.data, 1)
            shape = (1, -1, 1, 1, 1)
            y = (y - bn.running_mean.reshape(shape)) / np.sqrt(bn.running_var.reshape(shape) + bn.eps)
            return np.maximum(y * bn.gamma.data.reshape(shape) + bn.beta.data.reshape(shape), 0)

        h = block(block(x, cnn.conv1, cnn.bn1), cnn.conv2, cnn.bn2)
        np.testing.assert_allclose(out[0], h.reshape(1, 4, -1).max(axis=2)[0], atol=1e-10)

    def test_deterministic(self, rng):
        pc = scene(rng, 300)
        cfg = SPConfig(RegionSpec(32, 0.3, 8), conv_channels=(4, 8))
        a = sp_forward(pc, cfg, seed=5, module=SetPerception(cfg, 1))
        b = sp_forward(pc, cfg, seed=5, module=SetPerception(cfg, 1))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestFeaturePropagation:
    def test_coincident_destination(self, rng):
        src = rng.random((6, 3))
        f = rng.normal(size=(6, 4))
        out = feature_propagation(src, f, src[2:3]).data
        np.testing.assert_allclose(out[0], f[2], atol=1e-6)

    def test_equidistant(self):
        src = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [5, 5, 5]])
        f = np.array([[1.0, 0.0], [2.0, 3.0], [6.0, -3.0], [100.0, 100.0]])
        out = feature_propagation(src, f, np.zeros((1, 3))).data
        np.testing.assert_allclose(out[0], f[:3].mean(axis=0), atol=1e-12)

    def test_against_brute_force(self, rng):
        src = rng.random((8, 3))
        f = rng.normal(size=(8, 5))
        dst = rng.random((4, 3))
        out = feature_propagation(src, f, dst).data
        np.testing.assert_allclose(out, knn3_idw_oracle(src, f, dst), atol=1e-9)

    def test_fewer_than_three_sources(self, rng):
        src = rng.random((2, 3))
        f = rng.normal(size=(2, 3))
        dst = rng.random((3, 3))
        np.testing.assert_allclose(feature_propagation(src, f, dst).data,
                                   knn3_idw_oracle(src, f, dst), atol=1e-9)

    def test_skip_concatenation(self, rng):
        src, dst = rng.random((5, 3)), rng.random((7, 3))
        out = feature_propagation(src, rng.normal(size=(5, 2)), dst, rng.normal(size=(7, 3)))
        assert out.shape == (7, 5)

    def test_empty_source(self):
        with pytest.raises(InvalidArgument):
            feature_propagation(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((1, 3)))

    def test_batched_gradient(self, rng):
        src = rng.random((2, 6, 3))
        dst = rng.random((2, 4, 3))
        f = Tensor(rng.normal(size=(2, 6, 3)), requires_grad=True)
        up = rng.normal(size=(2, 4, 3))
        assert gradcheck(lambda: (feature_propagation(src, f, dst) * up).sum(), [f]) < 1e-3


class TestLGRNet:
    def test_deterministic(self, rng):
        pc = scene(rng, 200)
        a = lgr_net_forward(pc, seed=3, net=LGRNet(TINY))
        b = lgr_net_forward(pc, seed=3, net=LGRNet(TINY))
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.feats.data, b.feats.data)
        np.testing.assert_array_equal(a.input_idx, b.input_idx)

    def test_seed_indices_trace_input(self, rng):
        pc = scene(rng, 200)
        s = lgr_net_forward(pc, seed=3, net=LGRNet(TINY))
        np.testing.assert_array_equal(s.coords[0], pc.coords[s.input_idx[0]])

    def test_translation_equivariance(self, rng):
        # dyadic coordinates keep every subtraction exact under the shift
        pts = rng.integers(0, 1024, size=(200, 3)) / 256.0
        shift = np.array([3.5, -1.25, 0.75])
        a_pc = PointCloud(pts, pts[:, 2:] - pts[:, 2].min())
        moved = pts + shift
        b_pc = PointCloud(moved, moved[:, 2:] - moved[:, 2].min())
        net = LGRNet(TINY).eval()
        a = lgr_net_forward(a_pc, seed=9, net=net)
        b = lgr_net_forward(b_pc, seed=9, net=net)
        np.testing.assert_array_equal(a.input_idx, b.input_idx)
        np.testing.assert_allclose(b.coords, a.coords + shift, atol=1e-12)
        np.testing.assert_allclose(b.feats.data, a.feats.data, atol=1e-5)

    def test_batch_matches_single_scenes_in_eval(self, rng):
        pcs = [scene(rng, 150), scene(rng, 150)]
        net = LGRNet(TINY).eval()
        both = net(np.stack([p.coords for p in pcs]), np.stack([p.feats for p in pcs]), [1, 2])
        for i, (pc, sd) in enumerate(zip(pcs, [1, 2])):
            one = lgr_net_forward(pc, seed=sd, net=net)
            np.testing.assert_allclose(both.feats.data[i], one.feats.data[0], atol=1e-5)

    def test_micro_network_gradients(self, rng):
        cfg = BackboneConfig(
            stages=(
                SPConfig(RegionSpec(2, 0.6, 4), conv_channels=(2, 3)),
                SPConfig(RegionSpec(2, 1.0, 2), conv_channels=(2, 3)),
                SPConfig(RegionSpec(2, 1.5, 2), conv_channels=(2, 3)),
                SPConfig(RegionSpec(1, 3.0, 2), conv_channels=(2, 3)),
            ),
            fp_widths=(4, 3),
        )
        net = LGRNet(cfg, rng=rng, dtype=np.float64)
        pcs = [scene(rng, 12, (1.0, 1.0, 0.5)) for _ in range(2)]
        coords = np.stack([p.coords for p in pcs])
        feats = np.stack([p.feats for p in pcs])
        up = rng.normal(size=(2, 2, 3))

        def loss():
            return (net(coords, feats, [0, 1]).feats * up).sum()

        w = net.stages[0].cnn.conv1.weight
        err = gradcheck(loss, [w, net.stages[3].cnn.conv2.weight], h=1e-6)
        assert np.abs(w.grad).max() > 0
        assert err < 1e-2
