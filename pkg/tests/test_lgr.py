import math

import numpy as np
import pytest

from lgrnet.errors import InvalidArgument, InvalidState
from lgrnet.lgr import (
    GridSpec,
    default_radius,
    kernel,
    render,
    render_backward,
    render_tensor,
    voxel_coordinates,
)
from lgrnet.nncore import Tensor
from oracles import central_difference, rel_error, render_oracle, voxel_centers

SPEC = GridSpec((5, 5, 5))
R5 = 0.25 * math.sqrt(3)


def random_region(rng, m, k, c, dtype=np.float64):
    lc = rng.uniform(-1, 1, (m, k, 3)).astype(dtype)
    f = rng.normal(size=(m, k, c)).astype(dtype)
    return lc, f


class TestKernel:
    @pytest.mark.parametrize("r,p", [(0.433, 1.0), (1.0, 2.0), (0.1, 0.5)])
    def test_endpoints(self, r, p):
        assert kernel(0.0, r, p) == 1.0
        assert kernel(r, r, p) == 0.0
        assert kernel(2 * r, r, p) == 0.0

    def test_half_radius(self):
        assert kernel(0.5, 1.0, 1.0) == 0.5
        assert kernel(0.5, 1.0, 2.0) == 0.75

    def test_monotone(self):
        m = np.linspace(0, 1, 101)
        w = kernel(m, 0.7, 1.5)
        assert np.all(np.diff(w) <= 0)


class TestGridSpec:
    def test_axis_samples(self):
        v = voxel_coordinates(GridSpec((5, 2, 3)))
        np.testing.assert_allclose(v[:, 0, 0, 0], [-1, -0.5, 0, 0.5, 1])
        np.testing.assert_allclose(v[0, :, 0, 1], [-1, 1])
        np.testing.assert_allclose(v[0, 0, :, 2], [-1, 0, 1])

    def test_default_radius_half_diagonal(self):
        assert SPEC.r == pytest.approx(0.25 * math.sqrt(3), abs=1e-15)
        assert SPEC.r == pytest.approx(0.4330, abs=1e-4)
        assert default_radius((3, 3, 3)) == pytest.approx(0.5 * math.sqrt(3))
        assert GridSpec(5, radius_scale=2.0).r == pytest.approx(2 * R5)

    @pytest.mark.parametrize("kw", [dict(resolution=(1, 5, 5)), dict(power=0.0),
                                    dict(aggregation="max"), dict(radius=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgument):
            GridSpec(**kw)


class TestRenderForward:
    def test_point_on_voxel(self, backend):
        for p in (0.5, 1.0, 3.0):
            lc = np.array([[[0.5, -1.0, 0.0]]])
            f = np.array([[[2.5, -7.0]]])
            out = render(lc, GridSpec(5, power=p, radius_scale=1.7), f)
            np.testing.assert_allclose(out.values[0, 3, 0, 2], [2.5, -7.0], rtol=0, atol=1e-15)

    def test_equidistant_pair(self, backend):
        lc = np.array([[[0.1, 0, 0], [-0.1, 0, 0]]])
        f = np.array([[[1.0], [3.0]]])
        out = render(lc, SPEC, f)
        assert out.values[0, 2, 2, 2, 0] == pytest.approx(2.0, abs=1e-15)

    def test_matches_double_loop_oracle(self, backend, rng):
        lc, f = random_region(rng, 3, 6, 2)
        out = render(lc, SPEC, f)
        np.testing.assert_allclose(out.values, render_oracle(lc, f, (5, 5, 5), R5, 1.0),
                                   atol=1e-12)

    @pytest.mark.parametrize("agg", ["avg_pool", "nearest_neighbor"])
    def test_variants_match_oracle(self, backend, rng, agg):
        lc, f = random_region(rng, 4, 10, 3)
        spec = GridSpec(5, aggregation=agg, radius_scale=1.5)
        out = render(lc, spec, f)
        np.testing.assert_allclose(out.values,
                                   render_oracle(lc, f, (5, 5, 5), spec.r, 1.0, agg), atol=1e-12)

    def test_region_batch_input(self, backend, rng):
        from lgrnet.geometry import PointCloud, RegionSpec, structure
        pts = rng.random((200, 3))
        pc = PointCloud(pts, pts[:, 2:])
        _, reg = structure(pc, RegionSpec(8, 0.2, 16), seed=0)
        out = render(reg, SPEC)
        assert out.values.shape == (8, 5, 5, 5, 1)

    def test_anisotropic_resolution(self, backend, rng):
        lc, f = random_region(rng, 2, 5, 1)
        spec = GridSpec((3, 4, 6))
        np.testing.assert_allclose(render(lc, spec, f).values,
                                   render_oracle(lc, f, (3, 4, 6), spec.r, 1.0), atol=1e-12)

    def test_zero_weight_voxels_exactly_zero(self, backend):
        lc = np.array([[[-1.0, -1.0, -1.0]]])
        out = render(lc, SPEC, np.array([[[5.0]]]))
        active = out.weight_sums[0] > 0
        assert active.sum() == 1
        assert np.all(out.values[0][~active] == 0.0)

    def test_single_point_support(self, backend):
        # exactly the voxels strictly within r of the point are active
        lc = np.array([[[0.1, 0.2, -0.3]]])
        out = render(lc, SPEC, np.ones((1, 1, 1)))
        vox = voxel_coordinates(SPEC)
        d = np.linalg.norm(vox - lc[0, 0], axis=-1)
        np.testing.assert_array_equal(out.weight_sums[0] > 0, d < SPEC.r)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgument):
            render(np.zeros((2, 3, 3)), SPEC, np.zeros((2, 4, 1)))
        with pytest.raises(InvalidArgument):
            render(np.zeros((2, 3, 2)), SPEC, np.zeros((2, 3, 1)))

    def test_float32(self, backend, rng):
        lc, f = random_region(rng, 3, 8, 2, np.float32)
        out = render(lc, SPEC, f)
        assert out.values.dtype == np.float32
        np.testing.assert_allclose(out.values, render_oracle(lc, f, (5, 5, 5), R5, 1.0),
                                   atol=1e-5)


class TestInvariants:
    def test_convex_combination(self, backend, rng):
        lc, f = random_region(rng, 50, 12, 3)
        out = render(lc, SPEC, f)
        vals = out.values.reshape(50, -1, 3)
        ws = out.weight_sums.reshape(50, -1)
        vox = voxel_coordinates(SPEC).reshape(-1, 3)
        d = np.linalg.norm(lc[:, :, None] - vox[None, None], axis=-1)
        contrib = d < SPEC.r
        for a in range(50):
            for v in np.flatnonzero(ws[a] > 0):
                fs = f[a][contrib[a, :, v]]
                assert np.all(vals[a, v] >= fs.min(0) - 1e-9)
                assert np.all(vals[a, v] <= fs.max(0) + 1e-9)

    @pytest.mark.parametrize("m", [2, 3, 5])
    def test_replication_invariance(self, backend, rng, m):
        lc, f = random_region(rng, 20, 7, 2)
        base = render(lc, SPEC, f).values
        rep = render(np.tile(lc, (1, m, 1)), SPEC, np.tile(f, (1, m, 1))).values
        np.testing.assert_allclose(rep, base, atol=1e-9)

    @pytest.mark.parametrize("agg", ["interpolation", "avg_pool"])
    def test_permutation_invariance(self, backend, rng, agg):
        lc, f = random_region(rng, 10, 9, 2)
        perm = rng.permutation(9)
        spec = GridSpec(5, aggregation=agg)
        np.testing.assert_allclose(render(lc[:, perm], spec, f[:, perm]).values,
                                   render(lc, spec, f).values, atol=1e-12)

    def test_single_point_all_aggregations_agree(self, backend, rng):
        lc, f = random_region(rng, 6, 1, 4)
        outs = [render(lc, GridSpec(5, aggregation=a), f).values
                for a in ("interpolation", "avg_pool", "nearest_neighbor")]
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-15)
        np.testing.assert_allclose(outs[0], outs[2], atol=1e-15)


def weight_ratio_oracle(lc, res, r, p):
    """w_i(v) / sum_j w_j(v) by direct loops: M x K x V."""
    vox = voxel_centers(*res)
    m, k = lc.shape[:2]
    out = np.zeros((m, k, len(vox)))
    for a in range(m):
        for vi, v in enumerate(vox):
            ws = [max(0.0, 1 - (math.dist(lc[a, i], v) / r) ** p) for i in range(k)]
            s = sum(ws)
            if s > 0:
                out[a, :, vi] = [w / s for w in ws]
    return out


def far_from_kinks(lc, spec, h):
    vox = voxel_coordinates(spec).reshape(-1, 3)
    d = np.linalg.norm(lc[:, :, None] - vox[None, None], axis=-1)
    return np.all(np.abs(d - spec.r) > 10 * h) and np.all(d > 10 * h)


class TestRenderBackward:
    def test_single_point_feature_grad(self, backend):
        lc = np.array([[[0.0, 0.5, -0.5]]])
        out = render(lc, SPEC, np.array([[[3.0, 4.0]]]))
        g = np.zeros_like(out.values)
        g[0, 2, 3, 1, 1] = 1.0
        gf, _ = render_backward(out, g)
        np.testing.assert_allclose(gf[0, 0], [0.0, 1.0], atol=1e-15)

    def test_feature_grad_is_weight_ratio(self, backend, rng):
        lc, f = random_region(rng, 4, 6, 2)
        out = render(lc, SPEC, f)
        ratios = weight_ratio_oracle(lc, (5, 5, 5), SPEC.r, 1.0)
        for v in (0, 31, 62, 124):
            g = np.zeros((4, 125, 2))
            g[:, v, 1] = 1.0
            gf, _ = render_backward(out, g.reshape(out.values.shape), need_coords=False)
            np.testing.assert_allclose(gf[:, :, 1], ratios[:, :, v], atol=1e-9)
            np.testing.assert_array_equal(gf[:, :, 0], 0.0)

    def test_feature_grads_sum_to_one(self, backend, rng):
        lc, f = random_region(rng, 8, 10, 1)
        out = render(lc, SPEC, f)
        ratios_sum = []
        for v in range(125):
            g = np.zeros((8, 125, 1))
            g[:, v] = 1.0
            gf, _ = render_backward(out, g.reshape(out.values.shape), need_coords=False)
            ratios_sum.append(gf[:, :, 0].sum(1))
        ratios_sum = np.array(ratios_sum).T
        active = out.weight_sums.reshape(8, -1) > 0
        np.testing.assert_allclose(ratios_sum[active], 1.0, atol=1e-12)
        np.testing.assert_array_equal(ratios_sum[~active], 0.0)

    @pytest.mark.parametrize("p", [1.0, 2.0])
    def test_finite_differences(self, backend, p):
        h = 1e-4
        spec = GridSpec(5, power=p)
        r = np.random.default_rng(5)
        while True:
            # clustered so that voxels see several contributors
            lc = r.uniform(-0.35, 0.35, (1, 4, 3))
            f = r.normal(size=(1, 4, 2))
            if far_from_kinks(lc, spec, h):
                break
        up = r.normal(size=(1, 5, 5, 5, 2))

        def loss():
            return float((render(lc, spec, f).values * up).sum())

        gf, gc = render_backward(render(lc, spec, f), up)
        assert rel_error(gf, central_difference(loss, f, h)) < 1e-3
        assert rel_error(gc, central_difference(loss, lc, h)) < 1e-3
        assert np.abs(gc).max() > 1e-2

    def test_zero_weight_voxels_get_zero_grad(self, backend):
        lc = np.array([[[1.0, 1.0, 1.0], [0.9, 1.0, 1.0]]])
        out = render(lc, SPEC, np.array([[[1.0], [2.0]]]))
        g = np.where(out.weight_sums[..., None] > 0, 0.0, 1.0)
        gf, gc = render_backward(out, g)
        np.testing.assert_array_equal(gf, 0.0)
        np.testing.assert_array_equal(gc, 0.0)

    def test_missing_cache(self):
        with pytest.raises(InvalidState):
            render_backward(None, np.zeros(1))
        out = render(np.zeros((1, 1, 3)), SPEC, np.ones((1, 1, 1)))
        out.weight_sums = None
        with pytest.raises(InvalidState):
            render_backward(out, np.zeros((1, 5, 5, 5, 1)))

    def test_backends_agree(self, rng):
        from lgrnet import kernels
        if len(kernels.BACKENDS) < 2:
            pytest.skip("compiled kernels not built")
        lc, f = random_region(rng, 30, 16, 5)
        g = rng.normal(size=(30, 5, 5, 5, 5))
        results = []
        for name in ("python", "compiled"):
            prev = kernels.set_backend(name)
            try:
                out = render(lc, SPEC, f)
                results.append((out.values, *render_backward(out, g)))
            finally:
                kernels.set_backend(prev)
        for a, b in zip(*results):
            np.testing.assert_allclose(a, b, atol=1e-12)


def test_render_tensor_autodiff(backend, rng):
    lc, f = random_region(rng, 3, 5, 2)
    ft = Tensor(f.copy(), requires_grad=True)
    ct = Tensor(lc.copy(), requires_grad=True)
    out = render_tensor(ct, ft, SPEC)
    assert out.shape == (3, 2, 5, 5, 5)
    up = rng.normal(size=out.shape)
    (out * up).sum().backward()
    ref = render(lc, SPEC, f)
    gf, gc = render_backward(ref, np.moveaxis(up, 1, -1))
    np.testing.assert_allclose(ft.grad, gf, atol=1e-12)
    np.testing.assert_allclose(ct.grad, gc, atol=1e-12)
