import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gvsynergy.diffcore import Graph, check_gradients, ops
from gvsynergy.gaussianfield import (D_MAX, D_MIN, LATENT_DIM, PSNR_CAP, SH_C0, GaussianSet, decode_latent,
                                     fuse_multiview, gru_update, match_primitives, predict_depth, psnr,
                                     regress_gaussians, render, render_loss, ssim)
from gvsynergy.gaussianfield.field import (S_MIN, decoder_shapes, depth_head_shapes, gru_shapes,
                                           regressor_shapes)
from gvsynergy.geometry import Camera, project_points
from gvsynergy.verify import BLOCK_TOL, resolve_checks, run_gradient_suite


def pinhole(f=10.0, size=(16, 16), stride=4, P=None):
    W, H = size
    K = np.array([[f, 0, W / 2, 0], [0, f, H / 2, 0], [0, 0, 1, 0]], dtype=float)
    return Camera(K, np.eye(4) if P is None else P, np.diag([1 / stride, 1 / stride, 1.0]), size)


def zero_params(shapes):
    return {k: np.zeros(s) for k, s in shapes.items()}


def random_params(shapes, rng, scale=0.3):
    return {k: rng.normal(0, scale, s) for k, s in shapes.items()}


def splat(positions, opacity, sh, scale, rotation=None):
    n = len(positions)
    rot = np.tile([1.0, 0, 0, 0], (n, 1)) if rotation is None else rotation
    return GaussianSet(positions=np.asarray(positions, float), opacity=np.asarray(opacity, float),
                       weight=np.full(n, 0.5), latent=np.zeros((n, LATENT_DIM)),
                       source_view=np.zeros(n, int), pixel=np.arange(n), depth=np.zeros(n),
                       sh=np.asarray(sh, float), rotation=rot, scale=np.asarray(scale, float))


def regressed(rng, cam, params=None, C=5, g=None):
    g = g or Graph()
    feats = g.constant(rng.normal(size=(1, C, 4, 4)))
    p = {k: g.constant(v) for k, v in (params or random_params(regressor_shapes(C), rng)).items()}
    depth = rng.uniform(1.0, 3.0, (1, 4, 4))
    return regress_gaussians(feats, depth, [cam], p)[0], depth


class TestDepthHead:
    def test_zero_params_uniform_midpoint(self):
        g = Graph()
        p = {k: g.constant(v) for k, v in zero_params(depth_head_shapes(6)).items()}
        d = predict_depth(g.constant(np.zeros((2, 6, 4, 5))), p).data
        assert d.shape == (2, 4, 5)
        np.testing.assert_array_equal(d, (D_MIN + D_MAX) / 2)

    def test_range(self):
        rng = np.random.default_rng(0)
        g = Graph()
        p = {k: g.constant(v) for k, v in random_params(depth_head_shapes(3), rng, 3.0).items()}
        d = predict_depth(g.constant(rng.normal(0, 5, (2, 3, 6, 6))), p).data
        assert d.min() >= D_MIN and d.max() <= D_MAX


class TestRegressor:
    def test_one_primitive_per_pixel(self):
        gset, _ = regressed(np.random.default_rng(0), pinhole())
        assert len(gset) == 16
        assert gset.latent.shape == (16, LATENT_DIM)

    def test_zero_params_half_opacity(self):
        gset, _ = regressed(np.random.default_rng(1), pinhole(), zero_params(regressor_shapes(5)))
        np.testing.assert_array_equal(gset.opacity.data, 0.5)
        np.testing.assert_array_equal(gset.weight.data, 0.5)

    def test_positions_project_to_pixel_centres(self):
        rng = np.random.default_rng(2)
        cam = pinhole(P=np.array([[0, -1, 0, 0.3], [0, 0, -1, 1.0], [1, 0, 0, 0.2], [0, 0, 0, 1.0]]))
        gset, depth = regressed(rng, cam)
        u, v, d, ok = project_points(cam, gset.positions)
        vv, uu = np.divmod(np.arange(16), 4)
        np.testing.assert_allclose(u, uu + 0.5, atol=1e-9)
        np.testing.assert_allclose(v, vv + 0.5, atol=1e-9)
        np.testing.assert_allclose(d, depth.reshape(-1), atol=1e-9)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 20.0))
    def test_alpha_and_weight_in_unit_interval(self, seed, scale):
        gset, _ = regressed(np.random.default_rng(seed), pinhole(),
                            random_params(regressor_shapes(5), np.random.default_rng(seed + 1), scale))
        for t in (gset.opacity.data, gset.weight.data):
            assert np.all((t >= 0) & (t <= 1))


class TestDecoder:
    def _decode(self, raw):
        g = Graph()
        latent = np.zeros((len(raw), LATENT_DIM))
        p = {"dec.w": g.constant(np.zeros((LATENT_DIM, 19))), "dec.b": g.constant(raw[0])}
        return decode_latent(g.constant(latent), p)

    def test_identity_quaternion(self):
        raw = np.zeros((1, 19))
        raw[0, 12] = 1.0
        _, rot, scale, bad = self._decode(raw)
        np.testing.assert_array_equal(rot, [[1, 0, 0, 0]])
        np.testing.assert_allclose(scale, S_MIN + np.log(2.0), rtol=0, atol=1e-15)
        assert bad == 0

    def test_degenerate_quaternion_counted(self):
        _, rot, _, bad = self._decode(np.zeros((1, 19)))
        np.testing.assert_array_equal(rot, [[1, 0, 0, 0]])
        assert bad == 1

    def test_shapes(self):
        rng = np.random.default_rng(0)
        g = Graph()
        p = {k: g.constant(v) for k, v in random_params(decoder_shapes(), rng).items()}
        sh, rot, scale, _ = decode_latent(g.constant(rng.normal(size=(7, LATENT_DIM))), p)
        assert sh.shape == (7, 3, 4) and rot.shape == (7, 4) and scale.shape == (7, 3)

    @settings(max_examples=20, deadline=None)
    @given(arrays(np.float64, (5, LATENT_DIM), elements=st.floats(-100, 100)))
    def test_unit_quaternions_positive_scales(self, latent):
        rng = np.random.default_rng(3)
        g = Graph()
        p = {k: g.constant(v) for k, v in random_params(decoder_shapes(), rng).items()}
        _, rot, scale, _ = decode_latent(g.constant(latent), p)
        np.testing.assert_allclose(np.linalg.norm(rot, axis=1), 1.0, rtol=0, atol=1e-9)
        assert np.all(scale > 0)


class TestFusion:
    def test_gru_zero_weight_keeps_latent(self):
        rng = np.random.default_rng(0)
        g = Graph()
        p = {k: g.constant(v) for k, v in random_params(gru_shapes(), rng).items()}
        h_old = rng.normal(size=(3, LATENT_DIM))
        out = gru_update(g.constant(h_old), g.constant(rng.normal(size=(3, LATENT_DIM))),
                         g.constant(np.zeros(3)), p)
        np.testing.assert_array_equal(out.data, h_old)

    def test_empty_incoming(self):
        rng = np.random.default_rng(1)
        cam = pinhole()
        gset, _ = regressed(rng, cam)
        empty = GaussianSet(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros((0, LATENT_DIM)),
                            np.zeros(0, int), np.zeros(0, int), np.zeros(0))
        assert fuse_multiview(gset, empty, cam, 0.05, {}, (4, 4)) is gset

    def test_self_fusion_keeps_size(self):
        rng = np.random.default_rng(2)
        cam = pinhole()
        gset, _ = regressed(rng, cam)
        gi, ii = match_primitives(gset, gset, cam, 0.05, (4, 4))
        np.testing.assert_array_equal(gi, np.arange(16))
        np.testing.assert_array_equal(ii, np.arange(16))
        g = gset.latent.graph
        p = {k: g.constant(v) for k, v in random_params(gru_shapes(), rng).items()}
        assert len(fuse_multiview(gset, gset, cam, 0.05, p, (4, 4))) == 16

    def test_disjoint_depths_append(self):
        rng = np.random.default_rng(3)
        cam = pinhole()
        a, _ = regressed(rng, cam)
        b, _ = regressed(rng, cam, g=a.latent.graph)
        b.positions = b.positions * 3.0
        b.depth = b.depth * 3.0
        out = fuse_multiview(a, b, cam, 0.05, {}, (4, 4))
        assert len(out) == 32

    def test_rejects_bad_tau(self):
        gset, _ = regressed(np.random.default_rng(4), pinhole())
        with pytest.raises(ValueError):
            fuse_multiview(gset, gset, pinhole(), 0.0, {}, (4, 4))

    def test_tie_break_smallest_difference_then_index(self):
        cam = pinhole()
        inc = splat([[0.0, 0.0, 2.0]], [0.5], np.zeros((1, 3, 4)), np.ones((1, 3)))
        inc.pixel = np.array([2 * 4 + 2])
        inc.depth = np.array([2.0])
        pos = np.array([[0.0, 0.0, 2.375], [0.0, 0.0, 1.75], [0.0, 0.0, 2.25], [0.0, 0.0, 3.0]])
        glob = splat(pos, np.full(4, 0.5), np.zeros((4, 3, 4)), np.ones((4, 3)))
        gi, ii = match_primitives(glob, inc, cam, 0.2, (4, 4))
        np.testing.assert_array_equal(gi, [1])
        np.testing.assert_array_equal(ii, [0])

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.5))
    def test_incoming_matched_once_or_appended(self, seed, tau):
        rng = np.random.default_rng(seed)
        cam = pinhole()
        a, _ = regressed(rng, cam)
        b, _ = regressed(rng, cam, g=a.latent.graph)
        gi, ii = match_primitives(a, b, cam, tau, (4, 4))
        assert len(np.unique(ii)) == len(ii)
        out = fuse_multiview(a, b, cam, tau, {k: a.latent.graph.constant(v) for k, v in
                                              random_params(gru_shapes(), rng).items()}, (4, 4))
        assert len(out) == len(a) + len(b) - len(ii) <= len(a) + len(b)


class TestRender:
    def test_empty_set_background(self):
        img = render(splat(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3, 4)), np.zeros((0, 3))),
                     pinhole(), (5, 4), background=(0.1, 0.2, 0.3))
        assert img.shape == (3, 4, 5)
        np.testing.assert_array_equal(img[:, 2, 3], [0.1, 0.2, 0.3])

    def test_opaque_centre_pixel_is_dc_colour(self):
        cam = pinhole(f=10.0, size=(16, 16))
        # pixel (7, 7) centre is at 7.5 = 8 + 10 x / 2
        sh = np.zeros((1, 3, 4))
        sh[0, :, 0] = [0.3, -0.2, 0.9]
        gset = splat([[-0.1, -0.1, 2.0]], [1.0], sh, [[0.5, 0.5, 0.5]])
        img = render(gset, cam, (16, 16), background=(0.7, 0.7, 0.7))
        np.testing.assert_allclose(img[:, 7, 7], 0.5 + SH_C0 * sh[0, :, 0], rtol=0, atol=1e-15)

    def _two_overlapping(self):
        sh = np.random.default_rng(0).normal(0, 0.5, (2, 3, 4))
        return splat([[0.0, 0.0, 2.0], [0.1, 0.05, 3.0]], [0.6, 0.8], sh, [[0.3, 0.2, 0.2], [0.4, 0.4, 0.3]])

    def test_permutation_invariant(self):
        a = self._two_overlapping()
        b = splat(a.positions[::-1], a.opacity[::-1], a.sh[::-1], a.scale[::-1])
        np.testing.assert_array_equal(render(a, pinhole(), (16, 16)), render(b, pinhole(), (16, 16)))

    def test_convex_combination(self):
        rng = np.random.default_rng(1)
        n = 12
        sh = rng.normal(0, 0.3, (n, 3, 4))
        gset = splat(np.c_[rng.uniform(-0.5, 0.5, (n, 2)), rng.uniform(1.5, 3.0, n)], rng.uniform(0, 1, n), sh,
                     rng.uniform(0.05, 0.4, (n, 3)))
        bg = np.array([0.2, 0.4, 0.6])
        img = render(gset, pinhole(), (16, 16), background=bg)
        from gvsynergy.gaussianfield.render import sh_basis, sh_colors
        cols = sh_colors(sh, sh_basis(gset.positions, pinhole().center))
        lo = np.minimum(cols.min(axis=0), bg)[:, None, None]
        hi = np.maximum(cols.max(axis=0), bg)[:, None, None]
        assert np.all(img >= lo - 1e-9) and np.all(img <= hi + 1e-9)

    def test_singular_footprint_skipped(self):
        gset = splat([[0.0, 0.0, 2.0]], [1.0], np.zeros((1, 3, 4)), [[1e-9, 0.5, 0.5]])
        stats = {}
        img = render(gset, pinhole(), (16, 16), stats=stats)
        assert stats["singular"] == 1
        assert not img.any()

    def test_threads_identical(self):
        a = self._two_overlapping()
        np.testing.assert_array_equal(render(a, pinhole(), (16, 16), threads=1),
                                      render(a, pinhole(), (16, 16), threads=3))

    def test_opacity_gradient(self):
        base = self._two_overlapping()
        target = np.random.default_rng(2).uniform(0, 1, (3, 16, 16))

        def f(g, p):
            s = splat(base.positions, base.opacity, base.sh, base.scale)
            s.opacity = p["opacity"]
            s.sh = p["sh"]
            return render_loss(render(s, pinhole(), (16, 16)), target)

        errs = check_gradients(f, {"opacity": base.opacity, "sh": base.sh})
        assert max(errs.values()) < BLOCK_TOL

    def test_render_loss_values(self):
        a = np.random.default_rng(3).uniform(size=(3, 4, 4))
        assert render_loss(a, a) == 0.0
        assert render_loss(np.zeros((3, 2, 2)), np.ones((3, 2, 2))) == 1.0
        with pytest.raises(ValueError):
            render_loss(np.zeros((3, 2, 2)), np.zeros((3, 2, 3)))
        g = Graph()
        assert render_loss(g.constant(np.zeros((3, 2, 2))), np.ones((3, 2, 2))).data == 1.0


class TestMetrics:
    def test_identical(self):
        a = np.random.default_rng(0).uniform(size=(3, 16, 16))
        assert psnr(a, a) == PSNR_CAP
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_psnr_analytic(self):
        a = np.zeros((3, 4, 4))
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_ssim_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16))
        s = ssim(a, b)
        assert abs(s - ssim(b, a)) < 1e-12
        assert -1.0 <= s <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((3, 2, 2)), np.zeros((3, 2, 1)))
        with pytest.raises(ValueError):
            ssim(np.zeros((3, 2, 2)), np.zeros((3, 2, 1)))


@pytest.mark.parametrize("name", resolve_checks("gaussianfield"))
def test_block_gradients(name):
    (res,) = run_gradient_suite([name])
    assert res.max_error < BLOCK_TOL, res.errors
