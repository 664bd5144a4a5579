import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from featvol import feature_volume as fv
from featvol import ray_engine as re_
from featvol import render_net as rn
from featvol.errors import InvalidArgumentError

TINY = rn.NetDescriptor(feat_len=4, enc_order=1, depth=2, width=8, skip=1, bottleneck=6, branch=5)


def make_camera(w=32, h=24, f=None, c2w=None, near=1.0, far=5.0):
    f = f or float(w)
    return re_.Camera(f, f, w / 2, h / 2, w, h, np.eye(4) if c2w is None else c2w, near, far)


class TestCamera:
    def test_principal_ray(self):
        cam = make_camera()
        r = re_.generate_ray(cam, cam.cx - 0.5, cam.cy - 0.5)
        np.testing.assert_allclose(r.direction, [0, 0, -1], atol=1e-12)

    def test_corner_angle(self):
        w = h = 40
        cam = make_camera(w, h, f=w)
        r = re_.generate_ray(cam, 0, 0)
        off = np.hypot((0.5 - w / 2) / w, (0.5 - h / 2) / w)
        assert np.arccos(-r.direction[2]) == pytest.approx(np.arctan(off), abs=1e-12)
        # top-left pixel looks left and up
        assert r.direction[0] < 0 and r.direction[1] > 0

    def test_unit_and_row_major(self):
        cam = make_camera(c2w=re_.look_at([3, 1, 2], [0, 0, 0]))
        o, d = re_.generate_rays(cam)
        assert o.shape == (32 * 24, 3)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(d[33], re_.generate_ray(cam, 1, 1).direction, atol=1e-15)

    def test_out_of_range(self):
        cam = make_camera()
        with pytest.raises(InvalidArgumentError):
            re_.generate_ray(cam, 32, 0)
        with pytest.raises(InvalidArgumentError):
            re_.generate_ray(cam, 0, -1)

    def test_project_inverts_generate(self):
        cam = make_camera(c2w=re_.look_at([0, -4, 1], [0, 0, 0]))
        r = re_.generate_ray(cam, 7, 11)
        xy, depth = cam.project(r.origin + 2.5 * r.direction)
        np.testing.assert_allclose(xy[0], [7.5, 11.5], atol=1e-9)
        assert depth[0] > 0

    def test_invalid_camera(self):
        with pytest.raises(InvalidArgumentError):
            make_camera(near=2.0, far=1.0)
        bad = np.eye(4)
        bad[0, 0] = 1.1
        with pytest.raises(InvalidArgumentError):
            make_camera(c2w=bad)


class TestStratified:
    def test_midpoints(self):
        np.testing.assert_allclose(re_.stratified_samples(0.0, 1.0, 4), [0.125, 0.375, 0.625, 0.875])

    def test_jitter_in_bins(self):
        rng = np.random.default_rng(0)
        t = re_.stratified_samples(np.full(100, 2.0), np.full(100, 6.0), 64, rng, jitter=True)
        bins = np.floor((t - 2.0) / 4.0 * 64).astype(int)
        assert np.array_equal(bins, np.broadcast_to(np.arange(64), t.shape))
        assert np.all(np.diff(t, axis=1) > 0)

    def test_default_count(self):
        assert re_.RenderConfig().n_coarse == 64 and re_.RenderConfig().n_fine == 64


class TestImportance:
    def test_chi_square_known_pdf(self):
        rng = np.random.default_rng(1)
        nb = 16
        weights = rng.uniform(0.0, 1.0, size=nb)
        edges = re_.bin_edges(0.0, 1.0, nb)
        n_draw = 100_000
        samples = re_.sample_pdf(edges, weights, n_draw, rng)[0]
        pdf = (weights + re_.EPS_PDF) / (weights + re_.EPS_PDF).sum()
        # refine each coarse bin in two halves to also test uniformity inside bins
        fine_edges = np.linspace(0, 1, 2 * nb + 1)
        observed, _ = np.histogram(samples, fine_edges)
        expected = np.repeat(pdf / 2, 2) * n_draw
        assert stats.chisquare(observed, expected).pvalue > 0.01

    def test_chi_square_uniform(self):
        rng = np.random.default_rng(2)
        samples = re_.sample_pdf(re_.bin_edges(0.0, 1.0, 64), np.ones(64), 100_000, rng)[0]
        observed, _ = np.histogram(samples, np.linspace(0, 1, 101))
        assert stats.chisquare(observed).pvalue > 0.01

    def test_degenerate_deterministic(self):
        w = np.zeros(64)
        w[17] = 1.0
        t_c = re_.stratified_samples(0.0, 1.0, 64)
        out = re_.importance_samples(t_c, w, 64, 0.0, 1.0)[0]
        assert out.shape == (128,)
        lo, hi = 17 / 64, 18 / 64
        drawn = re_.sample_pdf(re_.bin_edges(0.0, 1.0, 64), w, 64)[0]
        assert np.all((drawn >= lo) & (drawn <= hi))

    def test_degenerate_jittered_leak_bounded(self):
        w = np.zeros(64)
        w[40] = 1.0
        rng = np.random.default_rng(3)
        drawn = re_.sample_pdf(re_.bin_edges(0.0, 1.0, 64), w, 100_000, rng)[0]
        out = ~((drawn >= 40 / 64) & (drawn <= 41 / 64))
        # only the epsilon floor can place samples elsewhere: mass 63e-5 / (1 + 64e-5)
        assert out.mean() <= 1e-3

    def test_all_zero_weights_fall_back_to_uniform(self):
        drawn = re_.sample_pdf(re_.bin_edges(0.0, 1.0, 8), np.zeros(8), 8)[0]
        np.testing.assert_allclose(drawn, (np.arange(8) + 0.5) / 8, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
    def test_sorted_and_length(self, seed, n):
        rng = np.random.default_rng(seed)
        t_c = re_.stratified_samples(np.full(3, 1.0), np.full(3, 4.0), 16, rng, jitter=True)
        w = rng.uniform(size=(3, 16)) * (rng.uniform(size=(3, 16)) < 0.3)
        out = re_.importance_samples(t_c, w, n, 1.0, 4.0, rng)
        assert out.shape == (3, 16 + n)
        assert np.all(np.diff(out, axis=1) >= 0)
        assert np.all((out >= 1.0) & (out <= 4.0))

    def test_negative_weights_rejected(self):
        with pytest.raises(InvalidArgumentError):
            re_.sample_pdf(re_.bin_edges(0.0, 1.0, 2), [1.0, -1.0], 4)


class TestComposite:
    def test_vacuum(self):
        t = re_.stratified_samples(0, 1, 8)
        c = re_.composite(t, np.zeros(8), np.random.default_rng(0).uniform(size=(8, 3)), 1.0, (0.2, 0.4, 0.6))
        np.testing.assert_allclose(c.rgb[0], [0.2, 0.4, 0.6], atol=0)
        assert c.opacity[0] == 0

    def test_opaque(self):
        t = re_.stratified_samples(0, 1, 8)
        sigma = np.zeros(8)
        sigma[3] = 1e6
        rgb = np.random.default_rng(0).uniform(size=(8, 3))
        c = re_.composite(t, sigma, rgb, 1.0, (1, 1, 1))
        np.testing.assert_allclose(c.rgb[0], rgb[3], atol=1e-12)
        assert c.opacity[0] == pytest.approx(1.0)

    def test_homogeneous_opacity(self):
        sigma = 2.0
        t = re_.stratified_samples(0.0, 1.0, 256)
        c = re_.composite(t, np.full(256, sigma), np.full((256, 3), 0.3), 1.0)
        want = 1 - np.exp(-sigma)
        assert abs(c.opacity[0] - want) / want <= 0.01
        np.testing.assert_allclose(c.rgb[0], 0.3 * c.opacity[0], atol=1e-12)

    def test_weights_plus_residual_is_one(self):
        rng = np.random.default_rng(4)
        t = np.sort(rng.uniform(2, 6, size=(50, 32)), axis=1)
        sigma = rng.exponential(2.0, size=(50, 32))
        c = re_.composite(t, sigma, rng.uniform(size=(50, 32, 3)), 6.0)
        residual = c.trans_next[:, -1]
        np.testing.assert_allclose(c.weights.sum(axis=1) + residual, 1.0, atol=1e-12)
        assert np.all((c.weights >= 0) & (c.weights <= 1))

    def test_zero_density_insertion(self):
        rng = np.random.default_rng(5)
        t = np.sort(rng.uniform(0, 1, 10))
        sigma = rng.exponential(3.0, 10)
        sigma[4] = 0.0
        rgb = rng.uniform(size=(10, 3))
        base = re_.composite(t, sigma, rgb, 1.0, (0.1, 0.2, 0.3)).rgb
        # (a) at an existing position: zero-width interval, any index
        for k in range(10):
            t2 = np.insert(t, k, t[k])
            out = re_.composite(t2, np.insert(sigma, k, 0.0), np.insert(rgb, k, 0.9, axis=0), 1.0, (0.1, 0.2, 0.3))
            np.testing.assert_allclose(out.rgb, base, atol=1e-12)
        # (b) inside a stretch whose preceding sample is already empty
        tm = 0.5 * (t[4] + t[5])
        t3 = np.insert(t, 5, tm)
        out = re_.composite(t3, np.insert(sigma, 5, 0.0), np.insert(rgb, 5, 0.9, axis=0), 1.0, (0.1, 0.2, 0.3))
        np.testing.assert_allclose(out.rgb, base, atol=1e-12)

    def test_unsorted_rejected(self):
        with pytest.raises(InvalidArgumentError):
            re_.composite([0.5, 0.2], [1.0, 1.0], np.zeros((2, 3)), 1.0)


class TestCompositeBackward:
    def test_dc_is_weight(self):
        rng = np.random.default_rng(6)
        t = np.sort(rng.uniform(0, 1, (3, 8)), axis=1)
        sigma = rng.exponential(size=(3, 8))
        rgb = rng.uniform(size=(3, 8, 3))
        c = re_.composite(t, sigma, rgb, 1.0)
        d = rng.normal(size=(3, 3))
        dc, _ = re_.composite_backward(c, rgb, d)
        np.testing.assert_allclose(dc, c.weights[..., None] * d[:, None, :], atol=0)

    def test_vacuum_closed_form(self):
        rng = np.random.default_rng(7)
        t = np.sort(rng.uniform(0, 1, 8))
        rgb = rng.uniform(size=(8, 3))
        bg = np.array([0.2, 0.5, 0.1])
        d = rng.normal(size=3)
        c = re_.composite(t, np.zeros(8), rgb, 1.0, bg)
        _, ds = re_.composite_backward(c, rgb, d, bg)
        np.testing.assert_allclose(ds[0], c.delta[0] * ((rgb - bg) @ d), atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        t = np.sort(rng.uniform(0, 1, 8))
        sigma = rng.exponential(2.0, 8)
        rgb = rng.uniform(size=(8, 3))
        bg = rng.uniform(size=3)
        d = rng.normal(size=3)

        def f(s, c):
            return re_.composite(t, s, c, 1.0, bg).rgb[0] @ d

        comp = re_.composite(t, sigma, rgb, 1.0, bg)
        dc, ds = re_.composite_backward(comp, rgb, d, bg)
        h = 1e-6
        num_s = np.array([(f(sigma + h * e, rgb) - f(sigma - h * e, rgb)) / (2 * h) for e in np.eye(8)])
        num_c = np.zeros((8, 3))
        for idx in np.ndindex(8, 3):
            e = np.zeros((8, 3))
            e[idx] = h
            num_c[idx] = (f(sigma, rgb + e) - f(sigma, rgb - e)) / (2 * h)
        np.testing.assert_allclose(ds[0], num_s, atol=1e-5 * max(1, np.abs(num_s).max()))
        np.testing.assert_allclose(dc[0], num_c, atol=1e-8)

    def test_missing_forward(self):
        with pytest.raises(InvalidArgumentError):
            re_.composite_backward(None, np.zeros((1, 3)), np.zeros(3))


def tiny_scene(seed=0, dims=(3, 3, 3)):
    rng = np.random.default_rng(seed)
    vol = fv.FeatureVolume(rng.normal(size=dims + (TINY.feat_len,)), [[-1, -1, -1], [1, 1, 1]])
    params = rn.init_params(TINY, seed=seed, dtype=np.float64)
    return vol, params


def chain_loss(vol, params, o, d, target, cfg):
    out = re_.render_rays(vol, params, o, d, 1.0, 5.0, cfg)
    return np.sum((out.coarse.rgb - target) ** 2) + np.sum((out.fine.rgb - target) ** 2), out


def full_chain_fd(seed):
    """Worst relative error of volume and parameter gradients through the renderer."""
    vol, params = tiny_scene(seed)
    o = np.array([[0.1, -0.2, 3.0]])
    d = np.array([[0.05, 0.1, -1.0]])
    d /= np.linalg.norm(d)
    target = np.array([[0.3, 0.6, 0.2]])
    cfg = re_.RenderConfig(n_coarse=8, n_fine=0, background=(0.1, 0.1, 0.1))
    loss, out = chain_loss(vol, params, o, d, target, cfg)
    vg = fv.VolumeGrad.like(vol)
    ng = {"coarse": {}, "fine": {}}
    re_.render_rays_backward(out, params, 2 * (out.coarse.rgb - target), 2 * (out.fine.rgb - target), cfg, vg, ng)
    h = 1e-6
    worst = 0.0
    pairs = [(vol.data, vg.as_array())]
    for which in ("coarse", "fine"):
        net = getattr(params, which)
        pairs += [(net[k], ng[which][k]) for k in net]
    for arr, ana in pairs:
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = chain_loss(vol, params, o, d, target, cfg)[0]
            arr[idx] = old - h
            lm = chain_loss(vol, params, o, d, target, cfg)[0]
            arr[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        worst = max(worst, np.abs(num - ana).max() / scale)
    return worst


class TestRenderRays:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_full_chain_gradient(self, seed):
        assert full_chain_fd(seed) <= 1e-4

    def test_outside_is_background(self):
        vol, params = tiny_scene()
        bg = (0.25, 0.5, 0.75)
        cfg = re_.RenderConfig(n_coarse=16, n_fine=16, background=bg)
        # ray passes beside the unit box
        ray = re_.Ray(np.array([3.0, 3.0, 3.0]), np.array([0.0, 0.0, -1.0]), 1.0, 5.0)
        coarse, fine = re_.render_pixel(vol, params, ray, cfg)
        assert np.array_equal(coarse.rgb, np.array(bg)) and np.array_equal(fine.rgb, np.array(bg))
        assert fine.opacity == 0

    def test_empty_mask_is_background(self):
        vol, params = tiny_scene()
        vol.empty = np.ones(vol.dims, bool)
        cfg = re_.RenderConfig(n_coarse=16, n_fine=16, background=(0.3, 0.3, 0.3))
        ray = re_.Ray(np.array([0.0, 0.0, 3.0]), np.array([0.0, 0.0, -1.0]), 1.0, 5.0)
        _, fine = re_.render_pixel(vol, params, ray, cfg)
        np.testing.assert_array_equal(fine.rgb, [0.3, 0.3, 0.3])

    def test_oversampled_reference(self):
        # smooth blob in feature channel 0 drives density through a hand-wired trunk
        vol = fv.new_volume((16, 16, 16), TINY.feat_len, [[-1, -1, -1], [1, 1, 1]], 0.0, dtype=np.float64)
        pos = vol.node_positions()
        blob = np.exp(-np.sum((pos - [0.2, -0.1, 0.0]) ** 2, axis=-1) / 0.15)
        vol.data[..., 0] = 12.0 * blob
        vol.data[..., 1] = np.sin(3 * pos[..., 2])
        params = rn.init_params(TINY, seed=3, dtype=np.float64)
        for net in (params.coarse, params.fine):
            net["trunk0.w"][:, 0] = [1.0, 0, 0, 0]
            net["trunk1.w"][:, 0] = 0.0
            net["trunk1.w"][0, 0] = 1.0
            net["sigma.w"][:, 0] = 0.0
            net["sigma.w"][0, 0] = 1.0
            net["sigma.b"][:] = -3.0
        cam = make_camera(16, 16, f=20.0, c2w=re_.look_at([0, -3.0, 0.5], [0, 0, 0]), near=1.5, far=4.5)
        img, acc = re_.render_image(vol, params, cam, re_.RenderConfig(n_coarse=64, n_fine=64), return_opacity=True)
        # single pass with the fine network and 10x the samples
        o, d = re_.generate_rays(cam)
        ref_params = rn.RenderParams(params.descriptor, params.fine, params.fine)
        ref = re_.render_rays(vol, ref_params, o, d, cam.near, cam.far, re_.RenderConfig(n_coarse=1280, n_fine=0))
        assert acc.max() > 0.9 and acc.min() < 0.2  # an object with visible edges
        assert np.abs(img - ref.coarse.rgb.reshape(img.shape)).max() <= 2e-2

    def test_render_image_deterministic(self):
        vol, params = tiny_scene(2, (6, 6, 6))
        cam = make_camera(8, 6, c2w=re_.look_at([0, -3, 0], [0, 0, 0]), near=1.0, far=5.0)
        cfg = re_.RenderConfig(n_coarse=16, n_fine=8, chunk=13)
        a = re_.render_image(vol, params, cam, cfg)
        b = re_.render_image(vol, params, cam, re_.RenderConfig(n_coarse=16, n_fine=8, chunk=4096))
        assert a.tobytes() == b.tobytes()
        assert np.all((a >= 0) & (a <= 1))

    def test_feat_len_mismatch(self):
        vol = fv.new_volume((2, 2, 2), 3, [[0, 0, 0], [1, 1, 1]])
        with pytest.raises(InvalidArgumentError):
            re_.render_rays(vol, rn.init_params(TINY), [[0, 0, 2]], [[0, 0, -1]], 1.0, 3.0, re_.RenderConfig())
