"""Cameras, ray sampling, and the discrete emission-absorption compositor.

All batch functions work on ``R`` rays at once with per-ray sample arrays of
shape ``(R, N)``.  Compositing uses

    delta_i = t_{i+1} - t_i   (last: far - t_N)
    alpha_i = 1 - exp(-sigma_i delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    rgb     = sum_i T_i alpha_i c_i + (1 - sum_i T_i alpha_i) * background
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from featvol import feature_volume as fv
from featvol import render_net as rn
from featvol.errors import InvalidArgumentError

EPS_PDF = 1e-5


@dataclass
class Camera:
    """Pinhole camera looking down its local -z axis with +y up."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise InvalidArgumentError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("image size must be positive")
        rot = self.c2w[:3, :3]
        if np.linalg.norm(rot.T @ rot - np.eye(3)) > 1e-5:
            raise InvalidArgumentError("camera rotation is not orthonormal")

    @property
    def rotation(self):
        return self.c2w[:3, :3]

    @property
    def origin(self):
        return self.c2w[:3, 3]

    def project(self, p_world):
        """Pixel coordinates (x right, y down) and camera depth of world points."""
        p = np.asarray(p_world, dtype=np.float64).reshape(-1, 3)
        pc = (p - self.origin) @ self.rotation
        depth = -pc[:, 2]
        x = self.fx * pc[:, 0] / depth + self.cx
        y = -self.fy * pc[:, 1] / depth + self.cy
        return np.stack([x, y], axis=1), depth


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix placing the camera at ``eye`` facing ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = cam_up
    c2w[:3, 2] = -fwd
    c2w[:3, 3] = eye
    return c2w


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


def pixel_directions(camera: Camera, px, py):
    """Unit world-space directions through pixel centers ``(px + 0.5, py + 0.5)``."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d_cam = np.stack(
        [
            (px + 0.5 - camera.cx) / camera.fx,
            -(py + 0.5 - camera.cy) / camera.fy,
            -np.ones_like(px),
        ],
        axis=-1,
    )
    d = d_cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_ray(camera: Camera, px, py) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise InvalidArgumentError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    d = pixel_directions(camera, px, py)
    return Ray(camera.origin.copy(), d, camera.near, camera.far)


def generate_rays(camera: Camera):
    """Origins and directions for every pixel, row-major, shape ``(H*W, 3)``."""
    py, px = np.mgrid[0:camera.height, 0:camera.width]
    d = pixel_directions(camera, px.ravel(), py.ravel())
    o = np.broadcast_to(camera.origin, d.shape).copy()
    return o, d


# ---------------------------------------------------------------------------
# sampling along rays


def stratified_samples(near, far, n, rng=None, jitter=False):
    """One sample per equal-width bin of ``[near, far]``.

    ``near``/``far`` may be scalars or ``(R,)`` arrays; the result has shape
    ``(..., n)``.  Without jitter each sample sits at its bin midpoint.
    """
    if n < 1:
        raise InvalidArgumentError("need at least one sample")
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    shape = np.broadcast(near, far).shape + (n,)
    if jitter:
        if rng is None:
            raise InvalidArgumentError("jittered sampling needs an rng")
        u = rng.uniform(size=shape)
    else:
        u = np.full(shape, 0.5)
    frac = (np.arange(n) + u) / n
    return near[..., None] + (far - near)[..., None] * frac


def bin_edges(near, far, n):
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    return near[..., None] + (far - near)[..., None] * (np.arange(n + 1) / n)


def sample_pdf(edges, weights, n, rng=None):
    """Inverse-CDF draws from a piecewise-constant density over ``edges``.

    ``weights`` has one entry per bin; ``EPS_PDF`` is added before
    normalizing.  Draws are stratified: ``u_j = (j + U_j) / n`` with ``U_j``
    uniform, or ``U_j = 0.5`` when ``rng`` is None.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    edges = np.atleast_2d(np.asarray(edges, dtype=np.float64))
    if np.any(weights < 0):
        raise InvalidArgumentError("weights must be non-negative")
    n_rays, n_bins = weights.shape
    pdf = weights + EPS_PDF
    pdf /= pdf.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    jitter = 0.5 if rng is None else rng.uniform(size=(n_rays, n))
    u = (np.arange(n) + jitter) / n
    u = np.broadcast_to(u, (n_rays, n))
    # row-wise searchsorted by offsetting each row into its own interval
    offs = 2.0 * np.arange(n_rays)[:, None]
    pos = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right").reshape(n_rays, n)
    b = np.clip(pos - np.arange(n_rays)[:, None] * (n_bins + 1) - 1, 0, n_bins - 1)
    c_lo = np.take_along_axis(cdf, b, axis=1)
    c_hi = np.take_along_axis(cdf, b + 1, axis=1)
    e_lo = np.take_along_axis(edges, b, axis=1)
    e_hi = np.take_along_axis(edges, b + 1, axis=1)
    frac = np.clip((u - c_lo) / np.maximum(c_hi - c_lo, 1e-300), 0.0, 1.0)
    return e_lo + frac * (e_hi - e_lo)


def importance_samples(t_coarse, weights, n, near, far, rng=None):
    """Draw ``n`` extra t-values from the coarse weights and merge them in.

    The coarse samples are assumed to come from :func:`stratified_samples`
    over ``[near, far]``, so bin ``i`` is ``[near + i*h, near + (i+1)*h]``.
    Returns the sorted union, shape ``(R, Nc + n)``.
    """
    t_coarse = np.atleast_2d(np.asarray(t_coarse, dtype=np.float64))
    weights = np.atleast_2d(weights)
    if weights.shape != t_coarse.shape:
        raise InvalidArgumentError("weights and t_coarse must have the same shape")
    edges = bin_edges(np.broadcast_to(near, t_coarse.shape[:1]), np.broadcast_to(far, t_coarse.shape[:1]), t_coarse.shape[1])
    t_new = sample_pdf(edges, weights, n, rng)
    return np.sort(np.concatenate([t_coarse, t_new], axis=1), axis=1)


# ---------------------------------------------------------------------------
# compositing


@dataclass
class Composite:
    """Forward quantities of one composited batch (kept for the backward pass)."""

    delta: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray  # T_i, transmittance before sample i
    trans_next: np.ndarray  # T_{i+1}
    weights: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray


def composite(t, sigma, rgb, far, background=(0.0, 0.0, 0.0)) -> Composite:
    """Alpha-composite per-sample colors front to back."""
    t = np.atleast_2d(t)
    sigma = np.atleast_2d(sigma)
    rgb = np.asarray(rgb).reshape(sigma.shape + (3,))
    if np.any(np.diff(t, axis=1) < 0):
        raise InvalidArgumentError("sample t-values must be sorted ascending")
    dtype = sigma.dtype
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), t.shape[:1])
    delta = np.concatenate([np.diff(t, axis=1), far[:, None] - t[:, -1:]], axis=1).astype(dtype)
    sd = sigma * delta
    acc = np.cumsum(sd, axis=1)
    trans_next = np.exp(-acc)
    trans = np.exp(-(acc - sd))
    alpha = -np.expm1(-sd)
    weights = trans * alpha
    bg = np.asarray(background, dtype=dtype)
    opacity = weights.sum(axis=1)
    out = np.einsum("rn,rnc->rc", weights, rgb) + (1.0 - opacity)[:, None] * bg
    return Composite(delta, alpha, trans, trans_next, weights, out, opacity)


def composite_backward(comp: Composite, rgb, d_rgb, background=(0.0, 0.0, 0.0)):
    """Gradients of ``comp.rgb`` (dotted with ``d_rgb``) w.r.t. sample colors and densities.

    Returns ``(dc (R, N, 3), dsigma (R, N))``.
    """
    if comp is None:
        raise InvalidArgumentError("composite_backward needs the forward Composite")
    rgb = np.asarray(rgb).reshape(comp.weights.shape + (3,))
    d_rgb = np.atleast_2d(d_rgb).astype(comp.weights.dtype)
    bg = np.asarray(background, dtype=comp.weights.dtype)
    dc = comp.weights[..., None] * d_rgb[:, None, :]
    g = np.einsum("rnc,rc->rn", rgb - bg, d_rgb)
    wg = comp.weights * g
    # later samples' contribution, exclusive suffix sum
    after = np.cumsum(wg[:, ::-1], axis=1)[:, ::-1] - wg
    dsigma = comp.delta * (comp.trans_next * g - after)
    return dc, dsigma


# ---------------------------------------------------------------------------
# two-pass rendering through a feature volume


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    sigma_noise: float = 0.0
    chunk: int = 4096


@dataclass
class PixelEstimate:
    rgb: np.ndarray
    opacity: float


@dataclass
class PassResult:
    t: np.ndarray
    rgb: np.ndarray  # per-ray composited color
    opacity: np.ndarray
    comp: Composite
    sample_rgb: np.ndarray
    active: np.ndarray  # flat mask of samples that reached the network
    occ: np.ndarray
    idx: np.ndarray
    w: np.ndarray
    cache: object = None


@dataclass
class RenderOutput:
    coarse: PassResult
    fine: PassResult
    enc: np.ndarray = field(repr=False, default=None)


def _shade_pass(volume, net, desc, origins, dirs, enc, t, far, cfg, rng):
    n_rays, n = t.shape
    dtype = volume.data.dtype
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    idx, w, inside = fv.corner_weights(volume, pts.reshape(-1, 3))
    occ = fv.occupancy(volume, idx, w)
    active = inside & (occ > 0)
    act_idx, act_w = idx[active], w[active]
    feats = fv.gather(volume, act_idx, act_w)
    ray_of = np.nonzero(active)[0] // n
    rgb_a, sig_a, cache = rn.forward(net, desc, feats, enc[ray_of], cfg.sigma_noise, rng)
    sigma = np.zeros(n_rays * n, dtype=dtype)
    sigma[active] = sig_a * occ[active]
    sample_rgb = np.zeros((n_rays * n, 3), dtype=dtype)
    sample_rgb[active] = rgb_a
    sigma = sigma.reshape(n_rays, n)
    sample_rgb = sample_rgb.reshape(n_rays, n, 3)
    comp = composite(t, sigma, sample_rgb, far, cfg.background)
    return PassResult(t, comp.rgb, comp.opacity, comp, sample_rgb, active, occ, act_idx, act_w, cache)


def render_rays(volume, params, origins, dirs, near, far, cfg: RenderConfig, rng=None) -> RenderOutput:
    """Coarse stratified pass followed by an importance-sampled fine pass.

    With ``rng`` the coarse samples are jittered and fine draws random;
    without it both are deterministic.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n_rays = origins.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))
    desc = params.descriptor
    if volume.feat_len != desc.feat_len:
        raise InvalidArgumentError(f"volume feat_len {volume.feat_len} != network feat_len {desc.feat_len}")
    enc = rn.pos_encode(dirs, desc.enc_order).astype(volume.data.dtype)
    t_c = stratified_samples(near, far, cfg.n_coarse, rng, jitter=rng is not None)
    coarse = _shade_pass(volume, params.coarse, desc, origins, dirs, enc, t_c, far, cfg, rng)
    if cfg.n_fine > 0:
        t_f = importance_samples(t_c, coarse.comp.weights.astype(np.float64), cfg.n_fine, near, far, rng)
    else:
        t_f = t_c
    fine = _shade_pass(volume, params.fine, desc, origins, dirs, enc, t_f, far, cfg, rng)
    return RenderOutput(coarse, fine, enc)


def _pass_backward(res: PassResult, net, desc, d_rgb, cfg, volume_grad, net_grads):
    dc, dsigma = composite_backward(res.comp, res.sample_rgb, d_rgb, cfg.background)
    act = res.active
    d_sig = dsigma.reshape(-1)[act] * res.occ[act]
    d_c = dc.reshape(-1, 3)[act]
    grads, d_feat = rn.backward(net, desc, res.cache, d_c, d_sig, param_grads=net_grads is not None)
    if net_grads is not None:
        for k, g in grads.items():
            if k in net_grads:
                net_grads[k] += g
            else:
                net_grads[k] = g
    if volume_grad is not None:
        volume_grad.scatter(res.idx, res.w, d_feat)
    return d_feat


def render_rays_backward(out: RenderOutput, params, d_rgb_coarse, d_rgb_fine, cfg: RenderConfig,
                         volume_grad=None, net_grads=None):
    """Push pixel-color gradients back into the volume and (optionally) the networks.

    ``net_grads`` is ``None`` (skip parameter gradients) or a dict with
    ``"coarse"`` and ``"fine"`` entries that are accumulated in place.
    Sample positions receive no gradient.
    """
    desc = params.descriptor
    _pass_backward(out.coarse, params.coarse, desc, d_rgb_coarse, cfg, volume_grad,
                   None if net_grads is None else net_grads["coarse"])
    _pass_backward(out.fine, params.fine, desc, d_rgb_fine, cfg, volume_grad,
                   None if net_grads is None else net_grads["fine"])


def render_pixel(volume, params, ray: Ray, cfg: RenderConfig, rng=None):
    out = render_rays(volume, params, ray.origin[None], ray.direction[None], ray.near, ray.far, cfg, rng)
    return (
        PixelEstimate(out.coarse.rgb[0], float(out.coarse.opacity[0])),
        PixelEstimate(out.fine.rgb[0], float(out.fine.opacity[0])),
    )


def render_image(volume, params, camera: Camera, cfg: RenderConfig, return_opacity=False):
    """Render every pixel deterministically (no jitter), ``(H, W, 3)``."""
    o, d = generate_rays(camera)
    rgb = np.empty((o.shape[0], 3), dtype=np.float64)
    acc = np.empty(o.shape[0], dtype=np.float64)
    for s in range(0, o.shape[0], cfg.chunk):
        e = s + cfg.chunk
        out = render_rays(volume, params, o[s:e], d[s:e], camera.near, camera.far, cfg, None)
        rgb[s:e] = out.fine.rgb
        acc[s:e] = out.fine.opacity
    img = rgb.reshape(camera.height, camera.width, 3)
    if return_opacity:
        return img, acc.reshape(camera.height, camera.width)
    return img
