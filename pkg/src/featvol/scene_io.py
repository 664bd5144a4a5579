"""Datasets, synthetic scenes with exact radiance oracles, image files, and metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from featvol.errors import DatasetError, FormatError, InvalidArgumentError
from featvol.ray_engine import Camera, composite, generate_rays, look_at, stratified_samples

PSNR_CAP = 99.0


# ---------------------------------------------------------------------------
# images


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG/PPM as float64 RGB in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise FormatError(f"unsupported bit depth / mode {im.mode!r} in {path}", "mode")
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def quantize(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img) -> None:
    """Write float RGB in [0, 1] as 8-bit; format from suffix (.png or .ppm)."""
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise InvalidArgumentError(f"unsupported image extension {path.suffix!r}")
    Image.fromarray(quantize(img), mode="RGB").save(path, format=fmt)


# ---------------------------------------------------------------------------
# metrics


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a, b, k1=0.01, k2=0.03, sigma=1.5) -> float:
    """Mean SSIM with an 11x11 Gaussian window (data range 1), per channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = k1 ** 2, k2 ** 2
    pad = 5
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]

        def filt(z):
            return ndimage.gaussian_filter(z, sigma, truncate=3.5, mode="reflect")

        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        s = num / den
        if s.shape[0] > 2 * pad and s.shape[1] > 2 * pad:
            s = s[pad:-pad, pad:-pad]
        vals.append(s.mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SceneDataset:
    scene_id: str
    images: list
    cameras: list
    aabb: np.ndarray
    train_idx: list
    heldout_idx: list
    files: list = field(default_factory=list)
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        if not self.images:
            raise DatasetError("dataset has no images")
        shapes = {im.shape for im in self.images}
        if len(shapes) != 1:
            raise DatasetError(f"inconsistent image resolutions: {sorted(shapes)}")
        if len(self.cameras) != len(self.images):
            raise DatasetError("camera count does not match image count")
        if set(self.train_idx) & set(self.heldout_idx):
            raise DatasetError("train and heldout splits overlap")
        if sorted(set(self.train_idx) | set(self.heldout_idx)) != list(range(len(self.images))):
            raise DatasetError("splits do not cover every image")

    @property
    def n_images(self) -> int:
        return len(self.images)

    def rays(self, which="train"):
        """Stack origins, directions, target colors, near and far for a split."""
        ids = self.train_idx if which == "train" else self.heldout_idx
        os_, ds, cs, ns, fs = [], [], [], [], []
        for i in ids:
            cam = self.cameras[i]
            o, d = generate_rays(cam)
            os_.append(o)
            ds.append(d)
            cs.append(self.images[i].reshape(-1, 3))
            ns.append(np.full(o.shape[0], cam.near))
            fs.append(np.full(o.shape[0], cam.far))
        return (np.concatenate(os_), np.concatenate(ds), np.concatenate(cs),
                np.concatenate(ns), np.concatenate(fs))


def seeded_split(n, seed, n_heldout=None):
    if n_heldout is None:
        n_heldout = max(1, n // 8) if n > 1 else 0
    rng = np.random.default_rng(seed)
    held = sorted(int(i) for i in rng.choice(n, size=n_heldout, replace=False)) if n_heldout else []
    train = [i for i in range(n) if i not in held]
    return train, held


def _camera_from_frame(intr, near, far, c2w, where):
    c2w = np.asarray(c2w, dtype=np.float64)
    if c2w.size != 16:
        raise DatasetError(f"{where}: c2w must have 16 entries")
    c2w = c2w.reshape(4, 4)
    rot = c2w[:3, :3]
    err = np.linalg.norm(rot.T @ rot - np.eye(3))
    if err > 1e-3:
        raise DatasetError(f"{where}: rotation is not orthonormal (|R^T R - I| = {err:.3g})")
    if err > 1e-5:
        u, _, vt = np.linalg.svd(rot)
        c2w = c2w.copy()
        c2w[:3, :3] = u @ vt
    try:
        return Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"], int(intr["w"]), int(intr["h"]), c2w, near, far)
    except (KeyError, InvalidArgumentError) as exc:
        raise DatasetError(f"{where}: invalid camera ({exc})") from exc


def load_dataset(directory, seed=0) -> SceneDataset:
    """Load a ``transforms.json`` dataset directory."""
    directory = Path(directory)
    meta_path = directory / "transforms.json"
    if not meta_path.is_file():
        raise DatasetError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key in ("intrinsics", "near", "far", "aabb", "frames"):
        if key not in meta:
            raise DatasetError(f"{meta_path}: missing key {key!r}")
    intr = meta["intrinsics"]
    images, cameras, files, splits = [], [], [], []
    for i, frame in enumerate(meta["frames"]):
        f = directory / frame["file"]
        if not f.is_file():
            raise DatasetError(f"missing image file {f}")
        img = read_image(f)
        if img.shape[:2] != (int(intr["h"]), int(intr["w"])):
            raise DatasetError(f"{f}: resolution {img.shape[1]}x{img.shape[0]} does not match intrinsics")
        images.append(img)
        cameras.append(_camera_from_frame(intr, meta["near"], meta["far"], frame["c2w"], f"frame {i}"))
        files.append(frame["file"])
        splits.append(frame.get("split"))
    if not images:
        raise DatasetError(f"{meta_path}: no frames")
    if all(s is not None for s in splits):
        train = [i for i, s in enumerate(splits) if s == "train"]
        held = [i for i, s in enumerate(splits) if s != "train"]
    else:
        train, held = seeded_split(len(images), seed)
    aabb = np.asarray(meta["aabb"], dtype=np.float64).reshape(2, 3)
    return SceneDataset(meta.get("scene_id", directory.name), images, cameras, aabb, train, held, files,
                        tuple(meta.get("background", (0.0, 0.0, 0.0))))


def write_dataset(ds: SceneDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cam0 = ds.cameras[0]
    frames = []
    held = set(ds.heldout_idx)
    for i, (img, cam) in enumerate(zip(ds.images, ds.cameras)):
        name = ds.files[i] if i < len(ds.files) and ds.files[i] else f"img_{i:03d}.png"
        write_image(directory / name, img)
        frames.append({"file": name, "c2w": cam.c2w.ravel().tolist(), "split": "heldout" if i in held else "train"})
    meta = {
        "scene_id": ds.scene_id,
        "intrinsics": {"fx": cam0.fx, "fy": cam0.fy, "cx": cam0.cx, "cy": cam0.cy, "w": cam0.width, "h": cam0.height},
        "near": cam0.near,
        "far": cam0.far,
        "aabb": ds.aabb.tolist(),
        "background": list(ds.background),
        "frames": frames,
    }
    (directory / "transforms.json").write_text(json.dumps(meta, indent=1))


def load_llff(directory, aabb=None, seed=0, downscale=1) -> SceneDataset:
    """Import an LLFF capture (``poses_bounds.npy`` + ``images/``).

    Poses are converted from LLFF's (down, right, back) columns to
    (right, up, back).  Without an explicit ``aabb`` a cube around the camera
    centers that reaches the far bound is used.
    """
    directory = Path(directory)
    pb_path = directory / "poses_bounds.npy"
    if not pb_path.is_file():
        raise DatasetError(f"missing {pb_path}")
    pb = np.load(pb_path)
    if pb.ndim != 2 or pb.shape[1] != 17:
        raise DatasetError(f"{pb_path}: expected (N, 17) array, got {pb.shape}")
    img_dir = directory / "images"
    files = sorted(p for p in img_dir.glob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".ppm"))
    if len(files) != pb.shape[0]:
        raise DatasetError(f"{len(files)} images but {pb.shape[0]} poses")
    poses = pb[:, :15].reshape(-1, 3, 5)
    near = float(pb[:, 15].min()) * 0.9
    far = float(pb[:, 16].max()) * 1.0
    images, cameras = [], []
    for i, f in enumerate(files):
        with Image.open(f) as im:
            im = im.convert("RGB")
            if downscale > 1:
                im = im.resize((im.width // downscale, im.height // downscale), Image.LANCZOS)
            img = np.asarray(im, dtype=np.float64) / 255.0
        h, w, focal = poses[i, :, 4]
        scale = img.shape[0] / h
        c2w = np.eye(4)
        c2w[:3, 0] = poses[i, :, 1]
        c2w[:3, 1] = -poses[i, :, 0]
        c2w[:3, 2] = poses[i, :, 2]
        c2w[:3, 3] = poses[i, :, 3]
        intr = {"fx": focal * scale, "fy": focal * scale, "cx": img.shape[1] / 2, "cy": img.shape[0] / 2,
                "w": img.shape[1], "h": img.shape[0]}
        images.append(img)
        cameras.append(_camera_from_frame(intr, near, far, c2w, f"pose {i}"))
    if aabb is None:
        centers = np.array([c.origin for c in cameras])
        mid = centers.mean(axis=0)
        aabb = np.stack([mid - far, mid + far])
    train, held = seeded_split(len(images), seed)
    return SceneDataset(directory.name, images, cameras, aabb, train, held, [f.name for f in files])


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: tuple
    size: object  # sphere radius or box full edge lengths (3,)
    albedo: tuple
    density: float

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise InvalidArgumentError(f"unknown primitive kind {self.kind!r}")
        if self.density < 0:
            raise InvalidArgumentError("density must be >= 0")
        if not all(0.0 <= c <= 1.0 for c in self.albedo):
            raise InvalidArgumentError("albedo must lie in [0, 1]")

    def contains(self, p):
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            return np.sum((p - c) ** 2, axis=-1) <= float(self.size) ** 2
        half = np.asarray(self.size, dtype=np.float64) / 2
        return np.all(np.abs(p - c) <= half, axis=-1)

    def intersect(self, o, d):
        """Entry and exit t of each ray (NaN when missed)."""
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            oc = o - c
            b = np.sum(oc * d, axis=-1)
            disc = b * b - (np.sum(oc * oc, axis=-1) - float(self.size) ** 2)
            root = np.sqrt(np.where(disc > 0, disc, np.nan))
            return -b - root, -b + root
        half = np.asarray(self.size, dtype=np.float64) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (c - half - o) * inv
            t1 = (c + half - o) * inv
        lo = np.nanmax(np.minimum(t0, t1), axis=-1)
        hi = np.nanmin(np.maximum(t0, t1), axis=-1)
        miss = lo >= hi
        return np.where(miss, np.nan, lo), np.where(miss, np.nan, hi)


@dataclass
class RigSpec:
    count: int = 25
    heldout: int = 5
    radius: float = 4.0
    look_at: tuple = (0.0, 0.0, 0.0)
    width: int = 64
    height: int = 64
    focal: float | None = None
    elevation: tuple = (15.0, 45.0)
    near: float = 2.0
    far: float = 6.0


@dataclass
class SyntheticSceneSpec:
    primitives: list = field(default_factory=list)
    background: tuple = (0.0, 0.0, 0.0)
    rig: RigSpec = field(default_factory=RigSpec)
    aabb: tuple = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
    scene_id: str = "synthetic"

    @classmethod
    def from_dict(cls, d):
        prims = [Primitive(p["kind"], tuple(p["center"]), p["size"] if p["kind"] == "sphere" else tuple(p["size"]),
                           tuple(p["albedo"]), float(p["density"])) for p in d.get("primitives", [])]
        rig = RigSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.get("rig", {}).items()})
        aabb = tuple(tuple(x) for x in d.get("aabb", cls.aabb))
        return cls(prims, tuple(d.get("background", (0.0, 0.0, 0.0))), rig, aabb, d.get("scene_id", "synthetic"))


class AnalyticOracle:
    """Piecewise-constant density/color field of a synthetic scene.

    Where primitives overlap the first one listed wins.
    """

    def __init__(self, spec: SyntheticSceneSpec):
        self.spec = spec

    def sigma_color(self, p):
        p = np.asarray(p, dtype=np.float64)
        sigma = np.zeros(p.shape[:-1])
        color = np.zeros(p.shape[:-1] + (3,))
        taken = np.zeros(p.shape[:-1], dtype=bool)
        for prim in self.spec.primitives:
            m = prim.contains(p) & ~taken
            sigma[m] = prim.density
            color[m] = prim.albedo
            taken |= m
        return sigma, color

    def render_exact(self, origins, dirs, near, far):
        """Closed-form volume rendering: integrate segment by segment between boundary crossings."""
        o = np.atleast_2d(origins)
        d = np.atleast_2d(dirs)
        n_rays = o.shape[0]
        near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))
        far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))
        cuts = [near[:, None], far[:, None]]
        for prim in self.spec.primitives:
            t0, t1 = prim.intersect(o, d)
            cuts += [t0[:, None], t1[:, None]]
        ts = np.concatenate(cuts, axis=1)
        ts = np.where(np.isnan(ts), far[:, None], ts)
        ts = np.clip(ts, near[:, None], far[:, None])
        ts = np.sort(ts, axis=1)
        seg = np.diff(ts, axis=1)
        mid = 0.5 * (ts[:, :-1] + ts[:, 1:])
        sigma, color = self.sigma_color(o[:, None, :] + mid[..., None] * d[:, None, :])
        tau = sigma * seg
        trans = np.exp(-(np.cumsum(tau, axis=1) - tau))
        w = trans * -np.expm1(-tau)
        bg = np.asarray(self.spec.background, dtype=np.float64)
        acc = w.sum(axis=1)
        return np.einsum("rn,rnc->rc", w, color) + (1 - acc)[:, None] * bg

    def render_quadrature(self, origins, dirs, near, far, n):
        """Same integral through the stratified-midpoint compositor with ``n`` samples."""
        o = np.atleast_2d(origins)
        d = np.atleast_2d(dirs)
        far = np.broadcast_to(np.asarray(far, dtype=np.float64), (o.shape[0],))
        t = stratified_samples(np.broadcast_to(near, far.shape), far, n)
        sigma, color = self.sigma_color(o[:, None, :] + t[..., None] * d[:, None, :])
        return composite(t, sigma, color, far, self.spec.background).rgb


def orbit_cameras(rig: RigSpec, n=None, seed=0, elevations=None):
    """Cameras on a circle around ``rig.look_at`` (z up), evenly spaced in azimuth."""
    n = rig.count if n is None else n
    rng = np.random.default_rng(seed)
    if elevations is None:
        elevations = rng.uniform(rig.elevation[0], rig.elevation[1], size=n)
    focal = rig.focal if rig.focal is not None else float(rig.width)
    target = np.asarray(rig.look_at, dtype=np.float64)
    cams = []
    for i in range(n):
        az = 2 * np.pi * i / n
        el = np.deg2rad(elevations[i])
        eye = target + rig.radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera(focal, focal, rig.width / 2, rig.height / 2, rig.width, rig.height,
                           look_at(eye, target), rig.near, rig.far))
    return cams


def synthesize_scene(spec: SyntheticSceneSpec, seed=0):
    """Render a synthetic scene's images with the exact oracle (quantized to 8 bits)."""
    if spec.rig.count < 1:
        raise InvalidArgumentError("rig needs at least one camera")
    oracle = AnalyticOracle(spec)
    cams = orbit_cameras(spec.rig, seed=seed)
    images = []
    for cam in cams:
        o, d = generate_rays(cam)
        img = oracle.render_exact(o, d, cam.near, cam.far).reshape(cam.height, cam.width, 3)
        images.append(quantize(img).astype(np.float64) / 255.0)
    train, held = seeded_split(len(cams), seed + 1, min(spec.rig.heldout, len(cams) - 1))
    files = [f"img_{i:03d}.png" for i in range(len(cams))]
    ds = SceneDataset(spec.scene_id, images, cams, np.asarray(spec.aabb), train, held, files, tuple(spec.background))
    return ds, oracle


def demo_scene_spec(variant=0, **rig_overrides) -> SyntheticSceneSpec:
    """A few colored boxes and spheres; ``variant`` permutes layout and colors."""
    rng = np.random.default_rng(1000 + variant)
    palette = np.array([[0.9, 0.2, 0.15], [0.15, 0.7, 0.25], [0.2, 0.35, 0.9],
                        [0.95, 0.8, 0.1], [0.8, 0.3, 0.85], [0.1, 0.8, 0.85]])
    cols = palette[rng.permutation(len(palette))[:3]]
    centers = [(-0.45, -0.35, 0.0), (0.45, 0.0, -0.1), (0.0, 0.5, 0.2)]
    offs = rng.uniform(-0.15, 0.15, size=(3, 3))
    prims = [
        Primitive("box", tuple(np.add(centers[0], offs[0])), (0.6, 0.6, 0.6), tuple(cols[0]), 40.0),
        Primitive("sphere", tuple(np.add(centers[1], offs[1])), 0.4, tuple(cols[1]), 40.0),
        Primitive("box", tuple(np.add(centers[2], offs[2])), (0.5, 0.35, 0.7), tuple(cols[2]), 40.0),
    ]
    return SyntheticSceneSpec(prims, (0.0, 0.0, 0.0), RigSpec(**rig_overrides), scene_id=f"demo{variant}")
