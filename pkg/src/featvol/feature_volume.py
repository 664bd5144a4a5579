"""Dense 3D feature grids with trilinear sampling, its adjoint, and TV regularization.

A :class:`FeatureVolume` stores one ``F``-vector per grid node.  Node ``(i, j, k)``
sits at integer grid coordinates and the node lattice is mapped affinely onto
the world-space box ``bounds`` so that node ``0`` lies on ``bounds[0]`` and node
``n - 1`` on ``bounds[1]`` along each axis.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from featvol.errors import FormatError, InvalidArgumentError, TruncatedFileError

VOLUME_MAGIC = b"CNRFVOL1"
_HEADER = struct.Struct("<8s4I6f")
_META_LEN = struct.Struct("<I")
MAX_ELEMENTS = 1 << 31

TV_EPS = 1e-8
_INSIDE_TOL = 1e-5

# corner c -> (dx, dy, dz) offsets; bit 2 is x, bit 0 is z
_CORNERS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)])


def _f32_bounds(bounds):
    b = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    return b.astype(np.float32).astype(np.float64)


@dataclass(eq=False)
class FeatureVolume:
    """Feature grid of shape ``(W, H, D, F)`` spanning an axis-aligned box.

    ``empty`` is an optional boolean ``(W, H, D)`` mask.  Flagged cells render
    with zero density no matter what feature they hold.  ``renderer_hash`` ties
    the volume to the network weights it was optimized against.
    """

    data: np.ndarray
    bounds: np.ndarray
    empty: np.ndarray | None = None
    renderer_hash: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise InvalidArgumentError(f"volume data must be 4-D (W,H,D,F), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise InvalidArgumentError(f"zero-sized axis in volume shape {self.data.shape}")
        self.bounds = _f32_bounds(self.bounds)
        if not np.all(self.bounds[0] < self.bounds[1]):
            raise InvalidArgumentError(f"bounds min must be < max componentwise, got {self.bounds.tolist()}")
        if self.empty is not None:
            self.empty = np.asarray(self.empty, dtype=bool)
            if self.empty.shape != self.dims:
                raise InvalidArgumentError("empty mask shape does not match volume dims")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])

    @property
    def feat_len(self) -> int:
        return int(self.data.shape[3])

    @property
    def n_cells(self) -> int:
        w, h, d = self.dims
        return w * h * d

    @property
    def pitch(self) -> np.ndarray:
        """World-space spacing between neighboring nodes along each axis."""
        n = np.maximum(np.array(self.dims) - 1, 1)
        return (self.bounds[1] - self.bounds[0]) / n

    def copy(self) -> "FeatureVolume":
        return FeatureVolume(
            self.data.copy(),
            self.bounds.copy(),
            None if self.empty is None else self.empty.copy(),
            self.renderer_hash,
            dict(self.meta),
        )

    def empty_mask(self) -> np.ndarray:
        if self.empty is None:
            return np.zeros(self.dims, dtype=bool)
        return self.empty

    def world_to_grid(self, p):
        p = np.asarray(p, dtype=np.float64)
        scale = np.array(self.dims, dtype=np.float64) - 1.0
        return (p - self.bounds[0]) / (self.bounds[1] - self.bounds[0]) * scale

    def grid_to_world(self, g):
        g = np.asarray(g, dtype=np.float64)
        scale = np.maximum(np.array(self.dims, dtype=np.float64) - 1.0, 1.0)
        return self.bounds[0] + g / scale * (self.bounds[1] - self.bounds[0])

    def node_positions(self) -> np.ndarray:
        """World position of every node, shape ``(W, H, D, 3)``."""
        grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in self.dims], indexing="ij")
        return self.grid_to_world(np.stack(grids, axis=-1))


def new_volume(dims, feat_len, bounds, init_scale=0.01, seed=0, dtype=np.float32) -> FeatureVolume:
    """Create a volume with features drawn i.i.d. from U(-init_scale, init_scale)."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise InvalidArgumentError(f"dims must be three axes of size >= 2, got {dims}")
    if feat_len < 1:
        raise InvalidArgumentError("feat_len must be >= 1")
    if init_scale < 0:
        raise InvalidArgumentError("init_scale must be >= 0")
    shape = dims + (int(feat_len),)
    if init_scale == 0:
        data = np.zeros(shape, dtype=dtype)
    else:
        rng = np.random.default_rng(seed)
        data = rng.uniform(-init_scale, init_scale, size=shape).astype(dtype)
    return FeatureVolume(data, bounds)


# ---------------------------------------------------------------------------
# trilinear sampling


def grid_corner_weights(dims, g):
    """Corner indices and trilinear weights for continuous grid coordinates.

    Returns ``(idx, w, inside)`` with ``idx`` the flat node indices ``(N, 8)``,
    ``w`` the matching weights and ``inside`` a boolean ``(N,)``.  Weights of
    outside points are zero.
    """
    g = np.asarray(g, dtype=np.float64).reshape(-1, 3)
    n = np.array(dims, dtype=np.int64)
    upper = (n - 1).astype(np.float64)
    inside = np.all(np.isfinite(g), axis=1)
    inside &= np.all((g >= -_INSIDE_TOL) & (g <= upper + _INSIDE_TOL), axis=1)
    gc = np.clip(np.where(np.isfinite(g), g, 0.0), 0.0, upper)
    i0 = np.minimum(np.floor(gc).astype(np.int64), np.maximum(n - 2, 0))
    frac = gc - i0
    frac = np.where(n > 1, frac, 0.0)
    i1 = np.minimum(i0 + 1, n - 1)

    # (N, 8, 3) corner grid indices
    ci = np.where(_CORNERS[None, :, :] == 1, i1[:, None, :], i0[:, None, :])
    idx = (ci[..., 0] * n[1] + ci[..., 1]) * n[2] + ci[..., 2]
    fw = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    w = fw[..., 0] * fw[..., 1] * fw[..., 2]
    w[~inside] = 0.0
    return idx, w, inside


def corner_weights(volume: FeatureVolume, p_world):
    """Like :func:`grid_corner_weights` but for world-space points."""
    return grid_corner_weights(volume.dims, volume.world_to_grid(np.asarray(p_world).reshape(-1, 3)))


def gather(volume: FeatureVolume, idx, w):
    """Blend node features with precomputed corner weights, ``(N, F)``."""
    flat = volume.data.reshape(-1, volume.feat_len)
    w = w.astype(volume.data.dtype, copy=False)
    return np.einsum("nc,ncf->nf", w, flat[idx])


def occupancy(volume: FeatureVolume, idx, w):
    """Interpolated non-empty fraction at each sample; ones if no mask is set."""
    if volume.empty is None:
        return np.ones(idx.shape[0], dtype=volume.data.dtype)
    filled = (~volume.empty.reshape(-1)).astype(volume.data.dtype)
    return np.einsum("nc,nc->n", w.astype(volume.data.dtype), filled[idx])


def sample(volume: FeatureVolume, p_world):
    """Trilinearly sample the volume at world points.

    Accepts a single point ``(3,)`` or a batch ``(N, 3)``.  Points outside the
    node lattice yield the zero feature and ``inside=False``.
    """
    p = np.asarray(p_world, dtype=np.float64)
    single = p.ndim == 1
    idx, w, inside = corner_weights(volume, p)
    feats = gather(volume, idx, w)
    if single:
        return feats[0], bool(inside[0])
    return feats, inside


class VolumeGrad:
    """Gradient buffer mirroring a volume; tracks which nodes were touched."""

    def __init__(self, dims, feat_len, dtype=np.float64):
        self.dims = tuple(dims)
        self.feat_len = int(feat_len)
        n = int(np.prod(self.dims))
        self.data = np.zeros((n, self.feat_len), dtype=dtype)
        self.touched = np.zeros(n, dtype=bool)

    @classmethod
    def like(cls, volume: FeatureVolume):
        return cls(volume.dims, volume.feat_len, volume.data.dtype)

    def scatter(self, idx, w, upstream):
        """Add ``w[n, c] * upstream[n]`` into node ``idx[n, c]`` for every sample."""
        idx = np.asarray(idx).reshape(-1, 8)
        if idx.shape[0] == 0:
            return
        w = np.asarray(w, dtype=self.data.dtype).reshape(-1, 8)
        upstream = np.asarray(upstream, dtype=self.data.dtype).reshape(idx.shape[0], -1)
        n = idx.shape[0]
        # column n of the (nodes x samples) operator holds that sample's 8 corner weights
        op = sp.csc_matrix(
            (w.ravel(), idx.ravel(), np.arange(0, 8 * n + 1, 8)),
            shape=(self.data.shape[0], n),
        )
        self.data += op @ upstream
        self.touched[idx[w != 0]] = True

    def add_dense(self, dense, touched=None):
        dense = np.asarray(dense).reshape(self.data.shape)
        self.data += dense
        if touched is None:
            touched = np.any(dense != 0, axis=1)
        self.touched |= np.asarray(touched).reshape(-1)

    def __iadd__(self, other: "VolumeGrad"):
        if other.data.shape != self.data.shape:
            raise InvalidArgumentError("gradient shapes differ")
        self.data += other.data
        self.touched |= other.touched
        return self

    def as_array(self):
        return self.data.reshape(self.dims + (self.feat_len,))


def sample_backward(volume: FeatureVolume, p_world, upstream, grad: VolumeGrad):
    """Accumulate the adjoint of :func:`sample` into ``grad``.

    Each of the eight corner nodes receives its forward weight times
    ``upstream``.  Points outside the lattice contribute nothing.
    """
    p = np.asarray(p_world, dtype=np.float64).reshape(-1, 3)
    idx, w, inside = corner_weights(volume, p)
    up = np.asarray(upstream).reshape(p.shape[0], -1)
    grad.scatter(idx[inside], w[inside], up[inside])


# ---------------------------------------------------------------------------
# resolution changes and regularization


def upsample_2x(volume: FeatureVolume) -> FeatureVolume:
    """Double the node count per axis over the same world box.

    Every new node takes the trilinear sample of the old volume at its world
    position.
    """
    old = np.array(volume.dims)
    new = 2 * old
    axes = [np.arange(m, dtype=np.float64) * (n - 1) / (m - 1) for n, m in zip(old, new)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    idx, w, _ = grid_corner_weights(volume.dims, g)
    data = gather(volume, idx, w).reshape(tuple(new) + (volume.feat_len,))
    empty = None
    if volume.empty is not None:
        empty = (occupancy(volume, idx, w) < 0.5).reshape(tuple(new))
    return FeatureVolume(data, volume.bounds, empty, volume.renderer_hash, dict(volume.meta))


@dataclass(frozen=True)
class VolumeRegion:
    offset: tuple[int, int, int]
    size: tuple[int, int, int]

    def validate(self, dims):
        for o, s, n in zip(self.offset, self.size, dims):
            if s < 1 or o < 0 or o + s > n:
                raise InvalidArgumentError(f"region {self} does not fit dims {tuple(dims)}")

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.size))


def tv_region_sample(volume: FeatureVolume, rng: np.random.Generator) -> VolumeRegion:
    """Pick a random contiguous block a quarter of the volume's size per axis."""
    dims = volume.dims
    if min(dims) < 4:
        return VolumeRegion((0, 0, 0), dims)
    size = tuple(-(-n // 4) for n in dims)
    offset = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(dims, size))
    return VolumeRegion(offset, size)


def tv_loss(volume: FeatureVolume, region: VolumeRegion, grad: VolumeGrad | None = None, scale=1.0):
    """Smoothed isotropic total variation over ``region``, averaged per cell.

    Each cell contributes ``sqrt(sum of squared forward differences + eps)``
    over the +x/+y/+z neighbours that exist in the full volume; cells with no
    such neighbour contribute nothing.  When ``grad`` is given, ``scale`` times
    the gradient of the returned loss is accumulated into it.
    """
    region.validate(volume.dims)
    o = np.array(region.offset)
    s = np.array(region.size)
    dims = np.array(volume.dims)
    # one extra layer on the far faces when the full volume has it
    hi = np.minimum(o + s + 1, dims)
    block = volume.data[o[0]:hi[0], o[1]:hi[1], o[2]:hi[2]].astype(np.float64)
    sq = np.zeros(tuple(s), dtype=np.float64)
    has_diff = np.zeros(tuple(s), dtype=bool)
    diffs = []
    for axis in range(3):
        n_valid = min(s[axis], hi[axis] - o[axis] - 1)
        sl_cur = [slice(0, s[0]), slice(0, s[1]), slice(0, s[2])]
        sl_cur[axis] = slice(0, n_valid)
        sl_nxt = list(sl_cur)
        sl_nxt[axis] = slice(1, n_valid + 1)
        d = block[tuple(sl_nxt)] - block[tuple(sl_cur)]
        sq[tuple(sl_cur)] += np.sum(d * d, axis=-1)
        has_diff[tuple(sl_cur)] = True
        diffs.append((tuple(sl_cur), tuple(sl_nxt), d))
    root = np.sqrt(sq + TV_EPS)
    n_cells = region.n_cells
    loss = float(np.sum(root[has_diff]) / n_cells)

    if grad is not None:
        coef = np.where(has_diff, scale / (root * n_cells), 0.0)
        gblock = np.zeros_like(block)
        for sl_cur, sl_nxt, d in diffs:
            g = coef[sl_cur][..., None] * d
            gblock[sl_nxt] += g
            gblock[sl_cur] -= g
        dense = np.zeros(volume.data.shape, dtype=grad.data.dtype)
        dense[o[0]:hi[0], o[1]:hi[1], o[2]:hi[2]] = gblock
        touched = np.zeros(volume.dims, dtype=bool)
        touched[o[0]:hi[0], o[1]:hi[1], o[2]:hi[2]] = True
        grad.add_dense(dense, touched)
    return loss


# ---------------------------------------------------------------------------
# serialization


def volume_to_bytes(volume: FeatureVolume) -> bytes:
    w, h, d = volume.dims
    f = volume.feat_len
    head = _HEADER.pack(VOLUME_MAGIC, w, h, d, f, *volume.bounds.astype(np.float32).ravel())
    meta = dict(volume.meta)
    if volume.renderer_hash is not None:
        meta["renderer_hash"] = volume.renderer_hash
    mask_bytes = b""
    if volume.empty is not None:
        meta["has_mask"] = True
        mask_bytes = np.packbits(volume.empty.transpose(2, 1, 0).ravel()).tobytes()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    # file order: x fastest across cells, each cell's F-vector contiguous
    body = np.ascontiguousarray(volume.data.transpose(2, 1, 0, 3), dtype="<f4").tobytes()
    return head + _META_LEN.pack(len(meta_bytes)) + meta_bytes + mask_bytes + body


def volume_from_bytes(buf: bytes) -> FeatureVolume:
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"file is {len(buf)} bytes, shorter than the {_HEADER.size}-byte header", "header")
    magic, w, h, d, f, *bounds = _HEADER.unpack_from(buf, 0)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {VOLUME_MAGIC!r}", "magic")
    for name, val in (("W", w), ("H", h), ("D", d), ("F", f)):
        if val < 1:
            raise FormatError(f"dimension {name}={val} must be >= 1", name)
    n_elem = w * h * d * f
    if n_elem >= MAX_ELEMENTS:
        raise FormatError(f"dimension overflow: W*H*D*F={n_elem} exceeds {MAX_ELEMENTS}", "W*H*D*F")
    pos = _HEADER.size
    if len(buf) < pos + _META_LEN.size:
        raise TruncatedFileError("file ends before metadata length", "meta_len")
    (meta_len,) = _META_LEN.unpack_from(buf, pos)
    pos += _META_LEN.size
    if len(buf) < pos + meta_len:
        raise TruncatedFileError("file ends inside metadata block", "meta")
    try:
        meta = json.loads(buf[pos:pos + meta_len].decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata block is not valid JSON: {exc}", "meta") from exc
    pos += meta_len
    empty = None
    if meta.pop("has_mask", False):
        n_mask = math.ceil(w * h * d / 8)
        if len(buf) < pos + n_mask:
            raise TruncatedFileError("file ends inside empty-mask block", "mask")
        bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=n_mask, offset=pos))[: w * h * d]
        empty = bits.astype(bool).reshape(d, h, w).transpose(2, 1, 0).copy()
        pos += n_mask
    expected = pos + 4 * n_elem
    if len(buf) != expected:
        cls = TruncatedFileError if len(buf) < expected else FormatError
        raise cls(f"file size {len(buf)} != header {pos} + 4*W*H*D*F ({4 * n_elem}) bytes", "features")
    data = np.frombuffer(buf, dtype="<f4", count=n_elem, offset=pos).reshape(d, h, w, f)
    data = data.transpose(2, 1, 0, 3).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise FormatError("non-finite feature values", "features")
    renderer_hash = meta.pop("renderer_hash", None)
    return FeatureVolume(data, np.array(bounds, dtype=np.float64).reshape(2, 3), empty, renderer_hash, meta)


def save_volume(volume: FeatureVolume, path) -> None:
    Path(path).write_bytes(volume_to_bytes(volume))


def load_volume(path) -> FeatureVolume:
    return volume_from_bytes(Path(path).read_bytes())
