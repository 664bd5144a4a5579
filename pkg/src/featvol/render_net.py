"""Shared radiance network mapping (sampled feature, encoded view direction) to (rgb, sigma).

Forward and reverse passes are written out by hand over batches of samples.
Layout of one network:

* trunk: ``depth`` ReLU layers of ``width`` units on the raw feature; layer
  ``skip`` sees the trunk activation concatenated with the feature again
* density head: one linear unit, softplus
* bottleneck: linear ``width -> bottleneck``
* direction branch: ``[bottleneck, enc]`` -> ReLU(``branch``) -> 3 -> sigmoid
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

from featvol.errors import FormatError, InvalidArgumentError, TruncatedFileError

NET_MAGIC = b"CNRFNET1"
_NET_HEADER = struct.Struct("<8s7I")


@dataclass(frozen=True)
class NetDescriptor:
    feat_len: int = 16
    enc_order: int = 4
    depth: int = 4
    width: int = 64
    skip: int = 2
    bottleneck: int = 64
    branch: int = 32

    def __post_init__(self):
        if min(self.feat_len, self.depth, self.width, self.bottleneck, self.branch) < 1 or self.enc_order < 0:
            raise InvalidArgumentError(f"invalid network descriptor {self}")
        if not 0 <= self.skip <= self.depth:
            raise InvalidArgumentError("skip layer index must lie in [0, depth]")

    @property
    def enc_len(self) -> int:
        return 6 * self.enc_order

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in declaration (serialization) order."""
        shapes = []
        fan_in = self.feat_len
        for i in range(self.depth):
            if i == self.skip and i > 0:
                fan_in += self.feat_len
            shapes += [(f"trunk{i}.w", (fan_in, self.width)), (f"trunk{i}.b", (self.width,))]
            fan_in = self.width
        shapes += [
            ("sigma.w", (self.width, 1)),
            ("sigma.b", (1,)),
            ("bottleneck.w", (self.width, self.bottleneck)),
            ("bottleneck.b", (self.bottleneck,)),
            ("branch.w", (self.bottleneck + self.enc_len, self.branch)),
            ("branch.b", (self.branch,)),
            ("rgb.w", (self.branch, 3)),
            ("rgb.b", (3,)),
        ]
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())


DESK_PRESET = NetDescriptor(feat_len=16, enc_order=4, depth=4, width=64, skip=2, bottleneck=64, branch=32)
FULL_PRESET = NetDescriptor(feat_len=64, enc_order=4, depth=8, width=256, skip=4, bottleneck=256, branch=128)


@dataclass(eq=False)
class RenderParams:
    """Coarse and fine networks sharing one descriptor but not weights."""

    descriptor: NetDescriptor
    coarse: dict
    fine: dict

    def nets(self):
        return {"coarse": self.coarse, "fine": self.fine}

    def copy(self) -> "RenderParams":
        return RenderParams(
            self.descriptor,
            {k: v.copy() for k, v in self.coarse.items()},
            {k: v.copy() for k, v in self.fine.items()},
        )

    def astype(self, dtype) -> "RenderParams":
        return RenderParams(
            self.descriptor,
            {k: v.astype(dtype) for k, v in self.coarse.items()},
            {k: v.astype(dtype) for k, v in self.fine.items()},
        )

    @property
    def dtype(self):
        return self.coarse["trunk0.w"].dtype


def _init_net(desc: NetDescriptor, rng, dtype):
    net = {}
    for name, shape in desc.layer_shapes():
        if name.endswith(".w"):
            bound = np.sqrt(6.0 / shape[0])
            net[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            net[name] = np.zeros(shape, dtype=dtype)
    return net


def init_params(descriptor: NetDescriptor = DESK_PRESET, seed=0, dtype=np.float32) -> RenderParams:
    """He-style fan-in uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    coarse = _init_net(descriptor, rng, dtype)
    fine = _init_net(descriptor, rng, dtype)
    return RenderParams(descriptor, coarse, fine)


def pos_encode(d, order=4):
    """Sin/cos frequency encoding of unit directions.

    For each component ``x`` the block is
    ``sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)``;
    blocks for x, y and z are concatenated.  Accepts ``(3,)`` or ``(N, 3)``.
    """
    d = np.asarray(d)
    single = d.ndim == 1
    d2 = d.reshape(-1, 3)
    norms = np.linalg.norm(d2.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InvalidArgumentError("directions must be unit length")
    freqs = (2.0 ** np.arange(order)) * np.pi
    arg = d2[:, :, None] * freqs.astype(d2.dtype)  # (N, 3, L)
    enc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)  # (N, 3, L, 2)
    enc = enc.reshape(d2.shape[0], 6 * order)
    return enc[0] if single else enc


def softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class NetCache:
    """Activations saved by :func:`forward` for :func:`backward`."""

    __slots__ = ("net_id", "n", "inputs", "pre", "sigma_pre", "bottleneck_in", "branch_in", "branch_pre", "rgb")

    def __init__(self, net_id, n):
        self.net_id = net_id
        self.n = n
        self.inputs = []
        self.pre = []


def forward(net: dict, desc: NetDescriptor, feature, enc, sigma_noise=0.0, rng=None):
    """Evaluate one network on a batch.

    Returns ``(rgb (N, 3), sigma (N,), cache)``.  ``sigma`` never depends on
    ``enc``.
    """
    feature = np.asarray(feature)
    enc = np.asarray(enc)
    if feature.ndim != 2 or feature.shape[1] != desc.feat_len:
        raise InvalidArgumentError(f"feature batch must be (N, {desc.feat_len}), got {feature.shape}")
    if enc.shape != (feature.shape[0], desc.enc_len):
        raise InvalidArgumentError(f"encoding batch must be ({feature.shape[0]}, {desc.enc_len}), got {enc.shape}")
    cache = NetCache(id(net), feature.shape[0])
    h = feature
    for i in range(desc.depth):
        if i == desc.skip and i > 0:
            h = np.concatenate([h, feature], axis=1)
        cache.inputs.append(h)
        z = h @ net[f"trunk{i}.w"] + net[f"trunk{i}.b"]
        cache.pre.append(z)
        h = np.maximum(z, 0)
    cache.bottleneck_in = h
    sigma_pre = (h @ net["sigma.w"] + net["sigma.b"])[:, 0]
    if sigma_noise > 0 and rng is not None:
        sigma_pre = sigma_pre + rng.normal(0.0, sigma_noise, size=sigma_pre.shape).astype(sigma_pre.dtype)
    cache.sigma_pre = sigma_pre
    sigma = softplus(sigma_pre)
    bott = h @ net["bottleneck.w"] + net["bottleneck.b"]
    branch_in = np.concatenate([bott, enc], axis=1)
    cache.branch_in = branch_in
    branch_pre = branch_in @ net["branch.w"] + net["branch.b"]
    cache.branch_pre = branch_pre
    rgb = sigmoid(np.maximum(branch_pre, 0) @ net["rgb.w"] + net["rgb.b"])
    cache.rgb = rgb
    return rgb, sigma, cache


def backward(net: dict, desc: NetDescriptor, cache: NetCache, d_rgb, d_sigma, param_grads=True):
    """Reverse pass for :func:`forward`.

    Returns ``(grads, d_feature)`` where ``grads`` maps parameter names to
    gradients (``None`` when ``param_grads`` is false).
    """
    if cache.net_id != id(net):
        raise InvalidArgumentError("cache was produced by a different network")
    d_rgb = np.asarray(d_rgb)
    d_sigma = np.asarray(d_sigma).reshape(-1)
    if d_rgb.shape != (cache.n, 3) or d_sigma.shape != (cache.n,):
        raise InvalidArgumentError("upstream gradient shape does not match the cached batch")
    grads = {} if param_grads else None

    rgb = cache.rgb
    dz_rgb = d_rgb * rgb * (1.0 - rgb)
    branch_act = np.maximum(cache.branch_pre, 0)
    d_branch_act = dz_rgb @ net["rgb.w"].T
    dz_branch = d_branch_act * (cache.branch_pre > 0)
    d_branch_in = dz_branch @ net["branch.w"].T
    d_bott = d_branch_in[:, : desc.bottleneck]

    h = cache.bottleneck_in
    dz_sigma = (d_sigma * sigmoid(cache.sigma_pre))[:, None]
    dh = dz_sigma @ net["sigma.w"].T + d_bott @ net["bottleneck.w"].T
    if param_grads:
        grads["rgb.w"] = branch_act.T @ dz_rgb
        grads["rgb.b"] = dz_rgb.sum(axis=0)
        grads["branch.w"] = cache.branch_in.T @ dz_branch
        grads["branch.b"] = dz_branch.sum(axis=0)
        grads["bottleneck.w"] = h.T @ d_bott
        grads["bottleneck.b"] = d_bott.sum(axis=0)
        grads["sigma.w"] = h.T @ dz_sigma
        grads["sigma.b"] = dz_sigma.sum(axis=0)

    d_feature = np.zeros((cache.n, desc.feat_len), dtype=dh.dtype)
    for i in reversed(range(desc.depth)):
        dz = dh * (cache.pre[i] > 0)
        if param_grads:
            grads[f"trunk{i}.w"] = cache.inputs[i].T @ dz
            grads[f"trunk{i}.b"] = dz.sum(axis=0)
        d_in = dz @ net[f"trunk{i}.w"].T
        if i == desc.skip and i > 0:
            d_feature += d_in[:, desc.width:]
            d_in = d_in[:, : desc.width]
        if i == 0:
            d_feature += d_in
        else:
            dh = d_in
    return grads, d_feature


# ---------------------------------------------------------------------------
# serialization


def params_to_bytes(params: RenderParams) -> bytes:
    chunks = [_NET_HEADER.pack(NET_MAGIC, *astuple(params.descriptor))]
    for net in (params.coarse, params.fine):
        for name, shape in params.descriptor.layer_shapes():
            chunks.append(np.ascontiguousarray(net[name], dtype="<f4").tobytes())
    return b"".join(chunks)


def params_from_bytes(buf: bytes) -> RenderParams:
    if len(buf) < _NET_HEADER.size:
        raise TruncatedFileError("file shorter than network header", "header")
    magic, *fields = _NET_HEADER.unpack_from(buf, 0)
    if magic != NET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {NET_MAGIC!r}", "magic")
    if fields[3] > 1 << 16 or fields[0] > 1 << 16 or fields[2] > 1 << 10:
        raise FormatError("descriptor dimension overflow", "descriptor")
    try:
        desc = NetDescriptor(*fields)
    except InvalidArgumentError as exc:
        raise FormatError(str(exc), "descriptor") from exc
    expected = _NET_HEADER.size + 4 * 2 * desc.n_params()
    if len(buf) != expected:
        cls = TruncatedFileError if len(buf) < expected else FormatError
        raise cls(f"file size {len(buf)} != expected {expected} bytes for descriptor", "tensors")
    pos = _NET_HEADER.size
    nets = []
    for _ in range(2):
        net = {}
        for name, shape in desc.layer_shapes():
            count = int(np.prod(shape))
            net[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
        if not all(np.all(np.isfinite(v)) for v in net.values()):
            raise FormatError("non-finite weights", "tensors")
        nets.append(net)
    return RenderParams(desc, nets[0], nets[1])


def save_params(params: RenderParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> RenderParams:
    return params_from_bytes(Path(path).read_bytes())


def renderer_hash(params: RenderParams) -> str:
    """SHA-256 of the serialized weights; equals the hash of the saved file."""
    return hashlib.sha256(params_to_bytes(params)).hexdigest()
