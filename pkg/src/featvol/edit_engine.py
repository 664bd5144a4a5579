"""Editing feature volumes by resampling: warps, cut/erase/paste, and max-norm fusion.

Every deformation is a pull: a coordinate field ``P`` of shape ``(W, H, D, 3)``
holds, for each target node, the continuous grid position in the source
volume to sample from.  Positions outside the source lattice produce empty
cells.  All functions return new volumes and never modify their inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from featvol import feature_volume as fv
from featvol.errors import EditScriptError, FeatvolError, IncompatibleScenesError, InvalidArgumentError

OP_KINDS = ("resample", "extract", "erase", "paste", "affine", "fuse_max")
PASTE_MODES = ("overwrite", "fuse_max")


def _check_affine(m):
    m = np.asarray(m, dtype=np.float64)
    if m.size != 16:
        raise InvalidArgumentError("affine transform must be 4x4")
    m = m.reshape(4, 4)
    if abs(np.linalg.det(m)) <= 1e-9:
        raise InvalidArgumentError("affine transform is singular")
    return m


def _apply(m, pts):
    return pts @ m[:3, :3].T + m[:3, 3]


def _aabb(aabb):
    a = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
    if not np.all(a[0] <= a[1]):
        raise InvalidArgumentError(f"AABB min must be <= max, got {a.tolist()}")
    return a


def check_compatible(a: fv.FeatureVolume, b: fv.FeatureVolume):
    """Cross-scene edits need both volumes trained against the same renderer."""
    if a.renderer_hash is not None and b.renderer_hash is not None and a.renderer_hash != b.renderer_hash:
        raise IncompatibleScenesError(
            f"renderer hash mismatch: {a.renderer_hash[:12]}... vs {b.renderer_hash[:12]}...")


def identity_field(dims) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def resample(source: fv.FeatureVolume, coords, dims=None, bounds=None) -> fv.FeatureVolume:
    """Sample ``source`` at every position of the coordinate field."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 4 or coords.shape[-1] != 3:
        raise InvalidArgumentError(f"coordinate field must be (W, H, D, 3), got {coords.shape}")
    if dims is not None and tuple(coords.shape[:3]) != tuple(dims):
        raise InvalidArgumentError(f"coordinate field dims {coords.shape[:3]} != target dims {tuple(dims)}")
    out_dims = coords.shape[:3]
    idx, w, inside = fv.grid_corner_weights(source.dims, coords.reshape(-1, 3))
    data = fv.gather(source, idx, w).reshape(out_dims + (source.feat_len,))
    empty = ~inside
    if source.empty is not None:
        empty |= fv.occupancy(source, idx, w) < 0.5
    empty = empty.reshape(out_dims)
    if not empty.any() and source.empty is None:
        empty = None
    return fv.FeatureVolume(data, source.bounds if bounds is None else bounds, empty, source.renderer_hash,
                            dict(source.meta))


def affine_coord_field(dims, bounds, matrix, region=None) -> np.ndarray:
    """Pull field showing the content of ``region`` transformed by ``matrix``.

    ``matrix`` acts on world coordinates.  Target nodes whose pre-image
    ``M^-1 x`` lies in ``region`` pull from that pre-image; all other nodes
    keep their own coordinates.  ``region=None`` warps the whole volume.
    """
    m = _check_affine(matrix)
    ref = fv.FeatureVolume(np.zeros(tuple(dims) + (1,), dtype=np.float32), bounds)
    x = ref.node_positions().reshape(-1, 3)
    y = _apply(np.linalg.inv(m), x)
    g = ref.world_to_grid(y)
    if region is None:
        return g.reshape(tuple(dims) + (3,))
    r = _aabb(region)
    tol = 1e-9 * np.max(np.abs(ref.bounds))
    inside = np.all((y >= r[0] - tol) & (y <= r[1] + tol), axis=1)
    field = identity_field(dims).reshape(-1, 3)
    field[inside] = g[inside]
    return field.reshape(tuple(dims) + (3,))


def extract_region(volume: fv.FeatureVolume, aabb) -> fv.FeatureVolume:
    """Copy the content inside a world-space box into a standalone fragment.

    The fragment spans exactly ``aabb`` with (approximately) the source's node
    pitch; parts of the box outside the source are empty.
    """
    a = _aabb(aabb)
    if np.any(a[0] >= volume.bounds[1]) or np.any(a[1] <= volume.bounds[0]):
        raise InvalidArgumentError("AABB does not intersect the volume")
    extent = a[1] - a[0]
    dims = tuple(int(max(2, round(e / p) + 1)) for e, p in zip(extent, volume.pitch))
    ref = fv.FeatureVolume(np.zeros(dims + (1,), dtype=np.float32), a)
    coords = volume.world_to_grid(ref.node_positions())
    frag = resample(volume, coords, bounds=ref.bounds)
    return frag


def _nodes_in(volume: fv.FeatureVolume, aabb):
    a = _aabb(aabb)
    x = volume.node_positions()
    tol = 1e-6 * volume.pitch
    return np.all((x >= a[0] - tol) & (x <= a[1] + tol), axis=-1)


def erase_region(volume: fv.FeatureVolume, aabb) -> fv.FeatureVolume:
    """Zero every node inside the box and flag it empty."""
    out = volume.copy()
    m = _nodes_in(volume, aabb)
    out.data[m] = 0
    out.empty = volume.empty_mask() | m
    return out


def _norms(volume: fv.FeatureVolume):
    n = np.linalg.norm(volume.data.astype(np.float64), axis=-1)
    if volume.empty is not None:
        n = np.where(volume.empty, 0.0, n)
    return n


def paste(target: fv.FeatureVolume, fragment: fv.FeatureVolume, matrix=None, mode="overwrite") -> fv.FeatureVolume:
    """Insert ``fragment`` into ``target`` at the world pose given by ``matrix``.

    Target nodes whose pre-image lands on non-empty fragment content receive
    it: outright for ``overwrite``, or when its feature norm is strictly
    larger for ``fuse_max``.
    """
    if mode not in PASTE_MODES:
        raise InvalidArgumentError(f"paste mode must be one of {PASTE_MODES}")
    if fragment.feat_len != target.feat_len:
        raise InvalidArgumentError("fragment and target feature lengths differ")
    check_compatible(target, fragment)
    m = np.eye(4) if matrix is None else _check_affine(matrix)
    y = _apply(np.linalg.inv(m), target.node_positions().reshape(-1, 3))
    idx, w, inside = fv.corner_weights(fragment, y)
    valid = inside & (fv.occupancy(fragment, idx, w) >= 0.5)
    out = target.copy()
    if not valid.any():
        return out
    feats = fv.gather(fragment, idx[valid], w[valid]).astype(target.data.dtype)
    flat = out.data.reshape(-1, target.feat_len)
    empty = target.empty_mask().reshape(-1).copy()
    rows = np.nonzero(valid)[0]
    if mode == "fuse_max":
        cur = _norms(target).reshape(-1)[rows]
        take = np.linalg.norm(feats.astype(np.float64), axis=1) > cur
        rows, feats = rows[take], feats[take]
    flat[rows] = feats
    empty[rows] = False
    out.empty = empty.reshape(target.dims) if (target.empty is not None or empty.any()) else None
    return out


def fuse_max_norm(a: fv.FeatureVolume, b: fv.FeatureVolume) -> fv.FeatureVolume:
    """Per node, keep whichever operand's feature has the larger L2 norm (ties keep ``a``)."""
    if a.data.shape != b.data.shape:
        raise InvalidArgumentError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    if not np.array_equal(a.bounds, b.bounds):
        raise InvalidArgumentError("bounds mismatch; resample onto a common grid first")
    check_compatible(a, b)
    take_b = _norms(b) > _norms(a)
    data = np.where(take_b[..., None], b.data, a.data)
    empty = None
    if a.empty is not None or b.empty is not None:
        empty = np.where(take_b, b.empty_mask(), a.empty_mask())
    return fv.FeatureVolume(data, a.bounds, empty, a.renderer_hash or b.renderer_hash, dict(a.meta))


# ---------------------------------------------------------------------------
# edit scripts


@dataclass
class EditOp:
    op: str
    target: str
    source: str | None = None
    aabb: np.ndarray | None = None
    matrix: np.ndarray | None = None
    mode: str = "overwrite"
    output: str | None = None


def _parse_op(i, raw) -> EditOp:
    if not isinstance(raw, dict):
        raise EditScriptError("op must be an object", op_index=i)
    kind = raw.get("op")
    if kind not in OP_KINDS:
        raise EditScriptError(f"unknown op {kind!r}; expected one of {OP_KINDS}", op_index=i)
    if "target" not in raw:
        raise EditScriptError("op is missing 'target'", op_index=i)
    unknown = set(raw) - {"op", "target", "source", "aabb", "matrix", "mode", "output"}
    if unknown:
        raise EditScriptError(f"unknown op keys {sorted(unknown)}", op_index=i)
    try:
        aabb = None if raw.get("aabb") is None else _aabb(raw["aabb"])
        matrix = None if raw.get("matrix") is None else _check_affine(raw["matrix"])
    except (InvalidArgumentError, ValueError, TypeError) as exc:
        raise EditScriptError(str(exc), op_index=i) from exc
    mode = raw.get("mode", "overwrite")
    if mode not in PASTE_MODES:
        raise EditScriptError(f"mode must be one of {PASTE_MODES}", op_index=i)
    if kind in ("extract", "erase", "affine") and aabb is None:
        raise EditScriptError(f"{kind} needs an 'aabb'", op_index=i)
    if kind in ("paste", "fuse_max") and not raw.get("source"):
        raise EditScriptError(f"{kind} needs a 'source'", op_index=i)
    if kind == "affine" and matrix is None:
        raise EditScriptError("affine needs a 'matrix'", op_index=i)
    return EditOp(kind, raw["target"], raw.get("source"), aabb, matrix, mode, raw.get("output"))


def parse_edit_script(script) -> dict:
    """Parse and validate a script given as JSON text or an already-decoded dict."""
    if isinstance(script, (str, bytes)):
        try:
            script = json.loads(script)
        except json.JSONDecodeError as exc:
            raise EditScriptError(f"invalid JSON: {exc.msg}", line=exc.lineno, column=exc.colno) from exc
    if not isinstance(script, dict):
        raise EditScriptError("script must be a JSON object")
    ops = script.get("ops", [])
    if not isinstance(ops, list):
        raise EditScriptError("'ops' must be a list")
    return {
        "inputs": dict(script.get("inputs", {})),
        "ops": [_parse_op(i, op) for i, op in enumerate(ops)],
        "outputs": dict(script.get("outputs", {})),
    }


def _run_op(reg, i, op: EditOp):
    def get(name):
        if name not in reg:
            raise EditScriptError(f"unresolved volume name {name!r}", op_index=i)
        return reg[name]

    vol = get(op.target)
    if op.op == "resample":
        m = np.eye(4) if op.matrix is None else op.matrix
        return resample(vol, affine_coord_field(vol.dims, vol.bounds, m, op.aabb))
    if op.op == "affine":
        return resample(vol, affine_coord_field(vol.dims, vol.bounds, op.matrix, op.aabb))
    if op.op == "extract":
        return extract_region(vol, op.aabb)
    if op.op == "erase":
        return erase_region(vol, op.aabb)
    if op.op == "paste":
        return paste(vol, get(op.source), op.matrix, op.mode)
    return fuse_max_norm(vol, get(op.source))


def apply_edit_script(registry: dict, script) -> dict:
    """Run a script's ops in order over named volumes.

    Each op stores its result under ``output`` (default: its ``target``).  The
    returned dict holds every named volume, inputs included; the input
    registry is left untouched.
    """
    parsed = script if isinstance(script, dict) and "ops" in script and all(
        isinstance(o, EditOp) for o in script["ops"]) else parse_edit_script(script)
    reg = dict(registry)
    for i, op in enumerate(parsed["ops"]):
        try:
            reg[op.output or op.target] = _run_op(reg, i, op)
        except (EditScriptError, IncompatibleScenesError):
            raise
        except FeatvolError as exc:
            raise EditScriptError(str(exc), op_index=i) from exc
    return reg


def run_edit_script_file(path, out_dir=None) -> dict:
    """Load a script file, read its inputs, run it, and write its outputs.

    Relative paths resolve against the script's directory (outputs against
    ``out_dir`` when given).  Returns ``{name: written path}``.
    """
    path = Path(path)
    parsed = parse_edit_script(path.read_text())
    base = path.parent
    registry = {name: fv.load_volume(base / p) for name, p in parsed["inputs"].items()}
    reg = apply_edit_script(registry, parsed)
    written = {}
    for name, p in parsed["outputs"].items():
        if name not in reg:
            raise EditScriptError(f"output refers to unknown volume {name!r}")
        dest = (Path(out_dir) if out_dir else base) / p
        dest.parent.mkdir(parents=True, exist_ok=True)
        fv.save_volume(reg[name], dest)
        written[name] = str(dest)
    return written
