"""Serialization, deterministic RNG streams and run manifests.

Formats
-------
transform (JSON)
    ``{"schema": "transform", "version": 1, "matrix": [[...4], [...4], [...4]], "scale": s}``
    with the 3x4 ``[R | t]`` block row-major. Floats are written with
    ``repr`` so they round-trip exactly.
cameras (JSON)
    ``{"schema": "cameras", "version": 1, "cameras": [{"pose": <transform>,
    "fx", "fy", "cx", "cy", "width", "height"}, ...]}``.
field (binary, little-endian)
    64-byte header: magic ``VFRF``, uint16 version, 3 x uint16 resolution,
    6 x float64 bounds (lo then hi), 3 x uint8 background, 1 pad byte.
    Then density (float64, nx*ny*nz) and colour (float64, nx*ny*nz*3),
    both with x varying fastest.
flow (binary, little-endian)
    magic ``VFNF``, uint32 length of a JSON header describing layer widths,
    masks and the normaliser, then every parameter array as float64 in the
    order the header lists them.
viewshed map
    16-bit greyscale PNG of the scores rescaled to ``[lo, hi]`` (stored in a
    JSON sidecar together with the validity mask run-length), plus a raw
    float32 ``.npy`` of the exact scores.
config (JSON)
    any object carrying ``"schema"`` and ``"version"`` keys.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError
from .lie import Transform

TOOL_VERSION = "0.1.0"
FIELD_MAGIC = b"VFRF"
FIELD_VERSION = 1
FLOW_MAGIC = b"VFNF"
FLOW_VERSION = 1
_FIELD_HEADER = struct.Struct("<4sH3H6d3Bx")


# ---------------------------------------------------------------------------
# RNG streams

def seeded_rng(master_seed, stream_label):
    """Independent, reproducible generator for ``(master_seed, label)``.

    The label is hashed as UTF-8 bytes so the stream does not depend on
    platform byte order.
    """
    digest = hashlib.sha256(str(stream_label).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, *words]))


def derive_seed(master_seed, stream_label):
    """A plain integer seed for consumers that take ints rather than generators."""
    return int(seeded_rng(master_seed, stream_label).integers(0, 2**31 - 1))


# ---------------------------------------------------------------------------
# atomic writes

def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def read_json(path, schema=None):
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno, column=exc.colno) from None
    if schema is not None:
        if not isinstance(obj, dict) or obj.get("schema") != schema:
            raise ParseError(f"{path}: expected schema {schema!r}", line=1, column=1)
    return obj


def config_hash(cfg):
    """SHA-256 of the canonical JSON form; independent of key order."""
    blob = json.dumps(_jsonable(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# transforms and cameras

def transform_to_dict(T):
    return {"schema": "transform", "version": 1, "matrix": T.matrix34().tolist(), "scale": float(T.scale)}


def transform_from_dict(d, where="transform"):
    try:
        M = np.asarray(d["matrix"], dtype=float)
        scale = float(d.get("scale", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{where}: {exc}") from None
    if M.shape != (3, 4):
        raise ParseError(f"{where}: matrix must be 3x4, got {M.shape}")
    R, t = M[:, :3], M[:, 3]
    if np.linalg.det(R) < 0:
        raise ValidationError(f"{where}: rotation has negative determinant")
    try:
        return Transform(R, t, scale)
    except ValueError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def save_transform(T, path):
    write_json(path, transform_to_dict(T))


def load_transform(path):
    return transform_from_dict(read_json(path, schema="transform"), str(path))


def camera_to_dict(cam):
    return {"pose": transform_to_dict(cam.pose), **cam.intrinsics}


def camera_from_dict(d):
    from .scene import Camera

    k = {key: d[key] for key in ("fx", "fy", "cx", "cy")}
    return Camera(transform_from_dict(d["pose"]), width=int(d["width"]), height=int(d["height"]), **k)


def save_cameras(cameras, path):
    write_json(path, {"schema": "cameras", "version": 1, "cameras": [camera_to_dict(c) for c in cameras]})


def load_cameras(path):
    d = read_json(path, schema="cameras")
    try:
        return [camera_from_dict(c) for c in d["cameras"]]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: bad camera entry: {exc}") from None


# ---------------------------------------------------------------------------
# radiance fields

def save_field(fld, path):
    nx, ny, nz = fld.resolution
    bg = np.clip(np.round(np.asarray(fld.background) * 255.0), 0, 255).astype(int)
    head = _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, nx, ny, nz,
                              *fld.bounds[0].tolist(), *fld.bounds[1].tolist(), *bg.tolist())
    head = head.ljust(64, b"\0")
    dens = np.asarray(fld.density, "<f8").ravel(order="F")
    col = np.asarray(fld.color, "<f8").reshape(-1, 3, order="F")
    atomic_write_bytes(path, head + dens.tobytes() + col.tobytes())


def load_field(path):
    from .scene import RadianceField

    raw = Path(path).read_bytes()
    if len(raw) < 64:
        raise ParseError("field file shorter than its header", offset=len(raw))
    magic, ver, nx, ny, nz, *rest = _FIELD_HEADER.unpack_from(raw, 0)
    if magic != FIELD_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if ver != FIELD_VERSION:
        raise ParseError(f"unsupported field version {ver}", offset=4)
    bounds = np.array(rest[:6], float).reshape(2, 3)
    bg = np.array(rest[6:9], float) / 255.0
    n = nx * ny * nz
    need = 64 + 8 * n * 4
    if len(raw) != need:
        raise ParseError(f"expected {need} bytes for a {nx}x{ny}x{nz} field", offset=min(len(raw), need))
    dens = np.frombuffer(raw, "<f8", n, 64).reshape((nx, ny, nz), order="F")
    col = np.frombuffer(raw, "<f8", 3 * n, 64 + 8 * n).reshape(n, 3)
    col = np.stack([col[:, c].reshape((nx, ny, nz), order="F") for c in range(3)], axis=-1)
    return RadianceField(np.ascontiguousarray(dens), np.ascontiguousarray(col), bounds, bg)


# ---------------------------------------------------------------------------
# flows

def save_flow(model, path):
    arrays = []
    layers = []
    for layer in model.layers:
        entry = {"mask": layer.mask.astype(int).tolist(), "scale_clamp": layer.scale_clamp, "nets": []}
        for net in (layer.scale_net, layer.translate_net):
            entry["nets"].append({"widths": list(net.widths)})
            for W, b in zip(net.weights, net.biases):
                arrays += [W, b]
        layers.append(entry)
    arrays += [model.shift, model.scale]
    info = {k: v for k, v in model.info.items() if k not in ("history",)}
    header = json.dumps(_jsonable({"version": FLOW_VERSION, "layers": layers, "info": info}),
                        sort_keys=True).encode("utf-8")
    body = b"".join(np.asarray(a, "<f8").tobytes() for a in arrays)
    atomic_write_bytes(path, FLOW_MAGIC + struct.pack("<I", len(header)) + header + body)


def load_flow(path):
    from .flow import CouplingLayer, FlowModel, Mlp

    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise ParseError(f"bad magic {raw[:4]!r}", offset=0)
    if len(raw) < 8:
        raise ParseError("truncated flow header", offset=len(raw))
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"flow header is not valid JSON: {exc}", offset=8) from None
    pos = 8 + hlen

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape))
        if pos + 8 * count > len(raw):
            raise ParseError("flow parameter block truncated", offset=pos)
        a = np.frombuffer(raw, "<f8", count, pos).reshape(shape).copy()
        pos += 8 * count
        return a

    layers = []
    for entry in header["layers"]:
        nets = []
        for net in entry["nets"]:
            w = net["widths"]
            Ws, bs = [], []
            for i in range(len(w) - 1):
                Ws.append(take((w[i], w[i + 1])))
                bs.append(take((w[i + 1],)))
            nets.append(Mlp(Ws, bs))
        layers.append(CouplingLayer(np.asarray(entry["mask"], bool), nets[0], nets[1], entry["scale_clamp"]))
    shift = take((6,))
    scale = take((6,))
    if pos != len(raw):
        raise ParseError("trailing bytes after flow parameters", offset=pos)
    return FlowModel(layers, shift, scale, header.get("info", {}))


# ---------------------------------------------------------------------------
# viewshed maps

def save_viewshed_map(vmap, path):
    """Write ``<path>.png`` (16-bit), ``<path>.json`` sidecar and ``<path>.npy`` (float32)."""
    from PIL import Image

    path = Path(path)
    scores, valid = np.asarray(vmap.scores), np.asarray(vmap.valid)
    finite = scores[valid]
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 1.0
    span = hi - lo if hi > lo else 1.0
    q = np.zeros(scores.shape, np.uint16)
    # 0 is reserved for invalid pixels
    q[valid] = 1 + np.round((scores[valid] - lo) / span * 65534).astype(np.uint16)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path.with_suffix(".png"))
    write_json(path.with_suffix(".json"), {"schema": "viewshed-map", "version": 1, "lo": lo, "hi": hi,
                                           "shape": list(scores.shape), "invalid_code": 0})
    np.save(path.with_suffix(".npy"), np.where(valid, scores, -np.inf).astype("<f4"))


def load_viewshed_map(path):
    from .viewshed import ViewshedMap

    path = Path(path)
    scores = np.load(path.with_suffix(".npy")).astype(float)
    return ViewshedMap(scores, np.isfinite(scores))


# ---------------------------------------------------------------------------
# manifests

@dataclass
class RunManifest:
    config: dict
    seeds: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    tool_version: str = TOOL_VERSION

    @property
    def config_hash(self):
        return config_hash(self.config)

    def add_artifact(self, name, path):
        self.artifacts[name] = str(path)

    def time_stage(self, name):
        return _StageTimer(self, name)

    def to_dict(self):
        return {"schema": "run-manifest", "version": 1, "tool_version": self.tool_version,
                "config_hash": self.config_hash, "config": self.config, "seeds": self.seeds,
                "artifacts": self.artifacts, "timings": self.timings}

    def save(self, path):
        write_json(path, self.to_dict())


class _StageTimer:
    def __init__(self, manifest, name):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.timings[self.name] = time.perf_counter() - self.t0
        return False


def load_config(path):
    """Read a versioned JSON config file; raises ConfigurationError on bad content."""
    try:
        cfg = read_json(path)
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except ParseError as exc:
        raise ConfigurationError(str(exc)) from None
    if not isinstance(cfg, dict):
        raise ConfigurationError("config root must be an object")
    if "version" in cfg and cfg["version"] != 1:
        raise ConfigurationError(f"unsupported config version {cfg['version']}")
    return cfg
