"""Point clouds sampled from a viewshed flow, plus binary PLY I/O."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, ParseError
from .flow import flow_inverse
from .scene import sample_field

# fraction of the field's peak density used when no threshold is given
DEFAULT_DENSITY_FRACTION = 0.5


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, float).reshape(-1, 3)
        col = np.asarray(self.colors, float).reshape(-1, 3)
        if len(pos) != len(col):
            raise ContractError("positions and colors differ in length")
        if not np.all(np.isfinite(pos)):
            raise ContractError("point positions must be finite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        if self.normals is not None:
            nrm = np.asarray(self.normals, float).reshape(-1, 3)
            if len(nrm) != len(pos):
                raise ContractError("normals and positions differ in length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.positions)

    def subset(self, idx):
        return PointCloud(self.positions[idx], self.colors[idx],
                          None if self.normals is None else self.normals[idx])

    def transformed(self, T):
        normals = None if self.normals is None else T.apply_directions(self.normals)
        return PointCloud(T.apply(self.positions), self.colors, normals)


def default_density_threshold(fld):
    return DEFAULT_DENSITY_FRACTION * float(fld.density.max())


def extract_point_cloud(vf, fld, n_samples=100_000, density_threshold=None, rng=None):
    """Invert ``n_samples`` latent draws and keep positions denser than the threshold."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    if density_threshold is None:
        density_threshold = default_density_threshold(fld)
    if density_threshold < 0:
        raise ConfigurationError("density threshold must be >= 0")
    rng = np.random.default_rng(0) if rng is None else rng
    z = rng.standard_normal((n_samples, 6))
    x = flow_inverse(vf, z)[:, :3]
    finite = np.all(np.isfinite(x), axis=1)
    x = x[finite]
    sigma, rgb = sample_field(fld, x)
    keep = sigma > density_threshold
    return PointCloud(x[keep], rgb[keep])


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def save_ply(cloud, path):
    """Binary little-endian PLY with float32 xyz, uint8 rgb and optional normals."""
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if cloud.normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    arr = np.empty(len(cloud), dtype=fields)
    for i, k in enumerate("xyz"):
        arr[k] = cloud.positions[:, i]
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    for i, k in enumerate(("red", "green", "blue")):
        arr[k] = rgb[:, i]
    if cloud.normals is not None:
        for i, k in enumerate(("nx", "ny", "nz")):
            arr[k] = cloud.normals[:, i]
    lines = ["ply", "format binary_little_endian 1.0", "comment viewshed_reg point cloud",
             f"element vertex {len(cloud)}"]
    names = {"<f4": "float", "u1": "uchar"}
    lines += [f"property {names[t]} {n}" for n, t in fields]
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


def _read_header(fh):
    offset = 0
    first = fh.readline()
    if first.strip() != b"ply":
        raise ParseError("missing 'ply' magic", offset=0)
    offset += len(first)
    fmt = None
    n_vertex = None
    props = []
    current = None
    while True:
        line = fh.readline()
        if not line:
            raise ParseError("header ended without end_header", offset=offset)
        text = line.decode("ascii", errors="replace").strip()
        parts = text.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            pass
        elif parts[0] == "format":
            if len(parts) != 3:
                raise ParseError(f"malformed format line {text!r}", offset=offset)
            fmt = parts[1]
            if fmt != "binary_little_endian":
                raise ParseError(f"unsupported PLY format {fmt!r}; only binary_little_endian is read",
                                 offset=offset)
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise ParseError(f"malformed element line {text!r}", offset=offset)
            current = parts[1]
            if current == "vertex":
                n_vertex = int(parts[2])
            elif int(parts[2]) != 0:
                raise ParseError(f"unsupported element {current!r}", offset=offset)
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise ParseError(f"unsupported property line {text!r}", offset=offset)
            if current == "vertex":
                props.append((parts[2], "<" + _PLY_TYPES[parts[1]]))
        elif parts[0] == "end_header":
            offset += len(line)
            break
        else:
            raise ParseError(f"unknown header keyword {parts[0]!r}", offset=offset)
        offset += len(line)
    if fmt is None:
        raise ParseError("header lacks a format line", offset=offset)
    if n_vertex is None:
        raise ParseError("header lacks a vertex element", offset=offset)
    names = [p[0] for p in props]
    for need in ("x", "y", "z"):
        if need not in names:
            raise ParseError(f"vertex element lacks property {need!r}", offset=offset)
    return n_vertex, props, offset


def load_ply(path):
    with open(path, "rb") as fh:
        n, props, offset = _read_header(fh)
        dtype = np.dtype(props)
        payload = fh.read()
    if len(payload) < n * dtype.itemsize:
        raise ParseError(f"expected {n} vertices but the body is truncated",
                         offset=offset + len(payload))
    arr = np.frombuffer(payload[: n * dtype.itemsize], dtype=dtype, count=n)
    pos = np.stack([arr[k].astype(float) for k in "xyz"], axis=1) if n else np.zeros((0, 3))
    names = dtype.names
    if all(k in names for k in ("red", "green", "blue")):
        col = np.stack([arr[k].astype(float) / 255.0 for k in ("red", "green", "blue")], axis=1)
    else:
        col = np.zeros((n, 3))
    normals = None
    if all(k in names for k in ("nx", "ny", "nz")):
        normals = np.stack([arr[k].astype(float) for k in ("nx", "ny", "nz")], axis=1)
    return PointCloud(pos.reshape(-1, 3), col.reshape(-1, 3), normals)
