"""Loaders for colored point clouds (PLY) and textured meshes (OBJ + MTL).

Supported encodings: ASCII and binary little-endian PLY for point clouds,
OBJ with a companion MTL and a PNG/JPEG texture for meshes.  Colors are
normalized to floats in [0, 1] on load (8-bit channels divided by 255).
Parsed models are immutable and safe to share across threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ModelIOError

# PLY scalar property types, little-endian numpy codes.
_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_COORD_PROPS = ("x", "y", "z")
_COLOR_PROPS = ("red", "green", "blue")


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass
class PointCloud:
    """Colored point set: positions (N,3) float64, colors (N,3) float64 in [0,1]."""

    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = _freeze(np.ascontiguousarray(self.positions, dtype=np.float64))
        self.colors = _freeze(np.ascontiguousarray(self.colors, dtype=np.float64))
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or len(self.positions) == 0:
            raise ModelIOError("point cloud must contain at least one xyz position")
        if self.colors.shape != self.positions.shape:
            raise ModelIOError(
                f"colors shape {self.colors.shape} does not match positions {self.positions.shape}"
            )
        if not np.isfinite(self.positions).all():
            raise ModelIOError("point cloud contains non-finite coordinates")
        if not np.isfinite(self.colors).all():
            raise ModelIOError("point cloud contains non-finite colors")
        if self.colors.min() < 0.0 or self.colors.max() > 1.0:
            raise ModelIOError("point colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class TexturedMesh:
    """Triangle mesh with per-face uv indices and an RGB texture raster."""

    vertices: np.ndarray   # (N,3) float64
    uvs: np.ndarray        # (M,2) float64, stored as read; wrapping applied at sampling
    faces_v: np.ndarray    # (F,3) int64 vertex indices
    faces_vt: np.ndarray   # (F,3) int64 uv indices
    texture: np.ndarray    # (H,W,3) uint8

    def __post_init__(self):
        self.vertices = _freeze(np.ascontiguousarray(self.vertices, dtype=np.float64))
        self.uvs = _freeze(np.ascontiguousarray(self.uvs, dtype=np.float64))
        self.faces_v = _freeze(np.ascontiguousarray(self.faces_v, dtype=np.int64))
        self.faces_vt = _freeze(np.ascontiguousarray(self.faces_vt, dtype=np.int64))
        self.texture = _freeze(np.ascontiguousarray(self.texture, dtype=np.uint8))
        if len(self.vertices) == 0 or len(self.faces_v) == 0:
            raise ModelIOError("mesh must contain at least one vertex and one face")
        if self.faces_v.shape[1] != 3 or self.faces_vt.shape != self.faces_v.shape:
            raise ModelIOError("faces must be triangles with congruent uv indices")
        if self.faces_v.min() < 0 or self.faces_v.max() >= len(self.vertices):
            raise ModelIOError("face references vertex index out of range")
        if self.faces_vt.min() < 0 or self.faces_vt.max() >= len(self.uvs):
            raise ModelIOError("face references uv index out of range")
        if self.texture.ndim != 3 or self.texture.shape[2] != 3:
            raise ModelIOError("texture must be an RGB raster")

    def __len__(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class AABB:
    """Axis-aligned bounding box; min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", _freeze(np.asarray(self.min, dtype=np.float64).copy()))
        object.__setattr__(self, "max", _freeze(np.asarray(self.max, dtype=np.float64).copy()))
        if (self.min > self.max).any():
            raise ModelIOError("AABB min must be <= max componentwise")

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min


def bounding_box(model) -> AABB:
    """Componentwise min/max over all positions (point cloud) or vertices (mesh)."""
    if isinstance(model, PointCloud):
        pts = model.positions
    elif isinstance(model, TexturedMesh):
        pts = model.vertices
    else:
        raise ModelIOError(f"cannot compute bounding box of {type(model).__name__}")
    if len(pts) == 0:
        raise ModelIOError("empty model has no bounding box")
    return AABB(pts.min(axis=0), pts.max(axis=0))


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

class _PlyElement:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        self.props: list[tuple[str, str]] = []   # (name, numpy code)
        self.has_list = False


def _parse_ply_header(header_text: str):
    lines = [ln.strip() for ln in header_text.splitlines()]
    if not lines or lines[0] != "ply":
        raise ModelIOError("not a PLY file: first line must be 'ply'")
    fmt = None
    elements: list[_PlyElement] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "" or line.startswith("comment") or line.startswith("obj_info"):
            continue
        if line == "end_header":
            break
        parts = line.split()
        if parts[0] == "format":
            if len(parts) < 2:
                raise ModelIOError(f"garbled PLY header at line {lineno}: '{line}'")
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise ModelIOError(
                    f"unsupported PLY format '{fmt}' (supported: ascii, binary_little_endian)"
                )
        elif parts[0] == "element":
            if len(parts) != 3:
                raise ModelIOError(f"garbled PLY header at line {lineno}: '{line}'")
            try:
                count = int(parts[2])
            except ValueError:
                raise ModelIOError(f"garbled PLY header at line {lineno}: '{line}'") from None
            elements.append(_PlyElement(parts[1], count))
        elif parts[0] == "property":
            if not elements:
                raise ModelIOError(f"garbled PLY header at line {lineno}: '{line}'")
            if parts[1] == "list":
                if len(parts) != 5:
                    raise ModelIOError(f"garbled PLY header at line {lineno}: '{line}'")
                elements[-1].has_list = True
                elements[-1].props.append((parts[4], "list"))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise ModelIOError(f"garbled PLY header at line {lineno}: '{line}'")
                elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise ModelIOError(f"garbled PLY header at line {lineno}: '{line}'")
    else:
        raise ModelIOError("garbled PLY header: missing 'end_header'")
    if fmt is None:
        raise ModelIOError("garbled PLY header: missing 'format' line")
    return fmt, elements


def _vertex_element(elements: list[_PlyElement]) -> tuple[int, _PlyElement]:
    for i, el in enumerate(elements):
        if el.name == "vertex":
            return i, el
    raise ModelIOError("PLY file declares no vertex element")


def load_point_cloud(path) -> PointCloud:
    """Parse a colored PLY point cloud (ASCII or binary little-endian).

    Vertex elements must carry x/y/z and red/green/blue properties; any other
    scalar properties (normals, alpha, ...) are skipped.  Raises ModelIOError
    on garbled headers, missing colors, or truncated bodies.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ModelIOError(f"cannot read PLY file: {e}")
    if raw.split(b"\n", 1)[0].strip() != b"ply":
        raise ModelIOError("not a PLY file: first line must be 'ply'")
    marker = raw.find(b"end_header")
    if marker < 0:
        raise ModelIOError("garbled PLY header: missing 'end_header'")
    body_start = raw.find(b"\n", marker)
    if body_start < 0:
        body_start = len(raw)
    else:
        body_start += 1
    fmt, elements = _parse_ply_header(raw[:body_start].decode("ascii", errors="replace"))
    v_idx, vel = _vertex_element(elements)

    names = [p[0] for p in vel.props]
    for coord in _COORD_PROPS:
        if coord not in names:
            raise ModelIOError(f"vertex element missing coordinate property '{coord}'")
    for c in _COLOR_PROPS:
        if c not in names:
            raise ModelIOError("uncolored point cloud unsupported (missing red/green/blue)")
    if vel.has_list:
        raise ModelIOError("list properties in the vertex element are unsupported")

    body = raw[body_start:]
    if fmt == "ascii":
        rec = _read_ascii_vertices(body, elements, v_idx, vel)
    else:
        rec = _read_binary_vertices(body, elements, v_idx, vel)

    codes = dict(vel.props)
    positions = np.stack([rec[c].astype(np.float64) for c in _COORD_PROPS], axis=1)
    colors = np.stack(
        [_normalize_color(rec[c], codes[c]) for c in _COLOR_PROPS], axis=1
    )
    return PointCloud(positions, colors)


def _normalize_color(values: np.ndarray, code: str) -> np.ndarray:
    # Normalize by the *declared* property type: the ASCII reader hands all
    # columns over as float64, so the array dtype alone cannot be trusted.
    if code[0] in "ui":
        limit = float(np.iinfo(np.dtype(code)).max)
        # 8-bit is the norm; wider integer channels scale by their own max.
        return values.astype(np.float64) / (255.0 if limit <= 255 else limit)
    return values.astype(np.float64)


def _read_ascii_vertices(body: bytes, elements, v_idx: int, vel: _PlyElement):
    lines = [ln for ln in body.decode("ascii", errors="replace").splitlines() if ln.strip()]
    skip = sum(el.count for el in elements[:v_idx])
    vlines = lines[skip:skip + vel.count]
    if len(vlines) < vel.count:
        raise ModelIOError(
            f"truncated PLY body: expected {vel.count}, found {len(vlines)} vertex rows"
        )
    ncols = len(vel.props)
    tokens = " ".join(vlines).split()
    if len(tokens) != vel.count * ncols:
        # Find the first bad row for a useful message.
        for i, ln in enumerate(vlines):
            if len(ln.split()) != ncols:
                raise ModelIOError(
                    f"vertex row {i + 1} has {len(ln.split())} values, expected {ncols}: '{ln}'"
                )
        raise ModelIOError("vertex rows do not match declared property count")
    try:
        table = np.asarray(tokens, dtype=np.float64).reshape(vel.count, ncols)
    except ValueError as e:
        raise ModelIOError(f"non-numeric vertex data: {e}") from None
    return {name: table[:, i] for i, (name, _code) in enumerate(vel.props)}


def _read_binary_vertices(body: bytes, elements, v_idx: int, vel: _PlyElement):
    offset = 0
    for el in elements[:v_idx]:
        if el.has_list:
            raise ModelIOError(
                f"cannot skip binary element '{el.name}' with list properties before vertices"
            )
        offset += el.count * np.dtype([(n, "<" + c) for n, c in el.props]).itemsize
    dtype = np.dtype([(n, "<" + c) for n, c in vel.props])
    available = (len(body) - offset) // dtype.itemsize
    if available < vel.count:
        raise ModelIOError(
            f"truncated PLY body: expected {vel.count}, found {max(available, 0)} vertex records"
        )
    rec = np.frombuffer(body, dtype=dtype, count=vel.count, offset=offset)
    return {name: rec[name] for name, _code in vel.props}


def save_point_cloud(cloud: PointCloud, path, binary: bool = False) -> Path:
    """Write a PLY file (ASCII by default) that round-trips through load_point_cloud.

    ASCII output preserves float64 positions exactly; binary output stores
    float32 coordinates.  Colors are written as 8-bit channels.
    """
    path = Path(path)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    if binary:
        rec = np.empty(len(cloud), dtype=np.dtype(
            [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
             ("red", "u1"), ("green", "u1"), ("blue", "u1")]))
        for i, c in enumerate(_COORD_PROPS):
            rec[c] = cloud.positions[:, i].astype(np.float32)
        for i, c in enumerate(_COLOR_PROPS):
            rec[c] = rgb[:, i]
        path.write_bytes(header.encode("ascii") + rec.tobytes())
    else:
        rows = [
            f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]}"
            for p, c in zip(cloud.positions, rgb)
        ]
        path.write_text(header + "\n".join(rows) + "\n", encoding="ascii")
    return path


# ---------------------------------------------------------------------------
# OBJ + MTL textured meshes
# ---------------------------------------------------------------------------

_FACE_TOKEN = re.compile(r"^(-?\d+)(?:/(-?\d*)(?:/(-?\d*))?)?$")


def _resolve_index(raw: int, count: int, what: str, lineno: int) -> int:
    idx = raw - 1 if raw > 0 else count + raw
    if not 0 <= idx < count:
        raise ModelIOError(f"face at line {lineno} references {what} index {raw} out of range")
    return idx


def load_textured_mesh(path) -> TexturedMesh:
    """Parse an OBJ mesh with v/vt/f records and its MTL-referenced texture.

    Faces accept 'v/vt' and 'v/vt/vn' forms; polygons with more than three
    vertices are fan-triangulated from their first vertex.
    """
    path = Path(path)
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    faces_v: list[tuple[int, int, int]] = []
    faces_vt: list[tuple[int, int, int]] = []
    mtl_files: list[str] = []
    material: str | None = None

    try:
        text = path.read_text(encoding="utf-8", errors="replace")
    except OSError as e:
        raise ModelIOError(f"cannot read OBJ file {path}: {e}") from e

    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ModelIOError(f"malformed vertex at line {lineno}: '{line}'")
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            if len(parts) < 3:
                raise ModelIOError(f"malformed texture coordinate at line {lineno}: '{line}'")
            uvs.append([float(parts[1]), float(parts[2])])
        elif tag == "f":
            corners = []
            for token in parts[1:]:
                m = _FACE_TOKEN.match(token)
                if m is None:
                    raise ModelIOError(f"malformed face token '{token}' at line {lineno}")
                vi_raw, vt_raw = m.group(1), m.group(2)
                if not vt_raw:
                    raise ModelIOError(
                        f"face at line {lineno} has no texture coordinate index "
                        "(textured meshes require v/vt faces)"
                    )
                vi = _resolve_index(int(vi_raw), len(verts), "vertex", lineno)
                ti = _resolve_index(int(vt_raw), len(uvs), "uv", lineno)
                corners.append((vi, ti))
            if len(corners) < 3:
                raise ModelIOError(f"face at line {lineno} has fewer than 3 vertices")
            for k in range(1, len(corners) - 1):   # fan from the first corner
                faces_v.append((corners[0][0], corners[k][0], corners[k + 1][0]))
                faces_vt.append((corners[0][1], corners[k][1], corners[k + 1][1]))
        elif tag == "mtllib":
            mtl_files.extend(parts[1:])
        elif tag == "usemtl" and material is None:
            material = parts[1] if len(parts) > 1 else None
        # vn / o / g / s records carry no data we use.

    if not verts:
        raise ModelIOError(f"OBJ file {path} declares no vertices")
    if not faces_v:
        raise ModelIOError(f"OBJ file {path} declares no faces")

    texture = _load_texture(path.parent, mtl_files, material)
    return TexturedMesh(
        np.asarray(verts), np.asarray(uvs),
        np.asarray(faces_v), np.asarray(faces_vt), texture,
    )


def _load_texture(base: Path, mtl_files: list[str], material: str | None) -> np.ndarray:
    if not mtl_files:
        raise ModelIOError("unresolvable texture path: OBJ has no mtllib record")
    tex_path = None
    for name in mtl_files:
        mtl = base / name
        if not mtl.exists():
            raise ModelIOError(f"unresolvable texture path: MTL file {mtl} not found")
        tex_path = _texture_from_mtl(mtl, material)
        if tex_path is not None:
            break
    if tex_path is None:
        raise ModelIOError("unresolvable texture path: no map_Kd entry in MTL")
    if not tex_path.exists():
        raise ModelIOError(f"unresolvable texture path: {tex_path} not found")
    try:
        with Image.open(tex_path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise ModelIOError(f"cannot decode texture {tex_path}: {e}") from e


def _texture_from_mtl(mtl: Path, material: str | None) -> Path | None:
    """Return the map_Kd path of `material` (or the first textured material)."""
    current = None
    fallback = None
    for line in mtl.read_text(encoding="utf-8", errors="replace").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "newmtl" and len(parts) > 1:
            current = parts[1]
        elif parts[0] == "map_Kd" and len(parts) > 1:
            tex = mtl.parent / parts[-1]   # last token skips map options
            if material is None or current == material:
                return tex
            if fallback is None:
                fallback = tex
    return fallback
