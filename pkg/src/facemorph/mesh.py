"""Fixed-topology triangle meshes, landmark sets, and mesh file I/O (OBJ/PLY)."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class MeshError(Exception):
    """Invalid mesh topology, geometry, or file content."""


@dataclass
class TriMesh:
    """Triangle mesh with per-vertex position (mm), optional RGB color in [0,1],
    and optional per-vertex UV coordinate in [0,1]^2.

    Positions are float64 (n, 3), triangles are int32 (f, 3) vertex-index
    triples. Instances are treated as immutable after construction.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    colors: Optional[np.ndarray] = None
    uvs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise MeshError("color count %d != vertex count %d" % (len(self.colors), len(self.vertices)))
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
            if len(self.uvs) != len(self.vertices):
                raise MeshError("uv count %d != vertex count %d" % (len(self.uvs), len(self.vertices)))
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle index %d out of range for %d vertices"
                            % (int(self.triangles.max()), len(self.vertices)))
        if self.triangles.size and self.triangles.min() < 0:
            raise MeshError("negative triangle index")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same topology/attributes with replaced positions."""
        return TriMesh(vertices, self.triangles, self.colors, self.uvs)

    def with_colors(self, colors: np.ndarray) -> "TriMesh":
        return TriMesh(self.vertices, self.triangles, colors, self.uvs)

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class LandmarkSet:
    """Semantic landmarks: template vertex indices plus optional matched 2D
    image coordinates (px) or 3D coordinates (mm)."""

    vertex_indices: np.ndarray
    points2d: Optional[np.ndarray] = None
    points3d: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertex_indices = np.asarray(self.vertex_indices, dtype=np.int32).reshape(-1)
        if self.points2d is not None:
            self.points2d = np.asarray(self.points2d, dtype=np.float64).reshape(-1, 2)
            if len(self.points2d) != len(self.vertex_indices):
                raise MeshError("points2d length %d != landmark count %d"
                                % (len(self.points2d), len(self.vertex_indices)))
        if self.points3d is not None:
            self.points3d = np.asarray(self.points3d, dtype=np.float64).reshape(-1, 3)
            if len(self.points3d) != len(self.vertex_indices):
                raise MeshError("points3d length %d != landmark count %d"
                                % (len(self.points3d), len(self.vertex_indices)))

    def __len__(self) -> int:
        return len(self.vertex_indices)


def face_normals(mesh: TriMesh, normalize: bool = True) -> np.ndarray:
    """Per-triangle normals from the CCW winding; unnormalized = 2x area vector."""
    v = mesh.vertices
    t = mesh.triangles
    e1 = v[t[:, 1]] - v[t[:, 0]]
    e2 = v[t[:, 2]] - v[t[:, 0]]
    fn = np.cross(e1, e2)
    if normalize:
        norm = np.linalg.norm(fn, axis=1, keepdims=True)
        norm[norm == 0.0] = 1.0
        fn = fn / norm
    return fn


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted average of incident face normals, normalized to unit length.

    Raises MeshError naming the first isolated vertex (referenced by no triangle).
    """
    counts = np.zeros(mesh.num_vertices, dtype=np.int64)
    np.add.at(counts, mesh.triangles.reshape(-1), 1)
    if (counts == 0).any():
        raise MeshError("isolated vertex %d (referenced by no triangle)" % int(np.argmin(counts > 0)))
    fn = face_normals(mesh, normalize=False)  # weight = 2x triangle area
    acc = np.zeros((mesh.num_vertices, 3), dtype=np.float64)
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    norm[norm == 0.0] = 1.0
    return acc / norm


def accumulate_vertex_normal_grad(mesh: TriMesh, d_normals: np.ndarray) -> np.ndarray:
    """Backward of vertex_normals: gradient w.r.t. vertex positions.

    Chain: per-vertex normalize <- summed face cross products <- positions.
    """
    v = mesh.vertices
    t = mesh.triangles
    fn = face_normals(mesh, normalize=False)
    acc = np.zeros((mesh.num_vertices, 3), dtype=np.float64)
    for k in range(3):
        np.add.at(acc, t[:, k], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    norm[norm == 0.0] = 1.0
    unit = acc / norm
    # d(unit)/d(acc) = (I - unit unit^T)/|acc|
    d_acc = (d_normals - unit * np.sum(d_normals * unit, axis=1, keepdims=True)) / norm

    # acc[i] receives fn of each incident face; pull gradient back per face.
    d_fn = d_acc[t[:, 0]] + d_acc[t[:, 1]] + d_acc[t[:, 2]]
    a = v[t[:, 1]] - v[t[:, 0]]
    b = v[t[:, 2]] - v[t[:, 0]]
    # fn = a x b;  d/da = -skew(b) applied to upstream, d/db = skew(a)
    d_a = np.cross(d_fn, b)
    d_b = np.cross(a, d_fn)
    d_v = np.zeros_like(v)
    np.add.at(d_v, t[:, 1], d_a)
    np.add.at(d_v, t[:, 2], d_b)
    np.add.at(d_v, t[:, 0], -d_a - d_b)
    return d_v


def triangle_uv_areas(mesh: TriMesh) -> np.ndarray:
    """Signed triangle areas in UV space (requires uvs)."""
    if mesh.uvs is None:
        raise MeshError("mesh has no uv coordinates")
    uv = mesh.uvs
    t = mesh.triangles
    e1 = uv[t[:, 1]] - uv[t[:, 0]]
    e2 = uv[t[:, 2]] - uv[t[:, 0]]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


# ---------------------------------------------------------------------------
# Mesh file I/O.  OBJ carries positions, uvs and faces (plus the common
# "v x y z r g b" color extension); PLY adds per-vertex RGB as float
# properties so [0,1] colors round-trip losslessly in float32.
# ---------------------------------------------------------------------------

def save_mesh(mesh: TriMesh, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        _save_obj(mesh, path)
    elif path.suffix.lower() == ".ply":
        _save_ply(mesh, path)
    else:
        raise MeshError("unsupported mesh format: %s" % path.suffix)


def load_mesh(path, require_topology_of: Optional[TriMesh] = None) -> TriMesh:
    """Load an OBJ or PLY mesh.

    With require_topology_of set, raises unless vertex count and triangle
    array match the given template mesh exactly.
    """
    path = Path(path)
    if not path.exists():
        raise MeshError("no such file: %s" % path)
    if path.suffix.lower() == ".obj":
        mesh = _load_obj(path)
    elif path.suffix.lower() == ".ply":
        mesh = _load_ply(path)
    else:
        raise MeshError("unsupported mesh format: %s" % path.suffix)
    if require_topology_of is not None:
        if mesh.num_vertices != require_topology_of.num_vertices:
            raise MeshError("topology mismatch: %d vertices, template has %d"
                            % (mesh.num_vertices, require_topology_of.num_vertices))
        if not np.array_equal(mesh.triangles, require_topology_of.triangles):
            raise MeshError("topology mismatch: triangle list differs from template")
    return mesh


def _fmt(x: float) -> str:
    # round-trippable for float32 values
    return format(np.float32(x), ".9g")


def _save_obj(mesh: TriMesh, path: Path) -> None:
    lines = []
    v32 = mesh.vertices.astype(np.float32)
    c32 = mesh.colors.astype(np.float32) if mesh.colors is not None else None
    for i in range(mesh.num_vertices):
        if c32 is not None:
            lines.append("v %s %s %s %s %s %s" % tuple(_fmt(x) for x in (*v32[i], *c32[i])))
        else:
            lines.append("v %s %s %s" % tuple(_fmt(x) for x in v32[i]))
    if mesh.uvs is not None:
        uv32 = mesh.uvs.astype(np.float32)
        for i in range(mesh.num_vertices):
            lines.append("vt %s %s" % tuple(_fmt(x) for x in uv32[i]))
        for tri in mesh.triangles + 1:
            lines.append("f %d/%d %d/%d %d/%d" % (tri[0], tri[0], tri[1], tri[1], tri[2], tri[2]))
    else:
        for tri in mesh.triangles + 1:
            lines.append("f %d %d %d" % tuple(tri))
    path.write_text("\n".join(lines) + "\n")


def _load_obj(path: Path) -> TriMesh:
    verts, colors, uvs, faces = [], [], [], []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "v":
                if len(parts) not in (4, 7):
                    raise ValueError("expected 3 or 6 floats after 'v'")
                verts.append([float(p) for p in parts[1:4]])
                if len(parts) == 7:
                    colors.append([float(p) for p in parts[4:7]])
            elif parts[0] == "vt":
                uvs.append([float(parts[1]), float(parts[2])])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError("only triangle faces supported")
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        except (ValueError, IndexError) as exc:
            raise MeshError("parse error at %s line %d: %s" % (path.name, lineno, exc)) from exc
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64) if faces else np.zeros((0, 3), np.int64)
    if faces.size and (faces.max() >= len(verts) or faces.min() < 0):
        bad = int(np.argmax((faces >= len(verts)).any(axis=1) | (faces < 0).any(axis=1)))
        raise MeshError("face %d references out-of-range vertex index in %s" % (bad, path.name))
    return TriMesh(
        verts, faces,
        colors=np.asarray(colors) if colors else None,
        uvs=np.asarray(uvs) if uvs else None,
    )


_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {nv}
{vprops}element face {nf}
property list uchar int vertex_indices
end_header
"""


def _save_ply(mesh: TriMesh, path: Path) -> None:
    vprops = "property float x\nproperty float y\nproperty float z\n"
    cols = 3
    if mesh.colors is not None:
        vprops += "property float red\nproperty float green\nproperty float blue\n"
        cols += 3
    if mesh.uvs is not None:
        vprops += "property float u\nproperty float v\n"
        cols += 2
    header = _PLY_HEADER.format(nv=mesh.num_vertices, nf=mesh.num_triangles, vprops=vprops)
    vdata = np.empty((mesh.num_vertices, cols), dtype="<f4")
    vdata[:, :3] = mesh.vertices
    col = 3
    if mesh.colors is not None:
        vdata[:, col:col + 3] = mesh.colors
        col += 3
    if mesh.uvs is not None:
        vdata[:, col:col + 2] = mesh.uvs
    fdata = np.empty((mesh.num_triangles, 13), dtype=np.uint8)
    fdata[:, 0] = 3
    fdata[:, 1:] = mesh.triangles.astype("<i4").view(np.uint8).reshape(-1, 12)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vdata.tobytes())
        fh.write(fdata.tobytes())


def _load_ply(path: Path) -> TriMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError("not a PLY file: %s" % path.name)
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]

    fmt = next((l.split()[1] for l in header if l.startswith("format")), "")
    if fmt != "binary_little_endian":
        raise MeshError("unsupported PLY format %r in %s" % (fmt, path.name))
    nv = nf = 0
    vprops = []
    current = None
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                nv = int(parts[2])
            elif current == "face":
                nf = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            if parts[1] != "float" and parts[1] != "uchar":
                raise MeshError("unsupported vertex property type %r" % parts[1])
            vprops.append((parts[2], parts[1]))

    names = [n for n, _ in vprops]
    itemsize = sum(4 if t == "float" else 1 for _, t in vprops)
    need = nv * itemsize
    if len(body) < need:
        raise MeshError("truncated PLY %s: expected %d vertex bytes, got %d" % (path.name, need, len(body)))
    vraw = body[:need]
    dtype = np.dtype([(n, "<f4" if t == "float" else "u1") for n, t in vprops])
    varr = np.frombuffer(vraw, dtype=dtype, count=nv)

    def grab(keys, scale=1.0):
        if not all(k in names for k in keys):
            return None
        out = np.stack([varr[k].astype(np.float64) for k in keys], axis=1)
        return out * scale

    verts = grab(("x", "y", "z"))
    if verts is None:
        raise MeshError("PLY %s missing x/y/z vertex properties" % path.name)
    colors = grab(("red", "green", "blue"))
    if colors is not None and dict(vprops).get("red") == "uchar":
        colors = colors / 255.0
    uvs = grab(("u", "v"))

    faces = np.zeros((nf, 3), dtype=np.int64)
    off = need
    for i in range(nf):
        if off + 13 > len(body):
            raise MeshError("truncated PLY %s: expected %d faces, file ends at face %d" % (path.name, nf, i))
        cnt = body[off]
        if cnt != 3:
            raise MeshError("face %d in %s has %d vertices (triangles only)" % (i, path.name, cnt))
        faces[i] = struct.unpack_from("<3i", body, off + 1)
        off += 13
    if nf and (faces.max() >= nv or faces.min() < 0):
        bad = int(np.argmax((faces >= nv).any(axis=1) | (faces < 0).any(axis=1)))
        raise MeshError("face %d references out-of-range vertex index in %s" % (bad, path.name))
    return TriMesh(verts, faces, colors=colors, uvs=uvs)


# ---------------------------------------------------------------------------
# Landmark files: JSON array of {vertexIndex, x, y} (2D, px) or
# {vertexIndex, x, y, z} (3D, mm).
# ---------------------------------------------------------------------------

def save_landmarks(landmarks: LandmarkSet, path) -> None:
    records = []
    for i, vi in enumerate(landmarks.vertex_indices):
        rec = {"vertexIndex": int(vi)}
        if landmarks.points3d is not None:
            rec["x"], rec["y"], rec["z"] = (float(v) for v in landmarks.points3d[i])
        elif landmarks.points2d is not None:
            rec["x"], rec["y"] = (float(v) for v in landmarks.points2d[i])
        records.append(rec)
    Path(path).write_text(json.dumps(records, indent=1))


def load_landmarks(path) -> LandmarkSet:
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list):
        raise MeshError("landmark file %s: expected a JSON array" % path)
    idx = [int(r["vertexIndex"]) for r in records]
    if records and "z" in records[0]:
        pts = np.array([[r["x"], r["y"], r["z"]] for r in records], dtype=np.float64)
        return LandmarkSet(idx, points3d=pts)
    if records and "x" in records[0]:
        pts = np.array([[r["x"], r["y"]] for r in records], dtype=np.float64)
        return LandmarkSet(idx, points2d=pts)
    return LandmarkSet(idx)
