"""Iso-surface extraction and mesh / point cloud I/O."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import StructuralError


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise StructuralError("face index out of range")
            f = self.faces
            if ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
                raise StructuralError("degenerate triangle with repeated indices")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def _cube_mask(mask: np.ndarray) -> np.ndarray:
    """Mark a cube valid only when all 8 corners are; skimage reads it at the cube's far corner."""
    ok = np.ones(tuple(d - 1 for d in mask.shape), dtype=bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ok &= mask[dx : dx + ok.shape[0], dy : dy + ok.shape[1], dz : dz + ok.shape[2]]
    out = np.zeros_like(mask)
    out[1:, 1:, 1:] = ok
    return out


def marching_cubes(tsdf, iso: float = 0.0, mask: np.ndarray | None = None) -> TriangleMesh:
    """Lorensen-Cline extraction (256-case table, no ambiguity resolution).

    Vertices are returned in world meters, ``origin + index * voxel_size``.
    A grid without an iso crossing yields an empty mesh.  With ``mask``,
    cubes touching a masked-out voxel are skipped.
    """
    values = np.asarray(tsdf.values, dtype=np.float64)
    if values.size == 0 or min(values.shape) < 2:
        return TriangleMesh.empty()
    inside = values < iso
    if mask is not None:
        inside = inside[mask]
        outside = (values >= iso)[mask]
    else:
        outside = ~inside
    if not inside.any() or not outside.any():
        return TriangleMesh.empty()
    if mask is not None:
        mask = _cube_mask(np.asarray(mask, dtype=bool))
    try:
        verts, faces, _, _ = measure.marching_cubes(
            values, level=iso, method="lorensen", mask=mask, allow_degenerate=False
        )
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    verts = np.asarray(tsdf.origin, dtype=np.float64) + verts * tsdf.voxel_size
    return TriangleMesh(verts, faces)


def sample_points(mesh: TriangleMesh, count: int, seed: int = 0) -> np.ndarray:
    """Points uniformly distributed over the surface area."""
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0:
        raise StructuralError("mesh has zero surface area")
    face = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    v = mesh.vertices[mesh.faces[face]]
    return (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]


def export_ply(mesh: TriangleMesh) -> bytes:
    """Binary little-endian PLY: float x, y, z vertices and uchar-count int faces."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.faces)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    ).encode("ascii")
    verts = np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes()
    rec = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    faces = np.empty(len(mesh.faces), dtype=rec)
    faces["n"] = 3
    faces["idx"] = mesh.faces
    return header + verts + faces.tobytes()


def read_ply(data: bytes) -> TriangleMesh:
    """Parse the binary PLY layout written by :func:`export_ply`."""
    buf = io.BytesIO(data)
    if buf.readline().strip() != b"ply":
        raise StructuralError("not a PLY file")
    counts = {}
    fmt = None
    while True:
        line = buf.readline()
        if not line:
            raise StructuralError("truncated PLY header")
        tok = line.decode("ascii").split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            counts[tok[1]] = int(tok[2])
        elif tok[0] == "end_header":
            break
    if fmt != "binary_little_endian":
        raise StructuralError(f"unsupported PLY format {fmt}")
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    verts = np.frombuffer(buf.read(12 * nv), dtype="<f4").reshape(nv, 3)
    rec = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    faces = np.frombuffer(buf.read(rec.itemsize * nf), dtype=rec)
    if nf and (faces["n"] != 3).any():
        raise StructuralError("only triangle faces are supported")
    return TriangleMesh(verts.astype(np.float64), faces["idx"].astype(np.int64))


def write_ply(mesh: TriangleMesh, path) -> None:
    with open(path, "wb") as fh:
        fh.write(export_ply(mesh))


def load_ply(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        return read_ply(fh.read())


def write_xyz(points: np.ndarray, path) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64).reshape(-1, 3), fmt="%.6f")
