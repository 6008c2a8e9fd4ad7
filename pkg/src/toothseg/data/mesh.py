"""Minimal Wavefront OBJ reading/writing for triangle meshes."""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


class IngestionError(ValueError):
    """A mesh or label file could not be ingested; the message names the file."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # V x 3
    faces: np.ndarray  # F x 3, 0-based
    vertex_normals: Optional[np.ndarray] = None  # V x 3 when the file supplies them


def read_obj(path) -> TriangleMesh:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: mesh file not found")
    verts, normals, faces, face_normal_refs = [], [], [], []
    with path.open("r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                tag = parts[0]
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    refs = [p.split("/") for p in parts[1:]]
                    idx = [int(r[0]) for r in refs]
                    nidx = [int(r[2]) if len(r) > 2 and r[2] else 0 for r in refs]
                    # fan-triangulate polygons
                    for j in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[j], idx[j + 1]])
                        face_normal_refs.append([nidx[0], nidx[j], nidx[j + 1]])
            except (ValueError, IndexError) as exc:
                raise IngestionError(f"{path}:{lineno}: malformed line {line.strip()!r}") from exc
    if not verts:
        raise IngestionError(f"{path}: no vertices")
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    n_v = len(v)
    f = np.where(f < 0, f + n_v, f - 1)  # OBJ is 1-based; negatives count from the end
    if f.size and (f.min() < 0 or f.max() >= n_v):
        raise IngestionError(f"{path}: face references a missing vertex")

    vn = None
    if normals and len(normals) == n_v:
        vn = np.asarray(normals, dtype=np.float64)
    return TriangleMesh(v, f, vn)


def write_obj(path, mesh: TriangleMesh, write_normals: bool = False):
    """Write with ``repr`` floats so a read gives back identical values."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if write_normals and mesh.vertex_normals is not None:
        lines += [f"vn {x!r} {y!r} {z!r}" for x, y, z in mesh.vertex_normals.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def face_normals(vertices, faces, normalize=True):
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    n = np.cross(b - a, c - a)  # length = 2 * area
    if normalize:
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return n


def vertex_normals(vertices, faces) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length.
    Vertices with no usable incident area get +z."""
    acc = np.zeros_like(vertices)
    fn = face_normals(vertices, faces, normalize=False)
    for i in range(3):
        np.add.at(acc, faces[:, i], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    out = np.zeros_like(vertices)
    out[:, 2] = 1.0
    ok = norm[:, 0] > 1e-12
    out[ok] = acc[ok] / norm[ok]
    return out


def first_incident_face(n_vertices, faces) -> np.ndarray:
    """Lowest-index face touching each vertex, -1 for isolated vertices."""
    out = np.full(n_vertices, np.iinfo(np.int64).max)
    face_ids = np.arange(len(faces))
    for i in range(3):
        np.minimum.at(out, faces[:, i], face_ids)
    out[out == np.iinfo(np.int64).max] = -1
    return out
