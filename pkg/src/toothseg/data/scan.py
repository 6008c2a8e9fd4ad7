"""Labelled scans: ingestion, FDI mapping, downsampling and input features."""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..geometry import PointSet, farthest_point_sample
from .mesh import IngestionError, TriangleMesh, first_incident_face, read_obj, vertex_normals

NUM_CATEGORIES = 16
INPUT_CHANNELS = 24


@dataclass(frozen=True)
class Scan:
    points: PointSet
    face_vertex_coords: np.ndarray  # N x 3 x 3
    face_vertex_normals: np.ndarray  # N x 3 x 3
    instance_ids: np.ndarray  # N, 0 = gingiva, 1..16 tooth position
    categories: np.ndarray  # N, 0..16
    scan_id: str = "scan"
    face_index: np.ndarray = None  # N, face of the source mesh each point refers to

    def __post_init__(self):
        n = len(self.points)
        for name in ("face_vertex_coords", "face_vertex_normals"):
            if getattr(self, name).shape != (n, 3, 3):
                raise ValueError(f"{name} must be {n} x 3 x 3")
        if self.instance_ids.shape != (n,) or self.categories.shape != (n,):
            raise ValueError("label arrays must have one entry per point")
        if not np.array_equal(self.instance_ids == 0, self.categories == 0):
            raise ValueError("instance id 0 must coincide exactly with category 0")
        if self.categories.min() < 0 or self.categories.max() > NUM_CATEGORIES:
            raise ValueError("categories must lie in [0, 16]")

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "Scan":
        idx = np.asarray(idx)
        return replace(
            self,
            points=PointSet(self.points.coords[idx], self.points.normals[idx]),
            face_vertex_coords=self.face_vertex_coords[idx],
            face_vertex_normals=self.face_vertex_normals[idx],
            instance_ids=self.instance_ids[idx],
            categories=self.categories[idx],
            face_index=None if self.face_index is None else self.face_index[idx],
        )


def fdi_to_category(fdi: int, mirror_categories: bool = False) -> int:
    """Maxillary FDI code -> category. 0 stays gingiva, 11-18 -> 1-8 and
    21-28 -> 9-16 (or 1-8 when both sides share categories)."""
    fdi = int(fdi)
    if fdi == 0:
        return 0
    quadrant, position = divmod(fdi, 10)
    if quadrant in (1, 2) and 1 <= position <= 8:
        if quadrant == 1 or mirror_categories:
            return position
        return 8 + position
    raise ValueError(f"unsupported FDI code {fdi} (only 0, 11-18 and 21-28 are accepted)")


def category_to_fdi(category: int) -> int:
    if category == 0:
        return 0
    if 1 <= category <= 8:
        return 10 + category
    if 9 <= category <= 16:
        return 20 + category - 8
    raise ValueError(f"category {category} out of range")


def scan_from_mesh(mesh: TriangleMesh, fdi_labels, scan_id="scan", mirror_categories=False, source="mesh") -> Scan:
    coords = mesh.vertices
    n = len(coords)
    fdi_labels = np.asarray(fdi_labels, dtype=np.int64)
    if len(fdi_labels) != n:
        raise IngestionError(f"{source}: {len(fdi_labels)} labels for {n} vertices")
    if mesh.vertex_normals is not None:
        normals = mesh.vertex_normals / np.linalg.norm(mesh.vertex_normals, axis=1, keepdims=True)
    else:
        normals = vertex_normals(coords, mesh.faces)
    face_of = first_incident_face(n, mesh.faces)
    if (face_of < 0).any():
        raise IngestionError(f"{source}: {(face_of < 0).sum()} vertices belong to no face")
    corners = mesh.faces[face_of]  # N x 3 vertex ids
    try:
        categories = np.array([fdi_to_category(c, mirror_categories) for c in fdi_labels], dtype=np.int64)
        positions = np.array([fdi_to_category(c) for c in fdi_labels], dtype=np.int64)
    except ValueError as exc:
        raise IngestionError(f"{source}: {exc}") from exc
    return Scan(
        points=PointSet(coords, normals),
        face_vertex_coords=coords[corners],
        face_vertex_normals=normals[corners],
        instance_ids=positions,
        categories=categories,
        scan_id=scan_id,
        face_index=face_of,
    )


def read_labels(label_path):
    label_path = Path(label_path)
    if not label_path.is_file():
        raise IngestionError(f"{label_path}: label file not found")
    try:
        data = json.loads(label_path.read_text(encoding="utf-8"))
        labels = np.asarray(data["labels"], dtype=np.int64)
        instances = np.asarray(data["instances"], dtype=np.int64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"{label_path}: invalid label file ({exc})") from exc
    if labels.shape != instances.shape or labels.ndim != 1:
        raise IngestionError(f"{label_path}: 'labels' and 'instances' must be equal-length integer arrays")
    return labels, instances


def load_scan(mesh_path, label_path, mirror_categories: bool = False) -> Scan:
    mesh = read_obj(mesh_path)
    labels, _ = read_labels(label_path)
    if len(labels) != len(mesh.vertices):
        raise IngestionError(f"{label_path}: {len(labels)} labels but {mesh_path} has {len(mesh.vertices)} vertices")
    return scan_from_mesh(mesh, labels, Path(mesh_path).stem, mirror_categories, source=str(label_path))


def downsample_scan(scan: Scan, target: int, seed: int = 0) -> Scan:
    """FPS subsampling to ``target`` points (start index 0), kept points in
    their original order. ``seed`` is accepted for interface stability; the
    procedure has no randomness."""
    if target < 1:
        raise ValueError("target must be >= 1")
    if len(scan) <= target:
        return scan
    keep = np.sort(farthest_point_sample(scan.points.coords, target, 0))
    return scan.subset(keep)


def build_input_features(scan: Scan) -> np.ndarray:
    """N x 24: coord, normal, the 3 face corner coords, the 3 corner normals."""
    if scan.face_vertex_coords is None or scan.face_vertex_normals is None:
        raise ValueError("scan has no face data")
    n = len(scan)
    return np.concatenate(
        [
            scan.points.coords,
            scan.points.normals,
            scan.face_vertex_coords.reshape(n, 9),
            scan.face_vertex_normals.reshape(n, 9),
        ],
        axis=1,
    )


def save_scan(path, scan: Scan):
    np.savez(
        path,
        coords=scan.points.coords,
        normals=scan.points.normals,
        face_vertex_coords=scan.face_vertex_coords,
        face_vertex_normals=scan.face_vertex_normals,
        instance_ids=scan.instance_ids,
        categories=scan.categories,
        face_index=np.full(len(scan), -1) if scan.face_index is None else scan.face_index,
        scan_id=np.array(scan.scan_id),
    )


def load_processed_scan(path) -> Scan:
    path = Path(path)
    try:
        with np.load(path) as z:
            return Scan(
                points=PointSet(z["coords"], z["normals"]),
                face_vertex_coords=z["face_vertex_coords"],
                face_vertex_normals=z["face_vertex_normals"],
                instance_ids=z["instance_ids"],
                categories=z["categories"],
                scan_id=str(z["scan_id"]),
                face_index=z["face_index"],
            )
    except (OSError, KeyError, ValueError) as exc:
        raise IngestionError(f"{path}: cannot read processed scan ({exc})") from exc
