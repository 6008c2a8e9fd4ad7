"""Procedural maxillary arches: superellipsoid crowns on a parabolic arch
above a gum band. Labels are known by construction."""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .mesh import TriangleMesh, write_obj
from .scan import Scan, category_to_fdi, downsample_scan, scan_from_mesh

# per tooth position 1..8 (central incisor .. third molar), millimetres
MESIODISTAL = np.array([8.5, 6.5, 7.5, 7.0, 6.5, 10.0, 9.0, 8.5])
BUCCOLINGUAL = np.array([7.0, 6.0, 8.0, 9.0, 9.0, 11.0, 10.5, 10.0])
CROWN_HEIGHT = np.array([10.0, 9.0, 10.0, 8.5, 8.0, 7.0, 6.5, 6.0])
SQUARENESS = np.array([0.6, 0.6, 0.7, 0.5, 0.5, 0.35, 0.35, 0.4])
ARCH_CURVATURE = 0.05  # y = c * x^2
INTERPROXIMAL_GAP = 0.4


@dataclass
class SynthConfig:
    n_teeth: int = 14
    missing: Tuple[int, ...] = ()
    jitter: float = 0.3
    points_per_scan: int = 2048
    seed: int = 0
    tooth_resolution: Tuple[int, int] = (24, 9)
    gum_spacing: float = 1.0

    def __post_init__(self):
        self.missing = tuple(sorted(int(m) for m in self.missing))
        self.tooth_resolution = tuple(self.tooth_resolution)
        if not 1 <= self.n_teeth <= 16:
            raise ValueError("n_teeth must lie in [1, 16]")
        if any(not 1 <= m <= 16 for m in self.missing):
            raise ValueError("missing indices must lie in [1, 16]")
        if self.points_per_scan < 64:
            raise ValueError("points_per_scan must be >= 64")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


def present_categories(config: SynthConfig):
    """Categories placed in the arch, ordered from the distal right (18)
    to the distal left (28). 14 teeth omit both third molars, 15 adds 18."""
    order = [8, 7, 6, 5, 4, 3, 2, 1, 9, 10, 11, 12, 13, 14, 15, 16]
    n_drop = 16 - config.n_teeth
    # drop symmetric pairs from the distal ends, left side first
    dropped = set()
    left, right = 16, 8
    while len(dropped) < n_drop:
        dropped.add(left)
        left -= 1
        if len(dropped) < n_drop:
            dropped.add(right)
            right -= 1
    return [c for c in order if c not in dropped], dropped


def _arch_frame(n_samples=4000, half_width=40.0):
    xs = np.linspace(-half_width, half_width, n_samples)
    ys = ARCH_CURVATURE * xs**2
    seg = np.hypot(np.diff(xs), np.diff(ys))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    arc -= np.interp(0.0, xs, arc)
    return xs, arc


def _arch_point(s, xs, arc):
    """Position, tangent and outward (buccal) normal at signed arc length s."""
    x = np.interp(s, arc, xs)
    y = ARCH_CURVATURE * x**2
    t = np.array([1.0, 2 * ARCH_CURVATURE * x])
    t /= np.linalg.norm(t)
    outward = np.array([t[1], -t[0]])  # points away from the palate (towards -y at the front)
    return np.array([x, y]), t, outward


def _crown_mesh(semi, squareness, res):
    """Open-bottom superellipsoid cap in local coordinates (z up)."""
    n_u, n_v = res
    us = np.linspace(-np.pi, np.pi, n_u, endpoint=False)
    vs = np.linspace(0.0, 0.58 * np.pi, n_v + 1)[1:]  # polar angle from the top
    sgn_pow = lambda a, e: np.sign(a) * np.abs(a) ** e
    e = squareness
    verts = [[0.0, 0.0, semi[2]]]
    for v in vs:
        for u in us:
            x = semi[0] * sgn_pow(np.sin(v), e) * sgn_pow(np.cos(u), e)
            y = semi[1] * sgn_pow(np.sin(v), e) * sgn_pow(np.sin(u), e)
            z = semi[2] * sgn_pow(np.cos(v), e)
            verts.append([x, y, z])
    faces = []
    for j in range(n_u):  # top fan
        faces.append([0, 1 + j, 1 + (j + 1) % n_u])
    for i in range(n_v - 1):
        r0, r1 = 1 + i * n_u, 1 + (i + 1) * n_u
        for j in range(n_u):
            a, b = r0 + j, r0 + (j + 1) % n_u
            c, d = r1 + j, r1 + (j + 1) % n_u
            faces += [[a, c, b], [b, c, d]]
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


def synthetic_arch_mesh(config: SynthConfig):
    """Returns (mesh, per-vertex FDI labels, per-vertex instance ids)."""
    rng = np.random.default_rng(config.seed)
    xs, arc = _arch_frame()
    cats, _ = present_categories(config)
    widths = [MESIODISTAL[(c - 1) % 8] for c in cats]
    total = sum(widths) + INTERPROXIMAL_GAP * (len(cats) - 1)
    # centre the incisor contact (between 11 and 21) at arc length 0
    right = [c for c in cats if c <= 8]
    right_len = sum(MESIODISTAL[(c - 1) % 8] for c in right) + INTERPROXIMAL_GAP * max(len(right) - 0.5, 0)
    start = -right_len if right else -total / 2

    verts, faces, fdi, inst = [], [], [], []
    n_vert = 0
    footprints = []
    s = start
    for c, w in zip(cats, widths):
        centre_s = s + w / 2
        s += w + INTERPROXIMAL_GAP
        if c in config.missing:
            continue
        pos = (c - 1) % 8
        semi = np.array([w / 2, BUCCOLINGUAL[pos] / 2, CROWN_HEIGHT[pos] / 2])
        semi *= 1.0 + 0.03 * rng.standard_normal(3)
        base, tangent, outward = _arch_point(centre_s, xs, arc)
        base = base + rng.normal(0.0, config.jitter, 2)
        angle = rng.normal(0.0, np.deg2rad(4.0)) * (config.jitter > 0)
        ca, sa = np.cos(angle), np.sin(angle)
        tx = ca * tangent + sa * outward
        ty = -sa * tangent + ca * outward
        local, lf = _crown_mesh(semi, SQUARENESS[pos], config.tooth_resolution)
        world = np.empty_like(local)
        world[:, :2] = base + local[:, :1] * tx + local[:, 1:2] * ty
        world[:, 2] = local[:, 2] + 0.35 * semi[2]
        world += rng.normal(0.0, 0.02, world.shape)
        verts.append(world)
        faces.append(lf + n_vert)
        n_vert += len(world)
        fdi += [category_to_fdi(c)] * len(world)
        inst += [c] * len(world)
        footprints.append((base, tx, ty, semi[:2] * 1.02))

    # gum band: grid over (arc length, buccolingual offset)
    s_lo, s_hi = start - 3.0, start + total + 3.0
    ss = np.arange(s_lo, s_hi + 1e-9, config.gum_spacing)
    ts = np.arange(-10.0, 10.0 + 1e-9, config.gum_spacing)
    grid = np.zeros((len(ss), len(ts), 3))
    for i, sv in enumerate(ss):
        p, _, out = _arch_point(sv, xs, arc)
        grid[i, :, :2] = p + ts[:, None] * out
        grid[i, :, 2] = -0.06 * ts**2 + 0.8 * np.exp(-(ts / 5.0) ** 2) - 0.5
    grid[..., 2] += rng.normal(0.0, 0.02, grid.shape[:2])
    flat = grid.reshape(-1, 3)
    inside = np.zeros(len(flat), dtype=bool)
    for base, tx, ty, half in footprints:
        rel = flat[:, :2] - base
        u, v = rel @ tx / half[0], rel @ ty / half[1]
        inside |= u**2 + v**2 < 1.0
    keep_ids = np.full(len(flat), -1)
    keep_ids[~inside] = np.arange((~inside).sum()) + n_vert
    gum_faces = []
    nt = len(ts)
    for i in range(len(ss) - 1):
        for j in range(nt - 1):
            a, b, c2, d = i * nt + j, i * nt + j + 1, (i + 1) * nt + j, (i + 1) * nt + j + 1
            for tri in ((a, c2, b), (b, c2, d)):
                ids = keep_ids[list(tri)]
                if (ids >= 0).all():
                    gum_faces.append(ids)
    gum_faces = np.asarray(gum_faces, dtype=np.int64).reshape(-1, 3)
    gum_verts = flat[~inside]
    used = np.zeros(len(gum_verts), dtype=bool)
    used[(gum_faces - n_vert).ravel()] = True
    remap = np.cumsum(used) - 1 + n_vert
    gum_faces = remap[gum_faces - n_vert]
    gum_verts = gum_verts[used]
    verts.append(gum_verts)
    faces.append(gum_faces)
    fdi += [0] * len(gum_verts)
    inst += [0] * len(gum_verts)

    mesh = TriangleMesh(np.concatenate(verts), np.concatenate(faces))
    return mesh, np.asarray(fdi, dtype=np.int64), np.asarray(inst, dtype=np.int64)


def generate_synthetic_arch(config: SynthConfig, scan_id: str = None) -> Scan:
    mesh, fdi, _ = synthetic_arch_mesh(config)
    scan = scan_from_mesh(mesh, fdi, scan_id or f"synth_{config.seed:04d}")
    return downsample_scan(scan, config.points_per_scan)


def write_synthetic_arch(config: SynthConfig, out_dir, scan_id: str = None):
    """Write ``<id>.obj`` and ``<id>.json`` in the raw ingestion format."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scan_id = scan_id or f"synth_{config.seed:04d}"
    mesh, fdi, inst = synthetic_arch_mesh(config)
    write_obj(out_dir / f"{scan_id}.obj", mesh)
    labels = {"id_patient": scan_id, "jaw": "upper", "labels": fdi.tolist(), "instances": inst.tolist()}
    (out_dir / f"{scan_id}.json").write_text(json.dumps(labels), encoding="utf-8")
    return out_dir / f"{scan_id}.obj", out_dir / f"{scan_id}.json"


def overfit_corpus_configs(seed: int = 0, points: int = 2048):
    """Eight arches with 14-16 teeth present: one has a gap where a tooth is
    missing and one carries all 16, both wisdom teeth included."""
    layouts = [
        dict(n_teeth=14), dict(n_teeth=14), dict(n_teeth=15, missing=(5,)), dict(n_teeth=15),
        dict(n_teeth=14), dict(n_teeth=16), dict(n_teeth=14), dict(n_teeth=15),
    ]
    return [SynthConfig(points_per_scan=points, seed=seed * 100 + i, **s) for i, s in enumerate(layouts)]
