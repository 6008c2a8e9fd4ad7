"""File-level stages: ingestion, inference, graph-cut post-processing and
evaluation. Every stage reads and writes directories of per-scan files and
processes scans in sorted order, so outputs do not depend on worker count."""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import Config
from .data.formats import read_prediction, write_prediction
from .data.mesh import IngestionError
from .data.scan import Scan, downsample_scan, load_processed_scan, load_scan, save_scan
from .graphcut import refine_labels, reproject_instances
from .head import InstancePrediction
from .losses import ground_truth_instances
from .metrics import REPORT_THRESHOLDS, ScoredInstance, mean_ap, semantic_metrics
from .model import prepare_sample

PALETTE = np.array(
    [
        [230, 180, 170], [31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189],
        [140, 86, 75], [227, 119, 194], [127, 127, 127], [188, 189, 34], [23, 190, 207], [57, 59, 121],
        [99, 121, 57], [140, 109, 49], [132, 60, 57], [123, 65, 115], [82, 84, 163],
    ],
    dtype=np.uint8,
)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def _files(directory, pattern) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"input directory {directory} does not exist")
    return sorted(directory.glob(pattern))


def load_corpus(directory) -> List[Scan]:
    files = _files(directory, "*.npz")
    if not files:
        raise IngestionError(f"{directory}: no processed scans (*.npz)")
    return [load_processed_scan(f) for f in files]


def prepare_corpus(raw_dir, out_dir, config: Config, workers: int = 1) -> List[Path]:
    """Ingest every ``<id>.obj`` + ``<id>.json`` pair, downsample and save
    ``<id>.npz``."""
    meshes = _files(raw_dir, "*.obj")
    if not meshes:
        raise IngestionError(f"{raw_dir}: no .obj meshes found")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(mesh_path):
        scan = load_scan(mesh_path, mesh_path.with_suffix(".json"), config.data.mirror_categories)
        scan = downsample_scan(scan, config.data.points)
        path = out_dir / f"{scan.scan_id}.npz"
        save_scan(path, scan)
        return path

    return _map(one, meshes, workers)


def ground_truth_prediction(scan: Scan):
    """(P, instances) that reproduce the reference labels exactly."""
    probs = np.zeros((len(scan), 17))
    probs[np.arange(len(scan)), scan.categories] = 1.0
    instances = []
    for gt in ground_truth_instances(scan.instance_ids, scan.categories):
        dist = np.zeros(17)
        dist[gt.category] = 1.0
        instances.append(InstancePrediction(gt.mask.astype(np.float64), dist, 1.0))
    return probs, instances


def infer_corpus(model, scans: List[Scan], out_dir, workers: int = 1) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(scan):
        instances, probs = model.predict(prepare_sample(scan, model.config))
        return write_prediction(scan.scan_id, probs, instances, out_dir / f"{scan.scan_id}.batp")

    # the model is shared, so inference stays on one thread
    return [one(s) for s in scans]


def write_ply(path, coords, labels):
    colors = PALETTE[np.asarray(labels) % len(PALETTE)]
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(coords)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue", "end_header",
    ]
    lines += [f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(coords, colors)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def postprocess_scan(scan: Scan, probs, instances, config: Config):
    """Refined (P, instances): P becomes one-hot on the refined labels."""
    gc = config.graphcut
    refined = refine_labels(probs, scan.points, gc.k, gc.smoothing_lambda, gc.eps, gc.method)
    out_probs = np.zeros_like(np.asarray(probs, dtype=np.float64))
    out_probs[np.arange(len(refined)), refined] = 1.0
    return refined, out_probs, reproject_instances(refined, instances, out_probs.shape[1] - 1)


def postprocess_corpus(pred_dir, scans: List[Scan], out_dir, config: Config, workers: int = 1, export_ply=True):
    """Writes ``<id>.batp`` (refined) plus ``<id>.before.ply`` and
    ``<id>.after.ply`` label-coloured point clouds."""
    by_id = {s.scan_id: s for s in scans}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = _files(pred_dir, "*.batp")
    if not files:
        raise FileNotFoundError(f"{pred_dir}: no prediction files (*.batp)")

    def one(path):
        scan_id, probs, instances = read_prediction(path)
        if scan_id not in by_id:
            raise IngestionError(f"{path}: no processed scan named {scan_id}")
        scan = by_id[scan_id]
        refined, out_probs, out_inst = postprocess_scan(scan, probs, instances, config)
        target = write_prediction(scan_id, out_probs, out_inst, out_dir / f"{scan_id}.batp")
        if export_ply:
            write_ply(out_dir / f"{scan_id}.before.ply", scan.points.coords, np.argmax(probs, axis=1))
            write_ply(out_dir / f"{scan_id}.after.ply", scan.points.coords, refined)
        return target

    return _map(one, files, workers)


@dataclass
class ScanReport:
    scan_id: str
    oa: float
    macc: float
    miou: float
    ap: Dict[float, float]
    map_value: float
    per_class_dice: np.ndarray


def evaluate_prediction(scan: Scan, probs, instances, config: Config) -> ScanReport:
    sem = semantic_metrics(np.argmax(probs, axis=1), scan.categories)
    preds = [ScoredInstance(p.binary_mask, p.score) for p in instances]
    gts = [g.mask for g in ground_truth_instances(scan.instance_ids, scan.categories)]
    ap = mean_ap(preds, gts, config.metrics.thresholds, config.metrics.interpolation)
    return ScanReport(scan.scan_id, sem.oa, sem.macc, sem.miou, ap.ap_at, ap.map_value, sem.per_class_dice)


def _columns():
    return ["scan_id", "OA", "mACC", "mIoU"] + [f"AP@{t:.1f}" for t in REPORT_THRESHOLDS] + ["mAP"] + [
        f"Dice_T{c}" for c in range(17)
    ]


def _row(name, oa, macc, miou, ap, map_value, dice):
    return [name, oa, macc, miou] + [ap[t] for t in REPORT_THRESHOLDS] + [map_value] + list(dice)


def summarize(reports: List[ScanReport]):
    """Macro average over scans; per-class Dice averages the scans where the
    class occurs in the reference or prediction."""
    mean = lambda xs: float(np.mean(xs)) if len(xs) else float("nan")
    dice = np.stack([r.per_class_dice for r in reports])
    with np.errstate(invalid="ignore"):
        dice_mean = [float(np.nanmean(col)) if np.isfinite(col).any() else float("nan") for col in dice.T]
    return _row(
        "mean",
        mean([r.oa for r in reports]),
        mean([r.macc for r in reports]),
        mean([r.miou for r in reports]),
        {t: mean([r.ap[t] for r in reports]) for t in REPORT_THRESHOLDS},
        mean([r.map_value for r in reports]),
        dice_mean,
    )


def evaluate_corpus(pred_dir, scans: List[Scan], config: Config, out_dir: Optional[Path] = None, workers: int = 1):
    """Returns (per-scan reports, summary row). Writes ``metrics.csv`` and
    ``metrics.txt`` when ``out_dir`` is given."""
    by_id = {s.scan_id: s for s in scans}
    files = _files(pred_dir, "*.batp")
    if not files:
        raise FileNotFoundError(f"{pred_dir}: no prediction files (*.batp)")

    def one(path):
        scan_id, probs, instances = read_prediction(path)
        if scan_id not in by_id:
            raise IngestionError(f"{path}: no processed scan named {scan_id}")
        return evaluate_prediction(by_id[scan_id], probs, instances, config)

    reports = _map(one, files, workers)
    summary = summarize(reports)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = [_row(r.scan_id, r.oa, r.macc, r.miou, r.ap, r.map_value, r.per_class_dice) for r in reports]
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_columns())
            for row in rows + [summary]:
                writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
        (out_dir / "metrics.txt").write_text(format_table(summary) + "\n", encoding="utf-8")
    return reports, summary


def format_table(summary) -> str:
    cols = _columns()[1:8]
    head = " | ".join(f"{c:>7}" for c in cols)
    vals = " | ".join(f"{100 * v:7.2f}" for v in summary[1:8])
    dice = ", ".join(f"T{c}={100 * v:.2f}" for c, v in enumerate(summary[8:]) if np.isfinite(v))
    return f"{head}\n{vals}\nper-class Dice (%): {dice}"
