"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

The overfit experiment (criterion 8) and the boundary-loss ablation (9b)
each train the desk-sized model for 200 epochs on CPU, which takes several
minutes apiece.
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from toothseg.cli import run_command
from toothseg.config import Config, desk_config
from toothseg.data.formats import read_prediction, write_prediction
from toothseg.data.synth import generate_synthetic_arch, overfit_corpus_configs
from toothseg.geometry import extract_boundary_set, farthest_point_sample, knn_excluding_self, knn_indices
from toothseg.graphcut import PottsProblem, alpha_expansion, edge_weights, energy, unary_costs
from toothseg.head import InstancePrediction
from toothseg.losses import instance_boundary_loss
from toothseg.matching import hungarian_match
from toothseg.metrics import AP_THRESHOLDS, ScoredInstance, instance_ap, mean_ap, semantic_metrics
from toothseg.model import prepare_sample
from toothseg.pipeline import evaluate_corpus, infer_corpus, postprocess_corpus
from toothseg.training import load_model, make_optimizer, run_training, train_step, write_training_checkpoint

from acceptance_log import DURATIONS, record
from oracles import brute_force_assignment_cost, brute_force_potts, naive_fps, naive_knn

TESTS_DIR = Path(__file__).parent


def _timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


# 1 ---------------------------------------------------------------------------


def test_c1_assignment_matches_enumeration():
    def run():
        rng = np.random.default_rng(2024)
        mismatches = []
        for trial in range(200):
            m, g = (int(x) for x in rng.integers(1, 8, 2))
            # multiples of 2**-10 below 8: every partial sum is exact in float64
            cost = rng.integers(0, 8 * 1024, (m, g)) / 1024.0
            if trial % 4 == 0:
                cost = np.round(cost * 4) / 4  # plenty of ties
            if hungarian_match(cost).total(cost) != brute_force_assignment_cost(cost):
                mismatches.append(trial)
        return mismatches

    mismatches, secs = _timed(run)
    ok = record(1, "assignment oracle", not mismatches and secs < 10, f"({len(mismatches)} mismatches, {secs:.2f}s)")
    assert ok


# 2 ---------------------------------------------------------------------------


def test_c2_graphcut_near_exhaustive_optimum():
    def run():
        rng = np.random.default_rng(7)
        worst, failures = 1.0, []
        for trial in range(100):
            n, n_labels = int(rng.integers(2, 10)), int(rng.integers(2, 4))
            pairs = [(p, q) for p in range(n) for q in range(p + 1, n) if rng.random() < 0.4] or [(0, 1)]
            probs = rng.dirichlet(np.ones(n_labels), n)
            prob = PottsProblem(unary_costs(probs), pairs, rng.random(len(pairs)), float(rng.uniform(0.1, 4)))
            labels, history = alpha_expansion(prob)
            best, _ = brute_force_potts(prob.unary, [(p, q, w) for (p, q), w in zip(prob.edges, prob.weights)],
                                        prob.smoothing_lambda)
            final = energy(labels, prob)
            gap = final - best
            worst = max(worst, final / best if best > 0 else 1.0)
            ok = (
                final <= history[0] + 1e-12
                and all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
                and gap <= 0.05 * abs(best) + 1e-9
                and gap <= abs(best) + 1e-9
            )
            if not ok:
                failures.append(trial)
        return failures, worst

    (failures, worst), secs = _timed(run)
    ok = record(2, "graph-cut oracle", not failures and secs < 60,
                f"({len(failures)} failures, worst ratio {worst:.4f}, {secs:.2f}s)")
    assert ok


# 3 ---------------------------------------------------------------------------


def test_c3_gradient_suite(capsys):
    code, secs = _timed(lambda: run_command(["gradcheck", "--trials", "10"]))
    out = capsys.readouterr().out
    ok = record(3, "gradient suite", code == 0 and secs < 120, f"({secs:.1f}s)")
    assert ok, out


# 4 ---------------------------------------------------------------------------


def test_c4_boundary_loss_is_local():
    rng = np.random.default_rng(11)
    leaks = 0
    for _ in range(50):
        n, c = int(rng.integers(8, 80)), int(rng.integers(2, 17))
        coords = rng.normal(size=(n, 3))
        labels = rng.integers(0, c + 1, n)
        labels[coords[:, 0] > 0.5] = 0  # a label-pure region so some points are interior
        boundary = extract_boundary_set(coords, labels, min(16, n - 1) if n > 20 else 3)
        probs = torch.softmax(torch.as_tensor(rng.normal(size=(n, c + 1))), -1).requires_grad_(True)
        (grad,) = torch.autograd.grad(instance_boundary_loss(probs, labels, boundary, 2.0), probs)
        leaks += int(torch.count_nonzero(grad[torch.as_tensor(~boundary)]))
    ok = record(4, "boundary locality", leaks == 0, f"({leaks} nonzero gradient entries off B)")
    assert ok


# 5 ---------------------------------------------------------------------------


def test_c5_spot_values():
    checks = []
    probs = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    checks.append(abs(instance_boundary_loss(probs, [0], [True], 2.0).item() - 0.25 * math.log(2)) <= 1e-6)
    u = unary_costs(np.array([[1.0, 0.0, 0.5]]), 1e-5)[0]
    checks += [abs(a - b) <= 1e-4 for a, b in zip(u, (-9.99995e-6, 11.5129, 0.693142))]
    w = edge_weights([0.0, 1.0, 0.5], [1.0, -1.0, 0.0], 1.0)
    checks += [abs(a - b) <= 1e-9 for a, b in zip(w, (1.0, 0.0, 0.25))]
    cfg = Config()
    checks += [
        cfg.loss.weights.lambda_ibl == 0.006,
        cfg.loss.gamma == 2,
        cfg.graphcut.smoothing_lambda == 2,
        tuple(cfg.metrics.thresholds) == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95) == AP_THRESHOLDS,
    ]
    ok = record(5, "spot values", all(checks), f"({sum(checks)}/{len(checks)} checks)")
    assert ok


# 6 ---------------------------------------------------------------------------


def _mask(n, idx):
    m = np.zeros(n, bool)
    m[list(idx)] = True
    return m


def test_c6_metric_fixtures():
    gt = _mask(10, [1, 2, 3])
    perfect = mean_ap([ScoredInstance(gt.copy(), 0.9)], [gt])
    g10, p06 = _mask(100, range(10)), _mask(100, range(6))
    g100, p072 = _mask(100, range(100)), _mask(100, range(72))
    sem = semantic_metrics(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    checks = [
        perfect.map_value == 1.0 and all(v == 1.0 for v in perfect.ap_at.values()),
        instance_ap([ScoredInstance(p06, 1.0)], [g10], 0.5) == 1.0,
        instance_ap([ScoredInstance(p06, 1.0)], [g10], 0.7) == 0.0,
        mean_ap([ScoredInstance(p072, 1.0)], [g100]).map_value == 0.5,
        sem.oa == 0.75,
        abs(sem.miou - 0.5833) <= 1e-4,
    ]
    ok = record(6, "metric oracle", all(checks), f"({sum(checks)}/{len(checks)} fixtures)")
    assert ok


# 7 ---------------------------------------------------------------------------


def test_c7_geometry_oracles():
    rng = np.random.default_rng(5)
    bad = 0
    for trial in range(100):
        n = int(rng.integers(2, 257))
        pts = rng.integers(0, 6, (n, 3)).astype(float) if trial % 3 == 0 else rng.normal(size=(n, 3))
        m, start = int(rng.integers(1, min(n, 24) + 1)), int(rng.integers(0, n))
        k = int(rng.integers(1, min(n, 16) + 1))
        qry = pts[rng.choice(n, min(n, 12), replace=False)] if trial % 2 else rng.normal(size=(12, 3))
        bad += farthest_point_sample(pts, m, start).tolist() != naive_fps(pts, m, start)
        bad += knn_indices(pts, qry, k).tolist() != naive_knn(pts, qry, k)
    ok = record(7, "geometry oracles", bad == 0, f"({bad} mismatches)")
    assert ok


# 8 and 9 ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def overfit_scans():
    return [generate_synthetic_arch(c, scan_id=f"synth_0000_{i:02d}") for i, c in enumerate(overfit_corpus_configs(0))]


def _train(scans, out_dir, lambda_ibl):
    cfg = desk_config()
    cfg.loss.weights.lambda_ibl = lambda_ibl
    cfg.train.checkpoint_every = 0
    start = time.perf_counter()
    model, _, _ = load_model(run_training(cfg, scans, out_dir))
    return model, time.perf_counter() - start


@pytest.fixture(scope="module")
def model_with_ibl(overfit_scans, tmp_path_factory):
    return _train(overfit_scans, tmp_path_factory.mktemp("ibl"), 0.006)


@pytest.fixture(scope="module")
def model_without_ibl(overfit_scans, tmp_path_factory):
    return _train(overfit_scans, tmp_path_factory.mktemp("no_ibl"), 0.0)


@pytest.mark.slow
def test_c8_overfit_experiment(overfit_scans, model_with_ibl, tmp_path):
    model, train_secs = model_with_ibl
    start = time.perf_counter()
    infer_corpus(model, overfit_scans, tmp_path / "pred")
    _, summary = evaluate_corpus(tmp_path / "pred", overfit_scans, model.config, tmp_path / "report")
    secs = train_secs + time.perf_counter() - start
    miou, ap50 = summary[3], summary[4]
    teeth = sorted(len(np.unique(s.instance_ids)) - 1 for s in overfit_scans)
    corpus_ok = teeth[0] >= 14 and teeth[-1] == 16 and len(overfit_scans) == 8
    ok = record(8, "overfit experiment", miou >= 0.90 and ap50 >= 0.90 and secs <= 1800 and corpus_ok,
                f"(mIoU {miou:.4f}, AP@0.5 {ap50:.4f}, {secs:.0f}s, teeth per scan {teeth[0]}-{teeth[-1]})")
    assert ok


NOISE_FRACTION = 0.05


def _inject_noise(labels, seed):
    rng = np.random.default_rng(seed)
    flipped = rng.choice(len(labels), round(NOISE_FRACTION * len(labels)), replace=False)
    noisy = labels.copy()
    noisy[flipped] = (labels[flipped] + rng.integers(1, 17, len(flipped))) % 17
    return noisy, flipped


def test_c9a_postprocess_removes_isolated_noise(overfit_scans, tmp_path):
    cfg = Config()
    (tmp_path / "noisy").mkdir()
    isolated_total, oa_pairs = [], []
    for i, scan in enumerate(overfit_scans):
        noisy, _ = _inject_noise(scan.categories, i)
        probs = np.full((len(noisy), 17), 0.1 / 17)
        probs[np.arange(len(noisy)), noisy] += 0.9
        write_prediction(scan.scan_id, probs, [], tmp_path / "noisy" / f"{scan.scan_id}.batp")
    postprocess_corpus(tmp_path / "noisy", overfit_scans, tmp_path / "clean", cfg, export_ply=False)
    for i, scan in enumerate(overfit_scans):
        noisy, flipped = _inject_noise(scan.categories, i)
        _, probs, _ = read_prediction(tmp_path / "clean" / f"{scan.scan_id}.batp")
        refined = probs.argmax(1)
        oa_pairs.append(((noisy == scan.categories).mean(), (refined == scan.categories).mean()))
        is_flipped = np.zeros(len(noisy), bool)
        is_flipped[flipped] = True
        nbrs = knn_excluding_self(scan.points, cfg.graphcut.k)
        isolated = flipped[~is_flipped[nbrs[flipped]].any(axis=1)]
        isolated_total.append((refined[isolated] == scan.categories[isolated]).mean())
    never_worse = all(after >= before for before, after in oa_pairs)
    worst_repair = min(isolated_total)
    ok = record("9a", "post-processing under 5% label noise", never_worse and worst_repair >= 0.80,
                f"(OA {np.mean([b for b, _ in oa_pairs]):.3f} -> {np.mean([a for _, a in oa_pairs]):.3f}, "
                f"isolated flips repaired >= {worst_repair:.1%} per scan)")
    assert ok


def _boundary_accuracy(model, scans):
    hits = total = 0
    for scan in scans:
        sample = prepare_sample(scan, model.config)
        _, probs = model.predict(sample)
        on_b = sample.boundary
        hits += int((probs.argmax(1)[on_b] == scan.categories[on_b]).sum())
        total += int(on_b.sum())
    return hits / total


@pytest.mark.slow
def test_c9b_boundary_loss_helps_boundary_points(overfit_scans, model_with_ibl, model_without_ibl):
    with_ibl = _boundary_accuracy(model_with_ibl[0], overfit_scans)
    without = _boundary_accuracy(model_without_ibl[0], overfit_scans)
    ok = record("9b", "boundary loss ablation", with_ibl >= without,
                f"(accuracy on B: {with_ibl:.4f} with vs {without:.4f} without)")
    assert ok


# 10 --------------------------------------------------------------------------


def test_c10_round_trips_and_suite_time(tmp_path, overfit_scans):
    from test_training import tiny_config

    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(17), 300).astype(np.float32)
    inst = [InstancePrediction(rng.random(300), rng.dirichlet(np.ones(17)), float(rng.random())) for _ in range(3)]
    path = write_prediction("arch_07", probs, inst, tmp_path)
    scan_id, p2, i2 = read_prediction(path)
    again = write_prediction(scan_id, p2, i2, tmp_path / "again.batp")
    f32 = np.float32
    batp_ok = (
        scan_id == "arch_07"
        and np.array_equal(p2, probs)
        and path.read_bytes() == again.read_bytes()
        and all(
            np.array_equal(a.mask_prob.astype(f32), b.mask_prob)
            and np.array_equal(a.class_dist.astype(f32), b.class_dist)
            and f32(a.score) == b.score
            for a, b in zip(inst, i2)
        )
    )

    cfg = tiny_config()
    torch.manual_seed(0)
    from toothseg.model import ToothInstanceNet

    model = ToothInstanceNet(cfg)
    opt = make_optimizer(model, cfg)
    sample = prepare_sample(generate_synthetic_arch(overfit_corpus_configs(0, 300)[0]), cfg)
    train_step(model, opt, [sample])
    ck = write_training_checkpoint(tmp_path / "m.batc", model, opt, 1, 1)
    back, arrays, _ = load_model(ck)
    ck2 = write_training_checkpoint(tmp_path / "n.batc", back, _restored(back, cfg, arrays), 1, 1)
    ckpt_ok = ck.read_bytes() == ck2.read_bytes() and all(
        torch.equal(a, b) for a, b in zip(model.state_dict().values(), back.state_dict().values())
    )

    elapsed = _suite_seconds_excluding_overfit()
    ok = record(10, "round trips and suite time", batp_ok and ckpt_ok and elapsed <= 600,
                f"(BATP {'ok' if batp_ok else 'differs'}, checkpoint {'ok' if ckpt_ok else 'differs'}, "
                f"suite {elapsed:.0f}s excluding criterion 8)")
    assert ok


def _restored(model, cfg, arrays):
    from toothseg.training import _restore_optimizer

    opt = make_optimizer(model, cfg)
    _restore_optimizer(opt, arrays)
    return opt


def _suite_seconds_excluding_overfit():
    """Wall time of every test in this session except criterion 8; the unit
    tests are timed in a subprocess when this session did not run them."""
    ran_units = any("test_acceptance" not in k for k in DURATIONS)
    total = sum(v for k, v in DURATIONS.items() if "test_c8_" not in k)
    if not ran_units:
        start = time.perf_counter()
        subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(TESTS_DIR),
                        "--ignore", str(TESTS_DIR / "test_acceptance.py")], check=True, capture_output=True)
        total += time.perf_counter() - start
    return total
