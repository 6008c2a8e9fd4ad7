"""Slow, obviously-correct reference implementations used only by tests."""

import itertools
import math

import numpy as np


def naive_fps(coords, m, start=0):
    coords = [tuple(map(float, p)) for p in coords]
    chosen = [start]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i, p in enumerate(coords):
            if i in chosen:
                continue
            d = min(sum((a - b) ** 2 for a, b in zip(p, coords[j])) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def naive_knn(source, queries, k):
    out = []
    for q in queries:
        d = [(sum((float(a) - float(b)) ** 2 for a, b in zip(q, s)), i) for i, s in enumerate(source)]
        d.sort()
        out.append([i for _, i in d[:k]])
    return out


def naive_boundary(coords, labels, k):
    n = len(coords)
    out = []
    for i in range(n):
        d = sorted(
            (sum((float(a) - float(b)) ** 2 for a, b in zip(coords[i], coords[j])), j)
            for j in range(n)
            if j != i
        )
        out.append(any(labels[j] != labels[i] for _, j in d[:k]))
    return out


def brute_force_assignment_cost(cost):
    cost = np.asarray(cost, dtype=float)
    m, g = cost.shape
    if m == 0 or g == 0:
        return 0.0
    best = math.inf
    if m >= g:
        for rows in itertools.permutations(range(m), g):
            best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    else:
        for cols in itertools.permutations(range(g), m):
            best = min(best, sum(cost[r, c] for r, c in enumerate(cols)))
    return best


def brute_force_potts(unary, edges, lam):
    """Exhaustive minimum of a Potts energy; returns (energy, labeling)."""
    n, n_labels = unary.shape
    best, best_lab = math.inf, None
    for lab in itertools.product(range(n_labels), repeat=n):
        e = sum(unary[p, lab[p]] for p in range(n))
        e += lam * sum(w for p, q, w in edges if lab[p] != lab[q])
        if e < best:
            best, best_lab = e, lab
    return best, np.array(best_lab)


def scalar_sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_bce(prob, target):
    prob = min(max(prob, 1e-12), 1 - 1e-12)
    return -(target * math.log(prob) + (1 - target) * math.log(1 - prob))


def scalar_dice(probs, targets, smooth=1.0):
    inter = sum(p * t for p, t in zip(probs, targets))
    return 1 - (2 * inter + smooth) / (sum(probs) + sum(targets) + smooth)


def scalar_log_softmax(logits, idx):
    mx = max(logits)
    lse = mx + math.log(sum(math.exp(v - mx) for v in logits))
    return logits[idx] - lse


def pr_curve_ap(tp_flags, n_gt):
    """All-point interpolated AP from a score-ordered TP/FP list."""
    if n_gt == 0:
        return 0.0 if tp_flags else 1.0
    tp = fp = 0
    points = []
    for flag in tp_flags:
        tp += flag
        fp += not flag
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for i, (r, _) in enumerate(points):
        p_interp = max(p for rr, p in points[i:])
        ap += (r - prev_r) * p_interp
        prev_r = r
    return ap


def finite_difference_grad(fn, x, h=1e-6):
    """Central differences of a scalar function of a float64 numpy array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        f_plus = fn(x)
        x[idx] = orig - h
        f_minus = fn(x)
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad
