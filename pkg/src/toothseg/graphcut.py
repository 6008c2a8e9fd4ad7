"""Potts-model refinement of per-point labels on a kNN graph.

Energy: sum_p U_p(L_p) + lambda * sum_(p,q) w_pq [L_p != L_q], minimised by
alpha-expansion. Each expansion move is a binary submodular problem solved
as an s-t min-cut; scipy's max-flow needs integer capacities, so capacities
are scaled and rounded, and a move is only accepted when it lowers the exact
(floating point) energy.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, maximum_flow

from .geometry import knn_excluding_self

_INT_CAP = 2**31 - 1


@dataclass
class PottsProblem:
    unary: np.ndarray  # N x L
    edges: np.ndarray  # E x 2, p < q
    weights: np.ndarray  # E, in [0, 1]
    smoothing_lambda: float = 2.0

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.edges) != len(self.weights):
            raise ValueError("edges and weights differ in length")
        if self.smoothing_lambda < 0:
            raise ValueError("smoothing_lambda must be non-negative")
        if len(self.edges) and (self.edges[:, 0] == self.edges[:, 1]).any():
            raise ValueError("self-edges are not allowed")

    @property
    def n_labels(self):
        return self.unary.shape[1]


def unary_costs(probs, eps: float = 1e-5) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if (probs < 0).any():
        raise ValueError("probabilities must be non-negative")
    return -np.log(probs + eps)


def edge_weights(lengths, normal_dots, max_length):
    """(1 - d)(1 + nsim) / 2 with d = length / max_length, clamped to [0, 1]."""
    lengths = np.asarray(lengths, dtype=np.float64)
    d = lengths / max_length if max_length > 0 else np.zeros_like(lengths)
    w = (1.0 - d) * (1.0 + np.asarray(normal_dots, dtype=np.float64)) / 2.0
    return np.clip(w, 0.0, 1.0)


def build_graph(points, k: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Undirected, symmetrised kNN graph. Returns (edges E x 2, weights E)."""
    coords = points.coords
    normals = points.normals
    n = len(coords)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    nbrs = knn_excluding_self(coords, min(k, n - 1))
    src = np.repeat(np.arange(n), nbrs.shape[1])
    dst = nbrs.ravel()
    pairs = np.unique(np.stack([np.minimum(src, dst), np.maximum(src, dst)], axis=1), axis=0)
    lengths = np.linalg.norm(coords[pairs[:, 0]] - coords[pairs[:, 1]], axis=1)
    dots = (normals[pairs[:, 0]] * normals[pairs[:, 1]]).sum(axis=1)
    return pairs, edge_weights(lengths, dots, lengths.max())


def energy(labels, problem: PottsProblem) -> float:
    labels = np.asarray(labels)
    if labels.shape != (problem.unary.shape[0],) or labels.min(initial=0) < 0 or labels.max(initial=0) >= problem.n_labels:
        raise ValueError("labeling out of range")
    data = problem.unary[np.arange(len(labels)), labels].sum()
    if len(problem.edges) == 0:
        return float(data)
    cut = labels[problem.edges[:, 0]] != labels[problem.edges[:, 1]]
    return float(data + problem.smoothing_lambda * problem.weights[cut].sum())


def _expansion_move(labels, alpha, problem: PottsProblem) -> np.ndarray:
    n = len(labels)
    u = problem.unary
    lin = u[:, alpha] - u[np.arange(n), labels]  # coefficient of x_p (1 = switch to alpha)

    p, q = problem.edges[:, 0], problem.edges[:, 1]
    w = problem.smoothing_lambda * problem.weights
    fp, fq = labels[p], labels[q]
    a = w * (fp != fq)
    b = w * (fp != alpha)
    c = w * (alpha != fq)
    # E(x_p, x_q) = A + (C - A) x_p + (D - C) x_q + (B + C - A - D)(1 - x_p) x_q, D = 0
    np.add.at(lin, p, c - a)
    np.add.at(lin, q, -c)
    pair_cap = b + c - a

    source, sink = n, n + 1
    src_cap = np.where(lin > 0, lin, 0.0)
    sink_cap = np.where(lin < 0, -lin, 0.0)
    budget = max(src_cap.sum(), sink_cap.sum(), pair_cap.sum(), 1e-12)
    scale = min(1e6, 0.5 * _INT_CAP / budget)

    nodes = np.arange(n)
    keep = pair_cap > 0
    rows = np.concatenate([np.full(n, source), nodes, p[keep]])
    cols = np.concatenate([nodes, np.full(n, sink), q[keep]])
    caps = np.rint(np.concatenate([src_cap, sink_cap, pair_cap[keep]]) * scale).astype(np.int64)
    nz = caps > 0
    cap = sp.csr_matrix((caps[nz].astype(np.int32), (rows[nz], cols[nz])), shape=(n + 2, n + 2))
    cap.sum_duplicates()
    flow = maximum_flow(cap, source, sink).flow
    residual = (cap - flow).tocsr()
    residual.data[residual.data < 0] = 0
    residual.eliminate_zeros()
    reach = breadth_first_order(residual, source, directed=True, return_predecessors=False)
    in_source = np.zeros(n + 2, dtype=bool)
    in_source[reach] = True
    switch = ~in_source[:n]
    out = labels.copy()
    out[switch] = alpha
    return out


def alpha_expansion(problem: PottsProblem, init=None, max_sweeps: int = 50):
    """Returns (labels, energies) where energies[0] is the initial energy and
    energies[i] the energy after sweep i."""
    labels = np.argmin(problem.unary, axis=1) if init is None else np.array(init, dtype=np.int64)
    current = energy(labels, problem)
    history = [current]
    if problem.smoothing_lambda == 0 or len(problem.edges) == 0:
        # decoupled: the per-point argmin is the global optimum
        labels = np.argmin(problem.unary, axis=1)
        history.append(energy(labels, problem))
        return labels, history
    for _ in range(max_sweeps):
        improved = False
        for alpha in range(problem.n_labels):
            candidate = _expansion_move(labels, alpha, problem)
            e = energy(candidate, problem)
            if e < current - 1e-12 * max(1.0, abs(current)):
                labels, current, improved = candidate, e, True
        history.append(current)
        if not improved:
            break
    return labels, history


def icm(problem: PottsProblem, init=None, max_sweeps: int = 50) -> np.ndarray:
    """Iterated conditional modes; coordinate descent fallback."""
    labels = np.argmin(problem.unary, axis=1) if init is None else np.array(init, dtype=np.int64)
    n = len(labels)
    nbrs = [[] for _ in range(n)]
    for (p, q), w in zip(problem.edges, problem.weights):
        nbrs[p].append((q, w))
        nbrs[q].append((p, w))
    lam = problem.smoothing_lambda
    for _ in range(max_sweeps):
        changed = False
        for p in range(n):
            cost = problem.unary[p].copy()
            for q, w in nbrs[p]:
                cost += lam * w
                cost[labels[q]] -= lam * w
            best = int(np.argmin(cost))
            if cost[best] < cost[labels[p]] - 1e-12:
                labels[p] = best
                changed = True
        if not changed:
            break
    return labels


def minimize_energy(problem: PottsProblem, init=None, method: str = "expansion") -> np.ndarray:
    if method == "expansion":
        return alpha_expansion(problem, init)[0]
    if method == "icm":
        return icm(problem, init)
    raise ValueError(f"unknown method {method!r}")


def refine_labels(probs, points, k: int = 8, smoothing_lambda: float = 2.0, eps: float = 1e-5, method: str = "expansion"):
    """Graph-cut refinement of an N x (C+1) probability field."""
    edges, weights = build_graph(points, k)
    problem = PottsProblem(unary_costs(probs, eps), edges, weights, smoothing_lambda)
    return minimize_energy(problem, None, method)


def reproject_instances(refined_labels, predictions: List, num_classes: int = 16) -> List:
    """Carry refined semantic labels back onto kept instances.

    Each instance takes the majority refined tooth label inside its original
    binary mask (falling back to its own class), then owns exactly the points
    carrying that label where it has the highest mask probability among the
    instances sharing the label.
    """
    from .head import InstancePrediction

    refined_labels = np.asarray(refined_labels)
    n = len(refined_labels)
    classes = []
    for pred in predictions:
        votes = refined_labels[pred.binary_mask]
        votes = votes[votes > 0]
        if len(votes):
            classes.append(int(np.bincount(votes, minlength=num_classes + 1).argmax()))
        else:
            classes.append(pred.category)
    out = []
    probs = np.stack([p.mask_prob for p in predictions]) if predictions else np.zeros((0, n))
    for i, pred in enumerate(predictions):
        same = [j for j, c in enumerate(classes) if c == classes[i]]
        owner = np.array(same)[np.argmax(probs[same], axis=0)]
        mask = (refined_labels == classes[i]) & (owner == i)
        dist = np.zeros_like(pred.class_dist)
        dist[classes[i]] = 1.0
        out.append(InstancePrediction(mask.astype(np.float64), dist, pred.score))
    return out
