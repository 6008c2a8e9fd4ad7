"""Minimum-cost bipartite assignment (Hungarian method, shortest augmenting paths).

Predictions are rows, ground-truth instances are columns. Rectangular inputs
are padded to square with zero-cost dummies, solved with dual potentials, and
the optimum is then made canonical: among all optimal pair sets the
lexicographically smallest one is returned.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)
    unmatched_preds: list = field(default_factory=list)

    def total(self, cost) -> float:
        cost = np.asarray(cost)
        return float(sum(cost[p, g] for p, g in self.pairs))


def _solve_square(cost: np.ndarray):
    """Shortest augmenting path Hungarian on an n x n matrix.

    Returns (row_to_col, u, v) with c[i, j] - u[i] - v[j] >= 0 everywhere and
    == 0 on the assignment.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_owner = np.zeros(n + 1, dtype=np.int64)  # 1-based row owning column j, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    padded = np.zeros((n + 1, n + 1))
    padded[1:, 1:] = cost
    for i in range(1, n + 1):
        col_owner[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_owner[j0]
            free = ~used
            free[0] = False
            cur = padded[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            owners = col_owner[used]
            u[owners] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if col_owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_owner[j0] = col_owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[col_owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _has_perfect_matching(adj, n, pinned):
    """Kuhn's augmenting-path test on the tight graph with some rows pinned."""
    match_col = [-1] * n
    for r, c in pinned.items():
        match_col[c] = r
    blocked = set(pinned.values())

    def try_row(r, seen):
        for c in adj[r]:
            if c in seen or c in blocked:
                continue
            seen.add(c)
            if match_col[c] == -1 or try_row(match_col[c], seen):
                match_col[c] = r
                return True
        return False

    return all(try_row(r, set()) for r in range(n) if r not in pinned)


def hungarian_match(cost) -> MatchResult:
    """Optimal assignment of ``min(M, G)`` pairs for an M x G cost matrix.

    Ties between optimal pair sets are broken towards the lexicographically
    smallest sorted list of ``(pred, gt)`` pairs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    m, g = cost.shape
    if m == 0 or g == 0:
        return MatchResult([], list(range(m)))
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")

    n = max(m, g)
    square = np.zeros((n, n))
    square[:m, :g] = cost
    row_to_col, u, v = _solve_square(square)

    # any optimal assignment uses only zero reduced-cost edges, and every
    # perfect matching of those edges is optimal
    reduced = square - u[:, None] - v[None, :]
    scale = max(1.0, float(np.abs(square).max()))
    tight = reduced <= 1e-9 * scale * n
    adj = [list(np.flatnonzero(tight[r])) for r in range(n)]

    # greedy lexicographic construction: pairs come out in ascending row
    # order, so each step takes the smallest feasible real (row, col); rows
    # jumped over are forced onto dummy columns (left unmatched)
    is_dummy_col = np.arange(n) >= g
    pinned = {}
    skipped = set()
    pairs = []
    next_row = 0
    while len(pairs) < min(m, g):
        used_cols = {c for _, c in pairs}
        chosen = None
        for r in range(next_row, m):
            trial_adj = list(adj)
            for s in list(skipped) + list(range(next_row, r)):
                trial_adj[s] = [c for c in adj[s] if is_dummy_col[c]]
            for c in range(g):
                if c in used_cols or not tight[r, c]:
                    continue
                trial = dict(pinned)
                trial[r] = c
                if _has_perfect_matching(trial_adj, n, trial):
                    chosen = (r, c)
                    break
            if chosen is not None:
                break
        if chosen is None:
            # tolerance too tight for this matrix; keep the solver's own optimum
            pairs = [(r, int(row_to_col[r])) for r in range(m) if row_to_col[r] < g]
            break
        r, c = chosen
        skipped.update(range(next_row, r))
        pinned[r] = c
        pairs.append(chosen)
        next_row = r + 1
    matched = {p for p, _ in pairs}
    return MatchResult(sorted(pairs), [r for r in range(m) if r not in matched])
