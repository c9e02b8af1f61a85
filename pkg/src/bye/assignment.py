"""Score ensembling and optimal bijective assignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bye.scores import ScoreMatrix


@dataclass
class Assignment:
    mapping: dict  # new id -> ref id
    total_score: float
    report: list = field(default_factory=list)


def ensemble(a_bye, a_vlm, vlm_weight=1.0):
    """Elementwise A_bye + w * A_vlm after aligning ids (w = 1 is the plain sum)."""
    if set(a_bye.row_ids) != set(a_vlm.row_ids) or set(a_bye.col_ids) != set(a_vlm.col_ids):
        rows = set(a_bye.row_ids) ^ set(a_vlm.row_ids)
        cols = set(a_bye.col_ids) ^ set(a_vlm.col_ids)
        raise ValueError(f"id sets differ: rows {sorted(rows)}, cols {sorted(cols)}")
    other = a_vlm.reorder(a_bye.row_ids, a_bye.col_ids)
    return ScoreMatrix(a_bye.values + vlm_weight * other.values, a_bye.row_ids, a_bye.col_ids, list(a_bye.empty_rows))


def _solve_min_cost(cost):
    """Shortest-augmenting-path Hungarian method on a square cost matrix.

    Returns (col_of_row, u, v) with u[i] + v[j] <= cost[i, j] and equality on
    the returned assignment.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _has_perfect_matching(adj, rows, cols_free):
    match = {}

    def augment(r, seen):
        for c in adj[r]:
            if c in cols_free and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def _lexicographic_optimum(cost, u, v, tol):
    """Lexicographically smallest perfect matching on the tight edges."""
    n = cost.shape[0]
    reduced = cost - u[:, None] - v[None, :]
    adj = [list(np.flatnonzero(reduced[r] <= tol)) for r in range(n)]
    free = set(range(n))
    out = np.empty(n, dtype=np.int64)
    for r in range(n):
        for c in adj[r]:
            if c not in free:
                continue
            free.discard(c)
            if _has_perfect_matching(adj, range(r + 1, n), free):
                out[r] = c
                break
            free.add(c)
        else:
            return None
    return out


def hungarian_assign(scores):
    """Score-maximizing bijection; ties resolve to the lexicographically smallest column vector."""
    vals = scores.values
    n, m = vals.shape
    if n != m:
        raise ValueError(f"assignment needs a square score matrix, got {n}x{m}; drop added/removed objects first")
    if not np.all(np.isfinite(vals)):
        raise ValueError("score matrix has non-finite entries")
    if n == 0:
        return Assignment({}, 0.0)
    cost = vals.max() - vals
    cols, u, v = _solve_min_cost(cost)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    lex = _lexicographic_optimum(cost, u, v, tol)
    rows = np.arange(n)
    if lex is not None and vals[rows, lex].sum() >= vals[rows, cols].sum():
        cols = lex
    mapping = {scores.row_ids[r]: scores.col_ids[int(cols[r])] for r in range(n)}
    return Assignment(mapping, float(vals[rows, cols].sum()))


def associate_ensemble(tracker, ref_features, new_features, vlm_weight=1.0):
    """A = A_bye + A_vlm followed by the Hungarian method.

    ``ref_features`` / ``new_features`` map instance id -> semantic vector.
    New ids without retrieval evidence keep a zero A_bye row, so their
    assignment is driven by the semantic scores alone.
    """
    from bye.membank import score_matrix
    from bye.semantic import vlm_score_matrix

    ref_ids = sorted(ref_features)
    new_ids = sorted(new_features)
    a_bye = score_matrix(tracker, new_ids, ref_ids)
    a_vlm = vlm_score_matrix([ref_features[i] for i in ref_ids], [new_features[j] for j in new_ids], ref_ids, new_ids)
    combined = ensemble(a_bye, a_vlm, vlm_weight)
    result = hungarian_assign(combined)
    for j, i in result.mapping.items():
        r, c = new_ids.index(j), ref_ids.index(i)
        result.report.append(
            {"new_id": j, "ref_id": i, "p_bye": a_bye.values[r, c], "cos_vlm": a_vlm.values[r, c], "score": combined.values[r, c]}
        )
    return result, a_bye, a_vlm
