"""Anchor rows and columns via biclique search on the observation mask.

A biclique of the mask is a fully observed sub-block. For a target cell
``(i, j)`` we search the mask restricted to rows that observe column ``j`` and
columns observed in row ``i`` (target row and column removed) and keep the
block whose smaller side is largest.

Small restricted masks (at most ``EXACT_VERTEX_LIMIT`` rows plus columns) are
solved exactly. Larger ones use a deterministic greedy multi-start search.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

EXACT_VERTEX_LIMIT = 40
HEURISTIC_STARTS = 16


class AnchorError(ValueError):
    pass


class NoBicliqueError(AnchorError):
    """The target has no usable anchor block under this mask."""


@dataclass(frozen=True)
class Biclique:
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    @property
    def min_side(self) -> int:
        return min(len(self.rows), len(self.cols))

    @property
    def area(self) -> int:
        return len(self.rows) * len(self.cols)


@dataclass(frozen=True)
class AnchorPlan:
    """Anchor columns plus K disjoint anchor-row folds for one target cell."""

    target: tuple[int, int]
    anchor_cols: tuple[int, ...]
    anchor_row_folds: tuple[tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return len(self.anchor_row_folds)

    @property
    def anchor_rows(self) -> tuple[int, ...]:
        return tuple(sorted(r for fold in self.anchor_row_folds for r in fold))

    def validate(self, mask) -> None:
        """Raise :class:`AnchorError` unless every plan invariant holds on ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        i, j = self.target
        m, n = mask.shape
        if not (0 <= i < m and 0 <= j < n):
            raise AnchorError(f"target {self.target} out of bounds")
        cols = np.asarray(self.anchor_cols, dtype=int)
        if cols.size == 0 or not self.anchor_row_folds:
            raise AnchorError("plan needs at least one anchor column and one fold")
        if j in self.anchor_cols:
            raise AnchorError("target column cannot be an anchor column")
        if np.any((cols < 0) | (cols >= n)) or len(set(self.anchor_cols)) != cols.size:
            raise AnchorError("anchor columns out of range or repeated")
        if not mask[i, cols].all():
            raise AnchorError("target row must observe every anchor column")
        seen: set[int] = set()
        for k, fold in enumerate(self.anchor_row_folds):
            if not fold:
                raise AnchorError(f"fold {k} is empty")
            rows = np.asarray(fold, dtype=int)
            if np.any((rows < 0) | (rows >= m)):
                raise AnchorError(f"fold {k} has out-of-range rows")
            if i in fold:
                raise AnchorError("target row cannot be an anchor row")
            if seen.intersection(fold) or len(set(fold)) != len(fold):
                raise AnchorError("anchor-row folds must be disjoint")
            seen.update(fold)
            if not mask[rows, j].all():
                raise AnchorError(f"fold {k} has rows that miss the target column")
            if not mask[np.ix_(rows, cols)].all():
                raise AnchorError(f"fold {k} block is not fully observed")

    def to_json(self) -> str:
        return json.dumps(
            {
                "target": list(self.target),
                "anchor_cols": sorted(self.anchor_cols),
                "anchor_row_folds": [sorted(f) for f in self.anchor_row_folds],
            }
        )


def neighborhood_rows(D, j: int) -> np.ndarray:
    D = np.asarray(D, dtype=bool)
    if not 0 <= j < D.shape[1]:
        raise IndexError(f"column {j} out of range")
    return np.flatnonzero(D[:, j])


def neighborhood_cols(D, i: int) -> np.ndarray:
    D = np.asarray(D, dtype=bool)
    if not 0 <= i < D.shape[0]:
        raise IndexError(f"row {i} out of range")
    return np.flatnonzero(D[i, :])


# ---------------------------------------------------------------------------
# exact search over closed bicliques (rows = rows(cols), cols = cols(rows))


def _bits(mask_int: int) -> tuple[int, ...]:
    out = []
    while mask_int:
        low = mask_int & -mask_int
        out.append(low.bit_length() - 1)
        mask_int ^= low
    return tuple(out)


class _BitGraph:
    def __init__(self, B: np.ndarray):
        self.p, self.q = B.shape
        self.row_adj = [sum(1 << int(c) for c in np.flatnonzero(B[r])) for r in range(self.p)]
        self.col_adj = [sum(1 << int(r) for r in np.flatnonzero(B[:, c])) for c in range(self.q)]
        self.all_rows = (1 << self.p) - 1
        self.all_cols = (1 << self.q) - 1

    def cols_of(self, rows: int) -> int:
        cols = self.all_cols
        row_adj = self.row_adj
        while rows and cols:
            low = rows & -rows
            cols &= row_adj[low.bit_length() - 1]
            rows ^= low
        return cols


def _closed_bicliques(graph: _BitGraph, visit) -> None:
    """Close-by-One traversal; ``visit(rows, cols, next_col)`` returns False to prune."""
    q = graph.q
    col_adj = graph.col_adj

    def rec(rows: int, cols: int, start: int) -> None:
        if not visit(rows, cols, start):
            return
        for y in range(start, q):
            if (cols >> y) & 1:
                continue
            new_rows = rows & col_adj[y]
            if not new_rows:
                continue
            # canonicity: the closure must not add a column before y
            canonical = True
            for c in range(y):
                if not (cols >> c) & 1 and new_rows & col_adj[c] == new_rows:
                    canonical = False
                    break
            if not canonical:
                continue
            new_cols = cols | (1 << y)
            for c in range(y + 1, q):
                if not (cols >> c) & 1 and new_rows & col_adj[c] == new_rows:
                    new_cols |= 1 << c
            rec(new_rows, new_cols, y + 1)

    rec(graph.all_rows, graph.cols_of(graph.all_rows), 0)


class _Stop(Exception):
    pass


def _enumerate_exact(B: np.ndarray, limit: int | None) -> list[Biclique]:
    graph = _BitGraph(B)
    found: list[Biclique] = []

    def visit(rows, cols, start):
        if rows and cols:
            found.append(Biclique(_bits(rows), _bits(cols)))
            if limit is not None and len(found) >= limit:
                raise _Stop
        return True

    try:
        _closed_bicliques(graph, visit)
    except _Stop:
        pass
    return found


def _better(a: Biclique, b: Biclique | None) -> bool:
    """Selection order: larger min side, then larger area, then smaller row tuple."""
    if b is None:
        return True
    ka, kb = (a.min_side, a.area), (b.min_side, b.area)
    if ka != kb:
        return ka > kb
    return a.rows < b.rows


def _best_exact(B: np.ndarray) -> Biclique | None:
    """Branch and bound over closed bicliques for the anchor selection rule."""
    graph = _BitGraph(B)
    col_adj = graph.col_adj
    q = graph.q
    # best so far: min side, area, row bitset, col bitset
    best = [0, 0, 0, 0]

    def visit(rows, cols, start):
        n_rows = rows.bit_count()
        n_cols = cols.bit_count()
        if n_rows and n_cols:
            side = min(n_rows, n_cols)
            area = n_rows * n_cols
            if side > best[0] or (side == best[0] and area > best[1]):
                best[:] = [side, area, rows, cols]
            elif side == best[0] and area == best[1] and _bits(rows) < _bits(best[2]):
                best[:] = [side, area, rows, cols]
        best_min, best_area = best[0], best[1]
        if not best_min:
            return True
        # any descendant drops at least one row and adds at least one column
        ub_rows = n_rows - 1
        if min(ub_rows, n_cols + q - start) < best_min:
            return False
        extra = 0
        for y in range(start, q):
            if not (cols >> y) & 1 and (rows & col_adj[y]).bit_count() >= best_min:
                extra += 1
        ub_cols = n_cols + extra
        ub_min = min(ub_rows, ub_cols)
        if ub_min < best_min:
            return False
        if ub_min == best_min and ub_rows * ub_cols < best_area:
            return False
        return True

    _closed_bicliques(graph, visit)
    if not best[0]:
        return None
    return Biclique(_bits(best[2]), _bits(best[3]))


# ---------------------------------------------------------------------------
# greedy heuristic for large restricted masks


def _heuristic(B: np.ndarray, starts: int = HEURISTIC_STARTS) -> list[Biclique]:
    """Greedy multi-start search; every returned block is a closed biclique.

    Each start seeds the row set with the rows observing one high-degree
    column, then repeatedly adds the column observed by most of the current
    rows and drops the rows that miss it.
    """
    p, q = B.shape
    Bi = B.astype(np.int32)
    degree = Bi.sum(axis=0)
    order = sorted((c for c in range(q) if degree[c] > 0), key=lambda c: (-degree[c], c))
    seen: set[tuple[tuple[int, ...], tuple[int, ...]]] = set()
    out: list[Biclique] = []
    for seed in order[:starts]:
        rows = B[:, seed].copy()
        while True:
            counts = rows.astype(np.int32) @ Bi
            cols = counts == rows.sum()
            key = (tuple(np.flatnonzero(rows).tolist()), tuple(np.flatnonzero(cols).tolist()))
            if key in seen:
                # the rest of this path was already walked from an earlier start
                break
            seen.add(key)
            out.append(Biclique(*key))
            counts[cols] = -1
            nxt = int(np.argmax(counts))
            if counts[nxt] <= 0:
                break
            rows = rows & B[:, nxt]
    return out


def maximal_bicliques(B, limit: int | None = None) -> list[Biclique]:
    """Maximal bicliques (fully observed blocks) of a bipartite incidence mask.

    Exact enumeration when rows + columns <= 40; otherwise the greedy
    multi-start heuristic, whose output is still complete and maximal but not
    exhaustive.
    """
    B = np.asarray(B, dtype=bool)
    if B.ndim != 2:
        raise AnchorError("incidence mask must be 2-d")
    if limit is not None and limit < 1:
        raise AnchorError("limit must be positive")
    if not B.any():
        return []
    if sum(B.shape) <= EXACT_VERTEX_LIMIT:
        return _enumerate_exact(B, limit)
    found = _heuristic(B)
    return found if limit is None else found[:limit]


def best_biclique(B) -> Biclique | None:
    """The biclique maximising min side, then area, then lexicographic rows."""
    B = np.asarray(B, dtype=bool)
    if not B.any():
        return None
    if sum(B.shape) <= EXACT_VERTEX_LIMIT:
        return _best_exact(B)
    return select_biclique(_heuristic(B))


def select_biclique(cands: Iterable[Biclique]) -> Biclique | None:
    best = None
    for bc in cands:
        if _better(bc, best):
            best = bc
    return best


def restricted_support(D, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows observing column j and columns observed in row i, target excluded."""
    rows = neighborhood_rows(D, j)
    cols = neighborhood_cols(D, i)
    return rows[rows != i], cols[cols != j]


def anchor_submatrix(D, i: int, j: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Anchor rows and anchor columns for target ``(i, j)``."""
    D = np.asarray(D, dtype=bool)
    rows, cols = restricted_support(D, i, j)
    if rows.size == 0 or cols.size == 0:
        raise NoBicliqueError(f"target ({i}, {j}) has no observed neighbours")
    bc = best_biclique(D[np.ix_(rows, cols)])
    if bc is None:
        raise NoBicliqueError(f"target ({i}, {j}): restricted mask has no edges")
    return tuple(int(rows[r]) for r in bc.rows), tuple(int(cols[c]) for c in bc.cols)


def partition_rows(rows: Iterable[int], k: int, rng: np.random.Generator) -> tuple[tuple[int, ...], ...]:
    """Random split into ``k`` disjoint folds whose sizes differ by at most one."""
    rows = list(rows)
    if k < 1:
        raise AnchorError("fold count must be >= 1")
    if k > len(rows):
        raise AnchorError(f"cannot split {len(rows)} anchor rows into {k} folds")
    perm = rng.permutation(len(rows))
    return tuple(tuple(sorted(rows[p] for p in chunk)) for chunk in np.array_split(perm, k))


def default_fold_count(min_side: int, rank_estimate: int) -> int:
    return int(np.clip(min_side // max(2 * rank_estimate, 4), 1, 10))


def build_plan(D, i: int, j: int, k: int, rng: np.random.Generator) -> AnchorPlan:
    rows, cols = anchor_submatrix(D, i, j)
    return AnchorPlan((i, j), cols, partition_rows(rows, min(k, len(rows)), rng))
