"""Binary decision trees stored as flat arrays, grown level by level.

Growth works on a presorted index matrix: row ``f`` lists the active sample
indices grouped by current node, sorted by feature ``f`` inside each group.
Each level scans every candidate split of every node once, then stably
re-partitions the matrix by child id, so no per-node sorting is needed. The
scan and partition loops are compiled with numba when it is installed. Because
nodes are created in breadth-first order and any per-node randomness is drawn
one level at a time, a tree grown to depth ``d`` is exactly the depth-``d``
truncation of the same tree grown deeper.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import ModelError

try:
    from numba import njit
except ImportError:  # pragma: no cover - kernels then run as plain Python
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


@dataclass(frozen=True, eq=False)
class Tree:
    """Node ``i`` is a leaf iff ``left[i] == -1``. Samples go left when
    ``x[feature] <= threshold``. ``value`` and ``cover`` (sum of sample weights)
    are kept for every node, internal ones included."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    depth: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.value)

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def is_leaf(self, node: int) -> bool:
        return self.left[node] == -1

    def apply(self, X: np.ndarray, max_depth: int | None = None) -> np.ndarray:
        """Node reached by each row, stopping early at ``max_depth``."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=np.int64)
        steps = self.max_depth if max_depth is None else min(max_depth, self.max_depth)
        rows = np.arange(X.shape[0])
        for _ in range(steps):
            internal = self.left[node] >= 0
            if not internal.any():
                break
            go_left = X[rows, np.where(internal, self.feature[node], 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)
        return node

    def predict(self, X: np.ndarray, max_depth: int | None = None) -> np.ndarray:
        return self.value[self.apply(X, max_depth)]

    def truncated(self, max_depth: int) -> "Tree":
        """Same tree with every node at ``max_depth`` turned into a leaf."""
        keep = self.depth <= max_depth
        remap = np.cumsum(keep) - 1
        cut = keep & (self.depth == max_depth)
        left = np.where(cut, -1, self.left)[keep]
        right = np.where(cut, -1, self.right)[keep]
        left = np.where(left >= 0, remap[np.maximum(left, 0)], -1)
        right = np.where(right >= 0, remap[np.maximum(right, 0)], -1)
        feature = np.where(left >= 0, self.feature[keep], -1)
        threshold = np.where(left >= 0, self.threshold[keep], 0.0)
        return Tree(feature, threshold, left, right, self.value[keep].copy(), self.cover[keep].copy(),
                    self.depth[keep].copy())

    def used_features(self) -> set[int]:
        return set(int(f) for f in self.feature[self.left >= 0])

    def check(self) -> None:
        internal = self.left >= 0
        if not np.isfinite(self.threshold[internal]).all():
            raise ModelError("non-finite split threshold")
        if (internal != (self.right >= 0)).any():
            raise ModelError("internal node with a single child")
        if not np.allclose(self.cover[internal], self.cover[self.left[internal]] + self.cover[self.right[internal]],
                           rtol=1e-9, atol=1e-9):
            raise ModelError("cover of a node differs from the sum of its children")

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
            "left": self.left.tolist(), "right": self.right.tolist(),
            "value": self.value.tolist(), "cover": self.cover.tolist(), "depth": self.depth.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        i = lambda k: np.asarray(d[k], dtype=np.int64)
        f = lambda k: np.asarray(d[k], dtype=float)
        tree = cls(i("feature"), f("threshold"), i("left"), i("right"), f("value"), f("cover"), i("depth"))
        tree.check()
        return tree


def presort(X: np.ndarray) -> np.ndarray:
    """Index matrix (n_features x n_samples) sorting each column of X."""
    return np.argsort(np.asarray(X, dtype=float), axis=0, kind="stable").T.astype(np.int64)


GINI, NEWTON = 0, 1
TIE_TOL = 1e-12


@njit(cache=True)
def _split_gain(crit, L0, L1, R0, R1, T0, T1, lam):
    if crit == GINI:
        return (2.0 * T0 * (T1 - T0) / T1 - 2.0 * L0 * (L1 - L0) / L1
                - 2.0 * R0 * (R1 - R0) / R1)
    return 0.5 * (L0 * L0 / (L1 + lam) + R0 * R0 / (R1 + lam) - T0 * T0 / (T1 + lam))


@njit(cache=True)
def _node_totals(order0, stats, cover_weight, starts, sizes):
    m_level = starts.shape[0]
    totals = np.zeros((2, m_level))
    covers = np.zeros(m_level)
    for j in range(m_level):
        for i in range(starts[j], starts[j] + sizes[j]):
            r = order0[i]
            totals[0, j] += stats[0, r]
            totals[1, j] += stats[1, r]
            covers[j] += cover_weight[r]
    return totals, covers


@njit(cache=True)
def _best_splits(XT, order, stats, starts, sizes, totals, allowed, crit, lam, min_child):
    """Best (gain, feature, position) per node. Features, then positions, are
    scanned in ascending order and a candidate must beat the incumbent by more
    than rounding noise, so tied gains keep the lowest feature and threshold."""
    p = order.shape[0]
    m_level = starts.shape[0]
    best_gain = np.full(m_level, -np.inf)
    best_f = np.full(m_level, -1, dtype=np.int64)
    best_pos = np.full(m_level, -1, dtype=np.int64)
    for f in range(p):
        for j in range(m_level):
            if not allowed[j, f]:
                continue
            T0 = totals[0, j]
            T1 = totals[1, j]
            L0 = 0.0
            L1 = 0.0
            end = starts[j] + sizes[j]
            for i in range(starts[j], end - 1):
                r = order[f, i]
                L0 += stats[0, r]
                L1 += stats[1, r]
                if XT[f, r] < XT[f, order[f, i + 1]]:
                    R0 = T0 - L0
                    R1 = T1 - L1
                    if crit == GINI:
                        ok = L1 > 0.0 and R1 > 0.0
                    else:
                        ok = L1 >= min_child and R1 >= min_child
                    if ok:
                        g = _split_gain(crit, L0, L1, R0, R1, T0, T1, lam)
                        if best_f[j] < 0 or g > best_gain[j] + TIE_TOL * (1.0 + abs(best_gain[j])):
                            best_gain[j] = g
                            best_f[j] = f
                            best_pos[j] = i
    return best_gain, best_f, best_pos


@njit(cache=True)
def _partition(XT, order, starts, sizes, node_feat, node_thr, child_left, n_children):
    """Stable re-partition of every row of ``order`` by child node; samples of
    nodes that did not split are dropped."""
    p = order.shape[0]
    m_level = starts.shape[0]
    n_samples = XT.shape[1]
    child = np.full(n_samples, -1, dtype=np.int64)
    counts = np.zeros(n_children, dtype=np.int64)
    for j in range(m_level):
        f = node_feat[j]
        if f < 0:
            continue
        for i in range(starts[j], starts[j] + sizes[j]):
            r = order[0, i]
            c = child_left[j] if XT[f, r] <= node_thr[j] else child_left[j] + 1
            child[r] = c
            counts[c] += 1
    first = np.zeros(n_children, dtype=np.int64)
    for c in range(1, n_children):
        first[c] = first[c - 1] + counts[c - 1]
    total = first[n_children - 1] + counts[n_children - 1]
    out = np.empty((p, total), dtype=np.int64)
    for f in range(p):
        pos = first.copy()
        for i in range(order.shape[1]):
            r = order[f, i]
            c = child[r]
            if c >= 0:
                out[f, pos[c]] = r
                pos[c] += 1
    return out, first, counts


def grow_tree(X: np.ndarray, stats: np.ndarray, cover_weight: np.ndarray, max_depth: int,
              criterion: int, leaf_fn: Callable[[np.ndarray], np.ndarray], min_gain: float,
              lam: float = 0.0, min_child: float = 0.0, order: np.ndarray | None = None,
              max_features: int | None = None, rng: np.random.Generator | None = None) -> Tree:
    """Greedy level-wise growth.

    ``stats`` (2 x n_samples) are additive per-sample statistics: (w*y, w) for
    ``GINI``, (gradient, hessian) for ``NEWTON``. Node totals feed ``leaf_fn``.
    Samples with zero ``cover_weight`` are ignored. A node splits when its best
    gain exceeds ``min_gain``; a child must keep positive weight (``GINI``) or
    at least ``min_child`` hessian (``NEWTON``). With ``max_features`` set, each
    node only considers a random feature subset of that size, drawn from
    ``rng`` one level at a time.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if max_depth < 0:
        raise ModelError("max_depth must be >= 0")
    stats = np.ascontiguousarray(stats, dtype=float)
    cover_weight = np.ascontiguousarray(cover_weight, dtype=float)
    if order is None:
        order = presort(X)
    active = cover_weight > 0
    if not active.all():
        order = order[active[order]].reshape(p, -1)
    order = np.ascontiguousarray(order, dtype=np.int64)
    XT = np.ascontiguousarray(X.T)

    feature, threshold, left, right, value, cover, depth = [], [], [], [], [], [], []
    starts = np.zeros(1, dtype=np.int64)
    sizes = np.array([order.shape[1]], dtype=np.int64)
    level_ids = [0]
    next_id = 1
    for d in range(max_depth + 1):
        m_level = len(level_ids)
        totals, covers = _node_totals(order[0], stats, cover_weight, starts, sizes)
        vals = leaf_fn(totals)
        feature += [-1] * m_level
        threshold += [0.0] * m_level
        left += [-1] * m_level
        right += [-1] * m_level
        value += [float(v) for v in vals]
        cover += [float(c) for c in covers]
        depth += [d] * m_level
        if d == max_depth or order.shape[1] == 0:
            break
        if max_features is not None and max_features < p:
            pick = np.argsort(rng.random((m_level, p)), axis=1)[:, :max_features]
            allowed = np.zeros((m_level, p), dtype=np.bool_)
            allowed[np.arange(m_level)[:, None], pick] = True
        else:
            allowed = np.ones((m_level, p), dtype=np.bool_)
        gains, f_star, pos = _best_splits(XT, order, stats, starts, sizes, totals, allowed,
                                          criterion, float(lam), float(min_child))
        node_feat = np.full(m_level, -1, dtype=np.int64)
        node_thr = np.zeros(m_level)
        child_left = np.full(m_level, -1, dtype=np.int64)
        new_level = []
        for j in range(m_level):
            if not gains[j] > min_gain:
                continue
            f, i = int(f_star[j]), int(pos[j])
            lo, hi = XT[f, order[f, i]], XT[f, order[f, i + 1]]
            thr = lo + (hi - lo) / 2.0
            if not lo <= thr < hi:
                thr = lo
            nid = level_ids[j]
            feature[nid], threshold[nid] = f, float(thr)
            left[nid], right[nid] = next_id, next_id + 1
            node_feat[j], node_thr[j], child_left[j] = f, thr, len(new_level)
            new_level += [next_id, next_id + 1]
            next_id += 2
        if not new_level:
            break
        order, starts, sizes = _partition(XT, order, starts, sizes, node_feat, node_thr, child_left,
                                          len(new_level))
        level_ids = new_level

    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value, dtype=float), np.array(cover, dtype=float), np.array(depth, dtype=np.int64))
