"""6D adaptive binary tree over configurations (x_D, x_L).

Positions are normalised by the scene bounds so all six axes are
commensurable.  A node is split while it holds more real samples than
max(floor(sqrt(|S|)), 1).  At every split the boundary-nearest real samples
of each side are copied into the other side (overlap filtering); copies are
flagged, take part in fitting but not in occupancy or activation, and are
never copied again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .records import RECORD_DTYPE, decode_code


@dataclass(frozen=True)
class SplitInfo:
    node: int
    axis: int
    value: float
    k: int  # real samples in the node being split
    copies_left: int
    copies_right: int


def _box_distance(points, lo, hi):
    d = np.maximum(lo - points, 0.0) + np.maximum(points - hi, 0.0)
    return np.sqrt(np.sum(d * d, axis=1))


class GuidingTree:
    """Immutable tree built from one iteration's records."""

    def __init__(self, records, bounds, epsilon: float = 0.1):
        records = np.asarray(records)
        if records.dtype != RECORD_DTYPE:
            raise TypeError("records must use RECORD_DTYPE")
        if not 0.0 <= epsilon < 0.5:
            raise ValueError("epsilon must lie in [0, 0.5)")
        self.records = records
        self.epsilon = float(epsilon)
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
        ext = np.where(hi - lo > 0.0, hi - lo, 1.0)
        self.lo = lo
        self.inv_ext = 1.0 / ext
        self.size = len(records)
        self.threshold = max(math.isqrt(self.size), 1)
        self.points = self.normalise(records["x_d"].astype(np.float64), records["x_l"].astype(np.float64))

        self.node_axis, self.node_split = [], []
        self.node_left, self.node_right, self.node_leaf = [], [], []
        self.leaf_real_idx, self.leaf_copy_idx = [], []
        self.leaf_lo, self.leaf_hi = [], []
        self.splits: list[SplitInfo] = []
        self._build()
        self.node_axis = np.array(self.node_axis, dtype=np.int64)
        self.node_split = np.array(self.node_split, dtype=np.float64)
        self.node_left = np.array(self.node_left, dtype=np.int64)
        self.node_right = np.array(self.node_right, dtype=np.int64)
        self.node_leaf = np.array(self.node_leaf, dtype=np.int64)

    def normalise(self, x_d, x_l):
        x_d = np.atleast_2d(np.asarray(x_d, dtype=np.float64))
        x_l = np.atleast_2d(np.asarray(x_l, dtype=np.float64))
        return np.hstack([(x_d - self.lo) * self.inv_ext, (x_l - self.lo) * self.inv_ext])

    def _new_node(self):
        self.node_axis.append(0)
        self.node_split.append(0.0)
        self.node_left.append(-1)
        self.node_right.append(-1)
        self.node_leaf.append(-1)
        return len(self.node_axis) - 1

    def _make_leaf(self, node, real, copies, lo, hi):
        self.node_leaf[node] = len(self.leaf_real_idx)
        self.leaf_real_idx.append(real)
        self.leaf_copy_idx.append(copies)
        self.leaf_lo.append(lo)
        self.leaf_hi.append(hi)

    def _copies_for(self, donors, axis, split, lo, hi, count):
        """``count`` donors nearest the split plane, minus those far from the box."""
        if count <= 0 or len(donors) == 0:
            return donors[:0]
        dist = np.abs(self.points[donors, axis] - split)
        order = np.argsort(dist, kind="stable")[:count]
        picked = donors[order]
        far = _box_distance(self.points[picked], lo, hi) > np.linalg.norm(hi - lo)
        return picked[~far]

    def _build(self):
        root = self._new_node()
        all_idx = np.arange(self.size, dtype=np.int64)
        stack = [(root, all_idx, all_idx[:0], np.zeros(6), np.ones(6))]
        P = self.points
        while stack:
            node, real, copies, lo, hi = stack.pop()
            k = len(real)
            if k <= self.threshold:
                self._make_leaf(node, real, copies, lo, hi)
                continue
            pr = P[real]
            extent = pr.max(axis=0) - pr.min(axis=0)
            axis = int(np.argmax(extent))
            if extent[axis] <= 0.0:
                # identical configurations cannot be separated
                self._make_leaf(node, real, copies, lo, hi)
                continue
            vals = np.sort(pr[:, axis])
            m = k // 2
            cut = None
            for off in range(k):
                for j in (m - off, m + off):
                    if 1 <= j < k and vals[j - 1] < vals[j]:
                        cut = j
                        break
                if cut is not None:
                    break
            split = 0.5 * (vals[cut - 1] + vals[cut])
            if not vals[cut - 1] < split <= vals[cut]:
                split = vals[cut]
            go_left = P[real, axis] < split
            lreal, rreal = real[go_left], real[~go_left]
            c_go_left = P[copies, axis] < split
            lcopy, rcopy = copies[c_go_left], copies[~c_go_left]

            lhi = hi.copy()
            lhi[axis] = split
            rlo = lo.copy()
            rlo[axis] = split
            ncopy = math.floor(self.epsilon * k + 1e-9)
            to_left = self._copies_for(rreal, axis, split, lo, lhi, ncopy)
            to_right = self._copies_for(lreal, axis, split, rlo, hi, ncopy)
            self.splits.append(SplitInfo(node, axis, float(split), k, len(to_left), len(to_right)))

            left = self._new_node()
            right = self._new_node()
            self.node_axis[node] = axis
            self.node_split[node] = split
            self.node_left[node] = left
            self.node_right[node] = right
            # right pushed first so the left subtree gets the lower leaf ids
            stack.append((right, rreal, np.concatenate([rcopy, to_right]), rlo, hi))
            stack.append((left, lreal, np.concatenate([lcopy, to_left]), lo, lhi))

    # -- queries -----------------------------------------------------------
    @property
    def leaf_count(self) -> int:
        return len(self.leaf_real_idx)

    def query(self, x_d, x_l) -> int:
        """Leaf index of a configuration; values below a split go left."""
        q = self.normalise(x_d, x_l)[0]
        node = 0
        while self.node_leaf[node] < 0:
            node = self.node_left[node] if q[self.node_axis[node]] < self.node_split[node] \
                else self.node_right[node]
        return int(self.node_leaf[node])

    def real_counts(self) -> np.ndarray:
        return np.array([len(r) for r in self.leaf_real_idx], dtype=np.int64)

    def copy_counts(self) -> np.ndarray:
        return np.array([len(c) for c in self.leaf_copy_idx], dtype=np.int64)

    def leaf_records(self, leaf: int) -> np.ndarray:
        """Records of a leaf, copies included and marked with the copy flag."""
        real = self.records[self.leaf_real_idx[leaf]]
        cp = self.records[self.leaf_copy_idx[leaf]].copy()
        cp["code"] |= np.uint16(1 << 15)
        return np.concatenate([real, cp])

    def selective_active(self, x_d, x_l) -> bool:
        """True iff the configuration's leaf holds at least one real sample."""
        return len(self.leaf_real_idx[self.query(x_d, x_l)]) > 0

    def dump(self) -> str:
        lines = [f"samples: {self.size}", f"threshold: {self.threshold}",
                 f"leaves: {self.leaf_count}", f"splits: {len(self.splits)}"]
        for i in range(self.leaf_count):
            lo = " ".join(f"{v:.4f}" for v in self.leaf_lo[i])
            hi = " ".join(f"{v:.4f}" for v in self.leaf_hi[i])
            n, _, _ = decode_code(self.records["code"][self.leaf_real_idx[i]])
            lengths = ",".join(str(int(v)) for v in sorted(set(n.tolist())))
            lines.append(f"leaf {i}: real={len(self.leaf_real_idx[i])} copies={len(self.leaf_copy_idx[i])} "
                         f"lo=[{lo}] hi=[{hi}] lengths=[{lengths}]")
        return "\n".join(lines)


def rebuild(records, bounds, epsilon: float = 0.1) -> GuidingTree:
    """Build a fresh tree from the last iteration's samples."""
    if records is None or len(records) == 0:
        records = np.zeros(0, dtype=RECORD_DTYPE)
    return GuidingTree(records, bounds, epsilon)
