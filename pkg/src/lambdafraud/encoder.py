"""Gradient-boosted regression trees for logistic loss, exact greedy splits.

One model serves two purposes: as a tabular classifier (:func:`predict`) and
as a feature encoder (:func:`encode`), where a transaction is represented by
the raw value of the leaf it reaches in every tree.

Trees are stored flat. A leaf points to itself on both sides with an infinite
threshold, so a fixed ``max_depth`` walk lands every row on its leaf without
branching on node type.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Sequence

import numba
import numpy as np

from . import _io

_MAGIC = b"LFGB"
_VERSION = 1
_PRIOR_CLAMP = 1e-6


class DimensionError(ValueError):
    pass


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def logloss(labels: np.ndarray, margin: np.ndarray) -> float:
    y = np.asarray(labels, dtype=np.float64)
    m = np.asarray(margin, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, m) - y * m))


@dataclass
class GBDTParams:
    n_trees: int = 64
    max_depth: int = 4
    shrinkage: float = 0.1
    min_leaf: int = 20
    reg_lambda: float = 1.0
    subsample: float = 1.0
    seed: int = 0
    early_stopping_rounds: int | None = None


@dataclass
class GBDTModel:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    roots: np.ndarray
    base_score: float
    shrinkage: float
    max_depth: int
    n_features: int
    meta: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    # -- inference --------------------------------------------------------

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.n_features:
            raise DimensionError(f"expected {self.n_features} features, got shape {x.shape}")
        return x2

    def leaves(self, x) -> np.ndarray:
        """Flat node index of the leaf reached in every tree, shape ``(n, n_trees)``."""
        x2 = self._check(x)
        nodes = np.broadcast_to(self.roots, (len(x2), self.n_trees)).copy()
        rows = np.arange(len(x2))[:, None]
        for _ in range(self.max_depth):
            go_left = x2[rows, self.feature[nodes]] < self.threshold[nodes]
            nodes = np.where(go_left, self.left[nodes], self.right[nodes])
        return nodes

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = self.value[self.leaves(x)]
        return out[0] if x.ndim == 1 else out

    def margin(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=np.float64)
        m = self.base_score + self.shrinkage * self.value[self.leaves(x)].sum(axis=1)
        return float(m[0]) if x.ndim == 1 else m

    def predict(self, x):
        return sigmoid(self.margin(x))

    # -- construction -----------------------------------------------------

    @classmethod
    def from_nested(cls, trees: Sequence[Any], n_features: int, base_score: float = 0.0,
                    shrinkage: float = 1.0) -> "GBDTModel":
        """Build from nested tuples: ``("leaf", v)`` or ``("split", feat, thr, left, right)``."""
        feature, threshold, left, right, value, roots = [], [], [], [], [], []
        depth = 0

        def add(node, d):
            nonlocal depth
            idx = len(feature)
            feature.append(0)
            threshold.append(np.inf)
            left.append(idx)
            right.append(idx)
            value.append(0.0)
            if node[0] == "leaf":
                value[idx] = float(node[1])
                depth = max(depth, d)
            else:
                _, f, thr, l, r = node
                feature[idx] = int(f)
                threshold[idx] = float(thr)
                left[idx] = add(l, d + 1)
                right[idx] = add(r, d + 1)
            return idx

        for t in trees:
            roots.append(add(t, 0))
        return cls(
            np.array(feature, np.int32), np.array(threshold, np.float64), np.array(left, np.int32),
            np.array(right, np.int32), np.array(value, np.float64), np.array(roots, np.int32),
            float(base_score), float(shrinkage), depth, int(n_features),
        )

    # -- persistence ------------------------------------------------------

    def to_bytes(self) -> bytes:
        meta = {
            "base_score": self.base_score,
            "shrinkage": self.shrinkage,
            "max_depth": self.max_depth,
            "n_features": self.n_features,
            "meta": self.meta,
        }
        arrays = {
            "feature": self.feature, "threshold": self.threshold, "left": self.left,
            "right": self.right, "value": self.value, "roots": self.roots,
        }
        return _io.pack(_MAGIC, _VERSION, meta, arrays)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "GBDTModel":
        _, m, a = _io.unpack(data, _MAGIC, _VERSION)
        return cls(a["feature"], a["threshold"], a["left"], a["right"], a["value"], a["roots"],
                   m["base_score"], m["shrinkage"], m["max_depth"], m["n_features"], m.get("meta", {}))

    @classmethod
    def load(cls, path: str | Path) -> "GBDTModel":
        return cls.from_bytes(Path(path).read_bytes())

    def checksum(self) -> str:
        return _io.digest(self.to_bytes())


def predict(model: GBDTModel, x):
    return model.predict(x)


def encode(model: GBDTModel, x) -> np.ndarray:
    return model.encode(x)


# -- training -------------------------------------------------------------


class _TreeBuilder:
    """Level-wise exact greedy split search over presorted feature columns."""

    def __init__(self, x: np.ndarray, params: GBDTParams):
        self.xt = np.ascontiguousarray(x.T)
        self.sorted_idx = np.argsort(self.xt, axis=1, kind="stable")
        self.p = params

    def build(self, g: np.ndarray, h: np.ndarray, active: np.ndarray):
        """Grow one tree on the ``active`` rows; returns flat node lists local to the tree."""
        p = self.p
        lam = p.reg_lambda
        n_feat, n = self.xt.shape
        feature, threshold, left, right, value = [], [], [], [], []

        def new_node():
            i = len(feature)
            feature.append(0)
            threshold.append(np.inf)
            left.append(i)
            right.append(i)
            value.append(0.0)
            return i

        root = new_node()
        level_nodes = [root]
        node_of = np.where(active, 0, -1).astype(np.int64)

        for depth in range(p.max_depth + 1):
            k = len(level_nodes)
            if k == 0:
                break
            in_level = node_of >= 0
            G = np.bincount(node_of[in_level], weights=g[in_level], minlength=k)
            H = np.bincount(node_of[in_level], weights=h[in_level], minlength=k)
            cnt = np.bincount(node_of[in_level], minlength=k)
            best = [None] * k
            if depth < p.max_depth:
                best = self._best_splits(g, h, node_of, G, H, cnt)
            next_nodes = []
            new_node_of = np.full(n, -1, dtype=np.int64)
            for j, tn in enumerate(level_nodes):
                if best[j] is None:
                    value[tn] = float(-G[j] / (H[j] + lam))
                    continue
                f, thr = best[j]
                lc, rc = new_node(), new_node()
                feature[tn], threshold[tn], left[tn], right[tn] = f, thr, lc, rc
                rows = np.nonzero(node_of == j)[0]
                goes_left = self.xt[f, rows] < thr
                new_node_of[rows] = np.where(goes_left, len(next_nodes), len(next_nodes) + 1)
                next_nodes.extend([lc, rc])
            level_nodes = next_nodes
            node_of = new_node_of
        return feature, threshold, left, right, value

    def _best_splits(self, g, h, node_of, G, H, cnt):
        k = len(G)
        if int(cnt.sum()) < 2:
            return [None] * k
        gain, feat, thr = _split_kernel(self.sorted_idx, self.xt, g, h, node_of, cnt.astype(np.int64), G, H,
                                        float(self.p.reg_lambda), int(self.p.min_leaf))
        return [(int(feat[j]), float(thr[j])) if feat[j] >= 0 and gain[j] > 1e-12 else None for j in range(k)]


@numba.njit(cache=True)
def _split_kernel(sorted_idx, xt, g, h, node_of, cnt, G, H, lam, min_leaf):
    """Best (gain, feature, threshold) per level node.

    Each feature row of ``sorted_idx`` is counting-sorted by node, which keeps
    rows in ascending feature order within a node; then one left-to-right scan
    accumulates the left-child gradient sums. On equal gain the lowest feature
    and leftmost threshold win.
    """
    n_feat, n = sorted_idx.shape
    k = cnt.shape[0]
    starts = np.zeros(k, np.int64)
    for j in range(1, k):
        starts[j] = starts[j - 1] + cnt[j - 1]
    parent = np.empty(k)
    for j in range(k):
        parent[j] = G[j] * G[j] / (H[j] + lam)
    best_gain = np.full(k, -np.inf)
    best_feat = np.full(k, -1, np.int64)
    best_thr = np.zeros(k)
    grouped = np.empty(starts[k - 1] + cnt[k - 1], np.int64)
    fill = np.empty(k, np.int64)
    for f in range(n_feat):
        for j in range(k):
            fill[j] = starts[j]
        for i in range(n):
            r = sorted_idx[f, i]
            j = node_of[r]
            if j >= 0:
                grouped[fill[j]] = r
                fill[j] += 1
        for j in range(k):
            lo = starts[j]
            c = cnt[j]
            gl = 0.0
            hl = 0.0
            for i in range(c - 1):
                r = grouped[lo + i]
                gl += g[r]
                hl += h[r]
                nl = i + 1
                if c - nl < min_leaf:
                    break
                if nl < min_leaf:
                    continue
                x0 = xt[f, r]
                x1 = xt[f, grouped[lo + i + 1]]
                if x0 < x1:
                    gr = G[j] - gl
                    hr = H[j] - hl
                    gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent[j]
                    if gain > best_gain[j]:
                        best_gain[j] = gain
                        best_feat[j] = f
                        t = 0.5 * (x0 + x1)
                        if not t > x0:
                            t = x1
                        best_thr[j] = t
    return best_gain, best_feat, best_thr


def train_gbdt(features, labels, params: GBDTParams | None = None, *, val_features=None,
               val_labels=None) -> GBDTModel:
    """Fit boosted trees to logistic loss with Newton leaf values.

    If validation data and ``params.early_stopping_rounds`` are given, training
    stops once validation log-loss has not improved for that many trees and the
    model is truncated to its best iteration.
    """
    params = params or GBDTParams()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("features must be a non-empty 2-D array")
    if len(y) != len(x):
        raise ValueError("features and labels differ in length")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    if params.min_leaf < 1 or params.max_depth < 0 or params.n_trees < 0:
        raise ValueError("invalid GBDT parameters")

    prior = float(np.clip(y.mean(), _PRIOR_CLAMP, 1 - _PRIOR_CLAMP))
    base = float(np.log(prior / (1 - prior)))
    meta: dict = {"params": asdict(params), "degenerate": False, "train_logloss": []}
    empty = GBDTModel(np.zeros(0, np.int32), np.zeros(0), np.zeros(0, np.int32), np.zeros(0, np.int32),
                      np.zeros(0), np.zeros(0, np.int32), base, params.shrinkage, 0, x.shape[1], meta)
    if y.min() == y.max():
        meta["degenerate"] = True
        return empty

    use_val = val_features is not None and val_labels is not None and params.early_stopping_rounds is not None
    if use_val:
        xv = np.asarray(val_features, dtype=np.float64)
        yv = np.asarray(val_labels, dtype=np.float64).ravel()
        val_margin = np.full(len(yv), base)
        best_val, best_iter, meta["val_logloss"] = np.inf, 0, []

    rng = np.random.default_rng(params.seed)
    builder = _TreeBuilder(x, params)
    margin = np.full(len(y), base)
    feature, threshold, left, right, value, roots = [], [], [], [], [], []
    for it in range(params.n_trees):
        prob = sigmoid(margin)
        g = prob - y
        h = prob * (1.0 - prob)
        if params.subsample < 1.0:
            active = rng.random(len(y)) < params.subsample
        else:
            active = np.ones(len(y), bool)
        f_, t_, l_, r_, v_ = builder.build(g, h, active)
        off = len(feature)
        roots.append(off)
        feature += f_
        threshold += t_
        left += [i + off for i in l_]
        right += [i + off for i in r_]
        value += v_
        tree = GBDTModel(np.array(f_, np.int32), np.array(t_), np.array(l_, np.int32), np.array(r_, np.int32),
                         np.array(v_), np.array([0], np.int32), 0.0, 1.0, params.max_depth, x.shape[1])
        margin = margin + params.shrinkage * tree.encode(x)[:, 0]
        meta["train_logloss"].append(logloss(y, margin))
        if use_val:
            val_margin = val_margin + params.shrinkage * tree.encode(xv)[:, 0]
            vl = logloss(yv, val_margin)
            meta["val_logloss"].append(vl)
            if vl < best_val - 1e-12:
                best_val, best_iter = vl, it + 1
            elif it + 1 - best_iter >= params.early_stopping_rounds:
                break

    n_keep = best_iter if use_val else len(roots)
    if use_val:
        meta["best_iteration"] = n_keep
        meta["train_logloss"] = meta["train_logloss"][:n_keep]
    end = roots[n_keep] if n_keep < len(roots) else len(feature)
    roots = roots[:n_keep]
    model = GBDTModel(
        np.array(feature[:end], np.int32), np.array(threshold[:end], np.float64), np.array(left[:end], np.int32),
        np.array(right[:end], np.int32), np.array(value[:end], np.float64), np.array(roots, np.int32),
        base, params.shrinkage, params.max_depth, x.shape[1], meta,
    )
    return model
