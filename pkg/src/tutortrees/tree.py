"""Binary CART induction with exact midpoint split candidates.

Classification trees minimize weighted Gini impurity over high/low labels;
regression trees minimize weighted squared error. Candidate thresholds are
the midpoints of consecutive distinct sorted values of each candidate
feature, and tie-breaks are deterministic (lowest feature index, then lowest
threshold) so the 100,000-model sweep is reproducible bit for bit.

The split search runs on a presorted design (`Design`) so that forests and
sweeps can share one sort of the training matrix across every bootstrap
resample, label binarization, and seed.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import generator

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass(frozen=True)
class TreeParams:
    """Induction hyperparameters.

    mtry=None means "all features" for standalone trees; forests resolve it
    to ceil(sqrt(n_features)) at fit time.
    """

    max_depth: int | None = 2
    min_leaf: int = 5
    mtry: int | None = None
    task: str = CLASSIFICATION

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.task not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class TreeNode:
    """One CART node: a split (feature/threshold/children) or a leaf.

    Every node carries the raw-outcome annotation (n, mean, sd) of the
    training rows routed through it; classification leaves additionally hold
    high/low class counts and regression leaves the mean outcome. Routing
    convention: x[feature] <= threshold goes left.
    """

    n: float
    raw_mean: float
    raw_sd: float
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    n_high: float | None = None
    n_low: float | None = None
    mean_outcome: float | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def leaf_proba(self) -> float:
        """High-class fraction at a classification leaf."""
        return self.n_high / (self.n_high + self.n_low)

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())


class Design:
    """Presorted view of a training matrix, shared across many tree fits."""

    def __init__(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("X must be 2-D (rows x features)")
        if not np.isfinite(X).all():
            raise ValueError("X must be finite")
        self.X = X
        self.n, self.n_features = X.shape
        self.orders = np.empty((self.n_features, self.n), dtype=np.intp)
        self.svals = np.empty((self.n_features, self.n), dtype=np.float64)
        for f in range(self.n_features):
            order = np.argsort(X[:, f], kind="stable")
            self.orders[f] = order
            self.svals[f] = X[order, f]
        # Boundary i separates sorted positions i and i+1; only distinct
        # neighbours admit a split there.
        self.distinct = self.svals[:, 1:] > self.svals[:, :-1]


class TargetView:
    """Labels/outcomes pre-gathered into each feature's sorted order."""

    def __init__(self, design: Design, y: np.ndarray, raw: np.ndarray, task: str):
        y = np.asarray(y, dtype=np.float64)
        raw = np.asarray(raw, dtype=np.float64)
        if y.shape != (design.n,) or raw.shape != (design.n,):
            raise ValueError("y/raw length must match the design")
        self.design = design
        self.task = task
        self.y = y
        self.y_sq = y * y if task == REGRESSION else None
        self.raw = raw
        self.raw_sq = raw * raw
        self.ys = y[design.orders]
        self.ys_sq = self.ys * self.ys if task == REGRESSION else None


def _node_annotation(view: TargetView, w: np.ndarray, total: float):
    raw_sum = float(w @ view.raw)
    raw_sq = float(w @ view.raw_sq)
    mean = raw_sum / total
    if total > 1:
        var = max(0.0, (raw_sq - total * mean * mean) / (total - 1.0))
        sd = math.sqrt(var)
    else:
        sd = 0.0
    return mean, sd


def _leaf(view: TargetView, w: np.ndarray, total: float, wy: float) -> TreeNode:
    mean, sd = _node_annotation(view, w, total)
    node = TreeNode(n=total, raw_mean=mean, raw_sd=sd)
    if view.task == CLASSIFICATION:
        node.n_high = wy
        node.n_low = total - wy
    else:
        node.mean_outcome = wy / total
    return node


def _best_split(view: TargetView, w: np.ndarray, feats, min_leaf: int,
                total: float, wy: float, wy2: float):
    """Scan candidate features; return (feature, boundary, impurity) or None.

    Impurity is the size-weighted child Gini (classification) or the pooled
    child SSE divided by the node size (regression), computed for every
    distinct-value boundary in one cumulative pass.
    """
    design = view.design
    best = None
    best_imp = math.inf
    for f in feats:
        wo = w[design.orders[f]]
        cw = np.cumsum(wo)[:-1]
        nr = total - cw
        valid = design.distinct[f] & (cw >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        if view.task == CLASSIFICATION:
            ch = np.cumsum(wo * view.ys[f])[:-1]
            hr = wy - ch
            with np.errstate(divide="ignore", invalid="ignore"):
                gl = 1.0 - (ch / cw) ** 2 - ((cw - ch) / cw) ** 2
                gr = 1.0 - (hr / nr) ** 2 - ((nr - hr) / nr) ** 2
                imp = (cw * gl + nr * gr) / total
        else:
            cs = np.cumsum(wo * view.ys[f])[:-1]
            cs2 = np.cumsum(wo * view.ys_sq[f])[:-1]
            with np.errstate(divide="ignore", invalid="ignore"):
                sse_l = cs2 - cs * cs / cw
                sse_r = (wy2 - cs2) - (wy - cs) ** 2 / nr
                imp = (sse_l + sse_r) / total
        imp = np.where(valid, imp, math.inf)
        pos = int(np.argmin(imp))
        if imp[pos] < best_imp:
            best_imp = float(imp[pos])
            best = (f, pos)
    if best is None:
        return None
    return best[0], best[1], best_imp


def _midpoint_threshold(design: Design, w: np.ndarray, f: int, pos: int) -> float:
    """Midpoint between the last/first *present* values around a boundary.

    With zero-weight rows interleaved (bootstrap), the spec's "consecutive
    distinct sorted values" refer to values actually present in the sample.
    """
    wo = w[design.orders[f]]
    sv = design.svals[f]
    left_present = np.flatnonzero(wo[: pos + 1] > 0)
    right_present = np.flatnonzero(wo[pos + 1:] > 0)
    lv = sv[left_present[-1]]
    rv = sv[pos + 1 + right_present[0]]
    return (lv + rv) / 2.0


def _parent_impurity(view: TargetView, total: float, wy: float, wy2: float) -> float:
    if view.task == CLASSIFICATION:
        p_high = wy / total
        p_low = 1.0 - p_high
        return 1.0 - p_high * p_high - p_low * p_low
    return max(0.0, wy2 - wy * wy / total) / total


def _is_pure(view: TargetView, total: float, wy: float, wy2: float) -> bool:
    if view.task == CLASSIFICATION:
        return wy == 0.0 or wy == total
    return (wy2 - wy * wy / total) <= 1e-12 * max(1.0, wy2)


def _grow(view: TargetView, w: np.ndarray, params: TreeParams, rng,
          mtry: int, depth: int) -> TreeNode:
    total = float(w.sum())
    wy = float(w @ view.y)
    wy2 = float(w @ view.y_sq) if view.task == REGRESSION else 0.0

    at_depth_limit = params.max_depth is not None and depth >= params.max_depth
    if (at_depth_limit or total < 2 * params.min_leaf
            or _is_pure(view, total, wy, wy2)):
        return _leaf(view, w, total, wy)

    nf = view.design.n_features
    if mtry >= nf:
        feats = range(nf)
    else:
        feats = np.sort(rng.permutation(nf)[:mtry])

    found = _best_split(view, w, feats, params.min_leaf, total, wy, wy2)
    if found is None:
        return _leaf(view, w, total, wy)
    f, pos, imp = found
    if not imp < _parent_impurity(view, total, wy, wy2):
        return _leaf(view, w, total, wy)

    thr = _midpoint_threshold(view.design, w, f, pos)
    go_left = view.design.X[:, f] <= thr
    w_left = np.where(go_left, w, 0.0)
    w_right = w - w_left
    node = _leaf(view, w, total, wy)  # carries annotation and leaf stats
    node.feature = int(f)
    node.threshold = float(thr)
    node.left = _grow(view, w_left, params, rng, mtry, depth + 1)
    node.right = _grow(view, w_right, params, rng, mtry, depth + 1)
    return node


def _as_generator(rng) -> np.random.Generator:
    if rng is None:
        return generator(0)
    if isinstance(rng, np.random.Generator):
        return rng
    return generator(int(rng))


def fit_tree_view(view: TargetView, weights: np.ndarray, params: TreeParams,
                  rng) -> TreeNode:
    """Fit on a prebuilt design/target view; the sweep-internal fast path."""
    mtry = params.mtry if params.mtry is not None else view.design.n_features
    if mtry > view.design.n_features:
        raise ValueError(
            f"mtry={mtry} exceeds {view.design.n_features} features")
    return _grow(view, weights, params, _as_generator(rng), mtry, 0)


def fit_tree(X, y, raw_outcomes=None, params: TreeParams | None = None,
             rng=None) -> TreeNode:
    """Fit a CART tree.

    y holds 0/1 high-low labels (classification) or real outcomes
    (regression); raw_outcomes are the untransformed scores used for leaf
    mean/SD annotation and default to y.
    """
    params = params or TreeParams()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=np.float64)
    if params.task == CLASSIFICATION and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("classification labels must be 0/1")
    if raw_outcomes is None:
        raw_outcomes = y
    if X.shape[0] < 2 * params.min_leaf:
        raise ValueError(
            f"need at least {2 * params.min_leaf} rows, got {X.shape[0]}")
    design = Design(X)
    view = TargetView(design, y, np.asarray(raw_outcomes, dtype=np.float64),
                      params.task)
    return fit_tree_view(view, np.ones(design.n), params, rng)


# ---------------------------------------------------------------------------
# Prediction


def _check_rows(tree: TreeNode, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X.reshape(1, -1)
    if not np.isfinite(X).all():
        raise ValueError("features must be finite (no NaN/inf)")
    width = X.shape[1]
    max_feat = _max_feature_index(tree)
    if max_feat >= width:
        raise ValueError(
            f"tree splits on feature {max_feat} but rows have {width}")
    return X, single


def _max_feature_index(node: TreeNode) -> int:
    if node.is_leaf:
        return -1
    return max(node.feature, _max_feature_index(node.left),
               _max_feature_index(node.right))


def _route_values(node: TreeNode, X: np.ndarray, idx: np.ndarray,
                  out: np.ndarray, leaf_value) -> None:
    if node.is_leaf:
        out[idx] = leaf_value(node)
        return
    mask = X[idx, node.feature] <= node.threshold
    _route_values(node.left, X, idx[mask], out, leaf_value)
    _route_values(node.right, X, idx[~mask], out, leaf_value)


def apply_leaf_values(tree: TreeNode, X: np.ndarray, leaf_value) -> np.ndarray:
    """Route rows and read a per-leaf quantity; no validation (hot path)."""
    out = np.empty(X.shape[0], dtype=np.float64)
    _route_values(tree, X, np.arange(X.shape[0]), out, leaf_value)
    return out


def predict_proba(tree: TreeNode, x) -> float | np.ndarray:
    """High-class probability (leaf high fraction) for one row or a matrix."""
    X, single = _check_rows(tree, x)
    probas = apply_leaf_values(tree, X, lambda leaf: leaf.leaf_proba)
    return float(probas[0]) if single else probas


def predict_label(tree: TreeNode, x) -> bool | np.ndarray:
    """High/low prediction: high iff the leaf's high fraction exceeds 1/2.

    The tie (fraction exactly 1/2) resolves to low.
    """
    proba = predict_proba(tree, x)
    if isinstance(proba, float):
        return proba > 0.5
    return proba > 0.5


def predict_value(tree: TreeNode, x) -> float | np.ndarray:
    """Regression prediction: the leaf's mean outcome."""
    X, single = _check_rows(tree, x)
    vals = apply_leaf_values(tree, X, lambda leaf: leaf.mean_outcome)
    return float(vals[0]) if single else vals


def annotate_tree(tree: TreeNode, X, raw_outcomes) -> TreeNode:
    """Copy of `tree` with (n, mean, sd) annotations recomputed on new data.

    Split structure and leaf class counts are untouched; only the raw-score
    summaries change (used to re-describe a final model on the whole
    dataset).
    """
    X = np.asarray(X, dtype=np.float64)
    raw = np.asarray(raw_outcomes, dtype=np.float64)

    def recurse(node: TreeNode, idx: np.ndarray) -> TreeNode:
        vals = raw[idx]
        n = float(vals.size)
        if n > 0:
            mean = float(vals.mean())
            sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        else:
            mean, sd = 0.0, 0.0
        clone = replace(node)
        clone.n, clone.raw_mean, clone.raw_sd = n, mean, sd
        if not node.is_leaf:
            mask = X[idx, node.feature] <= node.threshold
            clone.left = recurse(node.left, idx[mask])
            clone.right = recurse(node.right, idx[~mask])
        return clone

    return recurse(tree, np.arange(X.shape[0]))


# ---------------------------------------------------------------------------
# Export


def tree_to_dict(tree: TreeNode, feature_names: list[str]) -> dict:
    """Structured form of a tree: {type, feature, threshold, children | n, mean, sd, class}."""
    if tree.is_leaf:
        out = {
            "type": "leaf",
            "n": tree.n,
            "mean": tree.raw_mean,
            "sd": tree.raw_sd,
        }
        if tree.mean_outcome is not None:
            out["value"] = tree.mean_outcome
        else:
            out["class"] = "high" if tree.leaf_proba > 0.5 else "low"
            out["n_high"] = tree.n_high
            out["n_low"] = tree.n_low
        return out
    return {
        "type": "split",
        "feature": feature_names[tree.feature],
        "threshold": tree.threshold,
        "n": tree.n,
        "children": [tree_to_dict(tree.left, feature_names),
                     tree_to_dict(tree.right, feature_names)],
    }


def tree_from_dict(d: dict, feature_names: list[str]) -> TreeNode:
    """Inverse of tree_to_dict; feature names are resolved back to indices."""
    if d["type"] == "leaf":
        node = TreeNode(n=float(d["n"]), raw_mean=float(d["mean"]),
                        raw_sd=float(d["sd"]))
        if "value" in d:
            node.mean_outcome = float(d["value"])
        else:
            node.n_high = float(d["n_high"])
            node.n_low = float(d["n_low"])
        return node
    left, right = d["children"]
    return TreeNode(
        n=float(d["n"]), raw_mean=0.0, raw_sd=0.0,
        feature=feature_names.index(d["feature"]),
        threshold=float(d["threshold"]),
        left=tree_from_dict(left, feature_names),
        right=tree_from_dict(right, feature_names))


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def tree_to_dot(tree: TreeNode, feature_names: list[str]) -> str:
    """Graphviz rendering; byte-identical across exports of the same tree."""
    lines = ["digraph tree {", '  node [shape=box, fontname="helvetica"];']
    counter = [0]

    def emit(node: TreeNode) -> int:
        nid = counter[0]
        counter[0] += 1
        if node.is_leaf:
            if node.mean_outcome is not None:
                head = f"value={_fmt(node.mean_outcome)}"
            else:
                head = "class=" + ("high" if node.leaf_proba > 0.5 else "low")
            label = (f"{head}\\nn={node.n:g}\\n"
                     f"mean={_fmt(node.raw_mean)} (sd={_fmt(node.raw_sd)})")
            lines.append(f'  n{nid} [label="{label}"];')
            return nid
        label = (f"{feature_names[node.feature]} <= {_fmt(node.threshold)}"
                 f"\\nn={node.n:g}")
        lines.append(f'  n{nid} [label="{label}"];')
        left_id = emit(node.left)
        right_id = emit(node.right)
        lines.append(f'  n{nid} -> n{left_id} [label="yes"];')
        lines.append(f'  n{nid} -> n{right_id} [label="no"];')
        return nid

    emit(tree)
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_tree(tree: TreeNode, feature_names: list[str],
                format: str = "dot") -> str:
    """Render a tree as graphviz DOT or indented JSON."""
    if format == "dot":
        return tree_to_dot(tree, feature_names)
    if format == "json":
        return json.dumps(tree_to_dict(tree, feature_names), indent=2,
                          sort_keys=True) + "\n"
    raise ValueError(f"unknown export format {format!r}")
