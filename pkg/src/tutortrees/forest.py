"""Bagged tree ensembles: a random forest classifier that predicts by
majority vote and a random forest regressor that predicts by member mean.

Each member tree i draws its bootstrap resample and per-split feature
subsets from a child generator seeded by splitmix(seed, i), so training is
reproducible and members could be fit in any order (results are assembled
by member index).
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._rng import generator, mix
from .tree import (CLASSIFICATION, REGRESSION, Design, TargetView, TreeNode,
                   TreeParams, apply_leaf_values, fit_tree_view, tree_to_dict)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 10
    tree_params: TreeParams = field(default_factory=TreeParams)
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")


def resolve_mtry(tree_params: TreeParams, n_features: int) -> int:
    """Forest default: ceil(sqrt(n_features)) candidate features per split."""
    if tree_params.mtry is not None:
        if tree_params.mtry > n_features:
            raise ValueError(
                f"mtry={tree_params.mtry} exceeds {n_features} features")
        return tree_params.mtry
    return math.ceil(math.sqrt(n_features))


@dataclass
class Forest:
    """A fitted ensemble; member order is training order, so an index
    identifies a member for extraction."""

    members: list[TreeNode]
    params: ForestParams
    n_features: int
    n_rows: int

    def member_seed(self, i: int) -> int:
        return mix(self.params.seed, i)

    def bootstrap_counts(self, i: int) -> np.ndarray:
        """Recompute member i's bootstrap multiplicities (training is pure)."""
        if not self.params.bootstrap:
            return np.ones(self.n_rows, dtype=np.int64)
        rng = generator(self.member_seed(i))
        idx = rng.integers(0, self.n_rows, self.n_rows)
        return np.bincount(idx, minlength=self.n_rows)

    def bootstrap_digest(self, i: int) -> str:
        counts = self.bootstrap_counts(i).astype(np.int64)
        return hashlib.sha256(counts.tobytes()).hexdigest()[:16]


def fit_forest_view(view: TargetView, params: ForestParams) -> Forest:
    """Fit on a prebuilt design/target view; the sweep-internal fast path."""
    n = view.design.n
    if view.task == CLASSIFICATION:
        pos = float(view.y.sum())
        if pos == 0.0 or pos == n:
            raise ValueError(
                f"degenerate labels: {int(pos)} high / {int(n - pos)} low")
    tree_params = TreeParams(
        max_depth=params.tree_params.max_depth,
        min_leaf=params.tree_params.min_leaf,
        mtry=resolve_mtry(params.tree_params, view.design.n_features),
        task=view.task,
    )
    members = []
    ones = np.ones(n, dtype=np.float64)
    for i in range(params.n_trees):
        rng = generator(mix(params.seed, i))
        if params.bootstrap:
            idx = rng.integers(0, n, n)
            w = np.bincount(idx, minlength=n).astype(np.float64)
        else:
            w = ones
        members.append(fit_tree_view(view, w, tree_params, rng))
    return Forest(members=members, params=params,
                  n_features=view.design.n_features, n_rows=n)


def fit_forest(X, y, raw_outcomes=None, params: ForestParams | None = None) -> Forest:
    """Fit a bagged ensemble.

    Classification when params.tree_params.task says so (y must contain both
    classes); regression otherwise.
    """
    params = params or ForestParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if raw_outcomes is None:
        raw_outcomes = y
    design = Design(X)
    view = TargetView(design, y, np.asarray(raw_outcomes, dtype=np.float64),
                      params.tree_params.task)
    return fit_forest_view(view, params)


def member_probas(forest: Forest, X: np.ndarray) -> np.ndarray:
    """(n_trees, n_rows) matrix of member high-class fractions; no validation."""
    out = np.empty((len(forest.members), X.shape[0]))
    for i, tree in enumerate(forest.members):
        out[i] = apply_leaf_values(tree, X, lambda leaf: leaf.leaf_proba)
    return out


def _rows(x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X.reshape(1, -1)
    if not np.isfinite(X).all():
        raise ValueError("features must be finite (no NaN/inf)")
    return X, single


def majority_vote(forest: Forest, x) -> bool | np.ndarray:
    """High iff strictly more than half the members predict high.

    An exact tie (even n_trees) resolves to low, mirroring the leaf rule.
    """
    X, single = _rows(x)
    votes = (member_probas(forest, X) > 0.5).sum(axis=0)
    high = votes > len(forest.members) / 2
    return bool(high[0]) if single else high


def ensemble_proba(forest: Forest, x) -> float | np.ndarray:
    """Mean member high fraction; the ensemble's AUC ranking score."""
    X, single = _rows(x)
    probas = member_probas(forest, X).mean(axis=0)
    return float(probas[0]) if single else probas


def rfr_predict(forest: Forest, x) -> float | np.ndarray:
    """Regression prediction: mean of member leaf means."""
    X, single = _rows(x)
    preds = np.zeros(X.shape[0])
    for tree in forest.members:
        preds += apply_leaf_values(tree, X, lambda leaf: leaf.mean_outcome)
    preds /= len(forest.members)
    return float(preds[0]) if single else preds


def rfr_r2(forest: Forest, test_rows, test_outcomes) -> float:
    """Out-of-sample R^2 = 1 - SS_res / SS_tot; may be negative."""
    X, _ = _rows(test_rows)
    y = np.asarray(test_outcomes, dtype=np.float64)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("R^2 undefined: test outcomes have zero variance")
    preds = rfr_predict(forest, X)
    ss_res = float(((y - preds) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def forest_to_dict(forest: Forest, feature_names: list[str]) -> dict:
    """JSON-ready export: params, member trees, bootstrap digests."""
    return {
        "params": {
            "n_trees": forest.params.n_trees,
            "bootstrap": forest.params.bootstrap,
            "seed": forest.params.seed,
            "max_depth": forest.params.tree_params.max_depth,
            "min_leaf": forest.params.tree_params.min_leaf,
            "mtry": resolve_mtry(forest.params.tree_params, forest.n_features),
            "task": forest.params.tree_params.task,
        },
        "members": [tree_to_dict(t, feature_names) for t in forest.members],
        "bootstrap_digests": [forest.bootstrap_digest(i)
                              for i in range(len(forest.members))],
    }


def export_forest(forest: Forest, feature_names: list[str]) -> str:
    return json.dumps(forest_to_dict(forest, feature_names), indent=2,
                      sort_keys=True) + "\n"
