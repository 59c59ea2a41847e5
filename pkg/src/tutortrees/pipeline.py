"""End-to-end model extraction: tutor-stratified fold search, nested
cross-validation, the binarization-threshold x forest-seed sweep with
agreement-based member extraction, validation selection, test reporting,
the score-change variant, and the baseline comparison harness.

Every random choice derives from the sweep's master seed, and all grid
reductions use documented deterministic tie-breaks (higher AUC, then lower
seed, lower threshold, lower fold index, lower member index), so a report
is a pure function of (cohort, config). The (threshold, seed) grid is
embarrassingly parallel; `jobs > 1` fans tasks out to processes and reduces
results in a schedule-independent order.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import STREAM_CV_ASSIGN, STREAM_FOLD_SEARCH, STREAM_FOREST, generator, mix
from .dataset import Cohort
from .forest import Forest, ForestParams, fit_forest_view, member_probas
from .metrics import r2_to_auc, roc_auc
from .tree import (CLASSIFICATION, REGRESSION, Design, TargetView, TreeNode,
                   TreeParams, annotate_tree, apply_leaf_values,
                   fit_tree_view, predict_label, tree_to_dict)

log = logging.getLogger(__name__)

DEFAULT_SCORE_THRESHOLDS = tuple(float(t) for t in range(15, 25))
DEFAULT_CHANGE_THRESHOLDS = (2.0, 2.5, 3.0, 3.5)

FEATURE_SETS = {
    "talk": tuple(range(0, 6)),
    "its": tuple(range(6, 11)),
    "combined": tuple(range(0, 11)),
}
METHODS = ("decision_tree", "rfc", "rfr", "extracted_dt")


@dataclass(frozen=True)
class SweepConfig:
    """Grid and model settings for one sweep run."""

    thresholds: tuple[float, ...] = DEFAULT_SCORE_THRESHOLDS
    n_seeds: int = 200
    n_trees: int = 10
    max_depth: int | None = 2
    min_leaf: int = 5
    mtry: int | None = None  # None: ceil(sqrt(n_features)) inside forests
    bootstrap: bool = True
    master_seed: int = 0
    fold_candidates: int = 1000
    agreement_on: str = "training"  # or "validation"
    jobs: int = 1

    def __post_init__(self):
        if len(self.thresholds) < 1:
            raise ValueError("need at least one threshold")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.agreement_on not in ("training", "validation"):
            raise ValueError("agreement_on must be 'training' or 'validation'")

    def tree_params(self, task: str = CLASSIFICATION) -> TreeParams:
        return TreeParams(max_depth=self.max_depth, min_leaf=self.min_leaf,
                          mtry=self.mtry, task=task)


def change_config(config: SweepConfig | None = None, **overrides) -> SweepConfig:
    """A config with the default change thresholds [2, 2.5, 3, 3.5]."""
    base = config or SweepConfig()
    overrides.setdefault("thresholds", DEFAULT_CHANGE_THRESHOLDS)
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# Fold search (tutor-stratified, best of N random partitions)


@dataclass
class FoldSet:
    tutors: tuple[str, ...]
    students: tuple[str, ...]
    ep_indices: np.ndarray


@dataclass
class FoldPlan:
    folds: list[FoldSet]
    sse: float

    def fold_of_student(self) -> dict[str, int]:
        out = {}
        for i, f in enumerate(self.folds):
            for s in f.students:
                out[s] = i
        return out


def partition_sse(candidate_folds, cohort: Cohort) -> float:
    """Sum over folds of (student_frac - 0.2)^2 + (tutor_frac - 0.2)^2.

    An empty fold disqualifies the candidate (+inf).
    """
    n_students = len(cohort.students)
    n_tutors = len(cohort.tutors)
    students_of = cohort.students_of_tutor
    sse = 0.0
    for tutors in candidate_folds:
        tutors = list(tutors)
        if not tutors:
            return float("inf")
        s_frac = sum(len(students_of[t]) for t in tutors) / n_students
        t_frac = len(tutors) / n_tutors
        sse += (s_frac - 0.2) ** 2 + (t_frac - 0.2) ** 2
    return sse


def _fold_sets(cohort: Cohort, assignment: np.ndarray,
               tutors: list[str]) -> list[FoldSet]:
    students_of = cohort.students_of_tutor
    fold_of_student = {}
    fold_tutors: list[list[str]] = [[] for _ in range(5)]
    for t, f in zip(tutors, assignment):
        fold_tutors[f].append(t)
        for s in students_of[t]:
            fold_of_student[s] = f
    ep_idx: list[list[int]] = [[] for _ in range(5)]
    for i, sid in enumerate(cohort.ep_students):
        ep_idx[fold_of_student[sid]].append(i)
    return [
        FoldSet(tutors=tuple(fold_tutors[f]),
                students=tuple(s for t in fold_tutors[f] for s in students_of[t]),
                ep_indices=np.array(ep_idx[f], dtype=np.intp))
        for f in range(5)
    ]


def search_fold_plan(cohort: Cohort, n_candidates: int = 1000,
                     rng=None) -> FoldPlan:
    """Best of n random tutor->fold assignments by partition_sse.

    Candidates with an empty fold are redrawn; ties keep the earliest
    candidate, and a shared rng stream makes best-of-N monotone in N.
    """
    tutors = sorted(cohort.tutors)
    if len(tutors) < 5:
        raise ValueError(f"need at least 5 tutors, got {len(tutors)}")
    if rng is None:
        rng = generator(STREAM_FOLD_SEARCH, 0)
    students_of = cohort.students_of_tutor
    counts = np.array([len(students_of[t]) for t in tutors], dtype=np.float64)
    n_students = counts.sum()
    n_tutors = float(len(tutors))

    best_sse = float("inf")
    best_assignment = None
    for _ in range(n_candidates):
        while True:
            assignment = rng.integers(0, 5, len(tutors))
            present = np.bincount(assignment, minlength=5)
            if (present > 0).all():
                break
        s_frac = np.bincount(assignment, weights=counts, minlength=5) / n_students
        t_frac = present / n_tutors
        sse = float(((s_frac - 0.2) ** 2).sum() + ((t_frac - 0.2) ** 2).sum())
        if sse < best_sse:
            best_sse = sse
            best_assignment = assignment
    return FoldPlan(folds=_fold_sets(cohort, best_assignment, tutors),
                    sse=best_sse)


@dataclass
class CvAssignment:
    test_fold: int
    validation_fold: int
    training_folds: tuple[int, ...]


def nested_cv_assignments(plan: FoldPlan, rng=None) -> list[CvAssignment]:
    """Each fold tests exactly once; one of the rest validates (random)."""
    if rng is None:
        rng = generator(STREAM_CV_ASSIGN, 0)
    out = []
    for test in range(len(plan.folds)):
        others = [f for f in range(len(plan.folds)) if f != test]
        validation = others[int(rng.integers(0, len(others)))]
        training = tuple(f for f in others if f != validation)
        out.append(CvAssignment(test_fold=test, validation_fold=validation,
                                training_folds=training))
    return out


# ---------------------------------------------------------------------------
# Agreement-based extraction


def _member_agreements(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Per-member fraction of rows where the member matches the vote."""
    labels = member_probas(forest, X) > 0.5
    votes = labels.sum(axis=0) > len(forest.members) / 2
    return (labels == votes).mean(axis=1)


def agreement(tree: TreeNode, forest: Forest, rows) -> float:
    """Fraction of rows where the tree's label equals the forest's vote."""
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[0] == 0:
        raise ValueError("agreement needs at least one row")
    tree_labels = np.asarray(predict_label(tree, X)).reshape(-1)
    member_labels = member_probas(forest, X) > 0.5
    vote = member_labels.sum(axis=0) > len(forest.members) / 2
    return float((tree_labels == vote).mean())


def extract_best_tree(forest: Forest, training_rows) -> tuple[int, float]:
    """Index and agreement of the member that agrees most with the vote.

    Ties go to the lowest member index.
    """
    X = np.asarray(training_rows, dtype=np.float64)
    agreements = _member_agreements(forest, X)
    idx = int(np.argmax(agreements))
    return idx, float(agreements[idx])


# ---------------------------------------------------------------------------
# The (threshold x seed) grid, one task per (fold, threshold)


@dataclass
class _GridTask:
    fold: int
    threshold_index: int
    threshold: float
    X_train: np.ndarray
    raw_train: np.ndarray
    X_val: np.ndarray
    raw_val: np.ndarray
    config: SweepConfig
    track_ensemble: bool = False


@dataclass
class _Candidate:
    seed: int
    validation_auc: float
    tree: TreeNode | None = None
    member_index: int = -1
    agreement: float = 0.0
    forest: Forest | None = None


@dataclass
class _GridResult:
    fold: int
    threshold_index: int
    threshold: float
    degenerate: bool
    extracted: _Candidate | None = None
    ensemble: _Candidate | None = None


def _forest_seed(config: SweepConfig, fold: int, i: int) -> int:
    return mix(config.master_seed, STREAM_FOREST, fold, i)


def _run_grid_task(task: _GridTask) -> _GridResult:
    cfg = task.config
    y_train = (task.raw_train >= task.threshold).astype(np.float64)
    y_val = (task.raw_val >= task.threshold).astype(np.uint8)
    n_high_t = y_train.sum()
    n_high_v = int(y_val.sum())
    if (n_high_t == 0 or n_high_t == y_train.size
            or n_high_v == 0 or n_high_v == y_val.size):
        return _GridResult(task.fold, task.threshold_index, task.threshold,
                           degenerate=True)

    design = Design(task.X_train)
    view = TargetView(design, y_train, task.raw_train, CLASSIFICATION)
    agree_rows = task.X_train if cfg.agreement_on == "training" else task.X_val
    half = cfg.n_trees / 2

    best_ext: _Candidate | None = None
    best_ens: _Candidate | None = None
    for i in range(cfg.n_seeds):
        params = ForestParams(n_trees=cfg.n_trees,
                              tree_params=cfg.tree_params(),
                              bootstrap=cfg.bootstrap,
                              seed=_forest_seed(cfg, task.fold, i))
        forest = fit_forest_view(view, params)

        labels = member_probas(forest, agree_rows) > 0.5
        votes = labels.sum(axis=0) > half
        agreements = (labels == votes).mean(axis=1)
        m_idx = int(np.argmax(agreements))
        tree = forest.members[m_idx]

        val_probas = apply_leaf_values(tree, task.X_val,
                                       lambda leaf: leaf.leaf_proba)
        val_auc = roc_auc(val_probas, y_val)
        if best_ext is None or val_auc > best_ext.validation_auc:
            best_ext = _Candidate(seed=i, validation_auc=val_auc, tree=tree,
                                  member_index=m_idx,
                                  agreement=float(agreements[m_idx]))

        if task.track_ensemble:
            ens_val = member_probas(forest, task.X_val).mean(axis=0)
            ens_auc = roc_auc(ens_val, y_val)
            if best_ens is None or ens_auc > best_ens.validation_auc:
                best_ens = _Candidate(seed=i, validation_auc=ens_auc,
                                      forest=forest)

    return _GridResult(task.fold, task.threshold_index, task.threshold,
                       degenerate=False, extracted=best_ext, ensemble=best_ens)


def _map_tasks(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks, chunksize=1))


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ExtractedModel:
    """A winning extracted tree plus its full provenance."""

    tree: TreeNode
    fold: int
    threshold: float
    seed: int
    member_index: int
    agreement: float
    validation_auc: float
    test_auc: float


@dataclass
class FoldOutcome:
    fold: int
    validation_fold: int
    test_tutors: tuple[str, ...]
    threshold: float
    seed: int
    member_index: int
    agreement: float
    validation_auc: float
    test_auc: float
    tree: TreeNode
    skipped_thresholds: tuple[float, ...]


@dataclass
class PipelineReport:
    feature_set: str
    feature_names: list[str]
    thresholds: tuple[float, ...]
    n_seeds: int
    master_seed: int
    fold_plan_tutors: list[tuple[str, ...]]
    fold_plan_sse: float
    fold_results: list[FoldOutcome]
    mean_test_auc: float
    final_model: ExtractedModel
    whole_dataset_auc: float
    whole_dataset_tree: TreeNode
    config: SweepConfig
    baselines: "BaselineTable | None" = None

    def to_dict(self) -> dict:
        d = {
            "feature_set": self.feature_set,
            "feature_names": list(self.feature_names),
            "config": _config_dict(self.config),
            "fold_plan": {
                "sse": self.fold_plan_sse,
                "tutors": [list(t) for t in self.fold_plan_tutors],
            },
            "folds": [
                {
                    "fold": fr.fold,
                    "validation_fold": fr.validation_fold,
                    "threshold": fr.threshold,
                    "seed": fr.seed,
                    "member_index": fr.member_index,
                    "agreement": fr.agreement,
                    "validation_auc": fr.validation_auc,
                    "test_auc": fr.test_auc,
                    "skipped_thresholds": list(fr.skipped_thresholds),
                }
                for fr in self.fold_results
            ],
            "mean_test_auc": self.mean_test_auc,
            "final_model": {
                "fold": self.final_model.fold,
                "threshold": self.final_model.threshold,
                "seed": self.final_model.seed,
                "member_index": self.final_model.member_index,
                "agreement": self.final_model.agreement,
                "validation_auc": self.final_model.validation_auc,
                "test_auc": self.final_model.test_auc,
                "whole_dataset_auc": self.whole_dataset_auc,
                "tree": tree_to_dict(self.whole_dataset_tree,
                                     list(self.feature_names)),
            },
        }
        if self.baselines is not None:
            d["baselines"] = self.baselines.to_dict()
        return d


def _config_dict(config: SweepConfig) -> dict:
    return {
        "thresholds": list(config.thresholds),
        "n_seeds": config.n_seeds,
        "n_trees": config.n_trees,
        "max_depth": config.max_depth,
        "min_leaf": config.min_leaf,
        "mtry": config.mtry,
        "bootstrap": config.bootstrap,
        "master_seed": config.master_seed,
        "fold_candidates": config.fold_candidates,
        "agreement_on": config.agreement_on,
    }


# ---------------------------------------------------------------------------
# Sweep orchestration


def _plan_and_assignments(cohort: Cohort, config: SweepConfig):
    plan = search_fold_plan(
        cohort, config.fold_candidates,
        generator(STREAM_FOLD_SEARCH, config.master_seed))
    assignments = nested_cv_assignments(
        plan, generator(STREAM_CV_ASSIGN, config.master_seed))
    return plan, assignments


def _fold_matrices(X, raw, plan, assignment):
    train_idx = np.concatenate(
        [plan.folds[f].ep_indices for f in assignment.training_folds])
    val_idx = plan.folds[assignment.validation_fold].ep_indices
    test_idx = plan.folds[assignment.test_fold].ep_indices
    return (X[train_idx], raw[train_idx], X[val_idx], raw[val_idx],
            X[test_idx], raw[test_idx])


def _extraction_sweep(X, raw, plan, assignments, config: SweepConfig,
                      track_ensemble: bool = False):
    """Run the full grid; returns per-fold winners (and RFC winners if asked)."""
    tasks = []
    fold_data = {}
    for a in assignments:
        Xt, rt, Xv, rv, Xs, rs = _fold_matrices(X, raw, plan, a)
        fold_data[a.test_fold] = (Xs, rs, Xv, rv)
        for t_idx, threshold in enumerate(config.thresholds):
            tasks.append(_GridTask(
                fold=a.test_fold, threshold_index=t_idx, threshold=threshold,
                X_train=Xt, raw_train=rt, X_val=Xv, raw_val=rv,
                config=config, track_ensemble=track_ensemble))
    results = _map_tasks(_run_grid_task, tasks, config.jobs)

    winners = {}
    for a in assignments:
        fold = a.test_fold
        fold_results = [r for r in results if r.fold == fold]
        skipped = tuple(r.threshold for r in fold_results if r.degenerate)
        live = [r for r in fold_results if not r.degenerate]
        if not live:
            raise ValueError(
                f"fold {fold}: all thresholds degenerate on the training set")
        # Higher AUC wins; ties prefer the lower seed, then lower threshold.
        ext = min(live, key=lambda r: (-r.extracted.validation_auc,
                                       r.extracted.seed, r.threshold_index))
        ens = None
        if track_ensemble:
            ens = min(live, key=lambda r: (-r.ensemble.validation_auc,
                                           r.ensemble.seed, r.threshold_index))
        winners[fold] = {"extracted": ext, "ensemble": ens,
                         "skipped": skipped, "assignment": a,
                         "test_data": fold_data[fold][:2]}
    return winners


def run_sweep(cohort: Cohort, config: SweepConfig | None = None,
              feature_set: str = "combined") -> PipelineReport:
    """The six-step procedure end to end on one cohort.

    Per fold: binarize at each threshold, fit one forest per seed, extract
    the member that agrees most with the vote, keep the extraction with the
    best validation AUC; evaluate the five winners on their test folds; the
    final model is the winner from the fold with the highest test AUC and it
    is re-annotated (raw mean/SD per node) on the whole dataset.
    """
    config = config or SweepConfig()
    indices = FEATURE_SETS[feature_set]
    names = [cohort.feature_names[i] for i in indices]
    X = cohort.feature_matrix[:, indices]
    raw = cohort.outcomes

    plan, assignments = _plan_and_assignments(cohort, config)
    winners = _extraction_sweep(X, raw, plan, assignments, config)

    fold_results = []
    for fold in sorted(winners):
        w = winners[fold]
        r = w["extracted"]
        cand = r.extracted
        X_test, raw_test = w["test_data"]
        test_labels = (raw_test >= r.threshold).astype(np.uint8)
        test_probas = apply_leaf_values(cand.tree, X_test,
                                        lambda leaf: leaf.leaf_proba)
        test_auc = roc_auc(test_probas, test_labels)
        fold_results.append(FoldOutcome(
            fold=fold, validation_fold=w["assignment"].validation_fold,
            test_tutors=plan.folds[fold].tutors,
            threshold=r.threshold, seed=cand.seed,
            member_index=cand.member_index, agreement=cand.agreement,
            validation_auc=cand.validation_auc, test_auc=test_auc,
            tree=cand.tree, skipped_thresholds=w["skipped"]))

    mean_test_auc = float(np.mean([fr.test_auc for fr in fold_results]))
    best = min(fold_results, key=lambda fr: (-fr.test_auc, fr.fold))

    whole_labels = (raw >= best.threshold).astype(np.uint8)
    whole_probas = apply_leaf_values(best.tree, X,
                                     lambda leaf: leaf.leaf_proba)
    whole_auc = roc_auc(whole_probas, whole_labels)
    whole_tree = annotate_tree(best.tree, X, raw)

    final = ExtractedModel(
        tree=best.tree, fold=best.fold, threshold=best.threshold,
        seed=best.seed, member_index=best.member_index,
        agreement=best.agreement, validation_auc=best.validation_auc,
        test_auc=best.test_auc)

    return PipelineReport(
        feature_set=feature_set, feature_names=names,
        thresholds=config.thresholds, n_seeds=config.n_seeds,
        master_seed=config.master_seed,
        fold_plan_tutors=[f.tutors for f in plan.folds],
        fold_plan_sse=plan.sse,
        fold_results=fold_results, mean_test_auc=mean_test_auc,
        final_model=final, whole_dataset_auc=whole_auc,
        whole_dataset_tree=whole_tree, config=config)


def run_change_pipeline(cohort: Cohort, config: SweepConfig | None = None,
                        feature_set: str = "combined") -> PipelineReport:
    """Score-change variant: rewrite outcomes as round-to-round changes,
    then sweep with the change thresholds."""
    from .dataset import compute_score_changes

    config = config if config is not None else change_config()
    changes = compute_score_changes(cohort)
    return run_sweep(changes, config, feature_set=feature_set)


# ---------------------------------------------------------------------------
# Baselines (Table-3-shaped comparison)


@dataclass
class _RfrTask:
    fold: int
    X_train: np.ndarray
    raw_train: np.ndarray
    X_val: np.ndarray
    raw_val: np.ndarray
    config: SweepConfig


@dataclass
class _RfrResult:
    fold: int
    seed: int
    validation_r2: float
    forest: Forest


def _run_rfr_task(task: _RfrTask) -> _RfrResult:
    cfg = task.config
    design = Design(task.X_train)
    view = TargetView(design, task.raw_train, task.raw_train, REGRESSION)
    best = None
    for i in range(cfg.n_seeds):
        params = ForestParams(n_trees=cfg.n_trees,
                              tree_params=cfg.tree_params(REGRESSION),
                              bootstrap=cfg.bootstrap,
                              seed=_forest_seed(cfg, task.fold, i))
        forest = fit_forest_view(view, params)
        preds = np.zeros(task.X_val.shape[0])
        for t in forest.members:
            preds += apply_leaf_values(t, task.X_val,
                                       lambda leaf: leaf.mean_outcome)
        preds /= cfg.n_trees
        ss_tot = float(((task.raw_val - task.raw_val.mean()) ** 2).sum())
        if ss_tot == 0.0:
            raise ValueError("R^2 undefined: validation outcomes constant")
        r2 = 1.0 - float(((task.raw_val - preds) ** 2).sum()) / ss_tot
        if best is None or r2 > best.validation_r2:
            best = _RfrResult(task.fold, i, r2, forest)
    return best


@dataclass
class BaselineCell:
    mean_test_auc: float
    per_fold: list[dict]


@dataclass
class BaselineTable:
    """mean 5-fold test AUC per (feature set, method)."""

    cells: dict[tuple[str, str], BaselineCell]
    feature_sets: tuple[str, ...]
    methods: tuple[str, ...] = METHODS

    def mean_auc(self, feature_set: str, method: str) -> float:
        return self.cells[(feature_set, method)].mean_test_auc

    def to_dict(self) -> dict:
        return {
            "feature_sets": list(self.feature_sets),
            "methods": list(self.methods),
            "cells": {
                f"{fs}/{m}": {
                    "mean_test_auc": cell.mean_test_auc,
                    "per_fold": cell.per_fold,
                }
                for (fs, m), cell in sorted(self.cells.items())
            },
        }


def _plain_dt_fold(Xt, rt, Xv, rv, Xs, rs, config: SweepConfig):
    """Single tree on all features; threshold picked by validation AUC."""
    design = Design(Xt)
    params = TreeParams(max_depth=config.max_depth, min_leaf=config.min_leaf,
                        mtry=None, task=CLASSIFICATION)
    best = None  # (val_auc, t_idx, threshold, tree)
    for t_idx, threshold in enumerate(config.thresholds):
        y_t = (rt >= threshold).astype(np.float64)
        y_v = (rv >= threshold).astype(np.uint8)
        if y_t.sum() in (0, y_t.size) or int(y_v.sum()) in (0, y_v.size):
            continue
        view = TargetView(design, y_t, rt, CLASSIFICATION)
        tree = fit_tree_view(view, np.ones(design.n), params, None)
        probas = apply_leaf_values(tree, Xv, lambda leaf: leaf.leaf_proba)
        auc = roc_auc(probas, y_v)
        if best is None or auc > best[0]:
            best = (auc, t_idx, threshold, tree)
    if best is None:
        raise ValueError("all thresholds degenerate for the plain DT")
    auc, _, threshold, tree = best
    test_labels = (rs >= threshold).astype(np.uint8)
    test_probas = apply_leaf_values(tree, Xs, lambda leaf: leaf.leaf_proba)
    return {"threshold": threshold, "validation_auc": auc,
            "test_auc": roc_auc(test_probas, test_labels)}


def run_baselines(cohort: Cohort, config: SweepConfig | None = None,
                  feature_sets=("talk", "its", "combined")) -> BaselineTable:
    """Compare the extracted tree with a plain DT, the RFC vote, and an RFR.

    All four methods share the fold plan and the validation-selection
    protocol: DT/RFC/extracted sweep the same (threshold, seed) grid (the
    DT has no seeds), the RFR sweeps seeds only and its test R^2 is
    converted to an AUC equivalent.
    """
    config = config or SweepConfig()
    plan, assignments = _plan_and_assignments(cohort, config)
    raw = cohort.outcomes
    cells: dict[tuple[str, str], BaselineCell] = {}

    for fs in feature_sets:
        indices = FEATURE_SETS[fs]
        X = cohort.feature_matrix[:, indices]

        winners = _extraction_sweep(X, raw, plan, assignments, config,
                                    track_ensemble=True)
        rfr_tasks = []
        per_fold: dict[str, list[dict]] = {m: [] for m in METHODS}
        for a in assignments:
            Xt, rt, Xv, rv, Xs, rs = _fold_matrices(X, raw, plan, a)
            fold = a.test_fold
            w = winners[fold]

            r = w["extracted"]
            cand = r.extracted
            test_labels = (rs >= r.threshold).astype(np.uint8)
            probas = apply_leaf_values(cand.tree, Xs,
                                       lambda leaf: leaf.leaf_proba)
            per_fold["extracted_dt"].append({
                "fold": fold, "threshold": r.threshold, "seed": cand.seed,
                "validation_auc": cand.validation_auc,
                "test_auc": roc_auc(probas, test_labels)})

            e = w["ensemble"]
            ens_cand = e.ensemble
            test_labels = (rs >= e.threshold).astype(np.uint8)
            ens_probas = member_probas(ens_cand.forest, Xs).mean(axis=0)
            per_fold["rfc"].append({
                "fold": fold, "threshold": e.threshold, "seed": ens_cand.seed,
                "validation_auc": ens_cand.validation_auc,
                "test_auc": roc_auc(ens_probas, test_labels)})

            dt = _plain_dt_fold(Xt, rt, Xv, rv, Xs, rs, config)
            dt["fold"] = fold
            per_fold["decision_tree"].append(dt)

            rfr_tasks.append(_RfrTask(fold=fold, X_train=Xt, raw_train=rt,
                                      X_val=Xv, raw_val=rv, config=config))

        rfr_results = _map_tasks(_run_rfr_task, rfr_tasks, config.jobs)
        for a, rr in zip(assignments, rfr_results):
            _, _, _, _, Xs, rs = _fold_matrices(X, raw, plan, a)
            preds = np.zeros(Xs.shape[0])
            for t in rr.forest.members:
                preds += apply_leaf_values(t, Xs,
                                           lambda leaf: leaf.mean_outcome)
            preds /= config.n_trees
            ss_tot = float(((rs - rs.mean()) ** 2).sum())
            test_r2 = 1.0 - float(((rs - preds) ** 2).sum()) / ss_tot
            per_fold["rfr"].append({
                "fold": rr.fold, "seed": rr.seed,
                "validation_r2": rr.validation_r2, "test_r2": test_r2,
                "test_auc": r2_to_auc(test_r2)})

        for m in METHODS:
            rows = sorted(per_fold[m], key=lambda d: d["fold"])
            cells[(fs, m)] = BaselineCell(
                mean_test_auc=float(np.mean([d["test_auc"] for d in rows])),
                per_fold=rows)

    return BaselineTable(cells=cells, feature_sets=tuple(feature_sets))


# ---------------------------------------------------------------------------
# Serialization


def save_report_json(report: PipelineReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_table3_csv(tables: dict[str, BaselineTable], path) -> None:
    """Flat CSV in the comparison-table layout: one row per (outcome,
    feature set), one column per method."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["outcome", "feature_set", *METHODS])
        for outcome in sorted(tables):
            table = tables[outcome]
            for fs in table.feature_sets:
                w.writerow([outcome, fs,
                            *(repr(round(table.mean_auc(fs, m), 6))
                              for m in table.methods)])
