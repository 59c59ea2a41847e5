"""Synthetic cohort generation with a planted depth-2 interaction rule.

The generator emits the same raw tables the ingestion layer consumes
(sessions, ITS snapshots, assessments, roster) and assembles them into a
cohort through the real pipeline, so synthetic data exercises every
aggregation rule. Ground truth: assessment outcomes are driven by a planted
tree over ITS mastery (opportunities needed per skill) interacting with two
talk moves, which end-to-end tests try to recover.

Calibration notes (defaults): high-usage groups for the low-mastery talk
move are drawn at 35% so the planted root carries enough marginal signal to
win impurity comparisons against sampling noise at cohort scale, while the
interaction still dominates any single-feature tree. Outcome noise splits
into a persistent per-student part and a per-round part; the
persistent-effect preset adds per-leaf score growth so score *changes*
carry the same recoverable structure.
"""

import json
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from ._rng import STREAM_SYNTH, generator
from .dataset import (FEATURE_NAMES, AssessmentRecord, Cohort, ItsSnapshot,
                      SessionLog, assemble_evaluation_periods)
from .tree import TreeNode

ASSESSMENT_DATES = [date(2022, 8, 30), date(2022, 10, 25), date(2023, 1, 20),
                    date(2023, 3, 15), date(2023, 5, 20)]
YEAR_START = date(2022, 8, 1)

# Table-1-shaped attrition: completed assessments per student -> n students.
DEFAULT_ASSESSMENT_COUNTS = {1: 112, 2: 65, 3: 127, 4: 379, 5: 397}


@dataclass(frozen=True)
class PlantedRule:
    """Ground-truth depth-2 tree under the x[feature] <= threshold routing.

    The left root branch (few opportunities needed = high mastery) splits on
    pressing for reasoning; the right branch (low mastery) splits on
    revoicing. Leaf means are (<=, >) per child.
    """

    root_feature: str = "opportunities_to_master_avg"
    root_threshold: float = 4.0
    left_feature: str = "press_for_reasoning"
    left_threshold: float = 3.0
    left_leaf_means: tuple[float, float] = (15.7, 22.7)
    right_feature: str = "revoicing"
    right_threshold: float = 3.0
    right_leaf_means: tuple[float, float] = (15.2, 22.8)

    def __post_init__(self):
        for m in (*self.left_leaf_means, *self.right_leaf_means):
            if not 0.0 <= m <= 30.0:
                raise ValueError(f"leaf mean {m} outside [0, 30]")

    @property
    def leaf_means(self) -> tuple[float, ...]:
        """Leaves in routing order: LL, LR, RL, RR."""
        return (*self.left_leaf_means, *self.right_leaf_means)


@dataclass(frozen=True)
class CohortSpec:
    """Shape and signal parameters of a generated cohort."""

    n_tutors: int = 46
    assessment_counts: dict[int, int] = field(
        default_factory=lambda: dict(DEFAULT_ASSESSMENT_COUNTS))
    group_size_range: tuple[int, int] = (2, 6)
    planted: PlantedRule = field(default_factory=PlantedRule)
    noise_sd: float = 4.0
    persistent_noise_frac: float = 0.8
    leaf_growth: tuple[float, float] = (0.0, 0.0)  # (low-mean, high-mean) leaves
    high_talk_fraction: float = 0.35  # share of groups with high planted talk rates
    seed: int = 0

    @property
    def n_students(self) -> int:
        return sum(self.assessment_counts.values())

    def __post_init__(self):
        if self.n_tutors < 1:
            raise ValueError("need at least one tutor")
        if any(k < 1 or k > 5 for k in self.assessment_counts):
            raise ValueError("completed-assessment counts must be in 1..5")
        if any(v < 0 for v in self.assessment_counts.values()):
            raise ValueError("negative student counts")
        lo, hi = self.group_size_range
        if not 1 <= lo <= hi:
            raise ValueError("invalid group size range")
        if not 0.0 <= self.persistent_noise_frac <= 1.0:
            raise ValueError("persistent_noise_frac must be in [0, 1]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


def persistent_effect_spec(seed: int = 0, **overrides) -> CohortSpec:
    """Preset whose per-leaf score growth makes round-to-round score changes
    carry the planted structure (the change-pipeline test cohort)."""
    overrides.setdefault("leaf_growth", (0.5, 3.0))
    return CohortSpec(seed=seed, **overrides)


@dataclass
class SyntheticTables:
    """Raw generated inputs plus the ground truth used to produce them."""

    spec: CohortSpec
    rule: PlantedRule
    sessions: list[SessionLog]
    its: list[ItsSnapshot]
    assessments: list[AssessmentRecord]
    roster: dict[str, tuple[str, float]]

    def assemble(self) -> Cohort:
        return assemble_evaluation_periods(
            self.sessions, self.its, self.assessments, self.roster,
            year_start=YEAR_START)


def _partition_group_sizes(n: int, lo: int, hi: int, rng) -> list[int]:
    """Split n students into group sizes within [lo, hi], small groups common."""
    if n < lo:
        raise ValueError(
            f"group sizes in [{lo}, {hi}] cannot cover {n} students")
    sizes = []
    choices = np.arange(lo, hi + 1)
    weights = np.array([0.38, 0.38, 0.12, 0.08, 0.04][: len(choices)], dtype=float)
    weights /= weights.sum()
    remaining = n
    while remaining > 0:
        if remaining <= hi:
            if remaining >= lo:
                sizes.append(remaining)
                break
            # Fold a too-small tail into the previous group when legal.
            if sizes and sizes[-1] + remaining <= hi:
                sizes[-1] += remaining
                break
            raise ValueError(
                f"group sizes in [{lo}, {hi}] cannot cover {n} students")
        for _ in range(32):
            s = int(rng.choice(choices, p=weights))
            if remaining - s == 0 or remaining - s >= lo:
                break
        else:
            s = min(hi, remaining - lo)
        sizes.append(s)
        remaining -= s
    return sizes


def _growth_by_leaf(rule: PlantedRule, leaf_growth: tuple[float, float]) -> np.ndarray:
    """Per-leaf growth: the two highest-mean leaves get leaf_growth[1]."""
    means = np.array(rule.leaf_means)
    growth = np.full(4, leaf_growth[0])
    growth[np.argsort(means)[2:]] = leaf_growth[1]
    return growth


def generate_tables(spec: CohortSpec) -> SyntheticTables:
    """Generate the raw input tables; deterministic per spec.seed."""
    rng = generator(STREAM_SYNTH, spec.seed)
    rule = spec.planted
    n_students = spec.n_students
    if n_students < spec.n_tutors * spec.group_size_range[0]:
        raise ValueError("too few students to give every tutor one group")

    tutor_ids = [f"T{i + 1:02d}" for i in range(spec.n_tutors)]
    student_ids = [f"S{i + 1:04d}" for i in range(n_students)]

    # Completed-assessment count per student, then students dealt to tutors
    # as evenly as possible.
    counts = np.concatenate([
        np.full(n, k, dtype=int) for k, n in sorted(spec.assessment_counts.items())
    ])
    counts = counts[rng.permutation(n_students)]

    base, rem = divmod(n_students, spec.n_tutors)
    tutor_sizes = np.full(spec.n_tutors, base)
    tutor_sizes[rng.permutation(spec.n_tutors)[:rem]] += 1
    dealt = rng.permutation(n_students)

    roster: dict[str, tuple[str, float]] = {}
    groups: list[tuple[str, list[str]]] = []  # (tutor_id, member student ids)
    cursor = 0
    lo, hi = spec.group_size_range
    for t, tutor in enumerate(tutor_ids):
        members = [student_ids[i] for i in dealt[cursor:cursor + tutor_sizes[t]]]
        cursor += tutor_sizes[t]
        for s in members:
            roster[s] = (tutor, float(round(rng.uniform(0.55, 0.98), 3)))
        sizes = _partition_group_sizes(len(members), lo, hi, rng)
        start = 0
        for size in sizes:
            groups.append((tutor, members[start:start + size]))
            start += size

    # Group-level talk-move Poisson rates. Planted moves are bimodal with a
    # margin around the planted thresholds; the rest are flat noise.
    feature_index = {name: i for i, name in enumerate(FEATURE_NAMES)}
    left_idx = feature_index[rule.left_feature]
    right_idx = feature_index[rule.right_feature]
    group_rates = np.empty((len(groups), 6))
    group_high_right = np.empty(len(groups), dtype=bool)  # revoicing side
    group_high_left = np.empty(len(groups), dtype=bool)   # press side
    for g in range(len(groups)):
        rates = rng.uniform(0.5, 6.0, size=6)
        hi_left = rng.random() < 0.5
        hi_right = rng.random() < spec.high_talk_fraction
        rates[left_idx] = rng.uniform(4.2, 6.0) if hi_left else rng.uniform(0.8, 1.8)
        rates[right_idx] = rng.uniform(4.2, 6.0) if hi_right else rng.uniform(0.8, 1.8)
        group_rates[g] = rates
        group_high_left[g] = hi_left
        group_high_right[g] = hi_right

    # Student-level ITS latents; the root feature is bimodal around its
    # planted threshold.
    low_mastery = rng.random(n_students) < 0.5  # needs many opportunities
    opp_latent = np.where(low_mastery,
                          rng.uniform(4.6, 6.2, n_students),
                          rng.uniform(2.2, 3.4, n_students))
    its_latents = np.column_stack([
        rng.uniform(1.2, 4.0, n_students),   # mastered skills
        opp_latent,                          # opportunities to master
        rng.uniform(8.0, 35.0, n_students),  # workspace minutes
        rng.uniform(40.0, 95.0, n_students), # workspace score
        rng.uniform(50.0, 95.0, n_students), # APLS
    ])

    # Scores: planted leaf mean + per-student persistent offset + centered
    # per-leaf growth + per-round noise; clamp to [0, 30], round to integer.
    growth = _growth_by_leaf(rule, spec.leaf_growth)
    sd_u = spec.noise_sd * np.sqrt(spec.persistent_noise_frac)
    sd_e = spec.noise_sd * np.sqrt(1.0 - spec.persistent_noise_frac)
    group_of_student = {}
    for g, (_, members) in enumerate(groups):
        for s in members:
            group_of_student[s] = g

    assessments: list[AssessmentRecord] = []
    for i, sid in enumerate(student_ids):
        g = group_of_student[sid]
        side_right = low_mastery[i]  # routed right: opportunities > threshold
        if side_right:
            leaf = 2 + int(group_high_right[g])
        else:
            leaf = 0 + int(group_high_left[g])
        rounds = np.sort(rng.permutation(5)[: counts[i]]) + 1
        u = rng.normal(0.0, sd_u) if sd_u > 0 else 0.0
        k_bar = rounds.mean()
        for k in rounds:
            eps = rng.normal(0.0, sd_e) if sd_e > 0 else 0.0
            raw = (rule.leaf_means[leaf] + u + growth[leaf] * (k - k_bar) + eps)
            score = int(round(min(30.0, max(0.0, raw))))
            assessments.append(AssessmentRecord(
                student_id=sid, round_index=int(k),
                assessment_date=ASSESSMENT_DATES[int(k) - 1], score=score))

    # Sessions: each group meets every third day with occasional skips; all
    # members attend (the roster's attendance ratio is an independent field).
    sessions: list[SessionLog] = []
    last_day = ASSESSMENT_DATES[-1]
    for g, (tutor, members) in enumerate(groups):
        day = YEAR_START + timedelta(days=int(rng.integers(4, 10)))
        meet_days = []
        while day <= last_day:
            if rng.random() > 0.15:
                meet_days.append(day)
            day += timedelta(days=3)
        counts_matrix = rng.poisson(group_rates[g], size=(len(meet_days), 6))
        for d, cnts in zip(meet_days, counts_matrix):
            sessions.append(SessionLog(
                tutor_id=tutor, session_date=d,
                talk_move_counts=tuple(int(c) for c in cnts),
                attendee_student_ids=frozenset(members)))

    # ITS snapshots: biweekly per student, small jitter around the latents.
    its: list[ItsSnapshot] = []
    jitter_sd = np.array([0.08, 0.12, 1.5, 2.0, 2.0])
    snap_days = []
    day = YEAR_START + timedelta(days=9)
    while day <= last_day:
        snap_days.append(day)
        day += timedelta(days=14)
    for i, sid in enumerate(student_ids):
        jitter = rng.normal(0.0, jitter_sd, size=(len(snap_days), 5))
        vals = np.maximum(0.0, its_latents[i] + jitter)
        for d, v in zip(snap_days, vals):
            its.append(ItsSnapshot(
                student_id=sid, as_of_date=d,
                mastered_skills_avg=float(v[0]),
                opportunities_to_master_avg=float(v[1]),
                workspace_time_avg=float(v[2]),
                workspace_score_avg=float(v[3]),
                apls_avg=float(v[4])))

    return SyntheticTables(spec=spec, rule=rule, sessions=sessions, its=its,
                           assessments=assessments, roster=roster)


def generate_cohort(spec: CohortSpec) -> tuple[Cohort, PlantedRule]:
    """Generate and assemble a cohort; returns it with its ground truth."""
    tables = generate_tables(spec)
    return tables.assemble(), tables.rule


# ---------------------------------------------------------------------------
# Ground-truth helpers for tests and reports


def planted_tree(rule: PlantedRule,
                 feature_names: list[str] | None = None) -> TreeNode:
    """The planted rule as a TreeNode; leaf scores rank by leaf mean."""
    names = feature_names or FEATURE_NAMES
    idx = {name: i for i, name in enumerate(names)}

    def leaf(mean: float) -> TreeNode:
        # Monotone high fraction in the leaf mean keeps AUC ranking faithful.
        return TreeNode(n=0.0, raw_mean=mean, raw_sd=0.0, n_high=mean,
                        n_low=30.0 - mean)

    def split(feature: str, thr: float, left: TreeNode,
              right: TreeNode) -> TreeNode:
        means = [left.raw_mean, right.raw_mean]
        return TreeNode(n=0.0, raw_mean=float(np.mean(means)), raw_sd=0.0,
                        feature=idx[feature], threshold=thr, left=left,
                        right=right)

    left = split(rule.left_feature, rule.left_threshold,
                 leaf(rule.left_leaf_means[0]), leaf(rule.left_leaf_means[1]))
    right = split(rule.right_feature, rule.right_threshold,
                  leaf(rule.right_leaf_means[0]), leaf(rule.right_leaf_means[1]))
    return split(rule.root_feature, rule.root_threshold, left, right)


def structure_recovery_score(extracted_tree: TreeNode, rule: PlantedRule,
                             feature_names: list[str] | None = None,
                             threshold_tolerance: float = 1.0) -> float:
    """Fraction (in thirds) of planted nodes the tree reproduces.

    The root and the two child splits are compared positionally under the
    <= routing convention; a node matches when its split feature equals the
    planted one and its threshold is within the tolerance.
    """
    names = feature_names or FEATURE_NAMES
    if extracted_tree.depth() > 2:
        raise ValueError("recovery scoring expects a depth <= 2 tree")

    def matches(node: TreeNode | None, feature: str, thr: float) -> bool:
        return (node is not None and not node.is_leaf
                and names[node.feature] == feature
                and abs(node.threshold - thr) <= threshold_tolerance)

    hits = 0
    if matches(extracted_tree, rule.root_feature, rule.root_threshold):
        hits += 1
    if not extracted_tree.is_leaf:
        if matches(extracted_tree.left, rule.left_feature, rule.left_threshold):
            hits += 1
        if matches(extracted_tree.right, rule.right_feature,
                   rule.right_threshold):
            hits += 1
    return hits / 3.0


def rule_to_dict(rule: PlantedRule) -> dict:
    return {
        "root": {"feature": rule.root_feature,
                 "threshold": rule.root_threshold},
        "left": {"feature": rule.left_feature,
                 "threshold": rule.left_threshold,
                 "leaf_means": list(rule.left_leaf_means)},
        "right": {"feature": rule.right_feature,
                  "threshold": rule.right_threshold,
                  "leaf_means": list(rule.right_leaf_means)},
    }


# ---------------------------------------------------------------------------
# CSV emission (the exact schemas the ingestion layer parses)


def write_synthetic_dir(tables: SyntheticTables, outdir) -> None:
    """Write sessions/its/assessments/roster CSVs plus the ground-truth sidecar."""
    import csv
    from pathlib import Path

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "sessions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tutor_id", "date", *FEATURE_NAMES[:6], "attendee_ids"])
        for s in tables.sessions:
            w.writerow([s.tutor_id, s.session_date.isoformat(),
                        *s.talk_move_counts,
                        "|".join(sorted(s.attendee_student_ids))])

    with open(out / "its.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "date", "mastered_skills_avg",
                    "opportunities_avg", "workspace_time_avg",
                    "workspace_score_avg", "apls_avg"])
        for snap in tables.its:
            w.writerow([snap.student_id, snap.as_of_date.isoformat(),
                        *(repr(v) for v in snap.values)])

    with open(out / "assessments.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "round", "date", "score"])
        for a in tables.assessments:
            w.writerow([a.student_id, a.round_index,
                        a.assessment_date.isoformat(), a.score])

    with open(out / "roster.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "tutor_id", "attendance_ratio"])
        for sid in sorted(tables.roster):
            tutor, ratio = tables.roster[sid]
            w.writerow([sid, tutor, repr(ratio)])

    sidecar = {
        "planted_rule": rule_to_dict(tables.rule),
        "spec": {
            "n_tutors": tables.spec.n_tutors,
            "assessment_counts": {str(k): v for k, v in
                                  sorted(tables.spec.assessment_counts.items())},
            "group_size_range": list(tables.spec.group_size_range),
            "noise_sd": tables.spec.noise_sd,
            "persistent_noise_frac": tables.spec.persistent_noise_frac,
            "leaf_growth": list(tables.spec.leaf_growth),
            "high_talk_fraction": tables.spec.high_talk_fraction,
            "seed": tables.spec.seed,
        },
    }
    with open(out / "planted_rule.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
