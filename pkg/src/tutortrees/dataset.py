"""Evaluation-period assembly from tutoring-session, ITS, and assessment logs.

An evaluation period (EP) is one record per completed assessment: the six
talk-move micro-averages and five ITS aggregates collected in the window
since the student's previous assessment (or since the school-year start for
the first one), plus the assessment outcome. Ingestion is single-threaded;
the resulting Cohort is immutable in practice and safe to share across
workers.
"""

import csv
import logging
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from datetime import date
from functools import cached_property
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TALK_MOVE_NAMES = [
    "keeping_students_together",
    "getting_students_to_relate",
    "restating",
    "press_for_accuracy",
    "press_for_reasoning",
    "revoicing",
]
ITS_FEATURE_NAMES = [
    "mastered_skills_avg",
    "opportunities_to_master_avg",
    "workspace_time_avg",
    "workspace_score_avg",
    "apls_avg",
]
FEATURE_NAMES = TALK_MOVE_NAMES + ITS_FEATURE_NAMES

SCORE_MIN, SCORE_MAX = 0, 30
DEFAULT_YEAR_START = date(2022, 8, 1)

SESSION_COLUMNS = ["tutor_id", "date", *TALK_MOVE_NAMES, "attendee_ids"]
ITS_COLUMNS = ["student_id", "date", "mastered_skills_avg", "opportunities_avg",
               "workspace_time_avg", "workspace_score_avg", "apls_avg"]
ASSESSMENT_COLUMNS = ["student_id", "round", "date", "score"]
ROSTER_COLUMNS = ["student_id", "tutor_id", "attendance_ratio"]

FLAG_NO_SESSIONS = "no_sessions"
FLAG_NO_ITS = "no_its"


class SchemaError(ValueError):
    """A malformed input file; carries file, line, and column context."""

    def __init__(self, file: str, message: str, line: int | None = None,
                 column: str | None = None):
        where = file
        if line is not None:
            where += f":{line}"
        if column is not None:
            where += f" column {column!r}"
        super().__init__(f"{where}: {message}")
        self.file = file
        self.line = line
        self.column = column


@dataclass(frozen=True)
class SessionLog:
    """One tutorial session: who ran it, when, talk-move counts, attendees."""

    tutor_id: str
    session_date: date
    talk_move_counts: tuple[int, ...]  # Table-2 order, len 6
    attendee_student_ids: frozenset[str]

    def __post_init__(self):
        if len(self.talk_move_counts) != len(TALK_MOVE_NAMES):
            raise ValueError("expected one count per talk move")
        if any(c < 0 for c in self.talk_move_counts):
            raise ValueError("talk-move counts must be non-negative")
        if not self.attendee_student_ids:
            raise ValueError("session attendee set must be non-empty")


@dataclass(frozen=True)
class ItsSnapshot:
    """A student's aggregate ITS performance as of a date."""

    student_id: str
    as_of_date: date
    mastered_skills_avg: float
    opportunities_to_master_avg: float
    workspace_time_avg: float
    workspace_score_avg: float
    apls_avg: float

    @property
    def values(self) -> tuple[float, ...]:
        return (self.mastered_skills_avg, self.opportunities_to_master_avg,
                self.workspace_time_avg, self.workspace_score_avg,
                self.apls_avg)

    def __post_init__(self):
        if not all(np.isfinite(v) for v in self.values):
            raise ValueError("ITS metrics must be finite")
        if self.opportunities_to_master_avg < 0 or self.workspace_time_avg < 0:
            raise ValueError("ITS counts/times must be non-negative")


@dataclass(frozen=True)
class AssessmentRecord:
    student_id: str
    round_index: int
    assessment_date: date
    score: int

    def __post_init__(self):
        if not 1 <= self.round_index <= 5:
            raise ValueError("round index must be in 1..5")
        if not SCORE_MIN <= self.score <= SCORE_MAX:
            raise ValueError(
                f"score {self.score} outside [{SCORE_MIN}, {SCORE_MAX}]")


@dataclass
class EvaluationPeriod:
    """One dataset record: 11 aggregated features and the outcome for one
    completed assessment."""

    student_id: str
    tutor_id: str
    assessment_round: int
    features: np.ndarray  # len 11, FEATURE_NAMES order
    outcome: float
    flags: frozenset[str] = frozenset()

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape != (len(FEATURE_NAMES),):
            raise ValueError(f"expected {len(FEATURE_NAMES)} features")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")


@dataclass
class Cohort:
    """The assembled dataset: evaluation periods plus the group structure."""

    evaluation_periods: list[EvaluationPeriod]
    feature_names: list[str]
    students: frozenset[str]
    tutors: frozenset[str]
    tutor_of: dict[str, str]
    exclusions: dict[str, int] = field(default_factory=dict)

    @property
    def n_eps(self) -> int:
        return len(self.evaluation_periods)

    @cached_property
    def feature_matrix(self) -> np.ndarray:
        return np.array([ep.features for ep in self.evaluation_periods],
                        dtype=np.float64)

    @cached_property
    def outcomes(self) -> np.ndarray:
        return np.array([ep.outcome for ep in self.evaluation_periods],
                        dtype=np.float64)

    @cached_property
    def ep_students(self) -> list[str]:
        return [ep.student_id for ep in self.evaluation_periods]

    @cached_property
    def ep_tutors(self) -> list[str]:
        return [ep.tutor_id for ep in self.evaluation_periods]

    @cached_property
    def students_of_tutor(self) -> dict[str, list[str]]:
        by_tutor: dict[str, list[str]] = {t: [] for t in sorted(self.tutors)}
        for s in sorted(self.students):
            by_tutor[self.tutor_of[s]].append(s)
        return by_tutor

    def validate(self) -> None:
        for s in self.students:
            if s not in self.tutor_of:
                raise ValueError(f"student {s} has no tutor mapping")
        for ep in self.evaluation_periods:
            if self.tutor_of.get(ep.student_id) != ep.tutor_id:
                raise ValueError(
                    f"EP tutor {ep.tutor_id} disagrees with the roster for "
                    f"student {ep.student_id}")


@dataclass
class BinarizedCohort:
    """A cohort with outcomes turned into high/low labels at a threshold.

    Raw outcomes stay available on the cohort for leaf annotation. A
    binarization with an empty class is flagged degenerate (the sweep skips
    it) rather than rejected.
    """

    cohort: Cohort
    threshold: float
    labels: np.ndarray  # uint8, 1 = high

    @property
    def n_high(self) -> int:
        return int(self.labels.sum())

    @property
    def n_low(self) -> int:
        return int(self.labels.size - self.labels.sum())

    @property
    def degenerate(self) -> bool:
        return self.n_high == 0 or self.n_low == 0


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_rows(path, expected_columns, context: str):
    path = Path(path)
    if not path.exists():
        raise SchemaError(str(path), "file does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in expected_columns if c not in header]
        extra = [c for c in header if c not in expected_columns]
        if missing or extra:
            parts = []
            if missing:
                parts.append(f"missing column(s) {', '.join(missing)}")
            if extra:
                parts.append(f"unknown column(s) {', '.join(extra)}")
            raise SchemaError(
                str(path),
                f"{'; '.join(parts)}; expected columns: "
                f"{', '.join(expected_columns)} ({context})")
        for line_no, row in enumerate(reader, start=2):
            if None in row.values() or any(v is None for v in row.values()):
                raise SchemaError(str(path), "wrong field count", line=line_no)
            yield line_no, row


def _parse(path, line, column, raw, kind):
    try:
        if kind == "date":
            return date.fromisoformat(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            v = float(raw)
            if not np.isfinite(v):
                raise ValueError("not finite")
            return v
        raise AssertionError(kind)
    except ValueError as exc:
        raise SchemaError(str(path), f"cannot parse {raw!r} as {kind}: {exc}",
                          line=line, column=column) from None


def load_sessions(path) -> list[SessionLog]:
    sessions = []
    for line, row in _read_rows(path, SESSION_COLUMNS, "session schema"):
        counts = []
        for name in TALK_MOVE_NAMES:
            c = _parse(path, line, name, row[name], "int")
            if c < 0:
                raise SchemaError(str(path), f"negative count {c}",
                                  line=line, column=name)
            counts.append(c)
        attendees = frozenset(a for a in row["attendee_ids"].split("|") if a)
        if not attendees:
            raise SchemaError(str(path), "empty attendee list", line=line,
                              column="attendee_ids")
        sessions.append(SessionLog(
            tutor_id=row["tutor_id"],
            session_date=_parse(path, line, "date", row["date"], "date"),
            talk_move_counts=tuple(counts),
            attendee_student_ids=attendees,
        ))
    return sessions


def load_its(path) -> list[ItsSnapshot]:
    snaps = []
    for line, row in _read_rows(path, ITS_COLUMNS, "ITS schema"):
        vals = {}
        for col in ITS_COLUMNS[2:]:
            vals[col] = _parse(path, line, col, row[col], "float")
        if vals["opportunities_avg"] < 0 or vals["workspace_time_avg"] < 0:
            raise SchemaError(str(path), "negative count/time", line=line,
                              column="opportunities_avg")
        snaps.append(ItsSnapshot(
            student_id=row["student_id"],
            as_of_date=_parse(path, line, "date", row["date"], "date"),
            mastered_skills_avg=vals["mastered_skills_avg"],
            opportunities_to_master_avg=vals["opportunities_avg"],
            workspace_time_avg=vals["workspace_time_avg"],
            workspace_score_avg=vals["workspace_score_avg"],
            apls_avg=vals["apls_avg"],
        ))
    return snaps


def load_assessments(path) -> list[AssessmentRecord]:
    records = []
    for line, row in _read_rows(path, ASSESSMENT_COLUMNS, "assessment schema"):
        score = _parse(path, line, "score", row["score"], "int")
        if not SCORE_MIN <= score <= SCORE_MAX:
            raise SchemaError(
                str(path),
                f"score {score} outside [{SCORE_MIN}, {SCORE_MAX}]",
                line=line, column="score")
        rnd = _parse(path, line, "round", row["round"], "int")
        if not 1 <= rnd <= 5:
            raise SchemaError(str(path), f"round {rnd} outside 1..5",
                              line=line, column="round")
        records.append(AssessmentRecord(
            student_id=row["student_id"], round_index=rnd,
            assessment_date=_parse(path, line, "date", row["date"], "date"),
            score=score))
    return records


def load_roster(path) -> dict[str, tuple[str, float]]:
    """student_id -> (tutor_id, attendance_ratio)."""
    roster = {}
    for line, row in _read_rows(path, ROSTER_COLUMNS, "roster schema"):
        ratio = _parse(path, line, "attendance_ratio", row["attendance_ratio"],
                       "float")
        if not 0.0 <= ratio <= 1.0:
            raise SchemaError(str(path), f"attendance ratio {ratio} outside "
                              "[0, 1]", line=line, column="attendance_ratio")
        sid = row["student_id"]
        if sid in roster:
            raise SchemaError(str(path), f"duplicate student {sid}",
                              line=line, column="student_id")
        roster[sid] = (row["tutor_id"], ratio)
    return roster


def load_inputs(session_file, its_file, assessment_file):
    """Parse the three event files; row order is preserved."""
    return (load_sessions(session_file), load_its(its_file),
            load_assessments(assessment_file))


# ---------------------------------------------------------------------------
# Feature aggregation


def micro_average_talk_moves(sessions_in_window) -> np.ndarray:
    """Per talk move: total count across the window / number of sessions.

    An empty window yields all zeros; the caller flags the EP.
    """
    if not sessions_in_window:
        return np.zeros(len(TALK_MOVE_NAMES))
    totals = np.zeros(len(TALK_MOVE_NAMES))
    for s in sessions_in_window:
        totals += s.talk_move_counts
    return totals / len(sessions_in_window)


def aggregate_its_features(snapshots_in_window, prior_snapshot=None) -> np.ndarray:
    """Per-feature mean over the window's snapshots.

    An empty window carries forward the most recent prior snapshot; with no
    prior either, returns zeros (the caller flags the EP).
    """
    if snapshots_in_window:
        return np.mean([s.values for s in snapshots_in_window], axis=0)
    if prior_snapshot is not None:
        return np.array(prior_snapshot.values, dtype=np.float64)
    return np.zeros(len(ITS_FEATURE_NAMES))


# ---------------------------------------------------------------------------
# Assembly


def assemble_evaluation_periods(sessions, its, assessments, roster,
                                year_start: date = DEFAULT_YEAR_START) -> Cohort:
    """Build one EP per completed assessment.

    The feature window for a student's assessment k is (previous assessment
    date, current date]; the first window starts at `year_start` inclusive.
    Students with no assessments or attendance ratio < 0.5 are excluded and
    counted. A student with assessments but no roster entry is an error.
    """
    by_student_assessments: dict[str, list[AssessmentRecord]] = {}
    for rec in assessments:
        by_student_assessments.setdefault(rec.student_id, []).append(rec)

    for sid, recs in by_student_assessments.items():
        if sid not in roster:
            raise ValueError(
                f"student {sid} has assessments but no tutor mapping in the "
                "roster")
        recs.sort(key=lambda r: r.round_index)
        rounds = [r.round_index for r in recs]
        dates = [r.assessment_date for r in recs]
        if len(set(rounds)) != len(rounds):
            raise ValueError(f"student {sid}: duplicate assessment rounds")
        if any(d2 <= d1 for d1, d2 in zip(dates, dates[1:])):
            raise ValueError(
                f"student {sid}: assessment dates not strictly increasing "
                "with rounds")

    sessions_by_student: dict[str, list[SessionLog]] = {}
    for s in sorted(sessions, key=lambda s: s.session_date):
        for sid in s.attendee_student_ids:
            sessions_by_student.setdefault(sid, []).append(s)
    its_by_student: dict[str, list[ItsSnapshot]] = {}
    for snap in sorted(its, key=lambda s: s.as_of_date):
        its_by_student.setdefault(snap.student_id, []).append(snap)

    excluded_attendance = 0
    excluded_no_assessment = 0
    eps: list[EvaluationPeriod] = []
    students: set[str] = set()
    tutor_of: dict[str, str] = {}

    for sid in sorted(roster):
        tutor_id, ratio = roster[sid]
        recs = by_student_assessments.get(sid)
        if not recs:
            excluded_no_assessment += 1
            continue
        if ratio < 0.5:
            excluded_attendance += 1
            continue
        students.add(sid)
        tutor_of[sid] = tutor_id

        stu_sessions = sessions_by_student.get(sid, [])
        session_dates = [s.session_date for s in stu_sessions]
        stu_snaps = its_by_student.get(sid, [])
        snap_dates = [s.as_of_date for s in stu_snaps]

        prev_date = None  # first window starts at year_start, inclusive
        for rec in recs:
            if prev_date is None:
                lo = bisect_left(session_dates, year_start)
                slo = bisect_left(snap_dates, year_start)
            else:
                lo = bisect_right(session_dates, prev_date)
                slo = bisect_right(snap_dates, prev_date)
            hi = bisect_right(session_dates, rec.assessment_date)
            shi = bisect_right(snap_dates, rec.assessment_date)

            window_sessions = stu_sessions[lo:hi]
            window_snaps = stu_snaps[slo:shi]
            prior = stu_snaps[slo - 1] if slo > 0 else None

            flags = set()
            talk = micro_average_talk_moves(window_sessions)
            if not window_sessions:
                flags.add(FLAG_NO_SESSIONS)
            its_vals = aggregate_its_features(window_snaps, prior)
            if not window_snaps and prior is None:
                flags.add(FLAG_NO_ITS)

            eps.append(EvaluationPeriod(
                student_id=sid, tutor_id=tutor_id,
                assessment_round=rec.round_index,
                features=np.concatenate([talk, its_vals]),
                outcome=float(rec.score),
                flags=frozenset(flags)))
            prev_date = rec.assessment_date

    excl = {"attendance": excluded_attendance,
            "no_assessments": excluded_no_assessment}
    if excluded_attendance or excluded_no_assessment:
        log.info("excluded students: %d below 50%% attendance, %d without "
                 "assessments", excluded_attendance, excluded_no_assessment)

    cohort = Cohort(
        evaluation_periods=eps,
        feature_names=list(FEATURE_NAMES),
        students=frozenset(students),
        tutors=frozenset(tutor_of.values()),
        tutor_of=tutor_of,
        exclusions=excl)
    cohort.validate()
    return cohort


def binarize(cohort: Cohort, threshold: float) -> BinarizedCohort:
    """Label each EP high iff outcome >= threshold."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    labels = (cohort.outcomes >= threshold).astype(np.uint8)
    binarized = BinarizedCohort(cohort=cohort, threshold=float(threshold),
                                labels=labels)
    if binarized.degenerate:
        log.info("threshold %.3g is degenerate: %d high / %d low",
                 threshold, binarized.n_high, binarized.n_low)
    return binarized


def compute_score_changes(cohort: Cohort) -> Cohort:
    """Rewrite outcomes as score changes between consecutive completed rounds.

    Students with a single assessment are dropped (their change is
    undefined). Retained students keep one EP per completed assessment: the
    first completed round carries change 0.0 and each later round carries
    score(k) - score(previous completed round). On the reference cohort
    shape this shrinks 1080 students / 4124 EPs to 968 / 4012.
    """
    by_student: dict[str, list[EvaluationPeriod]] = {}
    for ep in cohort.evaluation_periods:
        by_student.setdefault(ep.student_id, []).append(ep)

    dropped = 0
    keep_students = set()
    changed: dict[int, float] = {}  # id(ep) -> new outcome
    for sid, eps in by_student.items():
        if len(eps) < 2:
            dropped += 1
            continue
        keep_students.add(sid)
        ordered = sorted(eps, key=lambda e: e.assessment_round)
        prev_score = None
        for ep in ordered:
            if prev_score is None:
                changed[id(ep)] = 0.0
            else:
                changed[id(ep)] = ep.outcome - prev_score
            prev_score = ep.outcome

    new_eps = [
        EvaluationPeriod(student_id=ep.student_id, tutor_id=ep.tutor_id,
                         assessment_round=ep.assessment_round,
                         features=ep.features.copy(),
                         outcome=changed[id(ep)], flags=ep.flags)
        for ep in cohort.evaluation_periods if ep.student_id in keep_students
    ]
    tutor_of = {s: t for s, t in cohort.tutor_of.items() if s in keep_students}
    if dropped:
        log.info("dropped %d single-assessment students for the change "
                 "pipeline", dropped)
    exclusions = dict(cohort.exclusions)
    exclusions["single_assessment"] = dropped
    return Cohort(
        evaluation_periods=new_eps,
        feature_names=list(cohort.feature_names),
        students=frozenset(keep_students),
        tutors=frozenset(tutor_of.values()),
        tutor_of=tutor_of,
        exclusions=exclusions)


# ---------------------------------------------------------------------------
# Cohort CSV export / directory loading


def export_cohort_csv(cohort: Cohort, path) -> None:
    """One flat row per EP: ids, round, 11 features, outcome."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "tutor_id", "round",
                         *cohort.feature_names, "outcome"])
        for ep in cohort.evaluation_periods:
            writer.writerow([ep.student_id, ep.tutor_id, ep.assessment_round,
                             *(repr(v) for v in ep.features),
                             repr(ep.outcome)])


def load_cohort_dir(directory, year_start: date = DEFAULT_YEAR_START) -> Cohort:
    """Assemble a cohort from a directory holding the four input CSVs."""
    d = Path(directory)
    sessions, its, assessments = load_inputs(
        d / "sessions.csv", d / "its.csv", d / "assessments.csv")
    roster = load_roster(d / "roster.csv")
    return assemble_evaluation_periods(sessions, its, assessments, roster,
                                       year_start=year_start)
