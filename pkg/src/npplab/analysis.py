"""Behavioral measures over sealed session logs: decision-time slice
curves, explanandum distributions, move-type percentages, question
frequencies, explanation verbosity, and per-group report documents.

Everything here is a pure fold over immutable logs; every aggregate can be
recomputed from the raw records.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from scipy import stats as scipy_stats

from .plant import FEATURE_ORDER, N_FEATURES
from .session import MoveRecord, Phase, SessionLog, load_log

REPORT_SCHEMA_VERSION = "1"

# complementary per-step query categories (they partition a phase's steps)
QUERY_FILTERS = ("none", "what_only", "why")


class AnalysisError(ValueError):
    pass


class SliceError(AnalysisError):
    """Fewer steps than slices; retry with a smaller n_slices."""


def _matches(record: MoveRecord, query_filter: Optional[str]) -> bool:
    if query_filter is None:
        return True
    if query_filter == "none":
        return not record.asked_what
    if query_filter == "what_only":
        return record.asked_what and not record.asked_why
    if query_filter == "why":
        return record.asked_why
    raise AnalysisError(f"unknown query filter {query_filter!r}")


def _mean_stderr(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass(frozen=True)
class SliceStat:
    mean_ms: float
    stderr_ms: float
    count: int


def slice_decision_times(log: SessionLog, n_slices: int = 20,
                         phase: Phase = Phase.TRAINING,
                         query_filter: Optional[str] = None) -> list[SliceStat]:
    """Partition the phase's (filtered) steps, in order, into n_slices
    contiguous bins — the remainder goes to the earliest bins — and return
    per-bin mean and standard error of the decision time."""
    times = [r.decision_time_ms for r in log.records
             if r.phase == phase and _matches(r, query_filter)]
    n = len(times)
    if n < n_slices:
        raise SliceError(
            f"{n} steps under filter {query_filter!r} in {phase.value}; "
            f"need at least {n_slices} (use a smaller n_slices)")
    base, rem = divmod(n, n_slices)
    out = []
    start = 0
    for i in range(n_slices):
        size = base + (1 if i < rem else 0)
        chunk = times[start:start + size]
        start += size
        mean, stderr = _mean_stderr(chunk)
        out.append(SliceStat(mean_ms=mean, stderr_ms=stderr, count=len(chunk)))
    return out


def explanandum_distribution(logs: Iterable[SessionLog]) -> Optional[list[float]]:
    """Percentage of explanations per feature (length 8, sums to 100), or
    None when the logs contain no explanations (empty-distribution marker)."""
    counts = explanandum_counts(logs)
    total = sum(counts)
    if total == 0:
        return None
    return [100.0 * c / total for c in counts]


def explanandum_counts(logs: Iterable[SessionLog]) -> list[int]:
    counts = [0] * N_FEATURES
    for log in logs:
        for r in log.records:
            if r.explanation is not None:
                counts[r.explanation.feature_index] += 1
    return counts


def explanandum_chi_square(logs_a: Iterable[SessionLog],
                           logs_b: Iterable[SessionLog]) -> tuple[float, float, int]:
    """Chi-square test of homogeneity between two groups' explanandum
    counts (features unseen in both groups are dropped)."""
    a = explanandum_counts(logs_a)
    b = explanandum_counts(logs_b)
    pairs = [(x, y) for x, y in zip(a, b) if x + y > 0]
    if len(pairs) < 2:
        raise AnalysisError("need at least two observed explananda for a chi-square test")
    table = [[x for x, _ in pairs], [y for _, y in pairs]]
    chi2, p, dof, _ = scipy_stats.chi2_contingency(table)
    return float(chi2), float(p), int(dof)


@dataclass(frozen=True)
class MoveTypeShares:
    equal: float
    follow_self: float
    follow_ai: float
    other: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.equal, self.follow_self, self.follow_ai, self.other)


def move_type_percentages(logs: Iterable[SessionLog],
                          query_filter: Optional[str] = None) -> Optional[MoveTypeShares]:
    """Percentages over classified moves matching the filter; None when no
    move is classified (empty marker)."""
    counts = {"equal": 0, "follow_self": 0, "follow_ai": 0, "other": 0}
    for log in logs:
        for r in log.records:
            if r.move_type is not None and _matches(r, query_filter):
                counts[r.move_type.value] += 1
    total = sum(counts.values())
    if total == 0:
        return None
    return MoveTypeShares(**{k: 100.0 * v / total for k, v in counts.items()})


def question_counts(log: SessionLog, phase: Optional[Phase] = None) -> tuple[int, int]:
    """(what, why) question counts, one per step at most."""
    what = why = 0
    for r in log.records:
        if phase is not None and r.phase != phase:
            continue
        what += r.asked_what
        why += r.asked_why
    return what, why


def mean_explanation_words(logs: Iterable[SessionLog]) -> Optional[float]:
    counts = [r.explanation.word_count
              for log in logs for r in log.records if r.explanation is not None]
    if not counts:
        return None
    return sum(counts) / len(counts)


# ---------------------------------------------------------------------------
# Group reports


@dataclass
class GroupStats:
    """Per-group aggregates; *_list fields keep the per-session values so
    everything is recomputable and testable."""

    sessions: int
    actions: tuple          # (mean, stderr)
    energy: tuple
    anomalies: tuple
    critic_steps: tuple
    what_questions: tuple
    why_questions: tuple
    move_types_what_only: Optional[MoveTypeShares]
    move_types_why: Optional[MoveTypeShares]
    explanandum_pct: Optional[list]
    mean_explanation_words: Optional[float]
    decision_time_slices: dict  # panel name -> list[SliceStat] or None
    per_session: dict = field(default_factory=dict)


@dataclass
class GroupReport:
    schema_version: str
    n_slices: int
    groups: dict  # name -> GroupStats


# the four decision-time panels
_PANELS = (
    ("training_all", Phase.TRAINING, None),
    ("training_what_only", Phase.TRAINING, "what_only"),
    ("training_why", Phase.TRAINING, "why"),
    ("assessment_all", Phase.ASSESSMENT, None),
)


def _group_stats(logs: list[SessionLog], n_slices: int) -> GroupStats:
    actions = [float(log.recompute_totals().actions) for log in logs]
    energy = [log.recompute_totals().energy for log in logs]
    anomalies = [float(log.recompute_totals().anomalies) for log in logs]
    critic = [float(log.recompute_totals().critic_steps) for log in logs]
    what = [float(question_counts(log)[0]) for log in logs]
    why = [float(question_counts(log)[1]) for log in logs]

    slices = {}
    for name, phase, query_filter in _PANELS:
        per_session = []
        for log in logs:
            try:
                per_session.append(slice_decision_times(log, n_slices, phase, query_filter))
            except SliceError:
                continue
        if not per_session:
            slices[name] = None
            continue
        # average per-session bins, then std error across sessions
        combined = []
        for i in range(n_slices):
            means = [s[i].mean_ms for s in per_session]
            mean, stderr = _mean_stderr(means)
            combined.append(SliceStat(mean_ms=mean, stderr_ms=stderr,
                                      count=sum(s[i].count for s in per_session)))
        slices[name] = combined

    return GroupStats(
        sessions=len(logs),
        actions=_mean_stderr(actions),
        energy=_mean_stderr(energy),
        anomalies=_mean_stderr(anomalies),
        critic_steps=_mean_stderr(critic),
        what_questions=_mean_stderr(what),
        why_questions=_mean_stderr(why),
        move_types_what_only=move_type_percentages(logs, "what_only"),
        move_types_why=move_type_percentages(logs, "why"),
        explanandum_pct=explanandum_distribution(logs),
        mean_explanation_words=mean_explanation_words(logs),
        decision_time_slices=slices,
        per_session={
            "actions": actions, "energy": energy,
            "anomalies": anomalies, "critic_steps": critic,
            "what_questions": what, "why_questions": why,
        },
    )


def group_report(groups: dict, n_slices: int = 20) -> GroupReport:
    """Aggregate every measure per group of sealed logs. Groups must share
    one log schema version."""
    if not groups or any(not logs for logs in groups.values()):
        raise AnalysisError("every group needs at least one sealed log")
    versions = {log.schema_version for logs in groups.values() for log in logs}
    if len(versions) > 1:
        raise AnalysisError(f"mixed log schema versions: {sorted(versions)}")
    return GroupReport(
        schema_version=REPORT_SCHEMA_VERSION,
        n_slices=n_slices,
        groups={name: _group_stats(list(logs), n_slices)
                for name, logs in sorted(groups.items())},
    )


def report_to_dict(report: GroupReport) -> dict:
    def shares(s: Optional[MoveTypeShares]):
        return None if s is None else {
            "equal": s.equal, "follow_self": s.follow_self,
            "follow_ai": s.follow_ai, "other": s.other}

    out = {"schema_version": report.schema_version, "n_slices": report.n_slices,
           "groups": {}}
    for name, g in report.groups.items():
        out["groups"][name] = {
            "sessions": g.sessions,
            "actions": {"mean": g.actions[0], "stderr": g.actions[1]},
            "energy": {"mean": g.energy[0], "stderr": g.energy[1]},
            "anomalies": {"mean": g.anomalies[0], "stderr": g.anomalies[1]},
            "critic_steps": {"mean": g.critic_steps[0], "stderr": g.critic_steps[1]},
            "what_questions": {"mean": g.what_questions[0], "stderr": g.what_questions[1]},
            "why_questions": {"mean": g.why_questions[0], "stderr": g.why_questions[1]},
            "move_types_what_only": shares(g.move_types_what_only),
            "move_types_why": shares(g.move_types_why),
            "explanandum_pct": None if g.explanandum_pct is None else {
                FEATURE_ORDER[i]: g.explanandum_pct[i] for i in range(N_FEATURES)},
            "mean_explanation_words": g.mean_explanation_words,
            "decision_time_slices": {
                panel: None if rows is None else [
                    {"slice": i, "mean_ms": r.mean_ms, "stderr_ms": r.stderr_ms,
                     "count": r.count} for i, r in enumerate(rows)]
                for panel, rows in g.decision_time_slices.items()},
        }
    return out


def write_report(report: GroupReport, out_dir: str | Path) -> None:
    """report.json plus plot-ready CSV tables (one row per bin/feature/group)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = report_to_dict(report)
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))

    with open(out_dir / "decision_time_slices.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "panel", "slice", "mean_ms", "stderr_ms", "count"])
        for name, g in sorted(report.groups.items()):
            for panel, rows in g.decision_time_slices.items():
                if rows is None:
                    continue
                for i, r in enumerate(rows):
                    w.writerow([name, panel, i, r.mean_ms, r.stderr_ms, r.count])

    with open(out_dir / "explanandum.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "feature", "percent"])
        for name, g in sorted(report.groups.items()):
            if g.explanandum_pct is None:
                continue
            for i, pct in enumerate(g.explanandum_pct):
                w.writerow([name, FEATURE_ORDER[i], pct])

    with open(out_dir / "move_types.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "panel", "equal", "follow_self", "follow_ai", "other"])
        for name, g in sorted(report.groups.items()):
            for panel, s in (("what_only", g.move_types_what_only), ("why", g.move_types_why)):
                if s is not None:
                    w.writerow([name, panel, *s.as_tuple()])

    with open(out_dir / "totals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "measure", "mean", "stderr"])
        for name, g in sorted(report.groups.items()):
            for measure in ("actions", "energy", "anomalies", "critic_steps",
                            "what_questions", "why_questions"):
                mean, stderr = getattr(g, measure)
                w.writerow([name, measure, mean, stderr])


def load_group_dirs(dirs: Iterable[str | Path]) -> dict:
    """One group per directory (group name = directory name), one log per
    .jsonl file inside."""
    groups = {}
    for d in dirs:
        d = Path(d)
        logs = [load_log(p) for p in sorted(d.glob("*.jsonl"))]
        if not logs:
            raise AnalysisError(f"no session logs in {d}")
        groups[d.name] = logs
    return groups
