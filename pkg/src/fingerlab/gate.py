"""Inference gate, triage metrics, confidence intervals and the vintage audit.

The gate overrides a rule label only when the probe's top-1 class differs
from it, the top-1 probability clears a threshold, and the top-1 probability
dominates the rule label's probability by a ratio. It is deliberately
conservative: in doubt, the rule label stands.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats as scipy_stats

from .corpus import FingeringTrack, ReviewStatus, align_notes, utc_now
from .errors import ValidationError

NUM_CLASSES = 11


@dataclass(frozen=True)
class GateConfig:
    top1_threshold: float = 0.9  # tau
    ratio_threshold: float = 2.0  # rho

    def __post_init__(self) -> None:
        # tau accepts the closed interval so threshold sweeps can probe the
        # 0 and 1 limiting cases
        if not 0.0 <= self.top1_threshold <= 1.0:
            raise ValidationError("top1_threshold must lie in [0, 1]")
        if not self.ratio_threshold >= 1.0:
            raise ValidationError("ratio_threshold must be at least 1")


@dataclass(frozen=True)
class GateDecision:
    note_id: str
    rule_label: int
    top1_label: int
    p_cls: float
    p_rule: float
    fired: bool
    final_label: int


def gate_fires(p_cls: float, p_rule: float, top1: int, rule: int, cfg: GateConfig) -> bool:
    """Direct evaluation of the override predicate; p_rule = 0 counts as an
    infinite ratio."""
    if top1 == rule:
        return False
    if not p_cls > cfg.top1_threshold:
        return False
    if p_rule == 0.0:
        return True
    return p_cls / p_rule > cfg.ratio_threshold


def apply_gate(
    distributions: np.ndarray,
    rule_track: FingeringTrack,
    cfg: GateConfig | None = None,
    model_id: str | None = None,
    produced_at: str | None = None,
) -> tuple[FingeringTrack, list[GateDecision]]:
    """Build the probe track and per-note decisions from class distributions.

    distributions holds one row per rule-track note, in track order.
    """
    cfg = cfg or GateConfig()
    dists = np.asarray(distributions, dtype=np.float64)
    if dists.shape != (len(rule_track.notes), NUM_CLASSES):
        raise ValidationError(
            f"need one {NUM_CLASSES}-class distribution per rule note: "
            f"got {dists.shape}, track has {len(rule_track.notes)} notes"
        )
    decisions: list[GateDecision] = []
    final_notes = []
    for note, row in zip(rule_track.notes, dists):
        top1 = int(np.argmax(row))
        p_cls = float(row[top1])
        p_rule = float(row[note.label])
        fired = gate_fires(p_cls, p_rule, top1, note.label, cfg)
        final = top1 if fired else note.label
        decisions.append(
            GateDecision(
                note_id=note.note_id,
                rule_label=note.label,
                top1_label=top1,
                p_cls=p_cls,
                p_rule=p_rule,
                fired=fired,
                final_label=final,
            )
        )
        final_notes.append(note.with_label(final))
    probe_track = FingeringTrack(
        piece_id=rule_track.piece_id,
        kind="probe",
        frame_rate_hz=rule_track.frame_rate_hz,
        notes=tuple(final_notes),
        produced_at=produced_at if produced_at is not None else utc_now(),
        model_id=model_id,
    )
    return probe_track, decisions


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PieceOutcome:
    """Counts for one piece, scored against its edited track."""

    piece_id: str
    n_notes: int  # edited notes
    rule_correct: int
    probe_correct: int
    rule_errors: int  # notes where rule != edited (including missing)
    fired: int
    fired_on_errors: int

    @property
    def delta_pp(self) -> float:
        return 100.0 * (self.probe_correct - self.rule_correct) / self.n_notes


def piece_outcome(
    decisions: Sequence[GateDecision],
    rule_track: FingeringTrack,
    edited_track: FingeringTrack,
) -> PieceOutcome:
    """Score one piece's gate decisions against its edited labels.

    Edited notes absent from the rule track count as rule errors the probe
    cannot fix (it only relabels existing rule notes).
    """
    by_note_id = {d.note_id: d for d in decisions}
    rule_correct = probe_correct = rule_errors = fired = fired_on_errors = 0
    for edited_note, rule_note in align_notes(edited_track, rule_track):
        rule_label = rule_note.label if rule_note is not None else 0
        decision = by_note_id.get(rule_note.note_id) if rule_note is not None else None
        final_label = decision.final_label if decision is not None else rule_label
        rule_ok = rule_label == edited_note.label
        rule_correct += rule_ok
        probe_correct += final_label == edited_note.label
        rule_errors += not rule_ok
        if decision is not None and decision.fired:
            fired += 1
            fired_on_errors += not rule_ok
    return PieceOutcome(
        piece_id=edited_track.piece_id,
        n_notes=len(edited_track.notes),
        rule_correct=rule_correct,
        probe_correct=probe_correct,
        rule_errors=rule_errors,
        fired=fired,
        fired_on_errors=fired_on_errors,
    )


@dataclass(frozen=True)
class EvalReport:
    flag_precision: float | None  # None when nothing fired
    flag_recall: float
    break_rate: float
    rule_accuracy: float
    probe_accuracy: float
    delta_pp: float
    per_piece: tuple[PieceOutcome, ...]
    bootstrap_lower95: float | None = None
    t_ci_low: float | None = None
    t_ci_high: float | None = None
    df: int | None = None


def evaluate(outcomes: Sequence[PieceOutcome]) -> EvalReport:
    """Pool per-piece outcomes into the triage metrics."""
    total = sum(o.n_notes for o in outcomes)
    if total == 0:
        raise ValidationError("evaluate: empty evaluation set")
    rule_correct = sum(o.rule_correct for o in outcomes)
    probe_correct = sum(o.probe_correct for o in outcomes)
    rule_errors = sum(o.rule_errors for o in outcomes)
    fired = sum(o.fired for o in outcomes)
    fired_on_errors = sum(o.fired_on_errors for o in outcomes)
    fired_on_correct = fired - fired_on_errors

    rule_acc = rule_correct / total
    probe_acc = probe_correct / total
    return EvalReport(
        flag_precision=fired_on_errors / fired if fired else None,
        flag_recall=fired_on_errors / rule_errors if rule_errors else 0.0,
        break_rate=fired_on_correct / rule_correct if rule_correct else 0.0,
        rule_accuracy=rule_acc,
        probe_accuracy=probe_acc,
        delta_pp=100.0 * (probe_acc - rule_acc),
        per_piece=tuple(outcomes),
    )


def evaluate_pieces(
    items: Sequence[tuple[Sequence[GateDecision], FingeringTrack, FingeringTrack]]
) -> EvalReport:
    """evaluate() over (decisions, rule track, edited track) triples."""
    return evaluate([piece_outcome(d, r, e) for d, r, e in items])


def report_to_dict(report: EvalReport) -> dict:
    doc = {
        "flag_precision": report.flag_precision,
        "flag_recall": report.flag_recall,
        "break_rate": report.break_rate,
        "rule_accuracy": report.rule_accuracy,
        "probe_accuracy": report.probe_accuracy,
        "delta_pp": report.delta_pp,
        "per_piece": [
            {
                "piece_id": o.piece_id,
                "n_notes": o.n_notes,
                "rule_correct": o.rule_correct,
                "probe_correct": o.probe_correct,
                "rule_errors": o.rule_errors,
                "fired": o.fired,
                "fired_on_errors": o.fired_on_errors,
                "delta_pp": o.delta_pp,
            }
            for o in report.per_piece
        ],
    }
    if report.bootstrap_lower95 is not None:
        doc["bootstrap_lower95"] = report.bootstrap_lower95
    if report.df is not None:
        doc["t_ci"] = [report.t_ci_low, report.t_ci_high]
        doc["df"] = report.df
    return doc


# ---------------------------------------------------------------------------
# Threshold sweep
# ---------------------------------------------------------------------------


def sweep_tau(
    items: Sequence[tuple[np.ndarray, FingeringTrack, FingeringTrack]],
    taus: Sequence[float],
    ratio_threshold: float = 2.0,
) -> list[tuple[float, EvalReport]]:
    """Re-gate and re-evaluate the corpus at each top-1 threshold."""
    results = []
    for tau in taus:
        cfg = GateConfig(top1_threshold=tau, ratio_threshold=ratio_threshold)
        outcomes = []
        for dists, rule_track, edited_track in items:
            _, decisions = apply_gate(dists, rule_track, cfg)
            outcomes.append(piece_outcome(decisions, rule_track, edited_track))
        results.append((tau, evaluate(outcomes)))
    return results


# ---------------------------------------------------------------------------
# Confidence intervals
# ---------------------------------------------------------------------------


def pooled_delta_pp(outcomes: Sequence[PieceOutcome]) -> float:
    total = sum(o.n_notes for o in outcomes)
    if total == 0:
        raise ValidationError("pooled_delta_pp: no notes")
    rule = sum(o.rule_correct for o in outcomes)
    probe = sum(o.probe_correct for o in outcomes)
    return 100.0 * (probe - rule) / total


def cluster_bootstrap(
    outcomes: Sequence[PieceOutcome], resamples: int = 5000, seed: int = 0
) -> float:
    """One-sided lower 95% bound on the pooled accuracy margin.

    Whole pieces are resampled with replacement; the margin is re-pooled over
    each resample's notes and the 5th percentile of the resample distribution
    is returned. Each resample draws from its own spawned seed, so a parallel
    run would agree with the serial one.
    """
    if not outcomes:
        raise ValidationError("cluster_bootstrap: need at least one piece")
    n_pieces = len(outcomes)
    deltas = np.empty(resamples, dtype=np.float64)
    for b in range(resamples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        picks = rng.integers(0, n_pieces, size=n_pieces)
        deltas[b] = pooled_delta_pp([outcomes[i] for i in picks])
    return float(np.percentile(deltas, 5.0))


@dataclass(frozen=True)
class TConfidenceInterval:
    mean: float
    low: float
    high: float
    df: int


def t_ci(values: Sequence[float], confidence: float = 0.95) -> TConfidenceInterval:
    """Two-sided Student-t interval for the mean of per-seed margins."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size < 2:
        raise ValidationError("t_ci: need at least two values")
    n = vals.size
    mean = float(vals.mean())
    s = float(vals.std(ddof=1))
    half = float(scipy_stats.t.ppf(0.5 + confidence / 2.0, n - 1)) * s / np.sqrt(n)
    return TConfidenceInterval(mean=mean, low=mean - half, high=mean + half, df=n - 1)


# ---------------------------------------------------------------------------
# Label-vintage audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VintageRow:
    piece_id: str
    stage: str
    stale: bool


def vintage_audit(statuses: Sequence[ReviewStatus]) -> list[VintageRow]:
    """Flag done review stages whose labels postdate the latest probe run.

    A stage is stale when the newest probe output was produced before the
    stage's completion timestamp: the labels it is scored against did not yet
    exist when it ran. Pieces without probe runs and undone stages yield no
    rows. Canonical timestamps compare lexicographically.
    """
    rows: list[VintageRow] = []
    for status in statuses:
        if not status.probe_runs:
            continue
        latest = max(run.produced_at for run in status.probe_runs)
        for stage_name in ("r1", "r2", "r3"):
            stage = status.stage(stage_name)
            if not stage.done:
                continue
            rows.append(
                VintageRow(
                    piece_id=status.piece_id,
                    stage=stage_name,
                    stale=latest < stage.completed_at,
                )
            )
    return rows
