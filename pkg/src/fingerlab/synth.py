"""Synthetic performance oracle.

Generates pieces with known fingering: each hand sits over a contiguous
5-key span, the playing finger's tip is planted at the key center for the
note's duration, and all other tips hover above their span keys. The edited
track carries the true labels, so the rule annotator can be scored exactly.
Controlled corruptions (adjacent-finger swaps, dropped notes) create a
rule-error population with a known ledger.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .corpus import FingeringTrack, NoteRecord, canonical_ts, hand_of, label_for
from .errors import ValidationError
from .geometry import HandPoseTrack, KeyboardGeometry, standard_geometry

_LEFT_SPAN_RANGE = (3, 38)  # inclusive start range of the left hand's 5-key span
_RIGHT_SPAN_RANGE = (48, 78)
_DURATION_RANGE = (3, 10)  # frames, inclusive
_GAP_RANGE = (1, 5)
_SPAN_MOVE_PROB = 0.1
_CHORD_PROB = 0.12  # chance a note joins the previous onset on the other hand
_SYNTH_EPOCH = datetime(2024, 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class SynthConfig:
    seed: int
    num_notes: int
    frame_rate_hz: float = 30.0
    noise_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    p_swap: float = 0.0
    p_drop: float = 0.0
    hover_height_mm: float = 40.0
    piece_id: str = ""

    def __post_init__(self) -> None:
        if self.num_notes < 1:
            raise ValidationError("num_notes must be at least 1")
        if any(s < 0 for s in self.noise_mm):
            raise ValidationError("noise components must be nonnegative")
        for name in ("p_swap", "p_drop"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.p_swap + self.p_drop > 1.0:
            raise ValidationError("p_swap + p_drop must not exceed 1")
        if not self.hover_height_mm > 0:
            raise ValidationError("hover_height_mm must be positive")
        if not self.piece_id:
            object.__setattr__(self, "piece_id", f"synth-{self.seed:04d}")


@dataclass(frozen=True)
class SynthPiece:
    """Ground-truth outputs for one generated piece."""

    notes: tuple[NoteRecord, ...]  # rule-annotator input, labels all 0
    poses: HandPoseTrack
    edited: FingeringTrack
    # pose array with every tip hovering (no presses); corruption restores rows from it
    hover_baseline: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class CorruptionLedger:
    """Exactly which notes were corrupted, for error accounting."""

    swapped: tuple[tuple[str, int], ...]  # (note_id, label the rule annotator will now emit)
    dropped: tuple[str, ...]

    @property
    def swapped_note_ids(self) -> frozenset[str]:
        return frozenset(note_id for note_id, _ in self.swapped)

    @property
    def disagreement_note_ids(self) -> frozenset[str]:
        return self.swapped_note_ids | frozenset(self.dropped)

    def to_dict(self) -> dict:
        return {
            "swapped": [{"note_id": n, "rule_label": lab} for n, lab in self.swapped],
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CorruptionLedger":
        return cls(
            swapped=tuple((r["note_id"], r["rule_label"]) for r in doc.get("swapped", [])),
            dropped=tuple(doc.get("dropped", [])),
        )


@dataclass(frozen=True)
class CorruptedPiece:
    notes: tuple[NoteRecord, ...]  # reduced rule-annotator input
    poses: HandPoseTrack
    ledger: CorruptionLedger


def _span_key(hand: str, span_start: int, finger: int) -> int:
    # thumbs face each other: L1 sits on the top key of the left span,
    # R1 on the bottom key of the right span
    if hand == "L":
        return span_start + (5 - finger)
    return span_start + (finger - 1)


def _tip_home_key(tip: int, left_span: int, right_span: int) -> int:
    if tip < 5:
        return left_span + (4 - tip)
    return right_span + (tip - 5)


def _synth_timestamp(seed: int) -> str:
    return canonical_ts(_SYNTH_EPOCH + timedelta(seconds=seed))


def generate_piece(cfg: SynthConfig, geo: KeyboardGeometry | None = None) -> SynthPiece:
    """Generate notes, fingertip trajectories and the true (edited) track.

    Pure function of the config: the same seed always yields bitwise-identical
    arrays and tracks.
    """
    geo = geo or standard_geometry()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))

    left_span = int(rng.integers(_LEFT_SPAN_RANGE[0], _LEFT_SPAN_RANGE[1] + 1))
    right_span = int(rng.integers(_RIGHT_SPAN_RANGE[0], _RIGHT_SPAN_RANGE[1] + 1))
    span_changes: list[tuple[int, int, int]] = [(0, left_span, right_span)]

    events: list[tuple[str, str, int, int, int, int]] = []  # id, hand, finger, key, on, off
    cursor = 2
    prev: tuple[str, int, int] | None = None  # hand, onset, group size
    for i in range(cfg.num_notes):
        note_id = f"{cfg.piece_id}-n{i:05d}"
        chord = (
            prev is not None
            and prev[2] == 1
            and i > 0
            and rng.random() < _CHORD_PROB
        )
        if chord:
            hand = "R" if prev[0] == "L" else "L"
            onset = prev[1]
        else:
            hand = "L" if rng.random() < 0.5 else "R"
            if rng.random() < _SPAN_MOVE_PROB:
                if hand == "L":
                    left_span = int(rng.integers(_LEFT_SPAN_RANGE[0], _LEFT_SPAN_RANGE[1] + 1))
                else:
                    right_span = int(rng.integers(_RIGHT_SPAN_RANGE[0], _RIGHT_SPAN_RANGE[1] + 1))
                span_changes.append((cursor, left_span, right_span))
            onset = cursor
        finger = int(rng.integers(1, 6))
        span = left_span if hand == "L" else right_span
        key = _span_key(hand, span, finger)
        duration = int(rng.integers(_DURATION_RANGE[0], _DURATION_RANGE[1] + 1))
        offset = onset + duration
        events.append((note_id, hand, finger, key, onset, offset))
        cursor = max(cursor, offset) + int(rng.integers(_GAP_RANGE[0], _GAP_RANGE[1] + 1))
        prev = (hand, onset, 2 if chord else 1)

    total_frames = max(off for *_, off in events) + 1

    baseline = np.empty((total_frames, 10, 3), dtype=np.float64)
    changes = span_changes + [(total_frames, 0, 0)]
    for (start, sl, sr), (end, _, _) in zip(changes, changes[1:]):
        if start >= end:
            continue
        for tip in range(10):
            box = geo.keys[_tip_home_key(tip, sl, sr)]
            baseline[start:end, tip] = (
                box.x_center,
                box.y_center,
                box.surface_z + cfg.hover_height_mm,
            )

    frames = baseline.copy()
    sx, sy, sz = cfg.noise_mm
    for _, hand, finger, key, onset, offset in events:
        tip = label_for(hand, finger) - 1
        box = geo.keys[key]
        press = np.array([box.x_center, box.y_center, box.surface_z])
        span_frames = offset - onset
        noise = rng.normal(0.0, [sx, sy, sz], size=(span_frames, 3))
        noise = np.clip(noise, [-3 * sx, -3 * sy, -3 * sz], [3 * sx, 3 * sy, 3 * sz])
        frames[onset:offset, tip] = press + noise

    produced_at = _synth_timestamp(cfg.seed)
    edited_notes = tuple(
        NoteRecord(
            note_id=nid,
            key_index=key,
            onset_frame=onset,
            offset_frame=offset,
            label=label_for(hand, finger),
        )
        for nid, hand, finger, key, onset, offset in events
    )
    edited = FingeringTrack(
        piece_id=cfg.piece_id,
        kind="edited",
        frame_rate_hz=cfg.frame_rate_hz,
        notes=edited_notes,
        produced_at=produced_at,
    )
    unlabeled = tuple(n.with_label(0) for n in edited.notes)
    poses = HandPoseTrack(piece_id=cfg.piece_id, frame_rate_hz=cfg.frame_rate_hz, frames=frames)
    return SynthPiece(notes=unlabeled, poses=poses, edited=edited, hover_baseline=baseline)


def inject_corruptions(piece: SynthPiece, cfg: SynthConfig) -> CorruptedPiece:
    """Corrupt the rule-annotator inputs while leaving the edited truth alone.

    Swapped notes exchange the true tip with an adjacent same-hand tip for the
    note's duration, so the rule annotator labels the neighbour. Dropped notes
    vanish from the note list and their tips return to hovering, so the note
    exists only in the edited track.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    frames = np.array(piece.poses.frames, dtype=np.float64)
    by_id = {n.note_id: n for n in piece.edited.notes}

    swapped: list[tuple[str, int]] = []
    dropped: list[str] = []
    kept: list[NoteRecord] = []
    for note in piece.notes:
        truth = by_id[note.note_id]
        draw = rng.random()
        if draw < cfg.p_drop:
            tip = truth.label - 1
            frames[note.onset_frame : note.offset_frame, tip] = piece.hover_baseline[
                note.onset_frame : note.offset_frame, tip
            ]
            dropped.append(note.note_id)
            continue
        if draw < cfg.p_drop + cfg.p_swap:
            finger = (truth.label - 1) % 5 + 1
            if finger == 1:
                neighbour = 2
            elif finger == 5:
                neighbour = 4
            else:
                neighbour = finger + (1 if rng.random() < 0.5 else -1)
            hand = hand_of(truth.label)
            swap_label = label_for(hand, neighbour)
            tip_a, tip_b = truth.label - 1, swap_label - 1
            seg = frames[note.onset_frame : note.offset_frame]
            seg[:, [tip_a, tip_b]] = seg[:, [tip_b, tip_a]]
            swapped.append((note.note_id, swap_label))
        kept.append(note)

    poses = HandPoseTrack(
        piece_id=piece.poses.piece_id,
        frame_rate_hz=piece.poses.frame_rate_hz,
        frames=frames,
    )
    return CorruptedPiece(
        notes=tuple(kept),
        poses=poses,
        ledger=CorruptionLedger(swapped=tuple(swapped), dropped=tuple(dropped)),
    )
