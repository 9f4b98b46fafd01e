"""Core corpus types: note records, fingering tracks, alignment and review status.

Finger labels are integers 0..10. 0 means "no assignment"; 1..5 are left-hand
fingers thumb..pinky and 6..10 are right-hand fingers thumb..pinky. Every
module in the package uses this codec.
"""
from __future__ import annotations

import json
import os
import statistics
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import AlignmentError, FormatError, ValidationError

TRACK_KINDS = ("rule", "edited", "probe")
STAGES = ("r1", "r2", "r3")

# Notes on different tracks are considered the same event when their onsets
# differ by at most this many frames (and the key matches).
ONSET_MATCH_TOLERANCE = 2


# ---------------------------------------------------------------------------
# Timestamps
# ---------------------------------------------------------------------------

_TS_FORMAT = "%Y-%m-%dT%H:%M:%S.%f"


def utc_now() -> str:
    """Current time as a canonical ISO-8601 UTC string."""
    return datetime.now(timezone.utc).strftime(_TS_FORMAT) + "Z"


def canonical_ts(value: str | datetime) -> str:
    """Normalize a timestamp to the fixed-width UTC form used on disk.

    Fixed width keeps lexicographic comparison equivalent to chronological
    comparison, which the vintage audit relies on.
    """
    if isinstance(value, datetime):
        dt = value
    else:
        try:
            dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
        except ValueError as exc:
            raise ValidationError(f"bad timestamp {value!r}: {exc}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).strftime(_TS_FORMAT) + "Z"


# ---------------------------------------------------------------------------
# Finger label codec
# ---------------------------------------------------------------------------


def validate_label(class_id: int) -> int:
    if not isinstance(class_id, int) or isinstance(class_id, bool) or not 0 <= class_id <= 10:
        raise ValidationError(f"finger label must be an integer in 0..10, got {class_id!r}")
    return class_id


def hand_of(class_id: int) -> str | None:
    """'L' for 1..5, 'R' for 6..10, None for 0 (missing)."""
    validate_label(class_id)
    if class_id == 0:
        return None
    return "L" if class_id <= 5 else "R"


def finger_of(class_id: int) -> int | None:
    """Finger number 1(thumb)..5(pinky) within the hand, None for missing."""
    validate_label(class_id)
    if class_id == 0:
        return None
    return (class_id - 1) % 5 + 1


def label_for(hand: str, finger: int) -> int:
    """Class id for a (hand, finger) pair; hand is 'L' or 'R', finger 1..5."""
    if hand not in ("L", "R") or not 1 <= finger <= 5:
        raise ValidationError(f"bad hand/finger pair ({hand!r}, {finger!r})")
    return finger if hand == "L" else finger + 5


def label_for_tip(tip_index: int) -> int:
    """Class id for a fingertip slot 0..9 (L1..L5 then R1..R5)."""
    if not 0 <= tip_index <= 9:
        raise ValidationError(f"tip index must be 0..9, got {tip_index!r}")
    return tip_index + 1


# ---------------------------------------------------------------------------
# Note records and tracks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoteRecord:
    """One note event: key, frame interval and a fingering label.

    The label applies to the whole [onset_frame, offset_frame) interval.
    """

    note_id: str
    key_index: int
    onset_frame: int
    offset_frame: int
    label: int = 0

    def __post_init__(self) -> None:
        if not self.note_id or not isinstance(self.note_id, str):
            raise ValidationError(f"note_id must be a non-empty string, got {self.note_id!r}")
        if not 0 <= self.key_index <= 87:
            raise ValidationError(f"note {self.note_id}: key_index {self.key_index} outside 0..87")
        if self.onset_frame < 0:
            raise ValidationError(f"note {self.note_id}: negative onset_frame {self.onset_frame}")
        if self.offset_frame <= self.onset_frame:
            raise ValidationError(
                f"note {self.note_id}: offset_frame {self.offset_frame} must exceed "
                f"onset_frame {self.onset_frame}"
            )
        validate_label(self.label)

    def with_label(self, label: int) -> "NoteRecord":
        return NoteRecord(self.note_id, self.key_index, self.onset_frame, self.offset_frame, label)


@dataclass(frozen=True)
class FingeringTrack:
    """Ordered note records of one kind (rule | edited | probe) for a piece."""

    piece_id: str
    kind: str
    frame_rate_hz: float
    notes: tuple[NoteRecord, ...]
    produced_at: str
    model_id: str | None = None

    def __post_init__(self) -> None:
        if not self.piece_id:
            raise ValidationError("piece_id must be non-empty")
        if self.kind not in TRACK_KINDS:
            raise ValidationError(f"track kind must be one of {TRACK_KINDS}, got {self.kind!r}")
        if not self.frame_rate_hz > 0:
            raise ValidationError(f"frame_rate_hz must be positive, got {self.frame_rate_hz!r}")
        notes = tuple(sorted(self.notes, key=lambda n: (n.onset_frame, n.key_index)))
        object.__setattr__(self, "notes", notes)
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))
        object.__setattr__(self, "produced_at", canonical_ts(self.produced_at))
        seen_pos: set[tuple[int, int]] = set()
        seen_ids: set[str] = set()
        for n in notes:
            pos = (n.key_index, n.onset_frame)
            if pos in seen_pos:
                raise ValidationError(
                    f"duplicate note at key {n.key_index}, onset {n.onset_frame} "
                    f"in track {self.piece_id}/{self.kind}"
                )
            seen_pos.add(pos)
            if n.note_id in seen_ids:
                raise ValidationError(f"duplicate note_id {n.note_id!r} in track {self.piece_id}/{self.kind}")
            seen_ids.add(n.note_id)

    def note_by_id(self, note_id: str) -> NoteRecord | None:
        for n in self.notes:
            if n.note_id == note_id:
                return n
        return None

    def replace_notes(self, notes: Iterable[NoteRecord], produced_at: str | None = None) -> "FingeringTrack":
        return FingeringTrack(
            piece_id=self.piece_id,
            kind=self.kind,
            frame_rate_hz=self.frame_rate_hz,
            notes=tuple(notes),
            produced_at=produced_at if produced_at is not None else self.produced_at,
            model_id=self.model_id,
        )


# ---------------------------------------------------------------------------
# Track file format
# ---------------------------------------------------------------------------


def track_to_dict(track: FingeringTrack) -> dict:
    doc: dict = {
        "piece_id": track.piece_id,
        "kind": track.kind,
        "frame_rate_hz": track.frame_rate_hz,
        "produced_at": track.produced_at,
    }
    if track.model_id is not None:
        doc["model_id"] = track.model_id
    doc["notes"] = [
        {
            "note_id": n.note_id,
            "key": n.key_index,
            "onset": n.onset_frame,
            "offset": n.offset_frame,
            "label": n.label,
        }
        for n in track.notes
    ]
    return doc


def track_from_dict(doc: dict, source: str = "<dict>") -> FingeringTrack:
    if not isinstance(doc, dict):
        raise FormatError(f"{source}: track document must be a JSON object")
    for key in ("piece_id", "kind", "frame_rate_hz", "produced_at", "notes"):
        if key not in doc:
            raise FormatError(f"{source}: missing field {key!r}")
    notes = []
    for idx, rec in enumerate(doc["notes"]):
        if not isinstance(rec, dict):
            raise FormatError(f"{source}: notes[{idx}] is not an object")
        try:
            notes.append(
                NoteRecord(
                    note_id=rec["note_id"],
                    key_index=rec["key"],
                    onset_frame=rec["onset"],
                    offset_frame=rec["offset"],
                    label=rec["label"],
                )
            )
        except KeyError as exc:
            raise FormatError(f"{source}: notes[{idx}] missing field {exc.args[0]!r}") from None
    return FingeringTrack(
        piece_id=doc["piece_id"],
        kind=doc["kind"],
        frame_rate_hz=doc["frame_rate_hz"],
        notes=tuple(notes),
        produced_at=doc["produced_at"],
        model_id=doc.get("model_id"),
    )


def dump_json(obj: object) -> str:
    """Canonical JSON serialization used for every artifact the package writes."""
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def write_json_atomic(path: str | Path, obj: object) -> None:
    """Write JSON via a temp file + rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(dump_json(obj))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_track(track: FingeringTrack, path: str | Path) -> None:
    write_json_atomic(path, track_to_dict(track))


def load_track(path: str | Path) -> FingeringTrack:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from None
    return track_from_dict(doc, source=str(path))


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def align_notes(
    reference: FingeringTrack, other: FingeringTrack
) -> list[tuple[NoteRecord, NoteRecord | None]]:
    """Match every reference note to at most one other-track note.

    Notes match by note_id when both tracks carry it, else by key within
    ±ONSET_MATCH_TOLERANCE frames of the onset. Each other-track note matches
    at most one reference note; the closest onset wins and ties go to the
    earliest onset. Unmatched reference notes pair with None.
    """
    if reference.piece_id != other.piece_id:
        raise AlignmentError(
            f"piece mismatch: {reference.piece_id!r} vs {other.piece_id!r}"
        )
    if reference.frame_rate_hz != other.frame_rate_hz:
        raise AlignmentError(
            f"frame rate mismatch for {reference.piece_id!r}: "
            f"{reference.frame_rate_hz} vs {other.frame_rate_hz}"
        )

    assigned: dict[int, int] = {}
    consumed: set[int] = set()

    other_by_id = {n.note_id: j for j, n in enumerate(other.notes)}
    for i, ref in enumerate(reference.notes):
        j = other_by_id.get(ref.note_id)
        if j is not None:
            assigned[i] = j
            consumed.add(j)

    by_key: dict[int, list[int]] = defaultdict(list)
    for j, o in enumerate(other.notes):
        if j not in consumed:
            by_key[o.key_index].append(j)

    window: list[tuple[int, int, int, int, int]] = []
    for i, ref in enumerate(reference.notes):
        if i in assigned:
            continue
        for j in by_key.get(ref.key_index, ()):
            gap = abs(other.notes[j].onset_frame - ref.onset_frame)
            if gap <= ONSET_MATCH_TOLERANCE:
                window.append((gap, ref.onset_frame, other.notes[j].onset_frame, i, j))
    window.sort()
    for _, _, _, i, j in window:
        if i not in assigned and j not in consumed:
            assigned[i] = j
            consumed.add(j)

    return [
        (ref, other.notes[assigned[i]] if i in assigned else None)
        for i, ref in enumerate(reference.notes)
    ]


def align_tracks(
    reference: FingeringTrack, other: FingeringTrack
) -> list[tuple[NoteRecord, int]]:
    """Pair every reference note with the other track's label for that note.

    Matching as in align_notes; reference notes without a counterpart pair
    with label 0 (missing).
    """
    return [
        (ref, matched.label if matched is not None else 0)
        for ref, matched in align_notes(reference, other)
    ]


# ---------------------------------------------------------------------------
# Agreement statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgreementStats:
    total_edited_notes: int
    matched_notes: int
    agreement: float
    per_piece_disagreement: tuple[tuple[str, float], ...]
    rule_error_count: int

    @property
    def median_disagreement(self) -> float:
        return statistics.median(d for _, d in self.per_piece_disagreement)


def agreement_stats(
    pairs_per_piece: Mapping[str, Sequence[tuple[NoteRecord, int]]]
) -> AgreementStats:
    """Aggregate rule-vs-edited agreement over aligned pairs, per piece and pooled."""
    total = sum(len(pairs) for pairs in pairs_per_piece.values())
    if total == 0:
        raise ValidationError("agreement_stats: no aligned pairs (empty corpus)")
    matched = 0
    per_piece: list[tuple[str, float]] = []
    for piece_id in sorted(pairs_per_piece):
        pairs = pairs_per_piece[piece_id]
        if not pairs:
            raise ValidationError(f"agreement_stats: piece {piece_id!r} has no pairs")
        piece_matched = sum(1 for ref, other_label in pairs if ref.label == other_label)
        matched += piece_matched
        per_piece.append((piece_id, 1.0 - piece_matched / len(pairs)))
    return AgreementStats(
        total_edited_notes=total,
        matched_notes=matched,
        agreement=matched / total,
        per_piece_disagreement=tuple(per_piece),
        rule_error_count=total - matched,
    )


# ---------------------------------------------------------------------------
# Review status
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageState:
    done: bool = False
    completed_at: str | None = None

    def __post_init__(self) -> None:
        if self.done and not self.completed_at:
            raise ValidationError("a done review stage needs a completed_at timestamp")
        if self.completed_at is not None:
            object.__setattr__(self, "completed_at", canonical_ts(self.completed_at))


@dataclass(frozen=True)
class ProbeRun:
    model_id: str
    produced_at: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "produced_at", canonical_ts(self.produced_at))


@dataclass(frozen=True)
class ReviewStatus:
    """Per-piece review progress: three staged passes plus recorded probe runs.

    R2 and R3 both require R1, but R3 does not require R2; later passes can be
    assigned to a different specialist than the second one.
    """

    piece_id: str
    stages: Mapping[str, StageState] = field(default_factory=dict)
    probe_runs: tuple[ProbeRun, ...] = ()

    def __post_init__(self) -> None:
        if not self.piece_id:
            raise ValidationError("piece_id must be non-empty")
        stages = {s: StageState() for s in STAGES}
        for name, state in dict(self.stages).items():
            key = name.lower()
            if key not in STAGES:
                raise ValidationError(f"unknown review stage {name!r}")
            stages[key] = state
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "probe_runs", tuple(self.probe_runs))
        r1 = stages["r1"]
        for later in ("r2", "r3"):
            if stages[later].done and not r1.done:
                raise ValidationError(f"{later} cannot be done while r1 is not")

    def stage(self, name: str) -> StageState:
        return self.stages[name.lower()]


def update_review_stage(
    status: ReviewStatus, stage: str, done: bool, at: str | datetime | None = None
) -> ReviewStatus:
    """Return a copy of `status` with one stage marked (un)done.

    Marking r2 or r3 done requires r1 done; violations raise ValidationError.
    """
    key = stage.lower()
    if key not in STAGES:
        raise ValidationError(f"unknown review stage {stage!r}")
    if done and at is None:
        raise ValidationError("marking a stage done requires a timestamp")
    stages = dict(status.stages)
    stages[key] = StageState(done=done, completed_at=canonical_ts(at) if done else None)
    return ReviewStatus(piece_id=status.piece_id, stages=stages, probe_runs=status.probe_runs)


def add_probe_run(status: ReviewStatus, model_id: str, produced_at: str) -> ReviewStatus:
    runs = status.probe_runs + (ProbeRun(model_id=model_id, produced_at=produced_at),)
    return ReviewStatus(piece_id=status.piece_id, stages=status.stages, probe_runs=runs)


def status_to_dict(status: ReviewStatus) -> dict:
    doc: dict = {"piece_id": status.piece_id}
    for name in STAGES:
        st = status.stages[name]
        entry: dict = {"done": st.done}
        if st.completed_at is not None:
            entry["completed_at"] = st.completed_at
        doc[name] = entry
    doc["probe_runs"] = [
        {"model_id": run.model_id, "produced_at": run.produced_at} for run in status.probe_runs
    ]
    return doc


def status_from_dict(doc: dict, source: str = "<dict>") -> ReviewStatus:
    if not isinstance(doc, dict) or "piece_id" not in doc:
        raise FormatError(f"{source}: status document must be an object with piece_id")
    stages = {}
    for name in STAGES:
        entry = doc.get(name, {})
        if not isinstance(entry, dict):
            raise FormatError(f"{source}: stage {name} must be an object")
        stages[name] = StageState(
            done=bool(entry.get("done", False)), completed_at=entry.get("completed_at")
        )
    runs = tuple(
        ProbeRun(model_id=r["model_id"], produced_at=r["produced_at"])
        for r in doc.get("probe_runs", [])
    )
    return ReviewStatus(piece_id=doc["piece_id"], stages=stages, probe_runs=runs)


def save_status(status: ReviewStatus, path: str | Path) -> None:
    write_json_atomic(path, status_to_dict(status))


def load_status(path: str | Path) -> ReviewStatus:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from None
    return status_from_dict(doc, source=str(path))
