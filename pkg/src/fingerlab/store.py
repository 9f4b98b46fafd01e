"""Corpus directory: on-disk layout, per-piece locking, edits and backups.

Layout under the corpus root:

  pieces/<piece_id>/notes.json    rule-annotator input notes (labels 0)
  pieces/<piece_id>/poses.json    fingertip trajectories
  pieces/<piece_id>/rule.json     rule track
  pieces/<piece_id>/edited.json   edited track (initialized from rule)
  pieces/<piece_id>/status.json   review status
  pieces/<piece_id>/edits.log     append-only EditOp log (one JSON per line)
  pieces/<piece_id>/backup.json   latest unsaved-edit backup blob
  probe_tracks/<piece_id>.json    probe output (kept out of pieces/)
  decisions/<piece_id>.json       gate decisions for the latest inference
  models/<model_id>.json          trained probes
  manifests/                      synth + training manifests
  reports/                        evaluation artifacts
  geometry.json                   keyboard constants

The edited track is an event-sourced value: replaying edits.log over the
initial rule-copied track reproduces edited.json byte for byte. Mutations to
one piece are serialized behind a per-piece lock; the edited version number
is the count of committed ops.
"""
from __future__ import annotations

import hashlib
import json
import shutil
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

from .corpus import (
    FingeringTrack,
    NoteRecord,
    ReviewStatus,
    canonical_ts,
    dump_json,
    load_status,
    load_track,
    save_status,
    save_track,
    status_to_dict,
    track_to_dict,
    validate_label,
    write_json_atomic,
)
from .errors import ConflictError, EditError, FormatError, ValidationError
from .geometry import HandPoseTrack, load_poses, save_poses

EDIT_ACTIONS = ("set_label", "add_note", "delete_note")
EDIT_SCOPES = ("whole_note", "from_frame")


@dataclass(frozen=True)
class EditOp:
    """One reviewer edit against a piece's edited track.

    Notes are selected by note_id when present, else by exact (key, onset).
    set_label with scope=from_frame splits the note at from_frame and
    relabels the tail; add_note requires a free (key, onset) slot.
    """

    piece_id: str
    action: str
    client_ts: str
    note_id: str | None = None
    key_index: int | None = None
    onset_frame: int | None = None
    offset_frame: int | None = None
    label: int | None = None
    scope: str = "whole_note"
    from_frame: int | None = None

    def __post_init__(self) -> None:
        if self.action not in EDIT_ACTIONS:
            raise ValidationError(f"unknown edit action {self.action!r}")
        if self.scope not in EDIT_SCOPES:
            raise ValidationError(f"unknown edit scope {self.scope!r}")
        object.__setattr__(self, "client_ts", canonical_ts(self.client_ts))
        if self.action in ("set_label", "delete_note"):
            if self.note_id is None and (self.key_index is None or self.onset_frame is None):
                raise ValidationError(f"{self.action} needs note_id or (key_index, onset_frame)")
        if self.action == "set_label":
            if self.label is None:
                raise ValidationError("set_label needs a label")
            validate_label(self.label)
            if self.scope == "from_frame" and self.from_frame is None:
                raise ValidationError("scope=from_frame needs from_frame")
        if self.action == "add_note":
            for field_name in ("key_index", "onset_frame", "offset_frame", "label"):
                if getattr(self, field_name) is None:
                    raise ValidationError(f"add_note needs {field_name}")
            validate_label(self.label)

    def to_dict(self) -> dict:
        doc = {"piece_id": self.piece_id, "action": self.action, "client_ts": self.client_ts}
        for name in ("note_id", "key_index", "onset_frame", "offset_frame", "label", "from_frame"):
            value = getattr(self, name)
            if value is not None:
                doc[name] = value
        if self.action == "set_label":
            doc["scope"] = self.scope
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "EditOp":
        if not isinstance(doc, dict):
            raise ValidationError("edit op must be an object")
        known = {
            "piece_id",
            "action",
            "client_ts",
            "note_id",
            "key_index",
            "onset_frame",
            "offset_frame",
            "label",
            "scope",
            "from_frame",
        }
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown edit op fields {sorted(unknown)}")
        for required in ("piece_id", "action", "client_ts"):
            if required not in doc:
                raise ValidationError(f"edit op missing {required!r}")
        return cls(**{k: doc[k] for k in known if k in doc})


def _find_note(track: FingeringTrack, op: EditOp) -> NoteRecord:
    if op.note_id is not None:
        note = track.note_by_id(op.note_id)
        if note is None:
            raise EditError(f"unknown note {op.note_id!r} in piece {op.piece_id!r}")
        return note
    for note in track.notes:
        if note.key_index == op.key_index and note.onset_frame == op.onset_frame:
            return note
    raise EditError(
        f"no note at key {op.key_index}, onset {op.onset_frame} in piece {op.piece_id!r}"
    )


def apply_edit_to_track(track: FingeringTrack, op: EditOp) -> FingeringTrack:
    """Pure application of one op; the result's produced_at is op.client_ts.

    Replays are deterministic: the same base track and op sequence always
    yield the same value.
    """
    if op.piece_id != track.piece_id:
        raise EditError(f"op targets piece {op.piece_id!r}, track is {track.piece_id!r}")
    notes = list(track.notes)
    if op.action == "set_label":
        note = _find_note(track, op)
        notes.remove(note)
        if op.scope == "whole_note" or op.from_frame == note.onset_frame:
            notes.append(note.with_label(op.label))
        else:
            if not note.onset_frame < op.from_frame < note.offset_frame:
                raise EditError(
                    f"from_frame {op.from_frame} outside note "
                    f"[{note.onset_frame}, {note.offset_frame})"
                )
            notes.append(
                NoteRecord(note.note_id, note.key_index, note.onset_frame, op.from_frame, note.label)
            )
            notes.append(
                NoteRecord(
                    f"{note.note_id}@{op.from_frame}",
                    note.key_index,
                    op.from_frame,
                    note.offset_frame,
                    op.label,
                )
            )
    elif op.action == "add_note":
        note_id = op.note_id or f"add-{op.key_index}-{op.onset_frame}"
        notes.append(
            NoteRecord(note_id, op.key_index, op.onset_frame, op.offset_frame, op.label)
        )
    elif op.action == "delete_note":
        notes.remove(_find_note(track, op))
    try:
        return track.replace_notes(notes, produced_at=op.client_ts)
    except ValidationError as exc:
        raise EditError(str(exc)) from None


class CorpusStore:
    """Owns a corpus directory; all mutation goes through per-piece locks."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._locks: dict[str, threading.RLock] = {}
        self._locks_guard = threading.Lock()

    # -- paths ------------------------------------------------------------

    def piece_dir(self, piece_id: str) -> Path:
        return self.root / "pieces" / piece_id

    def notes_path(self, piece_id: str) -> Path:
        return self.piece_dir(piece_id) / "notes.json"

    def poses_path(self, piece_id: str) -> Path:
        return self.piece_dir(piece_id) / "poses.json"

    def track_path(self, piece_id: str, kind: str) -> Path:
        if kind == "probe":
            return self.root / "probe_tracks" / f"{piece_id}.json"
        if kind in ("rule", "edited"):
            return self.piece_dir(piece_id) / f"{kind}.json"
        raise ValidationError(f"unknown track kind {kind!r}")

    def status_path(self, piece_id: str) -> Path:
        return self.piece_dir(piece_id) / "status.json"

    def edits_log_path(self, piece_id: str) -> Path:
        return self.piece_dir(piece_id) / "edits.log"

    def edit_base_path(self, piece_id: str) -> Path:
        return self.piece_dir(piece_id) / "edited.base.json"

    def backup_path(self, piece_id: str) -> Path:
        return self.piece_dir(piece_id) / "backup.json"

    def decisions_path(self, piece_id: str) -> Path:
        return self.root / "decisions" / f"{piece_id}.json"

    def models_dir(self) -> Path:
        return self.root / "models"

    def manifests_dir(self) -> Path:
        return self.root / "manifests"

    def reports_dir(self) -> Path:
        return self.root / "reports"

    def geometry_path(self) -> Path:
        return self.root / "geometry.json"

    @contextmanager
    def lock(self, piece_id: str):
        with self._locks_guard:
            lock = self._locks.setdefault(piece_id, threading.RLock())
        with lock:
            yield

    # -- piece inventory ----------------------------------------------------

    def list_pieces(self) -> list[str]:
        pieces_root = self.root / "pieces"
        if not pieces_root.is_dir():
            return []
        return sorted(p.name for p in pieces_root.iterdir() if p.is_dir())

    def has_piece(self, piece_id: str) -> bool:
        return self.piece_dir(piece_id).is_dir()

    def has_track(self, piece_id: str, kind: str) -> bool:
        return self.track_path(piece_id, kind).is_file()

    # -- piece artifacts ----------------------------------------------------

    def load_notes(self, piece_id: str) -> tuple[list[NoteRecord], float]:
        path = self.notes_path(piece_id)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from None
        notes = [
            NoteRecord(
                note_id=rec["note_id"],
                key_index=rec["key"],
                onset_frame=rec["onset"],
                offset_frame=rec["offset"],
                label=rec.get("label", 0),
            )
            for rec in doc["notes"]
        ]
        return notes, float(doc["frame_rate_hz"])

    def save_notes(self, piece_id: str, notes: list[NoteRecord], frame_rate_hz: float) -> None:
        write_json_atomic(
            self.notes_path(piece_id),
            {
                "piece_id": piece_id,
                "frame_rate_hz": frame_rate_hz,
                "notes": [
                    {
                        "note_id": n.note_id,
                        "key": n.key_index,
                        "onset": n.onset_frame,
                        "offset": n.offset_frame,
                        "label": n.label,
                    }
                    for n in notes
                ],
            },
        )

    def load_poses(self, piece_id: str) -> HandPoseTrack:
        return load_poses(self.poses_path(piece_id))

    def save_poses(self, poses: HandPoseTrack) -> None:
        save_poses(poses, self.poses_path(poses.piece_id))

    def load_track(self, piece_id: str, kind: str) -> FingeringTrack:
        return load_track(self.track_path(piece_id, kind))

    def save_track(self, track: FingeringTrack) -> None:
        save_track(track, self.track_path(track.piece_id, track.kind))

    def load_status(self, piece_id: str) -> ReviewStatus:
        path = self.status_path(piece_id)
        if not path.is_file():
            return ReviewStatus(piece_id=piece_id)
        return load_status(path)

    def save_status(self, status: ReviewStatus) -> None:
        save_status(status, self.status_path(status.piece_id))

    # -- edited track and edit log -------------------------------------------

    def edited_version(self, piece_id: str) -> int:
        path = self.edits_log_path(piece_id)
        if not path.is_file():
            return 0
        with path.open(encoding="utf-8") as fh:
            return sum(1 for line in fh if line.strip())

    def rule_copied_track(self, piece_id: str) -> FingeringTrack:
        """The rule track re-kinded as edited (how a piece enters review)."""
        if not self.has_track(piece_id, "rule"):
            raise EditError(
                f"piece {piece_id!r} has no rule track to start review from"
            )
        rule = self.load_track(piece_id, "rule")
        return FingeringTrack(
            piece_id=rule.piece_id,
            kind="edited",
            frame_rate_hz=rule.frame_rate_hz,
            notes=rule.notes,
            produced_at=rule.produced_at,
        )

    def initial_edited(self, piece_id: str) -> FingeringTrack:
        """The event-sourcing base the edit log replays over.

        The snapshot taken when the first edit committed, if any; otherwise
        the rule-copied track (identical for pieces that entered review the
        normal way, since ensure_edited creates exactly that copy).
        """
        base_path = self.edit_base_path(piece_id)
        if base_path.is_file():
            return load_track(base_path)
        return self.rule_copied_track(piece_id)

    def ensure_edited(self, piece_id: str) -> FingeringTrack:
        """Load the edited track, initializing it from the rule copy on first use."""
        path = self.track_path(piece_id, "edited")
        if path.is_file():
            return load_track(path)
        with self.lock(piece_id):
            if path.is_file():
                return load_track(path)
            track = self.rule_copied_track(piece_id)
            save_track(track, path)
            return track

    def apply_edit(self, op: EditOp, base_version: int | None = None) -> tuple[FingeringTrack, int]:
        """Commit one edit atomically; returns the new track and version."""
        piece_id = op.piece_id
        if not self.has_piece(piece_id):
            raise EditError(f"unknown piece {piece_id!r}")
        with self.lock(piece_id):
            current = self.edited_version(piece_id)
            if base_version is not None and base_version != current:
                raise ConflictError(
                    f"base version {base_version} is stale (current {current})"
                )
            track = self.ensure_edited(piece_id)
            if current == 0 and not self.edit_base_path(piece_id).is_file():
                # snapshot the pre-edit state so replay has its base even when
                # the edited track did not start as a rule copy
                shutil.copyfile(self.track_path(piece_id, "edited"), self.edit_base_path(piece_id))
            updated = apply_edit_to_track(track, op)
            save_track(updated, self.track_path(piece_id, "edited"))
            log_path = self.edits_log_path(piece_id)
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(op.to_dict(), sort_keys=True) + "\n")
            return updated, current + 1

    def read_edit_log(self, piece_id: str) -> list[EditOp]:
        path = self.edits_log_path(piece_id)
        if not path.is_file():
            return []
        ops = []
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    ops.append(EditOp.from_dict(json.loads(line)))
        return ops

    def replay_edit_log(self, piece_id: str) -> FingeringTrack:
        """Rebuild the edited track from the rule copy plus the full log."""
        track = self.initial_edited(piece_id)
        for op in self.read_edit_log(piece_id):
            track = apply_edit_to_track(track, op)
        return track

    def edited_bytes(self, piece_id: str) -> bytes:
        return self.track_path(piece_id, "edited").read_bytes()

    def replayed_bytes(self, piece_id: str) -> bytes:
        return dump_json(track_to_dict(self.replay_edit_log(piece_id))).encode("utf-8")

    # -- backup blobs ---------------------------------------------------------

    def save_backup(self, piece_id: str, ops: list[EditOp], base_version: int, saved_at: str) -> dict:
        if not self.has_piece(piece_id):
            raise EditError(f"unknown piece {piece_id!r}")
        blob = {
            "piece_id": piece_id,
            "saved_at": canonical_ts(saved_at),
            "base_version": base_version,
            "ops": [op.to_dict() for op in ops],
        }
        blob["blob_id"] = "b" + hashlib.sha256(
            json.dumps(blob, sort_keys=True).encode("utf-8")
        ).hexdigest()[:12]
        write_json_atomic(self.backup_path(piece_id), blob)
        return blob

    def load_backup(self, piece_id: str) -> dict | None:
        path = self.backup_path(piece_id)
        if not path.is_file():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def check_restore(self, piece_id: str) -> dict:
        """Dry-run the backed-up ops against the current track; commits nothing."""
        blob = self.load_backup(piece_id)
        if blob is None:
            return {"piece_id": piece_id, "ops": 0, "conflicts": [], "clean": True}
        conflicts: list[dict] = []
        current = self.edited_version(piece_id)
        if blob["base_version"] != current:
            conflicts.append(
                {
                    "kind": "stale_base",
                    "detail": f"backup taken at version {blob['base_version']}, "
                    f"track is at {current}",
                }
            )
        track = self.ensure_edited(piece_id)
        for idx, op_doc in enumerate(blob["ops"]):
            try:
                track = apply_edit_to_track(track, EditOp.from_dict(op_doc))
            except (EditError, ValidationError) as exc:
                conflicts.append({"kind": "op_failed", "index": idx, "detail": str(exc)})
        return {
            "piece_id": piece_id,
            "ops": len(blob["ops"]),
            "conflicts": conflicts,
            "clean": not conflicts,
        }

    # -- decisions -------------------------------------------------------------

    def save_decisions(self, piece_id: str, model_id: str, decisions: list) -> None:
        write_json_atomic(
            self.decisions_path(piece_id),
            {
                "piece_id": piece_id,
                "model_id": model_id,
                "decisions": [
                    {
                        "note_id": d.note_id,
                        "rule_label": d.rule_label,
                        "top1_label": d.top1_label,
                        "p_cls": d.p_cls,
                        "p_rule": d.p_rule,
                        "fired": d.fired,
                        "final_label": d.final_label,
                    }
                    for d in decisions
                ],
            },
        )

    def load_decisions(self, piece_id: str) -> dict | None:
        path = self.decisions_path(piece_id)
        if not path.is_file():
            return None
        return json.loads(path.read_text(encoding="utf-8"))
