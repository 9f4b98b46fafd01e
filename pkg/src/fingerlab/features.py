"""Per-note feature encoding for the diagnostic probe.

Every note becomes a 77-dimensional vector with a frozen layout:

  dims 0..4    key geometry: key index / 87, black-key flag, key-center x
               normalized by the keyboard span, key-center y normalized by
               the white-key length, surface height normalized by 100 mm
  dims 5..64   ten fingertips x six terms each: x/y/z offsets to the key
               center (same normalizers), absolute height, in-pitch-range
               flag, in-depth-range flag
  dims 65..76  rule-label descriptors: hand one-hot (2), finger one-hot (5),
               missing flag (1), and four match flags relating the rule label
               to the annotator's candidate analysis at the onset frame
               (top-candidate hand match, top-candidate finger match,
               label-tip-is-a-candidate, score tie)

The layout is a wire format: reordering any slot is a format break.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .corpus import NoteRecord, finger_of, hand_of, validate_label
from .errors import ValidationError
from .geometry import NUM_TIPS, KeyboardGeometry, RuleConfig, candidate_tips, score_tip

FEATURE_DIM = 77
_HEIGHT_NORM_MM = 100.0
_TIE_EPS = 1e-9

# descriptor slot offsets
_HAND_SLOT = 65
_FINGER_SLOT = 67
_MISSING_SLOT = 72
_MATCH_SLOT = 73


def encode_note(
    note: NoteRecord,
    rule_label: int,
    pose_frame: np.ndarray,
    geo: KeyboardGeometry,
    cfg: RuleConfig,
) -> np.ndarray:
    """Encode one note at its onset frame into the 77-d feature vector."""
    validate_label(rule_label)
    pts = np.asarray(pose_frame, dtype=np.float64)
    if pts.shape != (NUM_TIPS, 3):
        raise ValidationError(f"pose frame must have shape ({NUM_TIPS}, 3), got {pts.shape}")
    box = geo.keys[note.key_index]
    span = geo.span_mm
    depth = geo.white_key_length_mm

    vec = np.zeros(FEATURE_DIM, dtype=np.float64)
    vec[0] = note.key_index / 87.0
    vec[1] = 1.0 if box.is_black else 0.0
    vec[2] = box.x_center / span
    vec[3] = box.y_center / depth
    vec[4] = box.surface_z / _HEIGHT_NORM_MM

    for tip in range(NUM_TIPS):
        x, y, z = pts[tip]
        base = 5 + 6 * tip
        vec[base + 0] = (x - box.x_center) / span
        vec[base + 1] = (y - box.y_center) / depth
        vec[base + 2] = (z - box.surface_z) / _HEIGHT_NORM_MM
        vec[base + 3] = z / _HEIGHT_NORM_MM
        vec[base + 4] = 1.0 if box.x_min - cfg.x_tolerance_mm <= x <= box.x_max + cfg.x_tolerance_mm else 0.0
        vec[base + 5] = 1.0 if box.y_min <= y <= box.y_max else 0.0

    if rule_label == 0:
        vec[_MISSING_SLOT] = 1.0
        return vec

    vec[_HAND_SLOT + (0 if hand_of(rule_label) == "L" else 1)] = 1.0
    vec[_FINGER_SLOT + finger_of(rule_label) - 1] = 1.0

    candidates = candidate_tips(pts, note.key_index, geo, cfg)
    if candidates:
        scored = sorted(
            candidates,
            key=lambda t: (
                score_tip(pts[t], note.key_index, geo, cfg),
                abs(float(pts[t][0]) - box.x_center),
                t,
            ),
        )
        top = scored[0]
        top_label = top + 1
        vec[_MATCH_SLOT + 0] = 1.0 if hand_of(top_label) == hand_of(rule_label) else 0.0
        vec[_MATCH_SLOT + 1] = 1.0 if finger_of(top_label) == finger_of(rule_label) else 0.0
        vec[_MATCH_SLOT + 2] = 1.0 if (rule_label - 1) in candidates else 0.0
        if len(scored) > 1:
            best = score_tip(pts[scored[0]], note.key_index, geo, cfg)
            second = score_tip(pts[scored[1]], note.key_index, geo, cfg)
            vec[_MATCH_SLOT + 3] = 1.0 if abs(second - best) <= _TIE_EPS else 0.0
    return vec


def group_onsets(notes: Sequence[NoteRecord]) -> list[list[int]]:
    """Partition sorted notes into onset groups (chords share one group)."""
    groups: list[list[int]] = []
    last_onset: int | None = None
    for idx, note in enumerate(notes):
        if last_onset is not None and note.onset_frame < last_onset:
            raise ValidationError("notes must be sorted by onset before grouping")
        if note.onset_frame == last_onset:
            groups[-1].append(idx)
        else:
            groups.append([idx])
            last_onset = note.onset_frame
    return groups


def encode_notes(
    notes: Sequence[NoteRecord],
    rule_labels: Sequence[int],
    poses,
    geo: KeyboardGeometry,
    cfg: RuleConfig,
) -> np.ndarray:
    """Stack encode_note over a note sequence; shape (n_notes, 77)."""
    if len(notes) != len(rule_labels):
        raise ValidationError("one rule label per note is required")
    rows = [
        encode_note(note, label, poses.frame(note.onset_frame), geo, cfg)
        for note, label in zip(notes, rule_labels)
    ]
    return np.stack(rows) if rows else np.zeros((0, FEATURE_DIM))
