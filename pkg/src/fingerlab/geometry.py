"""Keyboard geometry and the geometric rule-based fingering annotator.

The keyboard is modeled as 88 axis-aligned key boxes in a right-handed frame:
x runs along the pitch axis in mm, y runs front (0) to back, z is height
above the white-key surface. Fingertip order everywhere is L1..L5 then
R1..R5 (thumb..pinky per hand), i.e. tip index t maps to finger label t+1.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import json
import numpy as np

from .corpus import FingeringTrack, NoteRecord, utc_now
from .errors import CoverageError, FormatError, ValidationError

# semitone classes (relative to C) that land on white keys
_WHITE_CLASSES = {0, 2, 4, 5, 7, 9, 11}
_LOWEST_MIDI = 21  # A0
NUM_KEYS = 88
NUM_WHITE_KEYS = 52


@dataclass(frozen=True)
class KeyBox:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    surface_z: float
    is_black: bool

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate key box {self}")

    @property
    def x_center(self) -> float:
        return 0.5 * (self.x_min + self.x_max)

    @property
    def y_center(self) -> float:
        return 0.5 * (self.y_min + self.y_max)

    @property
    def y_half_length(self) -> float:
        return 0.5 * (self.y_max - self.y_min)


_DEFAULT_CONSTANTS = {
    "octave_span_mm": 165.0,
    "white_key_length_mm": 150.0,
    "black_key_length_mm": 95.0,
    "black_key_height_mm": 12.5,
    "black_key_width_mm": 13.7,
}


@dataclass(frozen=True)
class KeyboardGeometry:
    keys: tuple[KeyBox, ...]
    octave_span_mm: float
    white_key_length_mm: float
    black_key_length_mm: float
    black_key_height_mm: float
    black_key_width_mm: float

    def __post_init__(self) -> None:
        if len(self.keys) != NUM_KEYS:
            raise ValidationError(f"keyboard needs {NUM_KEYS} keys, got {len(self.keys)}")
        whites = [k for k in self.keys if not k.is_black]
        for a, b in zip(whites, whites[1:]):
            if abs(a.x_max - b.x_min) > 1e-6:
                raise ValidationError("white keys must tile the pitch axis without overlap")
        for k in self.keys:
            if k.is_black and not k.surface_z > 0:
                raise ValidationError("black keys must sit above the white surface")
            if not k.is_black and k.surface_z != 0.0:
                raise ValidationError("white key surfaces define z = 0")

    @property
    def span_mm(self) -> float:
        """Total width of the keyboard along the pitch axis."""
        return self.keys[-1].x_max - self.keys[0].x_min

    @classmethod
    def from_constants(
        cls,
        octave_span_mm: float = 165.0,
        white_key_length_mm: float = 150.0,
        black_key_length_mm: float = 95.0,
        black_key_height_mm: float = 12.5,
        black_key_width_mm: float = 13.7,
    ) -> "KeyboardGeometry":
        """Build the 88-key layout from global dimensions.

        White keys tile the x axis at octave_span/7 each; every black key is
        centered on the boundary between its white neighbours and occupies the
        back black_key_length of the key bed at black_key_height.
        """
        white_w = octave_span_mm / 7.0
        keys: list[KeyBox] = []
        whites_placed = 0
        for key_index in range(NUM_KEYS):
            midi = _LOWEST_MIDI + key_index
            if midi % 12 in _WHITE_CLASSES:
                keys.append(
                    KeyBox(
                        x_min=whites_placed * white_w,
                        x_max=(whites_placed + 1) * white_w,
                        y_min=0.0,
                        y_max=white_key_length_mm,
                        surface_z=0.0,
                        is_black=False,
                    )
                )
                whites_placed += 1
            else:
                center = whites_placed * white_w
                keys.append(
                    KeyBox(
                        x_min=center - black_key_width_mm / 2.0,
                        x_max=center + black_key_width_mm / 2.0,
                        y_min=white_key_length_mm - black_key_length_mm,
                        y_max=white_key_length_mm,
                        surface_z=black_key_height_mm,
                        is_black=True,
                    )
                )
        return cls(
            keys=tuple(keys),
            octave_span_mm=octave_span_mm,
            white_key_length_mm=white_key_length_mm,
            black_key_length_mm=black_key_length_mm,
            black_key_height_mm=black_key_height_mm,
            black_key_width_mm=black_key_width_mm,
        )

    def to_config(self) -> dict:
        return {
            "octave_span_mm": self.octave_span_mm,
            "white_key_length_mm": self.white_key_length_mm,
            "black_key_length_mm": self.black_key_length_mm,
            "black_key_height_mm": self.black_key_height_mm,
            "black_key_width_mm": self.black_key_width_mm,
        }

    @classmethod
    def from_config(cls, config: dict) -> "KeyboardGeometry":
        unknown = set(config) - set(_DEFAULT_CONSTANTS)
        if unknown:
            raise FormatError(f"unknown geometry constants {sorted(unknown)}")
        merged = {**_DEFAULT_CONSTANTS, **config}
        return cls.from_constants(**merged)


def standard_geometry() -> KeyboardGeometry:
    return KeyboardGeometry.from_constants()


def load_geometry(path: str | Path) -> KeyboardGeometry:
    try:
        config = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from None
    return KeyboardGeometry.from_config(config)


def save_geometry(geo: KeyboardGeometry, path: str | Path) -> None:
    from .corpus import write_json_atomic

    write_json_atomic(path, geo.to_config())


# ---------------------------------------------------------------------------
# Hand pose tracks
# ---------------------------------------------------------------------------

NUM_TIPS = 10


@dataclass(frozen=True)
class HandPoseTrack:
    """Per-frame fingertip positions, (n_frames, 10, 3) mm, L1..L5 then R1..R5."""

    piece_id: str
    frame_rate_hz: float
    frames: np.ndarray

    def __post_init__(self) -> None:
        if not self.piece_id:
            raise ValidationError("piece_id must be non-empty")
        if not self.frame_rate_hz > 0:
            raise ValidationError(f"frame_rate_hz must be positive, got {self.frame_rate_hz!r}")
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[1:] != (NUM_TIPS, 3):
            raise ValidationError(
                f"pose frames must have shape (n, {NUM_TIPS}, 3), got {frames.shape}"
            )
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def frame(self, index: int) -> np.ndarray:
        if not 0 <= index < self.num_frames:
            raise CoverageError(
                f"pose track {self.piece_id} has {self.num_frames} frames, frame {index} requested"
            )
        return self.frames[index]


def save_poses(track: HandPoseTrack, path: str | Path) -> None:
    from .corpus import write_json_atomic

    write_json_atomic(
        path,
        {
            "piece_id": track.piece_id,
            "frame_rate_hz": track.frame_rate_hz,
            "frames": track.frames.tolist(),
        },
    )


def load_poses(path: str | Path) -> HandPoseTrack:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from None
    for key in ("piece_id", "frame_rate_hz", "frames"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    return HandPoseTrack(
        piece_id=doc["piece_id"], frame_rate_hz=doc["frame_rate_hz"], frames=doc["frames"]
    )


# ---------------------------------------------------------------------------
# Rule-based annotator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RuleConfig:
    """Thresholds for the geometric assignment.

    x_tolerance_mm widens the pitch-axis test; z_threshold_mm bounds the
    surface-height distance; fb_weight balances the normalized front-back
    term against the normalized height term in the score.
    """

    x_tolerance_mm: float = 2.0
    z_threshold_mm: float = 10.0
    fb_weight: float = 1.0

    def __post_init__(self) -> None:
        for name in ("x_tolerance_mm", "z_threshold_mm", "fb_weight"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")


def candidate_tips(
    frame: np.ndarray | Sequence[Sequence[float]],
    key_index: int,
    geo: KeyboardGeometry,
    cfg: RuleConfig,
) -> set[int]:
    """Tips that could plausibly be pressing the key at this frame.

    A tip qualifies when its x lies within the key's pitch bounds (widened by
    x_tolerance_mm), its y lies within the key's front-back bounds, and its
    height is within z_threshold_mm of the key surface.
    """
    box = geo.keys[key_index]
    pts = np.asarray(frame, dtype=np.float64)
    result: set[int] = set()
    for tip in range(NUM_TIPS):
        x, y, z = pts[tip]
        if (
            box.x_min - cfg.x_tolerance_mm <= x <= box.x_max + cfg.x_tolerance_mm
            and box.y_min <= y <= box.y_max
            and abs(z - box.surface_z) <= cfg.z_threshold_mm
        ):
            result.add(tip)
    return result


def score_tip(
    tip_position: Sequence[float], key_index: int, geo: KeyboardGeometry, cfg: RuleConfig
) -> float:
    """Assignment score for a candidate tip; lower is better.

    Combines the surface-height distance (normalized by z_threshold_mm) with
    the front-back distance to the key center (normalized by half the key
    depth, weighted by fb_weight).
    """
    box = geo.keys[key_index]
    _, y, z = (float(v) for v in tip_position)
    height_term = abs(z - box.surface_z) / cfg.z_threshold_mm
    fb_term = abs(y - box.y_center) / box.y_half_length
    return height_term + cfg.fb_weight * fb_term


def annotate_piece(
    notes: Sequence[NoteRecord],
    poses: HandPoseTrack,
    geo: KeyboardGeometry,
    cfg: RuleConfig | None = None,
    produced_at: str | None = None,
) -> FingeringTrack:
    """Assign a finger label to every note from the fingertip frame at onset.

    The candidate with the minimum score wins; ties break on pitch-axis
    proximity to the key center, then on the lower tip index. Notes with no
    candidate get label 0. The chosen label holds for the whole note.
    """
    cfg = cfg or RuleConfig()
    labeled: list[NoteRecord] = []
    for note in notes:
        frame = poses.frame(note.onset_frame)
        box = geo.keys[note.key_index]
        candidates = candidate_tips(frame, note.key_index, geo, cfg)
        if not candidates:
            labeled.append(note.with_label(0))
            continue
        best = min(
            candidates,
            key=lambda t: (
                score_tip(frame[t], note.key_index, geo, cfg),
                abs(float(frame[t][0]) - box.x_center),
                t,
            ),
        )
        labeled.append(note.with_label(best + 1))
    return FingeringTrack(
        piece_id=poses.piece_id,
        kind="rule",
        frame_rate_hz=poses.frame_rate_hz,
        notes=tuple(labeled),
        produced_at=produced_at if produced_at is not None else utc_now(),
    )
