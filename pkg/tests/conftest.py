import pytest

from fingerlab.corpus import FingeringTrack, NoteRecord, ReviewStatus, StageState
from fingerlab.geometry import RuleConfig, standard_geometry

TS = "2024-03-01T12:00:00Z"


@pytest.fixture(scope="session")
def geo():
    return standard_geometry()


@pytest.fixture(scope="session")
def rule_cfg():
    return RuleConfig()


def make_track(piece_id="piece-1", kind="edited", notes=(), frame_rate=30.0, produced_at=TS, model_id=None):
    return FingeringTrack(
        piece_id=piece_id,
        kind=kind,
        frame_rate_hz=frame_rate,
        notes=tuple(notes),
        produced_at=produced_at,
        model_id=model_id,
    )


def make_note(note_id, key=40, onset=0, offset=None, label=0):
    if offset is None:
        offset = onset + 10
    return NoteRecord(note_id=note_id, key_index=key, onset_frame=onset, offset_frame=offset, label=label)


def r1_done_status(piece_id, at="2024-01-01T00:00:00Z"):
    return ReviewStatus(
        piece_id=piece_id, stages={"r1": StageState(done=True, completed_at=at)}
    )
