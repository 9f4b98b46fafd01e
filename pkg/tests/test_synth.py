import numpy as np
import pytest

from fingerlab.corpus import agreement_stats, align_tracks, hand_of
from fingerlab.errors import ValidationError
from fingerlab.geometry import annotate_piece
from fingerlab.synth import CorruptionLedger, SynthConfig, generate_piece, inject_corruptions

RULE_TS = "2024-02-01T00:00:00Z"


def test_config_validation():
    with pytest.raises(ValidationError):
        SynthConfig(seed=0, num_notes=0)
    with pytest.raises(ValidationError):
        SynthConfig(seed=0, num_notes=5, p_swap=1.2)
    with pytest.raises(ValidationError):
        SynthConfig(seed=0, num_notes=5, p_swap=0.7, p_drop=0.7)
    with pytest.raises(ValidationError):
        SynthConfig(seed=0, num_notes=5, noise_mm=(-1.0, 0.0, 0.0))


def test_same_seed_bitwise_identical():
    cfg = SynthConfig(seed=21, num_notes=120, noise_mm=(0.5, 0.5, 0.3), p_swap=0.2, p_drop=0.1)
    a, b = generate_piece(cfg), generate_piece(cfg)
    assert np.array_equal(a.poses.frames, b.poses.frames)
    assert a.edited == b.edited
    assert a.notes == b.notes
    ca, cb = inject_corruptions(a, cfg), inject_corruptions(b, cfg)
    assert np.array_equal(ca.poses.frames, cb.poses.frames)
    assert ca.notes == cb.notes
    assert ca.ledger == cb.ledger


def test_different_seeds_differ():
    a = generate_piece(SynthConfig(seed=1, num_notes=50))
    b = generate_piece(SynthConfig(seed=2, num_notes=50))
    assert a.edited.notes != b.edited.notes


def test_single_note_piece():
    piece = generate_piece(SynthConfig(seed=3, num_notes=1))
    assert len(piece.edited.notes) == 1
    assert piece.poses.num_frames >= piece.edited.notes[0].offset_frame + 1


def test_edited_carries_true_labels():
    piece = generate_piece(SynthConfig(seed=4, num_notes=200))
    assert all(1 <= n.label <= 10 for n in piece.edited.notes)
    assert all(n.label == 0 for n in piece.notes)
    assert {n.note_id for n in piece.notes} == {n.note_id for n in piece.edited.notes}


def test_hands_are_monophonic():
    piece = generate_piece(SynthConfig(seed=5, num_notes=300))
    for hand in ("L", "R"):
        intervals = sorted(
            (n.onset_frame, n.offset_frame)
            for n in piece.edited.notes
            if hand_of(n.label) == hand
        )
        for (on_a, off_a), (on_b, _) in zip(intervals, intervals[1:]):
            assert on_b >= off_a


def test_chords_exist_and_are_cross_hand():
    piece = generate_piece(SynthConfig(seed=6, num_notes=400))
    by_onset: dict[int, list] = {}
    for note in piece.edited.notes:
        by_onset.setdefault(note.onset_frame, []).append(note)
    chords = [grp for grp in by_onset.values() if len(grp) > 1]
    assert chords, "expected some shared onsets"
    for grp in chords:
        assert len(grp) == 2
        assert {hand_of(n.label) for n in grp} == {"L", "R"}


def test_oracle_recovery_sigma_zero(geo, rule_cfg):
    piece = generate_piece(SynthConfig(seed=7, num_notes=250), geo)
    rule = annotate_piece(piece.notes, piece.poses, geo, rule_cfg, produced_at=RULE_TS)
    assert [n.label for n in rule.notes] == [n.label for n in piece.edited.notes]


def test_identity_corruption():
    cfg = SynthConfig(seed=8, num_notes=100)
    piece = generate_piece(cfg)
    corrupted = inject_corruptions(piece, cfg)
    assert corrupted.notes == piece.notes
    assert np.array_equal(corrupted.poses.frames, piece.poses.frames)
    assert corrupted.ledger == CorruptionLedger(swapped=(), dropped=())


def test_swap_ledger_predicts_disagreements(geo, rule_cfg):
    cfg = SynthConfig(seed=9, num_notes=1000, p_swap=0.1)
    piece = generate_piece(cfg, geo)
    corrupted = inject_corruptions(piece, cfg)
    rule = annotate_piece(corrupted.notes, corrupted.poses, geo, rule_cfg, produced_at=RULE_TS)
    pairs = align_tracks(piece.edited, rule)
    disagreeing = {ref.note_id for ref, other in pairs if ref.label != other}
    assert disagreeing == set(corrupted.ledger.disagreement_note_ids)
    # roughly 10% of notes swapped
    assert 0.06 <= len(corrupted.ledger.swapped) / 1000 <= 0.14
    # the rule annotator lands exactly on the ledgered neighbour label
    rule_by_id = {n.note_id: n.label for n in rule.notes}
    for note_id, swapped_label in corrupted.ledger.swapped:
        assert rule_by_id[note_id] == swapped_label


def test_drop_ledger_accounts_for_surplus(geo, rule_cfg):
    cfg = SynthConfig(seed=10, num_notes=800, p_drop=0.05)
    piece = generate_piece(cfg, geo)
    corrupted = inject_corruptions(piece, cfg)
    assert len(corrupted.notes) == 800 - len(corrupted.ledger.dropped)
    rule = annotate_piece(corrupted.notes, corrupted.poses, geo, rule_cfg, produced_at=RULE_TS)
    non_missing = sum(1 for n in rule.notes if n.label != 0)
    assert len(piece.edited.notes) - non_missing == len(corrupted.ledger.dropped)
    # edited track is untouched
    assert len(piece.edited.notes) == 800


def test_ledger_round_trip():
    ledger = CorruptionLedger(swapped=(("a", 3), ("b", 7)), dropped=("c",))
    assert CorruptionLedger.from_dict(ledger.to_dict()) == ledger


def test_noise_stays_within_filters(geo, rule_cfg):
    # 3 sigma below the candidate thresholds: recovery still exact
    cfg = SynthConfig(seed=12, num_notes=200, noise_mm=(0.5, 2.0, 1.0))
    piece = generate_piece(cfg, geo)
    rule = annotate_piece(piece.notes, piece.poses, geo, rule_cfg, produced_at=RULE_TS)
    pairs = align_tracks(piece.edited, rule)
    stats = agreement_stats({piece.edited.piece_id: pairs})
    assert stats.agreement == 1.0
