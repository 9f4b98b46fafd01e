import itertools

import numpy as np
import pytest

from fingerlab.corpus import ReviewStatus, StageState, add_probe_run
from fingerlab.errors import ValidationError
from fingerlab.gate import (
    GateConfig,
    apply_gate,
    cluster_bootstrap,
    evaluate,
    evaluate_pieces,
    gate_fires,
    piece_outcome,
    pooled_delta_pp,
    sweep_tau,
    t_ci,
    vintage_audit,
    PieceOutcome,
)

from conftest import make_note, make_track


def dist_for(top1, p_cls, rule=None, p_rule=None):
    """An 11-class distribution with prescribed top-1 and rule-label mass."""
    row = np.zeros(11)
    row[top1] = p_cls
    rest = 1.0 - p_cls
    others = [k for k in range(11) if k != top1]
    if rule is not None and rule != top1:
        row[rule] = p_rule
        rest -= p_rule
        others = [k for k in others if k != rule]
    row[others] = rest / len(others)
    return row


def _rule_track(labels, piece_id="piece-1"):
    notes = [make_note(f"n{i}", key=10 + i, onset=i * 4, label=lab) for i, lab in enumerate(labels)]
    return make_track(piece_id=piece_id, kind="rule", notes=notes)


def _edited_track(labels, piece_id="piece-1"):
    notes = [make_note(f"n{i}", key=10 + i, onset=i * 4, label=lab) for i, lab in enumerate(labels)]
    return make_track(piece_id=piece_id, kind="edited", notes=notes)


# ---------------------------------------------------------------------------
# the gate predicate
# ---------------------------------------------------------------------------


def test_no_fire_when_top1_equals_rule():
    rule = _rule_track([3])
    _, decisions = apply_gate(np.array([dist_for(3, 0.99)]), rule)
    assert not decisions[0].fired
    assert decisions[0].final_label == 3


def test_fires_at_paper_thresholds():
    rule = _rule_track([4])
    row = dist_for(7, 0.92, rule=4, p_rule=0.40)  # ratio 2.3
    _, decisions = apply_gate(np.array([row]), rule)
    assert decisions[0].fired
    assert decisions[0].final_label == 7


def test_ratio_conjunct_blocks():
    rule = _rule_track([4])
    row = dist_for(7, 0.92, rule=4, p_rule=0.50)  # ratio 1.84 < 2
    _, decisions = apply_gate(np.array([row]), rule)
    assert not decisions[0].fired
    assert decisions[0].final_label == 4


def test_p_rule_zero_counts_as_infinite_ratio():
    rule = _rule_track([4])
    row = dist_for(7, 0.95, rule=4, p_rule=0.0)
    _, decisions = apply_gate(np.array([row]), rule)
    assert decisions[0].fired


def test_probe_track_carries_final_labels_and_model_id():
    rule = _rule_track([4, 3])
    dists = np.array([dist_for(7, 0.95, rule=4, p_rule=0.01), dist_for(3, 0.9)])
    probe, decisions = apply_gate(dists, rule, model_id="mabc")
    assert probe.kind == "probe"
    assert probe.model_id == "mabc"
    assert [n.label for n in probe.notes] == [7, 3]


def test_gate_idempotence():
    rule = _rule_track([4, 3, 9])
    dists = np.array(
        [
            dist_for(7, 0.95, rule=4, p_rule=0.01),
            dist_for(3, 0.99),
            dist_for(2, 0.6, rule=9, p_rule=0.3),
        ]
    )
    probe, _ = apply_gate(dists, rule)
    again, decisions = apply_gate(dists, probe)
    assert [n.label for n in again.notes] == [n.label for n in probe.notes]
    assert not any(d.fired and d.final_label != d.rule_label == d.top1_label for d in decisions)


def test_count_mismatch_rejected():
    with pytest.raises(ValidationError):
        apply_gate(np.zeros((3, 11)), _rule_track([1, 2]))


def test_gate_config_bounds():
    with pytest.raises(ValidationError):
        GateConfig(top1_threshold=1.5)
    with pytest.raises(ValidationError):
        GateConfig(ratio_threshold=0.5)
    GateConfig(top1_threshold=0.0)
    GateConfig(top1_threshold=1.0)


def test_gate_bruteforce_grid():
    """apply_gate matches direct evaluation of the override predicate on a
    dense (p_cls, p_rule, label-pair) grid, including p_rule = 0."""
    cfg = GateConfig()
    label_pairs = [(k, k) for k in range(5)] + [(k, (k + 3) % 11) for k in range(5)]
    checked = 0
    for p_cls in np.linspace(0.51, 0.95, 10):
        for frac in np.linspace(0.0, 1.0, 10):
            for top1, rule_label in label_pairs:
                p_rule = frac * (1.0 - p_cls) if top1 != rule_label else None
                row = dist_for(top1, p_cls, rule=rule_label if top1 != rule_label else None, p_rule=p_rule)
                track = _rule_track([rule_label])
                _, decisions = apply_gate(row[None, :], track, cfg)
                d = decisions[0]
                expected = (
                    top1 != rule_label
                    and row[top1] > cfg.top1_threshold
                    and (row[rule_label] == 0.0 or row[top1] / row[rule_label] > cfg.ratio_threshold)
                )
                assert d.fired == expected, (p_cls, p_rule, top1, rule_label)
                assert d.final_label == (top1 if expected else rule_label)
                assert gate_fires(row[top1], row[rule_label], top1, rule_label, cfg) == expected
                checked += 1
    assert checked == 1000


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def test_no_flags_report():
    rule = _rule_track([1, 2, 3, 0])
    edited = _edited_track([1, 2, 3, 5])
    dists = np.stack([dist_for(lab, 0.5) for lab in (1, 2, 3, 0)])
    _, decisions = apply_gate(dists, rule)
    report = evaluate_pieces([(decisions, rule, edited)])
    assert report.flag_precision is None
    assert report.flag_recall == 0.0
    assert report.break_rate == 0.0
    assert report.rule_accuracy == pytest.approx(0.75)


def test_probe_equals_edited_gives_accuracy_one():
    labels = [1, 2, 3, 4]
    rule = _rule_track(labels)
    edited = _edited_track(labels)
    dists = np.stack([dist_for(lab, 0.99) for lab in labels])
    _, decisions = apply_gate(dists, rule)
    report = evaluate_pieces([(decisions, rule, edited)])
    assert report.probe_accuracy == 1.0
    assert report.delta_pp == 0.0


def test_hand_counted_twenty_note_example():
    # 20 notes; rule wrong on the first 5; gate fires on 4 of those errors
    # plus 1 correct note -> precision 4/5, recall 4/5, break 1/15
    rule_labels = [1] * 20
    edited_labels = [2] * 5 + [1] * 15
    rule = _rule_track(rule_labels)
    edited = _edited_track(edited_labels)
    rows = []
    for i in range(20):
        if i < 4:  # fire correctly: predict 2 with confidence
            rows.append(dist_for(2, 0.95, rule=1, p_rule=0.01))
        elif i == 5:  # break one correct note
            rows.append(dist_for(3, 0.95, rule=1, p_rule=0.01))
        else:  # leave alone
            rows.append(dist_for(1, 0.9))
    _, decisions = apply_gate(np.stack(rows), rule)
    report = evaluate_pieces([(decisions, rule, edited)])
    assert report.flag_precision == pytest.approx(0.8)
    assert report.flag_recall == pytest.approx(0.8)
    assert report.break_rate == pytest.approx(1 / 15)
    assert report.rule_accuracy == pytest.approx(0.75)
    assert report.probe_accuracy == pytest.approx(0.75 + 3 / 20)


def test_evaluate_bruteforce_recount():
    rng = np.random.default_rng(0)
    rule_labels = rng.integers(0, 11, size=50).tolist()
    edited_labels = [
        lab if rng.random() < 0.8 else int(rng.integers(1, 11)) for lab in rule_labels
    ]
    rows = []
    for lab in rule_labels:
        if rng.random() < 0.3:
            other = int(rng.integers(0, 11))
            rows.append(dist_for(other, 0.95, rule=lab if lab != other else None, p_rule=0.01 if lab != other else None))
        else:
            rows.append(dist_for(lab if lab else 1, 0.6))
    rule = _rule_track(rule_labels)
    edited = _edited_track(edited_labels)
    _, decisions = apply_gate(np.stack(rows), rule)
    report = evaluate_pieces([(decisions, rule, edited)])

    # independent recount straight from the definitions
    final = {d.note_id: d.final_label for d in decisions}
    fired = {d.note_id for d in decisions if d.fired}
    triples = [
        (f"n{i}", rule_labels[i], edited_labels[i]) for i in range(50)
    ]
    n_err = sum(1 for _, r, e in triples if r != e)
    n_correct = 50 - n_err
    tp = sum(1 for nid, r, e in triples if nid in fired and r != e)
    broke = sum(1 for nid, r, e in triples if nid in fired and r == e)
    assert report.flag_recall == pytest.approx(tp / n_err)
    if fired:
        assert report.flag_precision == pytest.approx(tp / len(fired))
    assert report.break_rate == pytest.approx(broke / n_correct)
    assert report.probe_accuracy == pytest.approx(
        sum(1 for nid, _, e in triples if final[nid] == e) / 50
    )
    assert report.delta_pp == pytest.approx(
        100 * (report.probe_accuracy - report.rule_accuracy)
    )


def test_missing_rule_note_counts_as_error():
    rule = _rule_track([1])
    edited_notes = [
        make_note("n0", key=10, onset=0, label=1),
        make_note("extra", key=50, onset=40, label=7),
    ]
    edited = make_track(kind="edited", notes=edited_notes)
    dists = np.array([dist_for(1, 0.9)])
    _, decisions = apply_gate(dists, rule)
    outcome = piece_outcome(decisions, rule, edited)
    assert outcome.n_notes == 2
    assert outcome.rule_errors == 1
    assert outcome.rule_correct == 1
    assert outcome.probe_correct == 1  # the probe cannot add notes


def test_evaluate_empty_rejected():
    with pytest.raises(ValidationError):
        evaluate([])


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _sweep_items(seed=0, n=40):
    rng = np.random.default_rng(seed)
    rule_labels = rng.integers(1, 11, size=n).tolist()
    edited_labels = [lab if rng.random() < 0.75 else int(rng.integers(1, 11)) for lab in rule_labels]
    rows = []
    for lab, target in zip(rule_labels, edited_labels):
        p = rng.uniform(0.4, 0.99)
        if rng.random() < 0.5 and target != lab:
            rows.append(dist_for(target, p, rule=lab, p_rule=min(rng.uniform(0, 0.3), (1 - p) / 2)))
        else:
            rows.append(dist_for(lab, p))
    return [(np.stack(rows), _rule_track(rule_labels), _edited_track(edited_labels))]


def test_sweep_fired_counts_monotone():
    items = _sweep_items()
    results = sweep_tau(items, taus=(0.70, 0.80, 0.90, 0.95))
    fired = [sum(o.fired for o in report.per_piece) for _, report in results]
    assert fired == sorted(fired, reverse=True)


def test_sweep_tau_one_fires_nothing():
    items = _sweep_items(seed=1)
    (_, report), = sweep_tau(items, taus=(1.0,))
    assert sum(o.fired for o in report.per_piece) == 0


def test_sweep_tau_zero_rho_one_limit():
    items = _sweep_items(seed=2)
    (_, report), = sweep_tau(items, taus=(0.0,), ratio_threshold=1.0)
    dists, rule, _ = items[0]
    expected = 0
    for row, note in zip(dists, rule.notes):
        top1 = int(np.argmax(row))
        if top1 != note.label and row[top1] > 0 and (row[note.label] == 0 or row[top1] > row[note.label]):
            expected += 1
    assert sum(o.fired for o in report.per_piece) == expected


# ---------------------------------------------------------------------------
# cluster bootstrap
# ---------------------------------------------------------------------------


def _outcome(piece_id, n, rule_ok, probe_ok):
    return PieceOutcome(
        piece_id=piece_id,
        n_notes=n,
        rule_correct=rule_ok,
        probe_correct=probe_ok,
        rule_errors=n - rule_ok,
        fired=0,
        fired_on_errors=0,
    )


def test_bootstrap_identical_tracks_is_exactly_zero():
    outcomes = [_outcome(f"p{i}", 100, 90 + i, 90 + i) for i in range(4)]
    assert cluster_bootstrap(outcomes, resamples=500, seed=0) == 0.0


def test_bootstrap_single_piece_equals_delta():
    outcome = _outcome("p", 200, 150, 172)
    bound = cluster_bootstrap([outcome], resamples=100, seed=0)
    assert bound == pytest.approx(pooled_delta_pp([outcome]))


def test_bootstrap_three_piece_enumeration():
    outcomes = [
        _outcome("a", 100, 80, 95),
        _outcome("b", 150, 120, 123),
        _outcome("c", 80, 70, 69),
    ]
    exact = [
        pooled_delta_pp([outcomes[i], outcomes[j], outcomes[k]])
        for i, j, k in itertools.product(range(3), repeat=3)
    ]
    expected = float(np.percentile(exact, 5.0))
    bound = cluster_bootstrap(outcomes, resamples=5000, seed=1)
    assert bound == pytest.approx(expected, abs=0.02)


def test_bootstrap_seed_determinism():
    outcomes = [_outcome(f"p{i}", 100, 85, 88 + i) for i in range(5)]
    a = cluster_bootstrap(outcomes, resamples=300, seed=7)
    b = cluster_bootstrap(outcomes, resamples=300, seed=7)
    assert a == b


def test_bootstrap_requires_pieces():
    with pytest.raises(ValidationError):
        cluster_bootstrap([], resamples=10, seed=0)


# ---------------------------------------------------------------------------
# Student-t interval
# ---------------------------------------------------------------------------


def test_t_ci_hand_computed():
    # closed-form df=2 97.5% quantile: sqrt(2 q^2 / (1 - q^2)), q = 0.95
    q = 0.95
    t2 = np.sqrt(2 * q * q / (1 - q * q))
    expected_half = t2 / np.sqrt(3.0)
    ci = t_ci([1.0, 2.0, 3.0])
    assert ci.mean == pytest.approx(2.0)
    assert ci.df == 2
    assert ci.high - ci.mean == pytest.approx(expected_half, abs=1e-9)
    assert ci.mean - ci.low == pytest.approx(expected_half, abs=1e-9)


def test_t_ci_equal_values_zero_width():
    ci = t_ci([2.83] * 5)
    assert ci.df == 4
    assert ci.low == ci.high == ci.mean == pytest.approx(2.83)


def test_t_ci_needs_two_values():
    with pytest.raises(ValidationError):
        t_ci([1.0])


# ---------------------------------------------------------------------------
# vintage audit
# ---------------------------------------------------------------------------


def _status(piece_id, probe_at=None, r2_at=None, r3_at=None):
    stages = {"r1": StageState(done=True, completed_at="2024-01-01T00:00:00Z")}
    if r2_at:
        stages["r2"] = StageState(done=True, completed_at=r2_at)
    if r3_at:
        stages["r3"] = StageState(done=True, completed_at=r3_at)
    status = ReviewStatus(piece_id=piece_id, stages=stages)
    if probe_at:
        status = add_probe_run(status, "m1", probe_at)
    return status


def test_probe_after_completion_not_stale():
    rows = vintage_audit([_status("p", probe_at="2024-03-01T00:00:00Z", r2_at="2024-02-01T00:00:00Z")])
    r2 = next(r for r in rows if r.stage == "r2")
    assert not r2.stale


def test_probe_before_completion_is_stale():
    rows = vintage_audit([_status("p", probe_at="2024-01-15T00:00:00Z", r2_at="2024-02-01T00:00:00Z")])
    r2 = next(r for r in rows if r.stage == "r2")
    assert r2.stale


def test_undone_stage_not_reported():
    rows = vintage_audit([_status("p", probe_at="2024-01-15T00:00:00Z")])
    assert {r.stage for r in rows} == {"r1"}


def test_latest_probe_run_wins():
    status = _status("p", probe_at="2024-01-15T00:00:00Z", r2_at="2024-02-01T00:00:00Z")
    status = add_probe_run(status, "m2", "2024-03-01T00:00:00Z")
    rows = vintage_audit([status])
    assert not next(r for r in rows if r.stage == "r2").stale


def test_no_probe_runs_no_rows():
    assert vintage_audit([_status("p", r2_at="2024-02-01T00:00:00Z")]) == []
