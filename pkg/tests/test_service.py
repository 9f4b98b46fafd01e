import json
import threading

import pytest
from fastapi.testclient import TestClient

from fingerlab.errors import ConflictError, EditError, PipelineError, ValidationError
from fingerlab.pipeline import job_annotate, job_synth, job_train
from fingerlab.service import create_app
from fingerlab.store import CorpusStore, EditOp, apply_edit_to_track

from conftest import make_note, make_track

CLIENT_TS = "2024-06-01T00:00:00Z"


@pytest.fixture()
def store(tmp_path):
    return CorpusStore(tmp_path / "corpus")


@pytest.fixture()
def seeded_store(store):
    job_synth(store, num_pieces=3, notes_per_piece=40, seed=50, p_swap=0.2)
    job_annotate(store)
    return store


@pytest.fixture()
def client(seeded_store):
    app = create_app(seeded_store.root)
    return TestClient(app)


def _op(piece_id, **kwargs):
    kwargs.setdefault("client_ts", CLIENT_TS)
    return EditOp(piece_id=piece_id, **kwargs)


# ---------------------------------------------------------------------------
# pure edit application
# ---------------------------------------------------------------------------


def _track():
    return make_track(
        kind="edited",
        notes=[make_note("a", key=10, onset=0, offset=8, label=2), make_note("b", key=12, onset=10, offset=20, label=7)],
    )


def test_set_label_whole_note():
    track = apply_edit_to_track(_track(), _op("piece-1", action="set_label", note_id="a", label=5))
    assert track.note_by_id("a").label == 5
    assert track.produced_at == "2024-06-01T00:00:00.000000Z"  # the op's client_ts, canonicalized


def test_set_label_from_frame_splits():
    track = apply_edit_to_track(
        _track(),
        _op("piece-1", action="set_label", note_id="b", label=9, scope="from_frame", from_frame=14),
    )
    head = track.note_by_id("b")
    tail = track.note_by_id("b@14")
    assert (head.onset_frame, head.offset_frame, head.label) == (10, 14, 7)
    assert (tail.onset_frame, tail.offset_frame, tail.label) == (14, 20, 9)


def test_set_label_from_frame_at_onset_relabels_whole():
    track = apply_edit_to_track(
        _track(),
        _op("piece-1", action="set_label", note_id="b", label=9, scope="from_frame", from_frame=10),
    )
    assert track.note_by_id("b").label == 9
    assert len(track.notes) == 2


def test_set_label_from_frame_outside_note():
    with pytest.raises(EditError):
        apply_edit_to_track(
            _track(),
            _op("piece-1", action="set_label", note_id="b", label=9, scope="from_frame", from_frame=25),
        )


def test_selector_by_key_and_onset():
    track = apply_edit_to_track(
        _track(), _op("piece-1", action="set_label", key_index=10, onset_frame=0, label=4)
    )
    assert track.note_by_id("a").label == 4


def test_add_note():
    track = apply_edit_to_track(
        _track(),
        _op("piece-1", action="add_note", key_index=30, onset_frame=5, offset_frame=9, label=6),
    )
    added = track.note_by_id("add-30-5")
    assert added is not None and added.label == 6


def test_add_note_collision():
    with pytest.raises(EditError):
        apply_edit_to_track(
            _track(),
            _op("piece-1", action="add_note", key_index=10, onset_frame=0, offset_frame=4, label=6),
        )


def test_delete_note():
    track = apply_edit_to_track(_track(), _op("piece-1", action="delete_note", note_id="a"))
    assert track.note_by_id("a") is None
    assert len(track.notes) == 1


def test_unknown_note():
    with pytest.raises(EditError):
        apply_edit_to_track(_track(), _op("piece-1", action="set_label", note_id="zzz", label=1))


def test_invalid_label_rejected():
    with pytest.raises(ValidationError):
        _op("piece-1", action="set_label", note_id="a", label=11)


def test_op_round_trip():
    op = _op("piece-1", action="set_label", note_id="b", label=9, scope="from_frame", from_frame=14)
    assert EditOp.from_dict(op.to_dict()) == op


# ---------------------------------------------------------------------------
# store: event sourcing, versions, backups
# ---------------------------------------------------------------------------


def test_edited_initialized_from_rule_copy(seeded_store):
    piece_id = seeded_store.list_pieces()[0]
    seeded_store.track_path(piece_id, "edited").unlink()
    edited = seeded_store.ensure_edited(piece_id)
    rule = seeded_store.load_track(piece_id, "rule")
    assert edited.kind == "edited"
    assert [n.label for n in edited.notes] == [n.label for n in rule.notes]


def test_event_sourcing_replay_byte_identical(seeded_store):
    store = seeded_store
    piece_id = store.list_pieces()[0]
    # start review from the rule copy
    store.track_path(piece_id, "edited").unlink()
    store.ensure_edited(piece_id)
    track = store.load_track(piece_id, "edited")
    n0, n1 = track.notes[0], track.notes[1]
    store.apply_edit(_op(piece_id, action="set_label", note_id=n0.note_id, label=5))
    store.apply_edit(
        _op(
            piece_id,
            action="set_label",
            note_id=n1.note_id,
            label=9,
            scope="from_frame",
            from_frame=n1.onset_frame + 2,
            client_ts="2024-06-01T00:01:00Z",
        )
    )
    store.apply_edit(
        _op(
            piece_id,
            action="add_note",
            key_index=0,
            onset_frame=1,
            offset_frame=4,
            label=1,
            client_ts="2024-06-01T00:02:00Z",
        )
    )
    store.apply_edit(
        _op(piece_id, action="delete_note", note_id=n0.note_id, client_ts="2024-06-01T00:03:00Z")
    )
    assert store.edited_version(piece_id) == 4
    assert store.replayed_bytes(piece_id) == store.edited_bytes(piece_id)


def test_stale_base_version_conflict(seeded_store):
    piece_id = seeded_store.list_pieces()[0]
    track = seeded_store.ensure_edited(piece_id)
    note = track.notes[0]
    seeded_store.apply_edit(_op(piece_id, action="set_label", note_id=note.note_id, label=5))
    with pytest.raises(ConflictError):
        seeded_store.apply_edit(
            _op(piece_id, action="set_label", note_id=note.note_id, label=6), base_version=0
        )


def test_concurrent_edits_serialize(seeded_store):
    store = seeded_store
    piece_id = store.list_pieces()[0]
    track = store.ensure_edited(piece_id)
    note_ids = [n.note_id for n in track.notes[:8]]
    errors = []

    def worker(nid, label):
        try:
            store.apply_edit(_op(piece_id, action="set_label", note_id=nid, label=label))
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(nid, i % 10 + 1)) for i, nid in enumerate(note_ids)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert store.edited_version(piece_id) == len(note_ids)
    assert store.replayed_bytes(piece_id) == store.edited_bytes(piece_id)


def test_backup_restore_clean(seeded_store):
    store = seeded_store
    piece_id = store.list_pieces()[0]
    track = store.ensure_edited(piece_id)
    note = track.notes[0]
    ops = [_op(piece_id, action="set_label", note_id=note.note_id, label=4)]
    blob = store.save_backup(piece_id, ops, base_version=0, saved_at=CLIENT_TS)
    assert blob["blob_id"].startswith("b")
    assert store.load_backup(piece_id)["blob_id"] == blob["blob_id"]
    result = store.check_restore(piece_id)
    assert result["clean"] and result["ops"] == 1


def test_backup_restore_conflicts(seeded_store):
    store = seeded_store
    piece_id = store.list_pieces()[0]
    track = store.ensure_edited(piece_id)
    note = track.notes[0]
    store.save_backup(
        piece_id,
        [_op(piece_id, action="set_label", note_id=note.note_id, label=4)],
        base_version=0,
        saved_at=CLIENT_TS,
    )
    # the base moves on: version bump plus the note disappears
    store.apply_edit(_op(piece_id, action="delete_note", note_id=note.note_id))
    result = store.check_restore(piece_id)
    kinds = {c["kind"] for c in result["conflicts"]}
    assert kinds == {"stale_base", "op_failed"}


def test_empty_backup_is_noop(seeded_store):
    store = seeded_store
    piece_id = store.list_pieces()[0]
    store.save_backup(piece_id, [], base_version=0, saved_at=CLIENT_TS)
    result = store.check_restore(piece_id)
    assert result["clean"] and result["ops"] == 0


# ---------------------------------------------------------------------------
# pipeline prerequisites
# ---------------------------------------------------------------------------


def test_train_refuses_without_r1(store):
    job_synth(store, num_pieces=2, notes_per_piece=30, seed=9, mark_r1=False)
    job_annotate(store)
    with pytest.raises(PipelineError, match="R1"):
        job_train(store)


def test_probe_tracks_live_outside_pieces(seeded_store, tmp_path):
    path = seeded_store.track_path("synth-0050", "probe")
    assert "pieces" not in path.parts
    assert path.parent.name == "probe_tracks"


# ---------------------------------------------------------------------------
# REST surface
# ---------------------------------------------------------------------------


def test_list_and_detail(client):
    pieces = client.get("/pieces").json()["pieces"]
    assert len(pieces) == 3
    piece_id = pieces[0]["piece_id"]
    detail = client.get(f"/pieces/{piece_id}").json()
    assert detail["piece_id"] == piece_id
    assert "rule" in detail["tracks"] and "edited" in detail["tracks"]
    assert client.get("/pieces/nope").status_code == 404


def test_get_tracks(client):
    piece_id = client.get("/pieces").json()["pieces"][0]["piece_id"]
    rule = client.get(f"/pieces/{piece_id}/tracks/rule")
    assert rule.status_code == 200
    assert rule.json()["version"] is None
    edited = client.get(f"/pieces/{piece_id}/tracks/edited")
    assert edited.json()["version"] == 0
    assert client.get(f"/pieces/{piece_id}/tracks/probe").status_code == 404
    assert client.get(f"/pieces/{piece_id}/tracks/weird").status_code == 404


def test_poses_slice(client):
    piece_id = client.get("/pieces").json()["pieces"][0]["piece_id"]
    body = client.get(f"/pieces/{piece_id}/poses", params={"from": 2, "to": 5}).json()
    assert body["from"] == 2 and body["to"] == 5
    assert len(body["frames"]) == 3
    assert len(body["frames"][0]) == 10 and len(body["frames"][0][0]) == 3


def test_edit_round_trip_and_conflict(client):
    piece_id = client.get("/pieces").json()["pieces"][0]["piece_id"]
    edited = client.get(f"/pieces/{piece_id}/tracks/edited").json()
    note_id = edited["track"]["notes"][0]["note_id"]
    ok = client.post(
        f"/pieces/{piece_id}/edits",
        json={
            "action": "set_label",
            "note_id": note_id,
            "label": 3,
            "scope": "whole_note",
            "client_ts": CLIENT_TS,
            "base_version": 0,
        },
    )
    assert ok.status_code == 200
    assert ok.json()["version"] == 1
    reread = client.get(f"/pieces/{piece_id}/tracks/edited").json()
    by_id = {n["note_id"]: n for n in reread["track"]["notes"]}
    assert by_id[note_id]["label"] == 3

    stale = client.post(
        f"/pieces/{piece_id}/edits",
        json={
            "action": "set_label",
            "note_id": note_id,
            "label": 4,
            "scope": "whole_note",
            "client_ts": CLIENT_TS,
            "base_version": 0,
        },
    )
    assert stale.status_code == 409


def test_edit_unknown_note_409(client):
    piece_id = client.get("/pieces").json()["pieces"][0]["piece_id"]
    bad = client.post(
        f"/pieces/{piece_id}/edits",
        json={"action": "set_label", "note_id": "nope", "label": 3, "client_ts": CLIENT_TS},
    )
    assert bad.status_code == 409


def test_edit_bad_shape_400(client):
    piece_id = client.get("/pieces").json()["pieces"][0]["piece_id"]
    bad = client.post(
        f"/pieces/{piece_id}/edits",
        json={"action": "set_label", "client_ts": CLIENT_TS},
    )
    assert bad.status_code == 400


def test_status_endpoints(client):
    piece_id = client.get("/pieces").json()["pieces"][0]["piece_id"]
    status = client.get(f"/pieces/{piece_id}/status").json()
    assert status["r1"]["done"] is True
    ok = client.post(
        f"/pieces/{piece_id}/status",
        json={"stage": "r2", "done": True, "at": "2024-06-02T00:00:00Z"},
    )
    assert ok.status_code == 200 and ok.json()["r2"]["done"]
    # r3 without r2 on a fresh piece is fine, but r2 without r1 is not
    other = client.get("/pieces").json()["pieces"][1]["piece_id"]
    client.post(f"/pieces/{other}/status", json={"stage": "r1", "done": False})
    bad = client.post(
        f"/pieces/{other}/status",
        json={"stage": "r2", "done": True, "at": "2024-06-02T00:00:00Z"},
    )
    assert bad.status_code == 400


def test_backup_endpoints(client):
    piece_id = client.get("/pieces").json()["pieces"][0]["piece_id"]
    assert client.get(f"/pieces/{piece_id}/backup").status_code == 404
    edited = client.get(f"/pieces/{piece_id}/tracks/edited").json()
    note_id = edited["track"]["notes"][0]["note_id"]
    saved = client.post(
        f"/pieces/{piece_id}/backup",
        json={
            "base_version": 0,
            "saved_at": CLIENT_TS,
            "ops": [
                {
                    "piece_id": piece_id,
                    "action": "set_label",
                    "note_id": note_id,
                    "label": 2,
                    "client_ts": CLIENT_TS,
                }
            ],
        },
    )
    assert saved.status_code == 200 and saved.json()["ops"] == 1
    assert saved.json()["blob_id"].startswith("b")
    body = client.get(f"/pieces/{piece_id}/backup", params={"check": True}).json()
    assert body["blob"]["base_version"] == 0
    assert body["restore"]["clean"]


def test_get_endpoints_are_side_effect_free(client, seeded_store):
    piece_id = client.get("/pieces").json()["pieces"][0]["piece_id"]
    before = seeded_store.edited_bytes(piece_id)
    for _ in range(2):
        client.get("/pieces")
        client.get(f"/pieces/{piece_id}")
        client.get(f"/pieces/{piece_id}/tracks/edited")
        client.get(f"/pieces/{piece_id}/status")
        client.get(f"/pieces/{piece_id}/poses", params={"from": 0, "to": 2})
    assert seeded_store.edited_bytes(piece_id) == before
    assert seeded_store.edited_version(piece_id) == 0


def test_get_edited_before_review_does_not_materialize_it(client, seeded_store):
    piece_id = seeded_store.list_pieces()[1]
    seeded_store.track_path(piece_id, "edited").unlink()
    resp = client.get(f"/pieces/{piece_id}/tracks/edited")
    assert resp.status_code == 200
    assert resp.json()["track"]["kind"] == "edited"
    assert resp.json()["version"] == 0
    # still served from the rule copy; nothing was written
    assert not seeded_store.track_path(piece_id, "edited").is_file()


def test_geometry_endpoint(client):
    body = client.get("/geometry").json()
    assert len(body["keys"]) == 88
    assert body["constants"]["octave_span_mm"] == 165.0


def test_jobs_full_loop(client):
    train = client.post("/jobs/train", json={"epochs": 2, "d": 32, "context_window": 32})
    assert train.status_code == 200
    model_id = train.json()["result"]["model_id"]
    job_id = train.json()["job_id"]
    fetched = client.get(f"/jobs/{job_id}").json()
    assert fetched["status"] == "done"

    infer = client.post("/jobs/infer", json={"model_id": model_id})
    assert infer.status_code == 200
    piece_id = client.get("/pieces").json()["pieces"][0]["piece_id"]
    manifest_path = client.app.state.store.manifests_dir() / f"infer-{model_id}.json"
    assert manifest_path.is_file()
    manifest = json.loads(manifest_path.read_text())
    assert manifest["model_id"] == model_id and manifest["piece_ids"]
    decisions = client.get(f"/pieces/{piece_id}/gate-decisions")
    assert decisions.status_code == 200
    assert decisions.json()["model_id"] == model_id
    probe = client.get(f"/pieces/{piece_id}/tracks/probe")
    assert probe.status_code == 200
    assert probe.json()["track"]["model_id"] == model_id
    # probe runs recorded for the vintage audit
    status = client.get(f"/pieces/{piece_id}/status").json()
    assert status["probe_runs"] and status["probe_runs"][-1]["model_id"] == model_id

    evaluated = client.post("/jobs/eval", json={"bootstrap_resamples": 100})
    assert evaluated.status_code == 200
    result = evaluated.json()["result"]
    assert "delta_pp" in result and "bootstrap_lower95" in result

    sweep = client.post("/jobs/sweep", json={"taus": [0.7, 0.9]})
    assert sweep.status_code == 200
    assert len(sweep.json()["result"]["rows"]) == 2

    audit = client.post("/jobs/audit", json={})
    assert audit.status_code == 200

    agreement = client.post("/jobs/agreement", json={})
    assert agreement.status_code == 200
    assert 0 <= agreement.json()["result"]["agreement"] <= 1


def test_job_failure_recorded(client):
    # inferring with an unknown model fails the request but records the job
    resp = client.post("/jobs/infer", json={"model_id": "mmissing"})
    assert resp.status_code == 400
    record = client.get("/jobs/job-0001").json()
    assert record["status"] == "failed"
    assert "mmissing" in record["error"]


def test_unknown_job_404(client):
    assert client.post("/jobs/reticulate", json={}).status_code == 404
    assert client.get("/jobs/job-9999").status_code == 404


def test_cli_smoke(tmp_path):
    from click.testing import CliRunner

    from fingerlab.cli import main

    corpus = tmp_path / "corpus"
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["--corpus-dir", str(corpus), "synth", "--num-pieces", "2", "--notes-per-piece", "25", "--seed", "3"],
    )
    assert result.exit_code == 0, result.output
    result = runner.invoke(main, ["--corpus-dir", str(corpus), "annotate"])
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        main,
        ["--corpus-dir", str(corpus), "train", "--epochs", "1", "--width", "16", "--context-window", "16"],
    )
    assert result.exit_code == 0, result.output
    model_id = json.loads(result.output)["model_id"]
    result = runner.invoke(main, ["--corpus-dir", str(corpus), "infer", "--model-id", model_id])
    assert result.exit_code == 0, result.output
    result = runner.invoke(main, ["--corpus-dir", str(corpus), "eval", "--resamples", "50"])
    assert result.exit_code == 0, result.output
    result = runner.invoke(main, ["--corpus-dir", str(corpus), "audit"])
    assert result.exit_code == 0, result.output


def test_cli_env_var_corpus(tmp_path, monkeypatch):
    from click.testing import CliRunner

    from fingerlab.cli import main

    corpus = tmp_path / "env-corpus"
    monkeypatch.setenv("FINGERLAB_CORPUS", str(corpus))
    runner = CliRunner()
    result = runner.invoke(main, ["synth", "--num-pieces", "1", "--notes-per-piece", "10"])
    assert result.exit_code == 0, result.output
    assert (corpus / "pieces").is_dir()
