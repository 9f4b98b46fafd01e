"""Pipeline jobs: synth, annotate, train, infer, eval, sweep, audit.

Each job reads and writes the corpus directory through a CorpusStore and
returns a JSON-serializable summary. The service module exposes them over
POST /jobs/{name}; the CLI mirrors them as subcommands.
"""
from __future__ import annotations

import csv
import io
from typing import Sequence

from .corpus import (
    ReviewStatus,
    StageState,
    add_probe_run,
    align_tracks,
    agreement_stats,
    utc_now,
    write_json_atomic,
)
from .errors import PipelineError
from .gate import (
    GateConfig,
    GateDecision,
    apply_gate,
    cluster_bootstrap,
    evaluate,
    piece_outcome,
    report_to_dict,
    sweep_tau,
)
from .geometry import KeyboardGeometry, RuleConfig, annotate_piece, load_geometry, save_geometry, standard_geometry
from .network import ProbeConfig
from .store import CorpusStore
from .synth import SynthConfig, generate_piece, inject_corruptions
from .training import (
    TrainingPair,
    build_training_pair,
    load_model,
    model_id as compute_model_id,
    predict_piece,
    save_model,
    train,
)

DEFAULT_SWEEP_TAUS = (0.70, 0.80, 0.90, 0.95)


def _geometry(store: CorpusStore) -> KeyboardGeometry:
    path = store.geometry_path()
    if path.is_file():
        return load_geometry(path)
    geo = standard_geometry()
    save_geometry(geo, path)
    return geo


def job_synth(
    store: CorpusStore,
    num_pieces: int = 20,
    notes_per_piece: int = 300,
    seed: int = 0,
    p_swap: float = 0.0,
    p_drop: float = 0.0,
    noise_mm: tuple[float, float, float] = (0.0, 0.0, 0.0),
    frame_rate_hz: float = 30.0,
    mark_r1: bool = True,
) -> dict:
    """Generate a synthetic corpus with known truth and corruption ledgers."""
    geo = _geometry(store)
    manifest: dict = {"seed": seed, "generated_at": utc_now(), "pieces": []}
    for index in range(num_pieces):
        cfg = SynthConfig(
            seed=seed + index,
            num_notes=notes_per_piece,
            frame_rate_hz=frame_rate_hz,
            noise_mm=noise_mm,
            p_swap=p_swap,
            p_drop=p_drop,
        )
        piece = generate_piece(cfg, geo)
        corrupted = inject_corruptions(piece, cfg)
        piece_id = cfg.piece_id
        store.save_notes(piece_id, list(corrupted.notes), frame_rate_hz)
        store.save_poses(corrupted.poses)
        store.save_track(piece.edited)
        status = ReviewStatus(piece_id=piece_id)
        if mark_r1:
            status = ReviewStatus(
                piece_id=piece_id,
                stages={"r1": StageState(done=True, completed_at=piece.edited.produced_at)},
            )
        store.save_status(status)
        manifest["pieces"].append(
            {
                "piece_id": piece_id,
                "seed": cfg.seed,
                "num_notes": notes_per_piece,
                "ledger": corrupted.ledger.to_dict(),
            }
        )
    write_json_atomic(store.manifests_dir() / "synth.json", manifest)
    return {"pieces": num_pieces, "notes_per_piece": notes_per_piece, "seed": seed}


def job_annotate(store: CorpusStore, rule_cfg: RuleConfig | None = None) -> dict:
    """Run the rule annotator over every piece with notes and poses."""
    geo = _geometry(store)
    rule_cfg = rule_cfg or RuleConfig()
    produced_at = utc_now()
    annotated = []
    for piece_id in store.list_pieces():
        if not store.notes_path(piece_id).is_file() or not store.poses_path(piece_id).is_file():
            continue
        notes, _ = store.load_notes(piece_id)
        poses = store.load_poses(piece_id)
        track = annotate_piece(notes, poses, geo, rule_cfg, produced_at=produced_at)
        store.save_track(track)
        annotated.append(piece_id)
    if not annotated:
        raise PipelineError("annotate: no pieces with notes and poses found")
    return {"annotated": len(annotated), "pieces": annotated}


def _r1_done_pieces(store: CorpusStore) -> list[str]:
    ready = []
    for piece_id in store.list_pieces():
        status = store.load_status(piece_id)
        if status.stage("r1").done and store.has_track(piece_id, "rule") and store.has_track(piece_id, "edited"):
            ready.append(piece_id)
    return ready


def job_train(
    store: CorpusStore,
    probe_cfg: ProbeConfig | None = None,
    piece_ids: Sequence[str] | None = None,
) -> dict:
    """Train the probe on (rule, edited) pairs from R1-checked pieces."""
    probe_cfg = probe_cfg or ProbeConfig()
    geo = _geometry(store)
    rule_cfg = RuleConfig()
    ready = _r1_done_pieces(store)
    if piece_ids is not None:
        missing = sorted(set(piece_ids) - set(ready))
        if missing:
            raise PipelineError(f"train: pieces not R1-checked or incomplete: {missing}")
        ready = list(piece_ids)
    if not ready:
        raise PipelineError("train: no R1-checked pieces with rule and edited tracks")

    started = utc_now()
    pairs: list[TrainingPair] = []
    for piece_id in ready:
        pairs.append(
            build_training_pair(
                store.load_track(piece_id, "edited"),
                store.load_track(piece_id, "rule"),
                store.load_poses(piece_id),
                geo,
                rule_cfg,
                store.load_status(piece_id),
            )
        )
    result = train(pairs, probe_cfg)
    finished = utc_now()
    mid = compute_model_id(result.model)
    save_model(result.model, store.models_dir() / f"{mid}.json")
    write_json_atomic(
        store.manifests_dir() / f"train-{mid}.json",
        {
            "model_id": mid,
            "piece_ids": list(ready),
            "seed": probe_cfg.seed,
            "config": {
                "layers": probe_cfg.layers,
                "d": probe_cfg.d,
                "heads": probe_cfg.heads,
                "ff_multiplier": probe_cfg.ff_multiplier,
                "context_window": probe_cfg.context_window,
                "rule_embedding_mode": probe_cfg.rule_embedding_mode,
                "learning_rate": probe_cfg.learning_rate,
                "epochs": probe_cfg.epochs,
                "batch_size": probe_cfg.batch_size,
            },
            "started": started,
            "finished": finished,
        },
    )
    return {"model_id": mid, "pieces": len(ready), "loss_curve": result.loss_curve}


def _resolve_model(store: CorpusStore, model_id: str | None):
    models = sorted(store.models_dir().glob("*.json"))
    if model_id is not None:
        path = store.models_dir() / f"{model_id}.json"
        if not path.is_file():
            raise PipelineError(f"unknown model {model_id!r}")
        return model_id, load_model(path)
    if not models:
        raise PipelineError("no trained models in the corpus; run train first")
    path = max(models, key=lambda p: p.stat().st_mtime)
    return path.stem, load_model(path)


def job_infer(
    store: CorpusStore,
    model_id: str | None = None,
    gate_cfg: GateConfig | None = None,
    piece_ids: Sequence[str] | None = None,
) -> dict:
    """Probe every rule track, gate the outputs, and record the probe run."""
    gate_cfg = gate_cfg or GateConfig()
    geo = _geometry(store)
    rule_cfg = RuleConfig()
    mid, model = _resolve_model(store, model_id)
    produced_at = utc_now()
    done = []
    for piece_id in piece_ids if piece_ids is not None else store.list_pieces():
        if not store.has_track(piece_id, "rule"):
            continue
        rule = store.load_track(piece_id, "rule")
        poses = store.load_poses(piece_id)
        pred = predict_piece(model, rule, poses, geo, rule_cfg)
        probe_track, decisions = apply_gate(
            pred.class_probs, rule, gate_cfg, model_id=mid, produced_at=produced_at
        )
        store.save_track(probe_track)
        store.save_decisions(piece_id, mid, decisions)
        with store.lock(piece_id):
            status = add_probe_run(store.load_status(piece_id), mid, produced_at)
            store.save_status(status)
        done.append(piece_id)
    if not done:
        raise PipelineError("infer: no pieces with rule tracks")
    write_json_atomic(
        store.manifests_dir() / f"infer-{mid}.json",
        {
            "model_id": mid,
            "produced_at": produced_at,
            "piece_ids": done,
            "gate": {
                "top1_threshold": gate_cfg.top1_threshold,
                "ratio_threshold": gate_cfg.ratio_threshold,
            },
        },
    )
    return {"model_id": mid, "pieces": len(done), "produced_at": produced_at}


def _decisions_from_doc(doc: dict) -> list[GateDecision]:
    return [
        GateDecision(
            note_id=d["note_id"],
            rule_label=d["rule_label"],
            top1_label=d["top1_label"],
            p_cls=d["p_cls"],
            p_rule=d["p_rule"],
            fired=d["fired"],
            final_label=d["final_label"],
        )
        for d in doc["decisions"]
    ]


def job_eval(
    store: CorpusStore,
    piece_ids: Sequence[str] | None = None,
    bootstrap_resamples: int = 5000,
    bootstrap_seed: int = 0,
) -> dict:
    """Score stored gate decisions against edited tracks; writes an EvalReport."""
    outcomes = []
    for piece_id in piece_ids if piece_ids is not None else store.list_pieces():
        doc = store.load_decisions(piece_id)
        if doc is None or not store.has_track(piece_id, "edited"):
            continue
        decisions = _decisions_from_doc(doc)
        rule = store.load_track(piece_id, "rule")
        edited = store.load_track(piece_id, "edited")
        outcomes.append(piece_outcome(decisions, rule, edited))
    if not outcomes:
        raise PipelineError("eval: no pieces with decisions and edited tracks")
    report = evaluate(outcomes)
    lower = cluster_bootstrap(outcomes, resamples=bootstrap_resamples, seed=bootstrap_seed)
    doc = report_to_dict(report)
    doc["bootstrap_lower95"] = lower
    doc["generated_at"] = utc_now()
    path = store.reports_dir() / "eval.json"
    write_json_atomic(path, doc)
    return doc


def job_sweep(
    store: CorpusStore,
    taus: Sequence[float] = DEFAULT_SWEEP_TAUS,
    ratio_threshold: float = 2.0,
    model_id: str | None = None,
    piece_ids: Sequence[str] | None = None,
) -> dict:
    """Re-run inference and gate the corpus at each top-1 threshold."""
    geo = _geometry(store)
    rule_cfg = RuleConfig()
    mid, model = _resolve_model(store, model_id)
    items = []
    for piece_id in piece_ids if piece_ids is not None else store.list_pieces():
        if not (store.has_track(piece_id, "rule") and store.has_track(piece_id, "edited")):
            continue
        rule = store.load_track(piece_id, "rule")
        edited = store.load_track(piece_id, "edited")
        poses = store.load_poses(piece_id)
        pred = predict_piece(model, rule, poses, geo, rule_cfg)
        items.append((pred.class_probs, rule, edited))
    if not items:
        raise PipelineError("sweep: no pieces with rule and edited tracks")
    results = sweep_tau(items, taus, ratio_threshold)

    rows = []
    for tau, report in results:
        rows.append(
            {
                "tau": tau,
                "fired": sum(o.fired for o in report.per_piece),
                "flag_precision": report.flag_precision,
                "flag_recall": report.flag_recall,
                "break_rate": report.break_rate,
                "rule_accuracy": report.rule_accuracy,
                "probe_accuracy": report.probe_accuracy,
                "delta_pp": report.delta_pp,
            }
        )
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    csv_path = store.reports_dir() / "sweep.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(buffer.getvalue(), encoding="utf-8")
    doc = {
        "model_id": mid,
        "ratio_threshold": ratio_threshold,
        "generated_at": utc_now(),
        "rows": rows,
    }
    write_json_atomic(store.reports_dir() / "sweep.json", doc)
    return doc


def job_audit(store: CorpusStore) -> dict:
    """Label-vintage audit over every piece's status file."""
    from .gate import vintage_audit

    statuses = [store.load_status(piece_id) for piece_id in store.list_pieces()]
    rows = vintage_audit(statuses)
    doc = {
        "generated_at": utc_now(),
        "rows": [
            {"piece_id": r.piece_id, "stage": r.stage, "stale": r.stale} for r in rows
        ],
        "stale_count": sum(1 for r in rows if r.stale),
    }
    write_json_atomic(store.reports_dir() / "audit.json", doc)
    return doc


def job_agreement(store: CorpusStore) -> dict:
    """Rule-vs-edited agreement statistics over the corpus (convenience)."""
    pairs = {}
    for piece_id in store.list_pieces():
        if store.has_track(piece_id, "rule") and store.has_track(piece_id, "edited"):
            edited = store.load_track(piece_id, "edited")
            rule = store.load_track(piece_id, "rule")
            pairs[piece_id] = align_tracks(edited, rule)
    if not pairs:
        raise PipelineError("agreement: no pieces with rule and edited tracks")
    stats = agreement_stats(pairs)
    return {
        "total_edited_notes": stats.total_edited_notes,
        "matched_notes": stats.matched_notes,
        "agreement": stats.agreement,
        "rule_error_count": stats.rule_error_count,
        "median_disagreement": stats.median_disagreement,
        "per_piece_disagreement": [
            {"piece_id": pid, "disagreement": d} for pid, d in stats.per_piece_disagreement
        ],
    }
