"""REST service over a corpus directory.

All mutation is funneled through the CorpusStore's per-piece locks, so
concurrent requests serialize per piece. GET endpoints never write. Jobs run
synchronously inside the request and are kept in an in-memory registry.
"""
from __future__ import annotations

import itertools
import threading
from pathlib import Path

from fastapi import Body, FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware

from .corpus import status_to_dict, track_to_dict, update_review_stage, utc_now
from .errors import (
    ConflictError,
    EditError,
    FingerlabError,
    FormatError,
    PipelineError,
    ValidationError,
)
from .gate import GateConfig
from .geometry import RuleConfig
from .network import ProbeConfig
from .pipeline import (
    job_agreement,
    job_annotate,
    job_audit,
    job_eval,
    job_infer,
    job_sweep,
    job_synth,
    job_train,
)
from .store import CorpusStore, EditOp

JOB_NAMES = ("synth", "annotate", "train", "infer", "eval", "sweep", "audit", "agreement")


def _run_job(store: CorpusStore, name: str, params: dict) -> dict:
    if name == "synth":
        return job_synth(
            store,
            num_pieces=int(params.get("num_pieces", 20)),
            notes_per_piece=int(params.get("notes_per_piece", 300)),
            seed=int(params.get("seed", 0)),
            p_swap=float(params.get("p_swap", 0.0)),
            p_drop=float(params.get("p_drop", 0.0)),
            noise_mm=tuple(params.get("noise_mm", (0.0, 0.0, 0.0))),
            frame_rate_hz=float(params.get("frame_rate_hz", 30.0)),
            mark_r1=bool(params.get("mark_r1", True)),
        )
    if name == "annotate":
        cfg = RuleConfig(
            x_tolerance_mm=float(params.get("x_tolerance_mm", 2.0)),
            z_threshold_mm=float(params.get("z_threshold_mm", 10.0)),
            fb_weight=float(params.get("fb_weight", 1.0)),
        )
        return job_annotate(store, cfg)
    if name == "train":
        cfg = ProbeConfig(
            layers=int(params.get("layers", 1)),
            d=int(params.get("d", 64)),
            heads=int(params.get("heads", 4)),
            ff_multiplier=int(params.get("ff_multiplier", 4)),
            context_window=int(params.get("context_window", 64)),
            rule_embedding_mode=params.get("rule_embedding_mode", "zeroed_frozen"),
            seed=int(params.get("seed", 0)),
            learning_rate=float(params.get("learning_rate", 1e-3)),
            epochs=int(params.get("epochs", 20)),
            batch_size=int(params.get("batch_size", 8)),
        )
        return job_train(store, cfg, piece_ids=params.get("piece_ids"))
    if name == "infer":
        gate = GateConfig(
            top1_threshold=float(params.get("top1_threshold", 0.9)),
            ratio_threshold=float(params.get("ratio_threshold", 2.0)),
        )
        return job_infer(
            store,
            model_id=params.get("model_id"),
            gate_cfg=gate,
            piece_ids=params.get("piece_ids"),
        )
    if name == "eval":
        return job_eval(
            store,
            piece_ids=params.get("piece_ids"),
            bootstrap_resamples=int(params.get("bootstrap_resamples", 5000)),
            bootstrap_seed=int(params.get("bootstrap_seed", 0)),
        )
    if name == "sweep":
        return job_sweep(
            store,
            taus=tuple(params.get("taus", (0.70, 0.80, 0.90, 0.95))),
            ratio_threshold=float(params.get("ratio_threshold", 2.0)),
            model_id=params.get("model_id"),
            piece_ids=params.get("piece_ids"),
        )
    if name == "audit":
        return job_audit(store)
    if name == "agreement":
        return job_agreement(store)
    raise ValidationError(f"unknown job {name!r}")


def create_app(corpus_dir: str | Path) -> FastAPI:
    store = CorpusStore(corpus_dir)
    app = FastAPI(title="fingerlab", version="0.1.0")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.store = store

    jobs: dict[str, dict] = {}
    jobs_lock = threading.Lock()
    job_counter = itertools.count(1)

    def _require_piece(piece_id: str) -> None:
        if not store.has_piece(piece_id):
            raise HTTPException(status_code=404, detail=f"unknown piece {piece_id!r}")

    @app.exception_handler(FingerlabError)
    async def _domain_error(request, exc: FingerlabError):
        from fastapi.responses import JSONResponse

        if isinstance(exc, ConflictError):
            code = 409
        elif isinstance(exc, EditError):
            code = 409
        elif isinstance(exc, (ValidationError, FormatError, PipelineError)):
            code = 400
        else:
            code = 500
        return JSONResponse(status_code=code, content={"detail": str(exc)})

    # -- pieces -------------------------------------------------------------

    @app.get("/pieces")
    def list_pieces():
        rows = []
        for piece_id in store.list_pieces():
            status = store.load_status(piece_id)
            rows.append(
                {
                    "piece_id": piece_id,
                    "tracks": [k for k in ("rule", "edited", "probe") if store.has_track(piece_id, k)],
                    "edited_version": store.edited_version(piece_id),
                    "status": status_to_dict(status),
                }
            )
        return {"pieces": rows}

    @app.get("/pieces/{piece_id}")
    def piece_detail(piece_id: str):
        _require_piece(piece_id)
        status = store.load_status(piece_id)
        tracks = {}
        for kind in ("rule", "edited", "probe"):
            if store.has_track(piece_id, kind):
                track = store.load_track(piece_id, kind)
                tracks[kind] = {
                    "notes": len(track.notes),
                    "produced_at": track.produced_at,
                    "model_id": track.model_id,
                }
        return {
            "piece_id": piece_id,
            "tracks": tracks,
            "edited_version": store.edited_version(piece_id),
            "status": status_to_dict(status),
            "has_decisions": store.load_decisions(piece_id) is not None,
            "has_backup": store.load_backup(piece_id) is not None,
        }

    @app.get("/pieces/{piece_id}/tracks/{kind}")
    def get_track(piece_id: str, kind: str):
        _require_piece(piece_id)
        if kind not in ("rule", "edited", "probe"):
            raise HTTPException(status_code=404, detail=f"unknown track kind {kind!r}")
        if kind == "edited" and not store.has_track(piece_id, "edited"):
            if store.has_track(piece_id, "rule"):
                # served as the rule copy without persisting anything: GETs
                # stay side-effect-free; the first committed edit materializes it
                track = store.rule_copied_track(piece_id)
                return {"track": track_to_dict(track), "version": 0}
        if not store.has_track(piece_id, kind):
            raise HTTPException(status_code=404, detail=f"piece {piece_id!r} has no {kind} track")
        track = store.load_track(piece_id, kind)
        version = store.edited_version(piece_id) if kind == "edited" else None
        return {"track": track_to_dict(track), "version": version}

    @app.get("/pieces/{piece_id}/poses")
    def get_poses(
        piece_id: str,
        from_frame: int = Query(default=0, alias="from", ge=0),
        to_frame: int | None = Query(default=None, alias="to", ge=0),
    ):
        _require_piece(piece_id)
        if not store.poses_path(piece_id).is_file():
            raise HTTPException(status_code=404, detail=f"piece {piece_id!r} has no poses")
        poses = store.load_poses(piece_id)
        end = poses.num_frames if to_frame is None else min(to_frame, poses.num_frames)
        start = min(from_frame, end)
        return {
            "piece_id": piece_id,
            "frame_rate_hz": poses.frame_rate_hz,
            "num_frames": poses.num_frames,
            "from": start,
            "to": end,
            "frames": poses.frames[start:end].tolist(),
        }

    # -- edits ----------------------------------------------------------------

    @app.post("/pieces/{piece_id}/edits")
    def post_edit(piece_id: str, body: dict = Body(...)):
        _require_piece(piece_id)
        base_version = body.pop("base_version", None)
        body.setdefault("piece_id", piece_id)
        if body["piece_id"] != piece_id:
            raise HTTPException(status_code=400, detail="op piece_id does not match the path")
        op = EditOp.from_dict(body)
        track, version = store.apply_edit(op, base_version=base_version)
        return {"track": track_to_dict(track), "version": version}

    # -- status -----------------------------------------------------------------

    @app.get("/pieces/{piece_id}/status")
    def get_status(piece_id: str):
        _require_piece(piece_id)
        return status_to_dict(store.load_status(piece_id))

    @app.post("/pieces/{piece_id}/status")
    def post_status(piece_id: str, body: dict = Body(...)):
        _require_piece(piece_id)
        stage = body.get("stage")
        if stage is None or "done" not in body:
            raise HTTPException(status_code=400, detail="status update needs stage and done")
        at = body.get("at", utc_now())
        with store.lock(piece_id):
            status = update_review_stage(store.load_status(piece_id), stage, bool(body["done"]), at)
            store.save_status(status)
        return status_to_dict(status)

    # -- backup / restore ----------------------------------------------------------

    @app.post("/pieces/{piece_id}/backup")
    def post_backup(piece_id: str, body: dict = Body(...)):
        _require_piece(piece_id)
        ops = [EditOp.from_dict(doc) for doc in body.get("ops", [])]
        blob = store.save_backup(
            piece_id,
            ops,
            base_version=int(body.get("base_version", store.edited_version(piece_id))),
            saved_at=body.get("saved_at", utc_now()),
        )
        return {"saved": True, "blob_id": blob["blob_id"], "saved_at": blob["saved_at"], "ops": len(ops)}

    @app.get("/pieces/{piece_id}/backup")
    def get_backup(piece_id: str, check: bool = Query(default=False)):
        _require_piece(piece_id)
        blob = store.load_backup(piece_id)
        if blob is None:
            raise HTTPException(status_code=404, detail=f"piece {piece_id!r} has no backup")
        result = {"blob": blob}
        if check:
            result["restore"] = store.check_restore(piece_id)
        return result

    # -- gate decisions --------------------------------------------------------------

    @app.get("/pieces/{piece_id}/gate-decisions")
    def get_gate_decisions(piece_id: str):
        _require_piece(piece_id)
        doc = store.load_decisions(piece_id)
        if doc is None:
            raise HTTPException(status_code=404, detail=f"piece {piece_id!r} has no gate decisions")
        return doc

    # -- geometry (read-only helper for the review UI) -------------------------------

    @app.get("/geometry")
    def get_geometry():
        from .pipeline import _geometry

        geo = _geometry(store)
        return {
            "constants": geo.to_config(),
            "keys": [
                {
                    "x_min": k.x_min,
                    "x_max": k.x_max,
                    "y_min": k.y_min,
                    "y_max": k.y_max,
                    "surface_z": k.surface_z,
                    "is_black": k.is_black,
                }
                for k in geo.keys
            ],
        }

    # -- jobs ---------------------------------------------------------------------------

    @app.post("/jobs/{name}")
    def post_job(name: str, body: dict = Body(default={})):
        if name not in JOB_NAMES:
            raise HTTPException(status_code=404, detail=f"unknown job {name!r}")
        with jobs_lock:
            job_id = f"job-{next(job_counter):04d}"
            record = {
                "job_id": job_id,
                "name": name,
                "params": body,
                "status": "running",
                "started": utc_now(),
            }
            jobs[job_id] = record
        try:
            result = _run_job(store, name, body or {})
        except FingerlabError as exc:
            record.update(status="failed", error=str(exc), finished=utc_now())
            raise
        record.update(status="done", result=result, finished=utc_now())
        return record

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        record = jobs.get(job_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id!r}")
        return record

    return app
