"""Probe training: pair assembly, windowing, the Adam loop and model files."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import FingeringTrack, ReviewStatus, align_tracks
from .errors import FingerlabError, FormatError, ValidationError
from .features import encode_notes, group_onsets
from .geometry import HandPoseTrack, KeyboardGeometry, RuleConfig
from .network import (
    ProbeConfig,
    ProbeModel,
    forward,
    init_model,
    param_shapes,
    window_loss_and_grads,
)

MODEL_FORMAT = "fingerlab-probe/1"


@dataclass(frozen=True)
class TrainingPair:
    """One piece's supervision: features plus rule and edited labels per note."""

    piece_id: str
    feats: np.ndarray  # (n, 77)
    rule_labels: np.ndarray  # (n,)
    targets: np.ndarray  # (n,) edited labels
    corrections: np.ndarray  # (n,) 1 where rule != edited
    groups: list[list[int]] = field(repr=False, default_factory=list)
    note_ids: tuple[str, ...] = ()


def build_training_pair(
    edited: FingeringTrack,
    rule: FingeringTrack,
    poses: HandPoseTrack,
    geo: KeyboardGeometry,
    cfg: RuleConfig,
    status: ReviewStatus,
) -> TrainingPair:
    """Supervision for one piece. Only R1-checked pieces are admissible."""
    if not status.stage("r1").done:
        raise ValidationError(
            f"piece {edited.piece_id!r} is not R1-checked and cannot enter probe training"
        )
    pairs = align_tracks(edited, rule)
    rule_labels = np.array([other for _, other in pairs], dtype=np.int64)
    targets = np.array([ref.label for ref, _ in pairs], dtype=np.int64)
    feats = encode_notes(edited.notes, rule_labels.tolist(), poses, geo, cfg)
    return TrainingPair(
        piece_id=edited.piece_id,
        feats=feats,
        rule_labels=rule_labels,
        targets=targets,
        corrections=(rule_labels != targets).astype(np.int64),
        groups=group_onsets(edited.notes),
        note_ids=tuple(n.note_id for n in edited.notes),
    )


@dataclass(frozen=True)
class Window:
    piece_id: str
    feats: np.ndarray
    rule_labels: np.ndarray
    targets: np.ndarray
    corrections: np.ndarray
    groups: list[list[int]]
    note_indices: np.ndarray  # positions of the window's notes in the piece


def split_windows(pair: TrainingPair, context_window: int) -> list[Window]:
    """Split a piece into non-overlapping runs of at most context_window groups."""
    windows: list[Window] = []
    for start in range(0, len(pair.groups), context_window):
        chunk = pair.groups[start : start + context_window]
        members = [i for g in chunk for i in g]
        index = {note_idx: local for local, note_idx in enumerate(members)}
        local_groups = [[index[i] for i in g] for g in chunk]
        sel = np.array(members, dtype=np.int64)
        windows.append(
            Window(
                piece_id=pair.piece_id,
                feats=pair.feats[sel],
                rule_labels=pair.rule_labels[sel],
                targets=pair.targets[sel],
                corrections=pair.corrections[sel],
                groups=local_groups,
                note_indices=sel,
            )
        )
    return windows


@dataclass
class TrainResult:
    model: ProbeModel
    loss_curve: list[float]  # mean per-note loss per epoch


def train(pairs: Sequence[TrainingPair], cfg: ProbeConfig) -> TrainResult:
    """Joint CE + BCE minimization with Adam over shuffled window batches.

    Deterministic given cfg.seed: initialization, the shuffling stream and the
    accumulation order are all fixed. A frozen rule embedding receives no
    updates and stays bitwise zero.
    """
    if not pairs:
        raise ValidationError("cannot train on an empty corpus")
    windows: list[Window] = []
    for pair in pairs:
        windows.extend(split_windows(pair, cfg.context_window))
    if not windows:
        raise ValidationError("training corpus contains no notes")

    model = init_model(cfg, dtype=np.float32)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v_) for k, v_ in model.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    frozen = model.config.frozen_rule_embedding

    curve: list[float] = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(windows))
        epoch_loss_sum = 0.0
        epoch_notes = 0
        for batch_start in range(0, len(order), cfg.batch_size):
            batch = order[batch_start : batch_start + cfg.batch_size]
            grads = {k: np.zeros_like(p) for k, p in model.params.items()}
            batch_notes = 0
            batch_loss = 0.0
            for w_idx in batch:
                w = windows[w_idx]
                result = window_loss_and_grads(
                    model, w.feats, w.rule_labels, w.targets, w.corrections, w.groups
                )
                for name in grads:
                    grads[name] += result.grads[name]
                batch_notes += result.n_notes
                batch_loss += result.total_sum
            if not np.isfinite(batch_loss):
                raise FingerlabError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"step {step} (lr={cfg.learning_rate})"
                )
            epoch_loss_sum += batch_loss
            epoch_notes += batch_notes

            step += 1
            scale = 1.0 / batch_notes
            for name, p in model.params.items():
                if frozen and name == "rule_emb":
                    continue
                g = grads[name] * scale
                m[name] = beta1 * m[name] + (1 - beta1) * g
                v[name] = beta2 * v[name] + (1 - beta2) * g * g
                m_hat = m[name] / (1 - beta1**step)
                v_hat = v[name] / (1 - beta2**step)
                p -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        curve.append(epoch_loss_sum / epoch_notes)
    return TrainResult(model=model, loss_curve=curve)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PiecePrediction:
    piece_id: str
    note_ids: tuple[str, ...]
    class_probs: np.ndarray  # (n, 11) in note order
    correction_probs: np.ndarray  # (n,)


def predict_piece(
    model: ProbeModel,
    track: FingeringTrack,
    poses: HandPoseTrack,
    geo: KeyboardGeometry,
    cfg: RuleConfig,
) -> PiecePrediction:
    """Class distributions and correction probabilities for every track note."""
    rule_labels = np.array([n.label for n in track.notes], dtype=np.int64)
    feats = encode_notes(track.notes, rule_labels.tolist(), poses, geo, cfg)
    pair = TrainingPair(
        piece_id=track.piece_id,
        feats=feats,
        rule_labels=rule_labels,
        targets=rule_labels,
        corrections=np.zeros_like(rule_labels),
        groups=group_onsets(track.notes),
        note_ids=tuple(n.note_id for n in track.notes),
    )
    n = len(track.notes)
    class_probs = np.zeros((n, 11), dtype=np.float64)
    cor_probs = np.zeros(n, dtype=np.float64)
    for window in split_windows(pair, model.config.context_window):
        out = forward(model, window.feats, window.rule_labels, window.groups)
        class_probs[window.note_indices] = out.class_probs
        cor_probs[window.note_indices] = out.correction_probs
    return PiecePrediction(
        piece_id=track.piece_id,
        note_ids=pair.note_ids,
        class_probs=class_probs,
        correction_probs=cor_probs,
    )


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def _config_to_dict(cfg: ProbeConfig) -> dict:
    return {
        "layers": cfg.layers,
        "d": cfg.d,
        "heads": cfg.heads,
        "ff_multiplier": cfg.ff_multiplier,
        "context_window": cfg.context_window,
        "rule_embedding_mode": cfg.rule_embedding_mode,
        "seed": cfg.seed,
        "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
    }


def model_document(model: ProbeModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "config": _config_to_dict(model.config),
        "params": {
            name: {
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "data": [float(x) for x in arr.reshape(-1)],
            }
            for name, arr in model.params.items()
        },
    }


def model_id(model: ProbeModel) -> str:
    """Content hash of the serialized model; identical weights, identical id."""
    blob = json.dumps(model_document(model), sort_keys=True, separators=(",", ":"))
    return "m" + hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def save_model(model: ProbeModel, path: str | Path) -> str:
    from .corpus import write_json_atomic

    write_json_atomic(path, model_document(model))
    return model_id(model)


def load_model(path: str | Path) -> ProbeModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from None
    if doc.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path}: unknown model format {doc.get('format')!r}")
    cfg = ProbeConfig(**doc["config"])
    expected = param_shapes(cfg)
    params: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        entry = doc["params"].get(name)
        if entry is None:
            raise FormatError(f"{path}: missing parameter {name!r}")
        arr = np.array(entry["data"], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        if tuple(arr.shape) != shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {arr.shape}, wanted {shape}")
        params[name] = arr
    return ProbeModel(config=cfg, params=params)
