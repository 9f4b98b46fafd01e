"""fingerlab: piano fingering annotation at desk scale.

A geometric rule annotator over 3D fingertip trajectories, a paired
rule/edited corpus with staged review, a small causal-Transformer probe
trained on (rule, edited) pairs, a conservative confidence gate, and the
evaluation statistics that characterize it.
"""

from .corpus import (
    AgreementStats,
    FingeringTrack,
    NoteRecord,
    ReviewStatus,
    agreement_stats,
    align_notes,
    align_tracks,
    load_track,
    save_track,
    update_review_stage,
)
from .errors import FingerlabError
from .gate import EvalReport, GateConfig, GateDecision, apply_gate, cluster_bootstrap, evaluate, sweep_tau, t_ci, vintage_audit
from .geometry import HandPoseTrack, KeyboardGeometry, RuleConfig, annotate_piece, candidate_tips, score_tip, standard_geometry
from .network import ProbeConfig, ProbeModel, forward, grad_check, init_model
from .smf import parse_smf
from .synth import SynthConfig, generate_piece, inject_corruptions
from .training import predict_piece, train

__version__ = "0.1.0"

__all__ = [
    "AgreementStats",
    "EvalReport",
    "FingeringTrack",
    "FingerlabError",
    "GateConfig",
    "GateDecision",
    "HandPoseTrack",
    "KeyboardGeometry",
    "NoteRecord",
    "ProbeConfig",
    "ProbeModel",
    "ReviewStatus",
    "RuleConfig",
    "SynthConfig",
    "agreement_stats",
    "align_notes",
    "align_tracks",
    "annotate_piece",
    "apply_gate",
    "candidate_tips",
    "cluster_bootstrap",
    "evaluate",
    "forward",
    "generate_piece",
    "grad_check",
    "init_model",
    "inject_corruptions",
    "load_track",
    "parse_smf",
    "predict_piece",
    "save_track",
    "score_tip",
    "standard_geometry",
    "sweep_tau",
    "t_ci",
    "train",
    "update_review_stage",
    "vintage_audit",
]
