"""Command-line entry points mirroring the service's job endpoints."""
from __future__ import annotations

import json
from pathlib import Path

import click

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
from .store import CorpusStore


def _echo(result: dict) -> None:
    click.echo(json.dumps(result, indent=2))


@click.group()
@click.option(
    "--corpus-dir",
    envvar="FINGERLAB_CORPUS",
    default="corpus",
    show_default=True,
    type=click.Path(path_type=Path),
    help="Corpus directory (env FINGERLAB_CORPUS overrides).",
)
@click.pass_context
def main(ctx: click.Context, corpus_dir: Path) -> None:
    """fingerlab: annotate, review and probe piano fingering corpora."""
    ctx.obj = CorpusStore(corpus_dir)


def _store(ctx: click.Context) -> CorpusStore:
    return ctx.obj


@main.command()
@click.option("--num-pieces", default=20, show_default=True)
@click.option("--notes-per-piece", default=300, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--p-swap", default=0.0, show_default=True)
@click.option("--p-drop", default=0.0, show_default=True)
@click.option("--noise", nargs=3, type=float, default=(0.0, 0.0, 0.0), show_default=True)
@click.option("--frame-rate", default=30.0, show_default=True)
@click.option("--mark-r1/--no-mark-r1", default=True, show_default=True)
@click.pass_context
def synth(ctx, num_pieces, notes_per_piece, seed, p_swap, p_drop, noise, frame_rate, mark_r1):
    """Generate a synthetic ground-truth corpus."""
    _echo(
        job_synth(
            _store(ctx),
            num_pieces=num_pieces,
            notes_per_piece=notes_per_piece,
            seed=seed,
            p_swap=p_swap,
            p_drop=p_drop,
            noise_mm=noise,
            frame_rate_hz=frame_rate,
            mark_r1=mark_r1,
        )
    )


@main.command()
@click.option("--x-tolerance", default=2.0, show_default=True)
@click.option("--z-threshold", default=10.0, show_default=True)
@click.option("--fb-weight", default=1.0, show_default=True)
@click.pass_context
def annotate(ctx, x_tolerance, z_threshold, fb_weight):
    """Run the rule-based annotator over the corpus."""
    cfg = RuleConfig(x_tolerance_mm=x_tolerance, z_threshold_mm=z_threshold, fb_weight=fb_weight)
    _echo(job_annotate(_store(ctx), cfg))


@main.command()
@click.option("--layers", default=1, show_default=True)
@click.option("--width", "d", default=64, show_default=True)
@click.option("--heads", default=4, show_default=True)
@click.option("--ff-multiplier", default=4, show_default=True)
@click.option("--context-window", default=64, show_default=True)
@click.option(
    "--rule-embedding-mode",
    type=click.Choice(["active", "zeroed_frozen"]),
    default="zeroed_frozen",
    show_default=True,
)
@click.option("--seed", default=0, show_default=True)
@click.option("--learning-rate", default=1e-3, show_default=True)
@click.option("--epochs", default=20, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--pieces", multiple=True, help="Restrict training to these piece ids.")
@click.pass_context
def train(ctx, layers, d, heads, ff_multiplier, context_window, rule_embedding_mode, seed,
          learning_rate, epochs, batch_size, pieces):
    """Train the diagnostic probe on R1-checked pieces."""
    cfg = ProbeConfig(
        layers=layers,
        d=d,
        heads=heads,
        ff_multiplier=ff_multiplier,
        context_window=context_window,
        rule_embedding_mode=rule_embedding_mode,
        seed=seed,
        learning_rate=learning_rate,
        epochs=epochs,
        batch_size=batch_size,
    )
    _echo(job_train(_store(ctx), cfg, piece_ids=list(pieces) or None))


@main.command()
@click.option("--model-id", default=None)
@click.option("--tau", default=0.9, show_default=True, help="Top-1 probability threshold.")
@click.option("--rho", default=2.0, show_default=True, help="Top-1 / rule probability ratio.")
@click.option("--pieces", multiple=True)
@click.pass_context
def infer(ctx, model_id, tau, rho, pieces):
    """Run the probe and gate over rule tracks; writes probe tracks and decisions."""
    gate = GateConfig(top1_threshold=tau, ratio_threshold=rho)
    _echo(job_infer(_store(ctx), model_id=model_id, gate_cfg=gate, piece_ids=list(pieces) or None))


@main.command("eval")
@click.option("--resamples", default=5000, show_default=True)
@click.option("--bootstrap-seed", default=0, show_default=True)
@click.option("--pieces", multiple=True)
@click.pass_context
def eval_cmd(ctx, resamples, bootstrap_seed, pieces):
    """Score stored gate decisions against the edited tracks."""
    _echo(
        job_eval(
            _store(ctx),
            piece_ids=list(pieces) or None,
            bootstrap_resamples=resamples,
            bootstrap_seed=bootstrap_seed,
        )
    )


@main.command()
@click.option("--taus", multiple=True, type=float, default=(0.70, 0.80, 0.90, 0.95), show_default=True)
@click.option("--rho", default=2.0, show_default=True)
@click.option("--model-id", default=None)
@click.option("--pieces", multiple=True)
@click.pass_context
def sweep(ctx, taus, rho, model_id, pieces):
    """Evaluate the gate across top-1 thresholds; writes JSON and CSV reports."""
    _echo(
        job_sweep(
            _store(ctx),
            taus=tuple(taus),
            ratio_threshold=rho,
            model_id=model_id,
            piece_ids=list(pieces) or None,
        )
    )


@main.command()
@click.pass_context
def audit(ctx):
    """Label-vintage audit: flag probe runs that predate review completions."""
    _echo(job_audit(_store(ctx)))


@main.command()
@click.pass_context
def agreement(ctx):
    """Rule-vs-edited agreement statistics over the corpus."""
    _echo(job_agreement(_store(ctx)))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True)
@click.pass_context
def serve(ctx, host, port):
    """Serve the REST API for the review UI."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(_store(ctx).root), host=host, port=port)


if __name__ == "__main__":
    main()
