// Wires state, scenes and the API into the page. Owns every side effect:
// network, canvases, timers, storage. Mutation flows one way: key/click ->
// pure state update -> repaint; commits and autosaves drain the pending queue.

import { ApiClient } from "./api.js";
import {
  AUTOSAVE_INTERVAL_MS,
  clearLocalBackup,
  hasRecoverablePending,
  loadLocalBackup,
  persistBackup,
  restorePending,
} from "./backup.js";
import { drainPendingOps } from "./commit.js";
import { paint } from "./canvas.js";
import { buildKeys } from "./geometry.js";
import { buildPianoScene, buildTimelineScene } from "./scene.js";
import {
  advancePlayhead,
  handleKey,
  initialViewState,
  loadTrack,
  seek,
  setHandMode,
  setScopeMode,
  toggleFlagFilter,
  ViewState,
} from "./state.js";
import type { GateDecision, PosesSlice } from "./types.js";

interface Elements {
  piano: HTMLCanvasElement;
  timeline: HTMLCanvasElement;
  handMode: HTMLSelectElement;
  scopeMode: HTMLSelectElement;
  flagFilter: HTMLInputElement;
  commit: HTMLButtonElement;
  pendingCount: HTMLElement;
  stageBadges: HTMLElement;
  conflictBanner: HTMLElement;
  recoveryBanner: HTMLElement;
  recoveryRestore: HTMLButtonElement;
  recoveryDiscard: HTMLButtonElement;
  frameInfo: HTMLElement;
}

export class Workbench {
  private state: ViewState;
  private poses: PosesSlice | null = null;
  private decisions: GateDecision[] = [];
  private keys = buildKeys();
  private committing = false;
  private lastTick = 0;

  constructor(
    private readonly api: ApiClient,
    private readonly pieceId: string,
    private readonly el: Elements,
    private readonly storage: Storage = window.localStorage,
  ) {
    this.state = initialViewState(pieceId);
  }

  async start(): Promise<void> {
    const edited = await this.api.getTrack(this.pieceId, "edited");
    const poses = await this.api.getPoses(this.pieceId, 0, Number.MAX_SAFE_INTEGER);
    this.poses = poses;
    this.state = loadTrack(this.state, edited.track.notes, edited.version ?? 0, poses.num_frames);
    const status = await this.api.getStatus(this.pieceId);
    this.state = {
      ...this.state,
      stageBadges: { r1: status.r1, r2: status.r2, r3: status.r3 },
    };
    this.decisions = await this.api.getDecisions(this.pieceId);

    if (hasRecoverablePending(this.storage, this.pieceId)) {
      this.el.recoveryBanner.style.display = "block";
    }

    this.bind();
    window.setInterval(() => void this.autosave(), AUTOSAVE_INTERVAL_MS);
    requestAnimationFrame((t) => this.tick(t));
    this.render();
  }

  private bind(): void {
    window.addEventListener("keydown", (event) => {
      if (event.target instanceof HTMLInputElement || event.target instanceof HTMLSelectElement) return;
      const handled = [" ", "ArrowLeft", "ArrowRight", "f", "F", "Escape", "1", "2", "3", "4", "5"];
      if (!handled.includes(event.key)) return;
      event.preventDefault();
      this.update(handleKey(this.state, event.key));
    });
    window.addEventListener("pagehide", () => void this.autosave());
    document.addEventListener("visibilitychange", () => {
      if (document.visibilityState === "hidden") void this.autosave();
    });

    this.el.handMode.addEventListener("change", () => {
      this.update(setHandMode(this.state, this.el.handMode.value as "L" | "R"));
    });
    this.el.scopeMode.addEventListener("change", () => {
      this.update(setScopeMode(this.state, this.el.scopeMode.value as "whole_note" | "from_frame"));
    });
    this.el.flagFilter.addEventListener("change", () => {
      this.update(toggleFlagFilter(this.state));
    });
    this.el.commit.addEventListener("click", () => void this.commit());
    this.el.timeline.addEventListener("click", (event) => {
      const rect = this.el.timeline.getBoundingClientRect();
      const frac = (event.clientX - rect.left) / rect.width;
      const framesVisible = 300;
      const frame = Math.round(this.state.playheadFrame - framesVisible / 2 + frac * framesVisible);
      this.update(seek(this.state, frame));
    });
    this.el.recoveryRestore.addEventListener("click", () => {
      const blob = loadLocalBackup(this.storage, this.pieceId);
      if (blob) this.update(restorePending(this.state, blob));
      this.el.recoveryBanner.style.display = "none";
    });
    this.el.recoveryDiscard.addEventListener("click", () => {
      clearLocalBackup(this.storage, this.pieceId);
      this.el.recoveryBanner.style.display = "none";
    });
    // clicking a badge toggles that review stage on the server
    this.el.stageBadges.addEventListener("click", (event) => {
      const target = event.target as HTMLElement;
      const stage = target.dataset?.stage;
      if (!stage) return;
      const key = stage as "r1" | "r2" | "r3";
      const done = this.state.stageBadges[key].done;
      void this.api
        .postStatus(this.pieceId, stage, !done, new Date().toISOString())
        .then((status) => {
          this.update({
            ...this.state,
            stageBadges: { r1: status.r1, r2: status.r2, r3: status.r3 },
          });
        })
        .catch((err) => this.update({ ...this.state, conflict: String(err) }));
    });
  }

  private update(next: ViewState): void {
    this.state = next;
    this.render();
  }

  private tick(timestamp: number): void {
    if (this.lastTick === 0) this.lastTick = timestamp;
    const dt = timestamp - this.lastTick;
    if (this.state.playing && this.poses) {
      const frames = Math.max(1, Math.round((dt / 1000) * this.poses.frame_rate_hz));
      this.update(advancePlayhead(this.state, frames));
      this.lastTick = timestamp;
    } else {
      this.lastTick = timestamp;
    }
    requestAnimationFrame((t) => this.tick(t));
  }

  /** Commit pending ops one at a time; a 409 keeps the queue and surfaces it. */
  async commit(): Promise<void> {
    if (this.committing) return;
    this.committing = true;
    try {
      const result = await drainPendingOps(this.api, this.state);
      this.update(result.state);
      if (result.conflict === null) clearLocalBackup(this.storage, this.pieceId);
    } finally {
      this.committing = false;
    }
  }

  private async autosave(): Promise<void> {
    if (this.committing) return; // never interleave with an in-flight commit
    await persistBackup(this.storage, this.api, this.state, new Date().toISOString());
  }

  private render(): void {
    const pianoCtx = this.el.piano.getContext("2d")!;
    const frame =
      this.poses && this.state.playheadFrame < this.poses.frames.length
        ? this.poses.frames[this.state.playheadFrame]
        : null;
    paint(
      pianoCtx,
      this.el.piano.width,
      this.el.piano.height,
      buildPianoScene(this.state, this.keys, frame, {
        width: this.el.piano.width,
        height: this.el.piano.height,
      }),
    );
    const timelineCtx = this.el.timeline.getContext("2d")!;
    paint(
      timelineCtx,
      this.el.timeline.width,
      this.el.timeline.height,
      buildTimelineScene(this.state, this.decisions, {
        width: this.el.timeline.width,
        height: this.el.timeline.height,
        framesVisible: 300,
      }),
    );

    this.el.pendingCount.textContent = String(this.state.pendingOps.length);
    this.el.conflictBanner.style.display = this.state.conflict ? "block" : "none";
    this.el.conflictBanner.textContent = this.state.conflict ?? "";
    const badges = (["r1", "r2", "r3"] as const)
      .map((stage) => {
        const done = this.state.stageBadges[stage].done;
        return `<span class="badge ${done ? "done" : ""}" data-stage="${stage}" title="toggle ${stage.toUpperCase()}">${stage.toUpperCase()}</span>`;
      })
      .join(" ");
    this.el.stageBadges.innerHTML = badges;
    this.el.frameInfo.textContent = `frame ${this.state.playheadFrame} / ${this.state.numFrames}`;
  }
}

export async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const apiBase = params.get("api") ?? "http://127.0.0.1:8765";
  const api = new ApiClient(apiBase);
  let pieceId = params.get("piece");
  if (!pieceId) {
    const listing = await api.listPieces();
    if (listing.pieces.length === 0) {
      document.body.textContent = "No pieces in the corpus. Run the synth and annotate jobs first.";
      return;
    }
    pieceId = listing.pieces[0].piece_id;
  }
  const byId = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;
  const workbench = new Workbench(api, pieceId, {
    piano: byId<HTMLCanvasElement>("piano"),
    timeline: byId<HTMLCanvasElement>("timeline"),
    handMode: byId<HTMLSelectElement>("hand-mode"),
    scopeMode: byId<HTMLSelectElement>("scope-mode"),
    flagFilter: byId<HTMLInputElement>("flag-filter"),
    commit: byId<HTMLButtonElement>("commit"),
    pendingCount: byId("pending-count"),
    stageBadges: byId("stage-badges"),
    conflictBanner: byId("conflict-banner"),
    recoveryBanner: byId("recovery-banner"),
    recoveryRestore: byId<HTMLButtonElement>("recovery-restore"),
    recoveryDiscard: byId<HTMLButtonElement>("recovery-discard"),
    frameInfo: byId("frame-info"),
  });
  await workbench.start();
}
