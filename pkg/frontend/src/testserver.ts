// In-memory stand-in for the annotation service, used by the tests. It
// mirrors the server's edit semantics: version bookkeeping, whole-note and
// from-frame set_label, base-version conflicts, and the backup blob store.

import type { FetchLike } from "./api.js";
import type { BackupBlob, EditOp, NoteRecord, Track } from "./types.js";
import { applyOpToNotes } from "./state.js";

export class FakeServer {
  version = 0;
  backup: BackupBlob | null = null;
  readonly editLog: EditOp[] = [];

  constructor(
    readonly pieceId: string,
    public notes: NoteRecord[],
  ) {}

  private track(): Track {
    return {
      piece_id: this.pieceId,
      kind: "edited",
      frame_rate_hz: 30,
      produced_at: "2024-01-01T00:00:00.000000Z",
      notes: this.notes,
    };
  }

  private json(status: number, body: unknown): Response {
    return new Response(JSON.stringify(body), {
      status,
      headers: { "Content-Type": "application/json" },
    });
  }

  fetch: FetchLike = async (url, init) => {
    const method = init?.method ?? "GET";
    const path = url.replace(/^https?:\/\/[^/]+/, "");
    const body = init?.body ? JSON.parse(String(init.body)) : undefined;

    if (method === "GET" && path === `/pieces/${this.pieceId}/tracks/edited`) {
      return this.json(200, { track: this.track(), version: this.version });
    }
    if (method === "POST" && path === `/pieces/${this.pieceId}/edits`) {
      const { base_version, ...op } = body;
      if (base_version !== undefined && base_version !== null && base_version !== this.version) {
        return this.json(409, { detail: `base version ${base_version} is stale (current ${this.version})` });
      }
      try {
        this.notes = applyOpToNotes(this.notes, op as EditOp);
      } catch (err) {
        return this.json(409, { detail: String(err) });
      }
      this.editLog.push(op as EditOp);
      this.version++;
      return this.json(200, { track: this.track(), version: this.version });
    }
    if (method === "POST" && path === `/pieces/${this.pieceId}/backup`) {
      this.backup = { piece_id: this.pieceId, ...body };
      return this.json(200, { saved: true, saved_at: body.saved_at, ops: body.ops.length });
    }
    if (method === "GET" && path === `/pieces/${this.pieceId}/backup`) {
      if (this.backup === null) return this.json(404, { detail: "no backup" });
      return this.json(200, { blob: this.backup });
    }
    if (method === "GET" && path === `/pieces/${this.pieceId}/status`) {
      return this.json(200, {
        piece_id: this.pieceId,
        r1: { done: true, completed_at: "2024-01-01T00:00:00.000000Z" },
        r2: { done: false },
        r3: { done: false },
        probe_runs: [],
      });
    }
    return this.json(404, { detail: `no route for ${method} ${path}` });
  };
}

export function demoNotes(): NoteRecord[] {
  return [
    { note_id: "n0", key: 39, onset: 0, offset: 10, label: 6 },
    { note_id: "n1", key: 41, onset: 12, offset: 20, label: 7 },
    { note_id: "n2", key: 43, onset: 24, offset: 30, label: 8 },
    { note_id: "n3", key: 20, onset: 24, offset: 32, label: 2 },
  ];
}
