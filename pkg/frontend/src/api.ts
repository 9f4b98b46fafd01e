// Thin REST client for the annotation service. fetch is injectable so the
// tests can run against an in-memory fake server.

import type {
  BackupBlob,
  EditOp,
  GateDecision,
  PosesSlice,
  ReviewStatus,
  TrackResponse,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path, init);
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = await resp.json();
        if (body && typeof body.detail === "string") detail = body.detail;
      } catch {
        // non-JSON error body
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  listPieces(): Promise<{ pieces: { piece_id: string; tracks: string[] }[] }> {
    return this.request("/pieces");
  }

  getTrack(pieceId: string, kind: "rule" | "edited" | "probe"): Promise<TrackResponse> {
    return this.request(`/pieces/${pieceId}/tracks/${kind}`);
  }

  getPoses(pieceId: string, from: number, to: number): Promise<PosesSlice> {
    return this.request(`/pieces/${pieceId}/poses?from=${from}&to=${to}`);
  }

  postEdit(pieceId: string, op: EditOp, baseVersion: number): Promise<TrackResponse> {
    return this.request(`/pieces/${pieceId}/edits`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ ...op, base_version: baseVersion }),
    });
  }

  getStatus(pieceId: string): Promise<ReviewStatus> {
    return this.request(`/pieces/${pieceId}/status`);
  }

  postStatus(pieceId: string, stage: string, done: boolean, at?: string): Promise<ReviewStatus> {
    return this.request(`/pieces/${pieceId}/status`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ stage, done, at }),
    });
  }

  postBackup(pieceId: string, blob: Omit<BackupBlob, "piece_id">): Promise<{ saved: boolean }> {
    return this.request(`/pieces/${pieceId}/backup`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(blob),
    });
  }

  async getDecisions(pieceId: string): Promise<GateDecision[]> {
    try {
      const doc = await this.request<{ decisions: GateDecision[] }>(
        `/pieces/${pieceId}/gate-decisions`,
      );
      return doc.decisions;
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) return [];
      throw err;
    }
  }
}
