// Drains the pending-op queue against the server, one op per request. A
// version conflict (or any failure) stops the drain with the op still queued,
// so nothing is lost and the caller can surface the problem.

import { ApiClient, ApiError } from "./api.js";
import { commitConflict, opCommitted, ViewState } from "./state.js";

export interface CommitResult {
  state: ViewState;
  committed: number;
  conflict: string | null;
}

export async function drainPendingOps(api: ApiClient, state: ViewState): Promise<CommitResult> {
  let current = state;
  let committed = 0;
  while (current.pendingOps.length > 0) {
    const op = current.pendingOps[0];
    try {
      const resp = await api.postEdit(current.pieceId, op, current.trackVersion);
      current = opCommitted(current, op, resp.track.notes, resp.version ?? 0);
      committed++;
    } catch (err) {
      const message =
        err instanceof ApiError && err.status === 409
          ? `version conflict: ${err.message}`
          : String(err);
      return { state: commitConflict(current, message), committed, conflict: message };
    }
  }
  return { state: current, committed, conflict: null };
}
