// Unsaved-edit protection: pending ops are persisted to browser storage under
// fingerlab:{piece_id} (and mirrored to the server's backup endpoint) every
// 30 seconds and on page-hide. On reload with a non-empty blob the app offers
// recovery before anything else touches the queue.

import type { ApiClient } from "./api.js";
import type { BackupBlob, EditOp } from "./types.js";
import type { ViewState } from "./state.js";

export const AUTOSAVE_INTERVAL_MS = 30_000;

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

export function backupKey(pieceId: string): string {
  return `fingerlab:${pieceId}`;
}

export function saveLocalBackup(storage: StorageLike, state: ViewState, savedAt: string): BackupBlob {
  const blob: BackupBlob = {
    piece_id: state.pieceId,
    saved_at: savedAt,
    base_version: state.trackVersion,
    ops: state.pendingOps,
  };
  storage.setItem(backupKey(state.pieceId), JSON.stringify(blob));
  return blob;
}

export function loadLocalBackup(storage: StorageLike, pieceId: string): BackupBlob | null {
  const raw = storage.getItem(backupKey(pieceId));
  if (raw === null) return null;
  try {
    const blob = JSON.parse(raw) as BackupBlob;
    if (!Array.isArray(blob.ops)) return null;
    return blob;
  } catch {
    return null;
  }
}

export function clearLocalBackup(storage: StorageLike, pieceId: string): void {
  storage.removeItem(backupKey(pieceId));
}

export function hasRecoverablePending(storage: StorageLike, pieceId: string): boolean {
  const blob = loadLocalBackup(storage, pieceId);
  return blob !== null && blob.ops.length > 0;
}

/** Re-adopt backed-up ops into a fresh session's queue. */
export function restorePending(state: ViewState, blob: BackupBlob): ViewState {
  return { ...state, pendingOps: [...blob.ops] };
}

export async function persistBackup(
  storage: StorageLike,
  api: ApiClient | null,
  state: ViewState,
  savedAt: string,
): Promise<void> {
  const blob = saveLocalBackup(storage, state, savedAt);
  if (api !== null && blob.ops.length > 0) {
    try {
      await api.postBackup(state.pieceId, {
        saved_at: blob.saved_at,
        base_version: blob.base_version,
        ops: blob.ops as EditOp[],
      });
    } catch {
      // the local copy is the recovery path; a failed mirror must not break editing
    }
  }
}
