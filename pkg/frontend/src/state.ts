// View state and the keyboard-driven editing semantics.
//
// Everything here is pure: handleKey and the queue/selection helpers return
// new state objects and never touch the network or the DOM, so the exact
// keyboard contract is unit-testable. The wiring layer owns side effects.
//
// Keyboard map:
//   Space        play / pause
//   ArrowLeft /  previous / next fingering event (selection follows onset
//   ArrowRight   order; the playhead tracks the selected note)
//   1..5         assign finger number (uses the hand-mode toggle)
//   F            toggle the fingering overlay
//   Escape       deselect; digits become no-ops

import type { EditOp, EditScope, Hand, NoteRecord, StageState } from "./types.js";
import { labelFor } from "./types.js";

export interface StageBadges {
  r1: StageState;
  r2: StageState;
  r3: StageState;
}

export interface ViewState {
  pieceId: string;
  playheadFrame: number;
  playing: boolean;
  selectedNoteId: string | null;
  overlayOn: boolean;
  flagFilter: boolean;
  handMode: Hand;
  scopeMode: EditScope;
  pendingOps: EditOp[];
  committedNotes: NoteRecord[];
  trackVersion: number;
  numFrames: number;
  stageBadges: StageBadges;
  conflict: string | null;
}

export function initialViewState(pieceId: string): ViewState {
  return {
    pieceId,
    playheadFrame: 0,
    playing: false,
    selectedNoteId: null,
    overlayOn: true,
    flagFilter: false,
    handMode: "R",
    scopeMode: "whole_note",
    pendingOps: [],
    committedNotes: [],
    trackVersion: 0,
    numFrames: 0,
    stageBadges: {
      r1: { done: false },
      r2: { done: false },
      r3: { done: false },
    },
    conflict: null,
  };
}

function sortNotes(notes: NoteRecord[]): NoteRecord[] {
  return [...notes].sort((a, b) => a.onset - b.onset || a.key - b.key);
}

// Local mirror of the server's edit semantics, used to preview pending ops.
export function applyOpToNotes(notes: NoteRecord[], op: EditOp): NoteRecord[] {
  const find = () =>
    notes.findIndex((n) =>
      op.note_id !== undefined
        ? n.note_id === op.note_id
        : n.key === op.key_index && n.onset === op.onset_frame,
    );
  if (op.action === "set_label") {
    const idx = find();
    if (idx < 0) throw new Error(`unknown note for op: ${op.note_id ?? op.key_index}`);
    const note = notes[idx];
    const rest = notes.filter((_, i) => i !== idx);
    if (op.scope === "from_frame" && op.from_frame !== undefined && op.from_frame !== note.onset) {
      if (op.from_frame <= note.onset || op.from_frame >= note.offset) {
        throw new Error(`from_frame ${op.from_frame} outside note`);
      }
      rest.push({ ...note, offset: op.from_frame });
      rest.push({
        note_id: `${note.note_id}@${op.from_frame}`,
        key: note.key,
        onset: op.from_frame,
        offset: note.offset,
        label: op.label!,
      });
    } else {
      rest.push({ ...note, label: op.label! });
    }
    return sortNotes(rest);
  }
  if (op.action === "add_note") {
    return sortNotes([
      ...notes,
      {
        note_id: op.note_id ?? `add-${op.key_index}-${op.onset_frame}`,
        key: op.key_index!,
        onset: op.onset_frame!,
        offset: op.offset_frame!,
        label: op.label!,
      },
    ]);
  }
  const idx = find();
  if (idx < 0) throw new Error("unknown note to delete");
  return notes.filter((_, i) => i !== idx);
}

/** Committed notes with all pending ops previewed on top. */
export function workingNotes(state: ViewState): NoteRecord[] {
  let notes = state.committedNotes;
  for (const op of state.pendingOps) notes = applyOpToNotes(notes, op);
  return notes;
}

export function selectedNote(state: ViewState): NoteRecord | null {
  if (state.selectedNoteId === null) return null;
  return workingNotes(state).find((n) => n.note_id === state.selectedNoteId) ?? null;
}

function stepSelection(state: ViewState, direction: 1 | -1): ViewState {
  const notes = workingNotes(state);
  if (notes.length === 0) return state;
  let index: number;
  if (state.selectedNoteId === null) {
    // no selection: jump to the event at or after the playhead (or the last one)
    index = notes.findIndex((n) => n.onset >= state.playheadFrame);
    if (index < 0) index = notes.length - 1;
  } else {
    const current = notes.findIndex((n) => n.note_id === state.selectedNoteId);
    index = current < 0 ? 0 : current + direction;
  }
  index = Math.max(0, Math.min(notes.length - 1, index));
  const note = notes[index];
  return { ...state, selectedNoteId: note.note_id, playheadFrame: note.onset };
}

export function queueSetLabel(state: ViewState, finger: number, nowTs: string): ViewState {
  const note = selectedNote(state);
  if (note === null || finger < 1 || finger > 5) return state;
  const label = labelFor(state.handMode, finger);
  const op: EditOp = {
    piece_id: state.pieceId,
    action: "set_label",
    client_ts: nowTs,
    note_id: note.note_id,
    label,
    scope: state.scopeMode,
  };
  if (state.scopeMode === "from_frame") {
    const frame = Math.max(note.onset, Math.min(state.playheadFrame, note.offset - 1));
    if (frame >= note.offset) return state;
    op.from_frame = frame;
  }
  return { ...state, pendingOps: [...state.pendingOps, op] };
}

export function handleKey(state: ViewState, key: string, nowTs = new Date().toISOString()): ViewState {
  switch (key) {
    case " ":
    case "Space":
      return { ...state, playing: !state.playing };
    case "ArrowLeft":
      return stepSelection(state, -1);
    case "ArrowRight":
      return stepSelection(state, 1);
    case "f":
    case "F":
      return { ...state, overlayOn: !state.overlayOn };
    case "Escape":
      return { ...state, selectedNoteId: null };
    case "1":
    case "2":
    case "3":
    case "4":
    case "5":
      return queueSetLabel(state, Number(key), nowTs);
    default:
      return state;
  }
}

export function setHandMode(state: ViewState, hand: Hand): ViewState {
  return { ...state, handMode: hand };
}

export function setScopeMode(state: ViewState, scope: EditScope): ViewState {
  return { ...state, scopeMode: scope };
}

export function toggleFlagFilter(state: ViewState): ViewState {
  return { ...state, flagFilter: !state.flagFilter };
}

export function loadTrack(
  state: ViewState,
  notes: NoteRecord[],
  version: number,
  numFrames: number,
): ViewState {
  return {
    ...state,
    committedNotes: sortNotes(notes),
    trackVersion: version,
    numFrames,
    playheadFrame: Math.min(state.playheadFrame, Math.max(0, numFrames - 1)),
  };
}

export function advancePlayhead(state: ViewState, frames: number): ViewState {
  if (!state.playing || state.numFrames === 0) return state;
  const next = state.playheadFrame + frames;
  if (next >= state.numFrames) {
    return { ...state, playheadFrame: state.numFrames - 1, playing: false };
  }
  return { ...state, playheadFrame: next };
}

export function seek(state: ViewState, frame: number): ViewState {
  const bounded = Math.max(0, Math.min(frame, Math.max(0, state.numFrames - 1)));
  return { ...state, playheadFrame: bounded };
}

/** One committed op: drop it from the queue and adopt the server's result. */
export function opCommitted(state: ViewState, op: EditOp, notes: NoteRecord[], version: number): ViewState {
  return {
    ...state,
    pendingOps: state.pendingOps.filter((p) => p !== op),
    committedNotes: sortNotes(notes),
    trackVersion: version,
    conflict: null,
  };
}

export function commitConflict(state: ViewState, message: string): ViewState {
  return { ...state, conflict: message };
}
