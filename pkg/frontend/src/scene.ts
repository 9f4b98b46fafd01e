// Pure scene construction: both views reduce to flat shape lists that the
// canvas layer paints verbatim. Keeping this side-effect-free lets the tests
// assert the rendering contract (green pressed keys, red/blue finger numbers,
// overlay and flag-filter behavior) without a browser.

import type { KeyBox } from "./geometry.js";
import { keyboardSpan } from "./geometry.js";
import type { GateDecision, NoteRecord } from "./types.js";
import { fingerOf, handOf } from "./types.js";
import type { ViewState } from "./state.js";
import { workingNotes } from "./state.js";

export type Shape =
  | { kind: "rect"; x: number; y: number; w: number; h: number; fill: string; stroke?: string; tag?: string }
  | { kind: "circle"; x: number; y: number; r: number; fill: string; tag?: string }
  | { kind: "line"; x1: number; y1: number; x2: number; y2: number; color: string; width: number; tag?: string }
  | { kind: "text"; x: number; y: number; text: string; color: string; size: number; tag?: string };

export const LEFT_COLOR = "#c0392b"; // red = left hand
export const RIGHT_COLOR = "#2e6fd6"; // blue = right hand
export const PRESSED_COLOR = "#2ecc71"; // green = key down at the playhead
export const FLAG_COLOR = "#e67e22"; // probe-flagged note emphasis

const WHITE_FILL = "#f8f8f4";
const BLACK_FILL = "#222222";
const SELECT_COLOR = "#f1c40f";

export interface PianoViewport {
  width: number;
  height: number;
}

function handColor(label: number): string {
  return handOf(label) === "L" ? LEFT_COLOR : RIGHT_COLOR;
}

export function notesAtFrame(notes: NoteRecord[], frame: number): NoteRecord[] {
  return notes.filter((n) => n.onset <= frame && frame < n.offset);
}

/**
 * Top-down piano at the playhead frame: key bed, green pressed keys with
 * finger numbers (when the overlay is on), and the ten fingertip markers
 * joined by hand skeleton lines. tipFrame is [tip 0..9][x,y,z] in mm.
 */
export function buildPianoScene(
  state: ViewState,
  keys: KeyBox[],
  tipFrame: number[][] | null,
  viewport: PianoViewport,
): Shape[] {
  const shapes: Shape[] = [];
  const span = keyboardSpan(keys);
  const depth = keys[0].y_max; // white key length
  const sx = viewport.width / span;
  const sy = viewport.height / depth;
  const toX = (mm: number) => mm * sx;
  // y = 0 mm is the key front, drawn at the bottom edge
  const toY = (mm: number) => viewport.height - mm * sy;

  const pressed = new Map<number, NoteRecord>();
  for (const note of notesAtFrame(workingNotes(state), state.playheadFrame)) {
    pressed.set(note.key, note);
  }

  const drawKey = (box: KeyBox, index: number) => {
    const note = pressed.get(index);
    const fill = note ? PRESSED_COLOR : box.is_black ? BLACK_FILL : WHITE_FILL;
    shapes.push({
      kind: "rect",
      x: toX(box.x_min),
      y: toY(box.y_max),
      w: (box.x_max - box.x_min) * sx,
      h: (box.y_max - box.y_min) * sy,
      fill,
      stroke: "#555555",
      tag: note ? `pressed:${index}` : `key:${index}`,
    });
  };
  keys.forEach((box, i) => {
    if (!box.is_black) drawKey(box, i);
  });
  keys.forEach((box, i) => {
    if (box.is_black) drawKey(box, i);
  });

  if (state.overlayOn) {
    for (const [keyIndex, note] of pressed) {
      if (note.label === 0) continue;
      const box = keys[keyIndex];
      shapes.push({
        kind: "text",
        x: toX((box.x_min + box.x_max) / 2),
        y: toY(box.y_min + 0.18 * (box.y_max - box.y_min)),
        text: String(fingerOf(note.label)),
        color: handColor(note.label),
        size: 14,
        tag: `finger:${note.note_id}`,
      });
    }
  }

  if (tipFrame !== null) {
    for (const hand of [0, 1]) {
      const tips = tipFrame.slice(hand * 5, hand * 5 + 5);
      const color = hand === 0 ? LEFT_COLOR : RIGHT_COLOR;
      for (let i = 0; i < tips.length - 1; i++) {
        shapes.push({
          kind: "line",
          x1: toX(tips[i][0]),
          y1: toY(tips[i][1]),
          x2: toX(tips[i + 1][0]),
          y2: toY(tips[i + 1][1]),
          color,
          width: 1,
          tag: `skeleton:${hand === 0 ? "L" : "R"}`,
        });
      }
      tips.forEach((tip, finger) => {
        // higher tips draw smaller: a cheap depth cue
        const r = Math.max(2, 7 - tip[2] / 10);
        shapes.push({
          kind: "circle",
          x: toX(tip[0]),
          y: toY(tip[1]),
          r,
          fill: color,
          tag: `tip:${hand === 0 ? "L" : "R"}${finger + 1}`,
        });
      });
    }
  }
  return shapes;
}

export interface TimelineViewport {
  width: number;
  height: number;
  framesVisible: number;
}

/**
 * Piano-roll timeline centered on the playhead: note rectangles colored by
 * hand, label numbers under the overlay toggle, probe-flag emphasis under the
 * flag filter, the selection halo and the playhead line.
 */
export function buildTimelineScene(
  state: ViewState,
  decisions: GateDecision[],
  viewport: TimelineViewport,
): Shape[] {
  const shapes: Shape[] = [];
  const notes = workingNotes(state);
  const fired = new Set(decisions.filter((d) => d.fired).map((d) => d.note_id));

  const halfWindow = viewport.framesVisible / 2;
  const frame0 = state.playheadFrame - halfWindow;
  const fx = (frame: number) => ((frame - frame0) / viewport.framesVisible) * viewport.width;
  const rowH = viewport.height / 88;
  const keyY = (key: number) => viewport.height - (key + 1) * rowH;

  for (const note of notes) {
    if (note.offset < frame0 || note.onset > frame0 + viewport.framesVisible) continue;
    const isFlagged = state.flagFilter && fired.has(note.note_id);
    const isSelected = note.note_id === state.selectedNoteId;
    shapes.push({
      kind: "rect",
      x: fx(note.onset),
      y: keyY(note.key),
      w: Math.max(1, fx(note.offset) - fx(note.onset)),
      h: Math.max(2, rowH - 1),
      fill: note.label === 0 ? "#999999" : handColor(note.label),
      stroke: isFlagged ? FLAG_COLOR : isSelected ? SELECT_COLOR : undefined,
      tag: isFlagged ? `flagged:${note.note_id}` : isSelected ? `selected:${note.note_id}` : `note:${note.note_id}`,
    });
    if (state.overlayOn && note.label !== 0) {
      shapes.push({
        kind: "text",
        x: fx(note.onset) + 2,
        y: keyY(note.key) - 1,
        text: String(fingerOf(note.label)),
        color: handColor(note.label),
        size: 9,
        tag: `label:${note.note_id}`,
      });
    }
  }

  shapes.push({
    kind: "line",
    x1: fx(state.playheadFrame),
    y1: 0,
    x2: fx(state.playheadFrame),
    y2: viewport.height,
    color: "#111111",
    width: 1,
    tag: "playhead",
  });
  return shapes;
}
