// Shared wire types mirroring the annotation service's JSON formats.

export interface NoteRecord {
  note_id: string;
  key: number; // 0..87
  onset: number;
  offset: number;
  label: number; // 0 missing, 1..5 left thumb..pinky, 6..10 right
}

export interface Track {
  piece_id: string;
  kind: "rule" | "edited" | "probe";
  frame_rate_hz: number;
  produced_at: string;
  model_id?: string;
  notes: NoteRecord[];
}

export interface TrackResponse {
  track: Track;
  version: number | null;
}

export type EditAction = "set_label" | "add_note" | "delete_note";
export type EditScope = "whole_note" | "from_frame";

export interface EditOp {
  piece_id: string;
  action: EditAction;
  client_ts: string;
  note_id?: string;
  key_index?: number;
  onset_frame?: number;
  offset_frame?: number;
  label?: number;
  scope?: EditScope;
  from_frame?: number;
}

export interface StageState {
  done: boolean;
  completed_at?: string;
}

export interface ReviewStatus {
  piece_id: string;
  r1: StageState;
  r2: StageState;
  r3: StageState;
  probe_runs: { model_id: string; produced_at: string }[];
}

export interface GateDecision {
  note_id: string;
  rule_label: number;
  top1_label: number;
  p_cls: number;
  p_rule: number;
  fired: boolean;
  final_label: number;
}

export interface PosesSlice {
  piece_id: string;
  frame_rate_hz: number;
  num_frames: number;
  from: number;
  to: number;
  frames: number[][][]; // [frame][tip 0..9][x,y,z] in mm
}

export interface BackupBlob {
  piece_id: string;
  saved_at: string;
  base_version: number;
  ops: EditOp[];
}

export type Hand = "L" | "R";

export function handOf(label: number): Hand | null {
  if (label === 0) return null;
  return label <= 5 ? "L" : "R";
}

export function fingerOf(label: number): number | null {
  if (label === 0) return null;
  return ((label - 1) % 5) + 1;
}

export function labelFor(hand: Hand, finger: number): number {
  return hand === "L" ? finger : finger + 5;
}
