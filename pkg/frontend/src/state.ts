import type { InferResponse } from "./types.js";

export type PromptMode =
  | { kind: "classes"; classes: string[] }
  | { kind: "text"; text: string }
  | { kind: "embedding"; id: string; label: string };

export interface HistoryEntry {
  readonly seq: number;
  readonly mode: PromptMode;
  readonly response: InferResponse;
}

export interface SessionState {
  image: string | null; // base64
  mode: PromptMode;
  nextSeq: number; // next request sequence number to hand out
  appliedSeq: number; // newest sequence whose response is displayed
  current: InferResponse | null;
  history: readonly HistoryEntry[];
  tunedModes: readonly { id: string; label: string }[];
  error: string | null;
}

export function initialState(): SessionState {
  return {
    image: null,
    mode: { kind: "text", text: "" },
    nextSeq: 0,
    appliedSeq: -1,
    current: null,
    history: [],
    tunedModes: [],
    error: null,
  };
}

/** Hand out a request sequence number; newer requests supersede older ones. */
export function beginRequest(state: SessionState): [SessionState, number] {
  const seq = state.nextSeq;
  return [{ ...state, nextSeq: seq + 1 }, seq];
}

/**
 * Fold in a server response. Stale responses (a newer request's response has
 * already been applied, or a newer request is what superseded this one) are
 * discarded: the state is returned unchanged.
 */
export function applyResponse(
  state: SessionState,
  seq: number,
  response: InferResponse,
): SessionState {
  if (seq <= state.appliedSeq) {
    return state; // stale: a newer response already rendered
  }
  const entry: HistoryEntry = { seq, mode: state.mode, response };
  return {
    ...state,
    appliedSeq: seq,
    current: response,
    history: [...state.history, entry],
    error: null,
  };
}

export function applyError(state: SessionState, seq: number, message: string): SessionState {
  if (seq <= state.appliedSeq) {
    return state;
  }
  return { ...state, error: message };
}

export function addTunedMode(state: SessionState, id: string, label: string): SessionState {
  if (state.tunedModes.some((m) => m.id === id)) return state;
  return { ...state, tunedModes: [...state.tunedModes, { id, label }] };
}

/** Replaying the history against a fresh state reproduces the same view. */
export function replay(history: readonly HistoryEntry[]): SessionState {
  let state = initialState();
  for (const entry of history) {
    state = { ...state, mode: entry.mode, nextSeq: Math.max(state.nextSeq, entry.seq + 1) };
    state = applyResponse(state, entry.seq, entry.response);
  }
  return state;
}
