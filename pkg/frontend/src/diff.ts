import type { InferResponse } from "./types.js";

export interface ClassDelta {
  cls: string;
  before: number; // best score in pane A, 0 when absent
  after: number; // best score in pane B
  delta: number;
  kind: "gained" | "lost" | "changed" | "same";
}

function bestScores(response: InferResponse): Map<string, number> {
  const best = new Map<string, number>();
  for (const det of response.detections) {
    const prev = best.get(det.class) ?? 0;
    if (det.score > prev) best.set(det.class, det.score);
  }
  return best;
}

/** Per-class best-score deltas between two prompt responses. */
export function comparePromptResponses(a: InferResponse, b: InferResponse): ClassDelta[] {
  const before = bestScores(a);
  const after = bestScores(b);
  const classes = new Set([...before.keys(), ...after.keys()]);
  const deltas: ClassDelta[] = [];
  for (const cls of [...classes].sort()) {
    const x = before.get(cls) ?? 0;
    const y = after.get(cls) ?? 0;
    const kind =
      x === 0 && y > 0 ? "gained" : y === 0 && x > 0 ? "lost" : x === y ? "same" : "changed";
    deltas.push({ cls, before: x, after: y, delta: y - x, kind });
  }
  return deltas;
}
