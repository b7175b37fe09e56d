import { spanKey } from "./colors.js";
import type { Detection } from "./types.js";

export interface OverlayOptions {
  scale: number; // display pixels per model pixel
  highlightSpan?: [number, number] | null;
}

/** Draw detections onto a canvas; boxes and labels use their phrase's color. */
export function drawDetections(
  ctx: CanvasRenderingContext2D,
  detections: Detection[],
  colors: Map<string, string>,
  options: OverlayOptions,
): void {
  const { scale, highlightSpan } = options;
  for (const det of detections) {
    const key = spanKey(det.char_span);
    const color = colors.get(key) ?? "#ffffff";
    const highlighted =
      highlightSpan != null && spanKey(highlightSpan) === key;
    const [x1, y1, x2, y2] = det.box;
    ctx.lineWidth = highlighted ? 3 : 1.5;
    ctx.strokeStyle = color;
    ctx.globalAlpha = highlightSpan == null || highlighted ? 1.0 : 0.25;
    ctx.strokeRect(x1 * scale, y1 * scale, (x2 - x1) * scale, (y2 - y1) * scale);
    const label = `${det.class} ${det.score.toFixed(2)}`;
    ctx.font = "11px sans-serif";
    const width = ctx.measureText(label).width + 4;
    ctx.fillStyle = color;
    ctx.fillRect(x1 * scale, Math.max(0, y1 * scale - 13), width, 13);
    ctx.fillStyle = "#111";
    ctx.fillText(label, x1 * scale + 2, Math.max(10, y1 * scale - 3));
  }
  ctx.globalAlpha = 1.0;
}

/** Topmost detection under a display-space point, for box -> phrase hover. */
export function hitTest(
  detections: Detection[],
  x: number,
  y: number,
  scale: number,
): Detection | null {
  let best: Detection | null = null;
  let bestArea = Infinity;
  for (const det of detections) {
    const [x1, y1, x2, y2] = det.box.map((v) => v * scale) as [number, number, number, number];
    if (x >= x1 && x <= x2 && y >= y1 && y <= y2) {
      const area = (x2 - x1) * (y2 - y1);
      if (area < bestArea) {
        best = det;
        bestArea = area;
      }
    }
  }
  return best;
}
