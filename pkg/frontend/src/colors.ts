import type { PhraseSpan } from "./types.js";

// Distinct hues; phrases cycle through them in prompt order.
export const PALETTE = [
  "#e6194b",
  "#3cb44b",
  "#4363d8",
  "#f58231",
  "#911eb4",
  "#46f0f0",
  "#f032e6",
  "#bcf60c",
  "#008080",
  "#9a6324",
  "#800000",
  "#808000",
];

export function spanKey(span: [number, number]): string {
  return `${span[0]}:${span[1]}`;
}

/**
 * Stable phrase -> color map keyed by char span. Duplicate phrase text at
 * different spans gets distinct colors; the same span always maps to the same
 * color for a given prompt.
 */
export function assignColors(phrases: PhraseSpan[]): Map<string, string> {
  const colors = new Map<string, string>();
  phrases.forEach((phrase, index) => {
    colors.set(spanKey(phrase.char_span), PALETTE[index % PALETTE.length]);
  });
  return colors;
}
