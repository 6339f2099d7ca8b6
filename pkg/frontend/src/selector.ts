/** Part selection: click-set masks and keyword-based masks from text. */

export const LABEL_NAMES: Record<number, string> = {
  1: "leg",
  2: "seat",
  3: "back",
  4: "top",
};

const KEYWORD_LABELS: Record<string, number> = {
  leg: 1,
  legs: 1,
  seat: 2,
  back: 3,
  top: 4,
};

/** Mask with 0 at the selected part indices (parts to regenerate). */
export function maskFromSelection(nParts: number, selected: Iterable<number>): number[] {
  const mask = new Array<number>(nParts).fill(1);
  for (const i of selected) {
    if (i < 0 || i >= nParts) throw new Error(`part index ${i} out of range`);
    mask[i] = 0;
  }
  return mask;
}

/**
 * Mask with 0 on parts whose label matches a keyword in the text; mirrors
 * the server-side selector. Returns all-ones (and matched=false) when no
 * keyword hits, so callers can warn instead of mutating anything.
 */
export function maskFromText(
  text: string,
  labels: number[],
): { mask: number[]; matched: boolean } {
  const targets = new Set<number>();
  for (const word of text.toLowerCase().split(/[^a-z]+/)) {
    const label = KEYWORD_LABELS[word];
    if (label !== undefined) targets.add(label);
  }
  const mask = labels.map((l) => (targets.has(l) ? 0 : 1));
  const matched = mask.some((m) => m === 0);
  return { mask: matched ? mask : labels.map(() => 1), matched };
}

export function selectionFromMask(mask: number[]): Set<number> {
  const out = new Set<number>();
  mask.forEach((m, i) => {
    if (m === 0) out.add(i);
  });
  return out;
}
