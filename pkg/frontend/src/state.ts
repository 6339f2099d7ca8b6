/**
 * Session state: the current shape, part selection, and an edit history of
 * (request, response) pairs. Because every server call is seeded and the
 * service is stateless, replaying the recorded requests reproduces the
 * current shape exactly; undo restores the previous response verbatim.
 */

import {
  ApiClient,
  CompleteBody,
  GenerateBody,
  MixBody,
  ShapeJson,
} from "./api";
import { maskFromSelection, maskFromText } from "./selector";

export type EditRequest =
  | { kind: "generate"; body: GenerateBody }
  | { kind: "complete"; body: CompleteBody }
  | { kind: "mix"; body: MixBody };

export interface HistoryEntry {
  request: EditRequest;
  response: ShapeJson;
}

export function cloneShape(s: ShapeJson): ShapeJson {
  return JSON.parse(JSON.stringify(s)) as ShapeJson;
}

export function sameShape(a: ShapeJson | null, b: ShapeJson | null): boolean {
  return JSON.stringify(a) === JSON.stringify(b);
}

export class Session {
  shape: ShapeJson | null = null;
  shapeB: ShapeJson | null = null;          // second slot for mixing
  selection = new Set<number>();
  history: HistoryEntry[] = [];
  seedCounter: number;
  busy = false;

  constructor(public api: ApiClient, startSeed = 1) {
    this.seedCounter = startSeed;
  }

  /** Auto-incrementing seed; set `seedCounter` directly to override. */
  nextSeed(): number {
    return this.seedCounter++;
  }

  private async run(request: EditRequest): Promise<ShapeJson> {
    if (this.busy) throw new Error("an edit request is already in flight");
    this.busy = true;
    try {
      let shape: ShapeJson;
      if (request.kind === "generate") {
        const resp = await this.api.generate(request.body);
        shape = resp.shapes[0];
      } else if (request.kind === "complete") {
        shape = (await this.api.complete(request.body)).shape;
      } else {
        shape = (await this.api.mix(request.body)).shape;
      }
      this.history.push({ request, response: cloneShape(shape) });
      this.shape = shape;
      this.selection = new Set();
      return shape;
    } finally {
      this.busy = false;
    }
  }

  async generate(text?: string, nParts?: number): Promise<ShapeJson> {
    const body: GenerateBody = { n: 1, seed: this.nextSeed() };
    if (text) body.text = text;
    if (nParts) body.n_parts = nParts;
    return this.run({ kind: "generate", body });
  }

  /** Complete the currently selected parts (mask 0 at selection). */
  async completeSelection(text?: string): Promise<ShapeJson> {
    if (!this.shape) throw new Error("no current shape");
    const mask = maskFromSelection(this.shape.extrinsics.length, this.selection);
    const body: CompleteBody = {
      shape: cloneShape(this.shape),
      mask,
      seed: this.nextSeed(),
    };
    if (text) body.text = text;
    return this.run({ kind: "complete", body });
  }

  /** Complete parts picked by text keywords (legs/seat/back/top). */
  async completeByText(text: string): Promise<{ shape: ShapeJson; matched: boolean }> {
    if (!this.shape) throw new Error("no current shape");
    const labels =
      this.shape.labels ?? (await this.api.labels(this.shape)).labels;
    const { mask, matched } = maskFromText(text, labels);
    const body: CompleteBody = {
      shape: cloneShape(this.shape),
      mask,
      seed: this.nextSeed(),
      text,
    };
    const shape = await this.run({ kind: "complete", body });
    return { shape, matched };
  }

  async mixFromB(label: number, tStart = 10): Promise<ShapeJson> {
    if (!this.shape || !this.shapeB) throw new Error("need both shapes");
    const body: MixBody = {
      shape_a: cloneShape(this.shape),
      shape_b: cloneShape(this.shapeB),
      label,
      t_start: tStart,
      seed: this.nextSeed(),
    };
    return this.run({ kind: "mix", body });
  }

  toggleSelect(index: number): void {
    if (this.selection.has(index)) this.selection.delete(index);
    else this.selection.add(index);
  }

  /** Restore the shape as it was before the last edit. */
  undo(): ShapeJson | null {
    this.history.pop();
    const prev = this.history[this.history.length - 1];
    this.shape = prev ? cloneShape(prev.response) : null;
    this.selection = new Set();
    return this.shape;
  }

  /**
   * Re-issue every recorded request against the server and verify the
   * final response matches the current shape exactly.
   */
  async replay(): Promise<{ shape: ShapeJson | null; matches: boolean }> {
    let shape: ShapeJson | null = null;
    for (const entry of this.history) {
      const r = entry.request;
      if (r.kind === "generate") {
        shape = (await this.api.generate(r.body)).shapes[0];
      } else if (r.kind === "complete") {
        shape = (await this.api.complete(r.body)).shape;
      } else {
        shape = (await this.api.mix(r.body)).shape;
      }
    }
    return { shape, matches: sameShape(shape, this.shape) };
  }
}
