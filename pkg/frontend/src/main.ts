/** App wiring: DOM controls <-> session <-> viewer. */

import { ApiClient } from "./api";
import { partEllipsoids } from "./scene";
import { LABEL_NAMES } from "./selector";
import { Session, sameShape } from "./state";
import { Viewer } from "./viewer";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>("viewport");
const viewer = new Viewer(canvas);
const status = el<HTMLDivElement>("status");
const serverInput = el<HTMLInputElement>("server-url");
const seedInput = el<HTMLInputElement>("seed");
const textInput = el<HTMLInputElement>("text");
const historyList = el<HTMLUListElement>("history");

let session = new Session(new ApiClient(serverInput.value));

function note(msg: string, isError = false): void {
  status.textContent = msg;
  status.className = isError ? "error" : "";
}

function setBusy(busy: boolean): void {
  document.querySelectorAll("button").forEach((b) => (b.disabled = busy));
}

async function redraw(): Promise<void> {
  if (!session.shape) {
    viewer.setParts([]);
    viewer.setPoints([]);
    return;
  }
  viewer.setParts(partEllipsoids(session.shape, session.selection));
  try {
    const { points } = await session.api.decode({
      shape: session.shape, grid: 1024, seed: 0,
    });
    viewer.setPoints(points);
  } catch (e) {
    note(`decode failed: ${e}`, true);
  }
  seedInput.value = String(session.seedCounter);
  historyList.innerHTML = "";
  for (const entry of session.history) {
    const li = document.createElement("li");
    const seed = entry.request.body.seed;
    li.textContent = `${entry.request.kind} (seed ${seed})`;
    historyList.appendChild(li);
  }
}

viewer.onPartClick = (index) => {
  session.toggleSelect(index);
  if (session.shape) {
    viewer.setParts(partEllipsoids(session.shape, session.selection));
  }
  note(`selected parts: [${[...session.selection].join(", ")}]`);
};

async function guarded(label: string, fn: () => Promise<unknown>): Promise<void> {
  setBusy(true);
  note(`${label}...`);
  try {
    session.seedCounter = parseInt(seedInput.value, 10) || session.seedCounter;
    await fn();
    await redraw();
    note(`${label} done`);
  } catch (e) {
    note(`${label} failed: ${e}`, true);
  } finally {
    setBusy(false);
  }
}

el<HTMLButtonElement>("btn-connect").onclick = async () => {
  session = new Session(new ApiClient(serverInput.value),
                        parseInt(seedInput.value, 10) || 1);
  const ok = await session.api.health();
  note(ok ? "connected" : "server unreachable", !ok);
};

el<HTMLButtonElement>("btn-generate").onclick = () =>
  guarded("generate", () => session.generate(textInput.value || undefined));

el<HTMLButtonElement>("btn-generate-b").onclick = () =>
  guarded("generate B", async () => {
    const resp = await session.api.generate({ n: 1, seed: session.nextSeed() });
    session.shapeB = resp.shapes[0];
  });

el<HTMLButtonElement>("btn-complete").onclick = () =>
  guarded("complete selection", () =>
    session.completeSelection(textInput.value || undefined));

el<HTMLButtonElement>("btn-complete-text").onclick = () =>
  guarded("complete by text", async () => {
    const { matched } = await session.completeByText(textInput.value);
    if (!matched) note("no keyword matched a part; nothing regenerated");
  });

el<HTMLButtonElement>("btn-mix").onclick = () =>
  guarded("mix", () => {
    const label = parseInt(el<HTMLSelectElement>("mix-label").value, 10);
    return session.mixFromB(label);
  });

el<HTMLButtonElement>("btn-undo").onclick = () =>
  guarded("undo", async () => void session.undo());

el<HTMLButtonElement>("btn-replay").onclick = () =>
  guarded("replay", async () => {
    const { matches } = await session.replay();
    note(matches ? "replay reproduces the current shape exactly"
                 : "REPLAY MISMATCH", !matches);
  });

const labelSelect = el<HTMLSelectElement>("mix-label");
for (const [id, name] of Object.entries(LABEL_NAMES)) {
  const opt = document.createElement("option");
  opt.value = id;
  opt.textContent = name;
  labelSelect.appendChild(opt);
}

function fit(): void {
  viewer.resize(canvas.clientWidth, canvas.clientHeight);
}
window.addEventListener("resize", fit);
fit();
note("set the server URL and connect");

export { session, sameShape };
