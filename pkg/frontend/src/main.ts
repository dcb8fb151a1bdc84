/** Browser shell: owns the DOM, image decoding, and network effects.
 *
 * All decisions live in the reducer; this file only feeds it events
 * and acts on `pending` requests.  Pixel data is held here, keyed by
 * the image ids in the state.
 */

import { initialState, reduce, currentHomography, SessionState, Event, ImageInfo, INTERP_STEPS } from "./state.js";
import { predict, modelInfo } from "./api.js";
import { render, placementHomography, drawArrow } from "./render.js";
import { Mat3 } from "./mat3.js";

const BASE = ""; // same origin as /ui

interface Decoded { bitmap: ImageBitmap; info: ImageInfo }

let state: SessionState = initialState();
const bitmaps = new Map<string, ImageBitmap>();
const eventLog: Event[] = [];

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const statusEl = document.getElementById("status")!;
const retryBtn = document.getElementById("retry") as HTMLButtonElement;
const snapBtn = document.getElementById("snap") as HTMLButtonElement;
const scrubEl = document.getElementById("scrub") as HTMLInputElement;
const scrubRow = document.getElementById("scrub-row")!;
const bgInput = document.getElementById("bg-file") as HTMLInputElement;
const fgInput = document.getElementById("fg-file") as HTMLInputElement;

function dispatch(ev: Event) {
  eventLog.push(ev);
  const next = reduce(state, ev);
  const changed = next !== state;
  state = next;
  if (changed) {
    runEffects();
    draw();
    syncControls();
  }
}

async function decodeFile(file: File, id: string): Promise<Decoded> {
  const buf = await file.arrayBuffer();
  const bytes = new Uint8Array(buf);
  let bin = "";
  const CHUNK = 0x8000;
  for (let i = 0; i < bytes.length; i += CHUNK) {
    bin += String.fromCharCode(...bytes.subarray(i, i + CHUNK));
  }
  const png = btoa(bin);
  const bitmap = await createImageBitmap(new Blob([buf], { type: "image/png" }));
  return { bitmap, info: { id, width: bitmap.width, height: bitmap.height, png } };
}

async function onFilesChanged() {
  const bgFile = bgInput.files?.[0];
  const fgFile = fgInput.files?.[0];
  if (!bgFile || !fgFile) return;
  try {
    const [bg, fg] = await Promise.all([
      decodeFile(bgFile, `bg:${bgFile.name}:${bgFile.size}`),
      decodeFile(fgFile, `fg:${fgFile.name}:${fgFile.size}`),
    ]);
    bitmaps.set(bg.info.id, bg.bitmap);
    bitmaps.set(fg.info.id, fg.bitmap);
    canvas.width = bg.info.width;
    canvas.height = bg.info.height;
    dispatch({ type: "images-loaded", bg: bg.info, fg: fg.info });
  } catch (e) {
    dispatch({ type: "load-error", message: `could not decode images: ${e}` });
  }
}

function runEffects() {
  if (state.pending) {
    const { seq, body } = state.pending;
    dispatch({ type: "sent", seq });
    predict(BASE, body)
      .then((resp) => dispatch({ type: "response", seq, body: resp }))
      .catch((e) => dispatch({ type: "request-error", seq, message: String(e) }));
  }
  if (state.snap && state.snap.arrows.length + state.snap.failures
      < state.snap.total) {
    maybeRunSnap();
  }
}

let snapBusy = false;
async function maybeRunSnap() {
  if (snapBusy) return; // one snap request in flight at a time
  snapBusy = true;
  try {
    while (state.snap) {
      const snap = state.snap;
      const index = snap.arrows.length + snap.failures;
      if (index >= snap.total) break;
      const body = {
        fg_png: state.fg!.png,
        bg_png: state.bg!.png,
        placement: snap.placements[index],
      };
      try {
        const resp = await predict(BASE, body);
        dispatch({ type: "snap-result", seq: snap.seq, index, body: resp });
      } catch {
        dispatch({ type: "snap-error", seq: snap.seq, index });
      }
      if (!state.snap || state.snap.seq !== snap.seq) break;
    }
  } finally {
    snapBusy = false;
  }
}

function draw() {
  if (!state.bg || !state.fg) return;
  const bgBmp = bitmaps.get(state.bg.id);
  const fgBmp = bitmaps.get(state.fg.id);
  if (!bgBmp || !fgBmp) return;
  const { width: bw, height: bh } = state.bg;
  const { width: fw, height: fh } = state.fg;

  let h: Mat3 | null = currentHomography(state);
  if (h === null) {
    // no correction yet: the manual placement tracks the pointer directly
    const p = state.placement;
    h = placementHomography(p.tx, p.ty, p.scale, bw, bh);
  }
  render(ctx, { bg: bgBmp, fg: fgBmp }, h, bw, bh, fw, fh);

  if (state.snap) {
    ctx.save();
    ctx.strokeStyle = "rgba(255, 80, 40, 0.9)";
    ctx.fillStyle = "rgba(255, 80, 40, 0.9)";
    ctx.lineWidth = Math.max(1, bw / 300);
    for (const a of state.snap.arrows) {
      drawArrow(ctx, a.fromX, a.fromY, a.toX, a.toY);
    }
    ctx.restore();
  }
}

function syncControls() {
  retryBtn.hidden = !state.lastFailed || state.inflight !== null;
  const parts: string[] = [];
  if (state.error) parts.push(state.error);
  if (state.inflight !== null) parts.push("predicting…");
  if (state.snap) {
    const done = state.snap.arrows.length + state.snap.failures;
    parts.push(`snap ${done}/${state.snap.total}`
      + (state.snap.failures ? ` (${state.snap.failures} failed)` : ""));
  }
  statusEl.textContent = parts.join("  |  ");
  statusEl.classList.toggle("error", !!state.error);

  const haveResp = !!state.response && !state.anim;
  scrubRow.hidden = !haveResp;
  if (haveResp && state.response) {
    const maxIdx = (state.response.states.length - 1) * INTERP_STEPS;
    scrubEl.max = String(maxIdx);
    if (!state.scrub) scrubEl.value = String(maxIdx);
  }
}

// pointer handling: canvas CSS size may differ from its pixel size
function canvasPoint(e: PointerEvent): { x: number; y: number } {
  const r = canvas.getBoundingClientRect();
  return {
    x: (e.clientX - r.left) * (canvas.width / r.width),
    y: (e.clientY - r.top) * (canvas.height / r.height),
  };
}

canvas.addEventListener("pointerdown", (e) => {
  canvas.setPointerCapture(e.pointerId);
  const p = canvasPoint(e);
  dispatch({ type: "drag-start", x: p.x, y: p.y });
});
canvas.addEventListener("pointermove", (e) => {
  if (!state.drag) return;
  const p = canvasPoint(e);
  dispatch({ type: "drag-move", x: p.x, y: p.y });
});
canvas.addEventListener("pointerup", () => dispatch({ type: "drag-end" }));
canvas.addEventListener("wheel", (e) => {
  e.preventDefault();
  dispatch({ type: "scale", factor: e.deltaY < 0 ? 1.05 : 1 / 1.05 });
}, { passive: false });

retryBtn.addEventListener("click", () => dispatch({ type: "retry" }));
snapBtn.addEventListener("click", () => {
  if (state.snap) dispatch({ type: "snap-clear" });
  else dispatch({ type: "snap-start", nx: 4, ny: 3 });
});
scrubEl.addEventListener("input", () => {
  const v = Number(scrubEl.value);
  dispatch({
    type: "scrub",
    stage: Math.floor(v / INTERP_STEPS),
    t: (v % INTERP_STEPS) / INTERP_STEPS,
  });
});
bgInput.addEventListener("change", onFilesChanged);
fgInput.addEventListener("change", onFilesChanged);

let last = performance.now();
function frame(now: number) {
  const dt = Math.min(0.1, (now - last) / 1000);
  last = now;
  if (state.anim) dispatch({ type: "tick", dt });
  requestAnimationFrame(frame);
}
requestAnimationFrame(frame);

modelInfo(BASE)
  .then((m) => {
    const el = document.getElementById("model-info")!;
    el.textContent = `model: ${m.kind} (${m.n_stages} stages)`;
  })
  .catch(() => { /* info is cosmetic; the UI works without it */ });

// expose for the event-log replay check in devtools
(window as unknown as Record<string, unknown>).__warpganEvents = eventLog;
