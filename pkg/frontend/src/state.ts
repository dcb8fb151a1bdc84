/** Session state and its reducer.
 *
 * Every transition is a pure function of (state, event); pixel data
 * stays outside (the shell keys decoded images by the ids recorded
 * here), so a session is replayable from an event log.  Requests the
 * shell must perform show up in `state.pending` / `state.snapPending`
 * tagged with sequence numbers; responses carry the same numbers back
 * and anything superseded by a newer drag is discarded.
 */

import { Mat3, apply, translated } from "./mat3.js";
import { Placement, PredictBody, PredictResponse } from "./types.js";

export interface ImageInfo {
  id: string;
  width: number;
  height: number;
  png: string; // base64, forwarded to the service
}

export interface SnapArrow {
  fromX: number;
  fromY: number;
  toX: number;
  toY: number;
}

export interface SnapRun {
  seq: number;
  total: number;
  arrows: SnapArrow[];
  failures: number;
  placements: Placement[]; // grid requests, index-aligned with results
}

export interface SessionState {
  bg: ImageInfo | null;
  fg: ImageInfo | null;
  placement: Placement;
  dragOffset: { dx: number; dy: number };
  drag: { startX: number; startY: number; fromDx: number; fromDy: number } | null;
  resting: number[] | null; // 8-vector warp state after the last correction
  response: PredictResponse | null;
  anim: { pos: number; perStage: number } | null;
  scrub: { stage: number; t: number } | null;
  seq: number;
  inflight: { seq: number; body: PredictBody } | null;
  pending: { seq: number; body: PredictBody } | null;
  lastFailed: PredictBody | null;
  error: string | null;
  snap: SnapRun | null;
  stages: number | null; // stage-count override for requests
}

export type Event =
  | { type: "images-loaded"; bg: ImageInfo; fg: ImageInfo }
  | { type: "load-error"; message: string }
  | { type: "drag-start"; x: number; y: number }
  | { type: "drag-move"; x: number; y: number }
  | { type: "drag-end" }
  | { type: "scale"; factor: number }
  | { type: "sent"; seq: number }
  | { type: "response"; seq: number; body: PredictResponse }
  | { type: "request-error"; seq: number; message: string }
  | { type: "retry" }
  | { type: "tick"; dt: number }
  | { type: "scrub"; stage: number; t: number }
  | { type: "scrub-clear" }
  | { type: "snap-start"; nx: number; ny: number }
  | { type: "snap-result"; seq: number; index: number; body: PredictResponse }
  | { type: "snap-error"; seq: number; index: number }
  | { type: "snap-clear" }
  | { type: "set-stages"; stages: number | null }
  | { type: "reset" };

export const INTERP_STEPS = 12; // per stage transition, for animation
const ANIM_RATE = 2.5; // stage transitions per second

export function initialState(): SessionState {
  return {
    bg: null, fg: null,
    placement: { tx: 0, ty: 0, scale: 1 },
    dragOffset: { dx: 0, dy: 0 },
    drag: null,
    resting: null,
    response: null,
    anim: null,
    scrub: null,
    seq: 0,
    inflight: null,
    pending: null,
    lastFailed: null,
    error: null,
    snap: null,
    stages: null,
  };
}

/** Canonical-frame translation added to a warp state: a pixel offset
 * (dx, dy) on a w x h background is 2dx/w, 2dy/h in canonical units. */
export function addTranslation(
  p: number[], dx: number, dy: number, bgW: number, bgH: number,
): number[] {
  const out = p.slice();
  out[2] += (2 * dx) / bgW;
  out[4] += (2 * dy) / bgH;
  return out;
}

function buildRequest(s: SessionState): PredictBody {
  const body: PredictBody = {
    fg_png: s.fg!.png,
    bg_png: s.bg!.png,
    interp: INTERP_STEPS,
  };
  if (s.stages !== null) body.stages = s.stages;
  if (s.resting === null) {
    body.placement = { ...s.placement };
  } else {
    body.p0 = addTranslation(
      s.resting, s.dragOffset.dx, s.dragOffset.dy,
      s.bg!.width, s.bg!.height,
    );
  }
  return body;
}

function snapPlacements(s: SessionState, nx: number, ny: number): Placement[] {
  // grid of initial centers over the middle of the background
  const out: Placement[] = [];
  const w = s.bg!.width;
  const h = s.bg!.height;
  for (let j = 0; j < ny; j++) {
    for (let i = 0; i < nx; i++) {
      out.push({
        tx: ((i + 0.5) / nx - 0.5) * w * 0.6,
        ty: ((j + 0.5) / ny - 0.5) * h * 0.6,
        scale: s.placement.scale,
      });
    }
  }
  return out;
}

export function reduce(s: SessionState, ev: Event): SessionState {
  switch (ev.type) {
    case "images-loaded":
      return {
        ...initialState(),
        bg: ev.bg, fg: ev.fg,
        stages: s.stages,
      };

    case "load-error":
      return { ...s, error: ev.message };

    case "drag-start": {
      if (!s.bg) return s;
      // a new drag supersedes any in-flight request and animation
      return {
        ...s,
        drag: {
          startX: ev.x, startY: ev.y,
          fromDx: s.dragOffset.dx, fromDy: s.dragOffset.dy,
        },
        anim: null,
        scrub: null,
        seq: s.inflight !== null ? s.seq + 1 : s.seq,
        inflight: null,
        error: null,
      };
    }

    case "drag-move": {
      if (!s.drag) return s;
      const dx = ev.x - s.drag.startX;
      const dy = ev.y - s.drag.startY;
      if (s.resting === null) {
        return {
          ...s,
          placement: {
            ...s.placement,
            tx: s.placement.tx + (ev.x - s.drag.startX) - (s.dragOffset.dx - s.drag.fromDx),
            ty: s.placement.ty + (ev.y - s.drag.startY) - (s.dragOffset.dy - s.drag.fromDy),
          },
          dragOffset: { dx: s.drag.fromDx + dx, dy: s.drag.fromDy + dy },
        };
      }
      return { ...s, dragOffset: { dx: s.drag.fromDx + dx, dy: s.drag.fromDy + dy } };
    }

    case "drag-end": {
      if (!s.drag || !s.bg || !s.fg) return { ...s, drag: null };
      const seq = s.seq + 1;
      const body = buildRequest(s);
      return {
        ...s,
        drag: null,
        seq,
        inflight: { seq, body },
        pending: { seq, body },
      };
    }

    case "scale": {
      if (s.resting !== null) return s; // scale applies to the initial placement only
      const scale = Math.min(4, Math.max(0.1, s.placement.scale * ev.factor));
      return { ...s, placement: { ...s.placement, scale } };
    }

    case "sent":
      return s.pending && s.pending.seq === ev.seq ? { ...s, pending: null } : s;

    case "response": {
      if (!s.inflight || ev.seq !== s.inflight.seq) return s; // stale
      return {
        ...s,
        inflight: null,
        response: ev.body,
        anim: { pos: 0, perStage: INTERP_STEPS },
        scrub: null,
        error: null,
        lastFailed: null,
      };
    }

    case "request-error": {
      if (!s.inflight || ev.seq !== s.inflight.seq) return s;
      // manual placement stays; offer a retry
      return {
        ...s,
        error: ev.message,
        lastFailed: s.inflight.body,
        inflight: null,
      };
    }

    case "retry": {
      if (!s.lastFailed) return s;
      const seq = s.seq + 1;
      return {
        ...s,
        seq,
        inflight: { seq, body: s.lastFailed },
        pending: { seq, body: s.lastFailed },
        error: null,
      };
    }

    case "tick": {
      if (!s.anim || !s.response) return s;
      const seqH = s.response.interp_homographies;
      const steps = seqH
        ? seqH.length - 1
        : (s.response.states.length - 1) * s.anim.perStage;
      const pos = s.anim.pos + ev.dt * ANIM_RATE * s.anim.perStage;
      if (pos >= steps) {
        // animation done: the final state becomes the resting placement
        return {
          ...s,
          anim: null,
          resting: s.response.states[s.response.states.length - 1].slice(),
          dragOffset: { dx: 0, dy: 0 },
        };
      }
      return { ...s, anim: { ...s.anim, pos } };
    }

    case "scrub": {
      if (!s.response) return s;
      const maxStage = s.response.states.length - 1;
      const stage = Math.max(0, Math.min(maxStage, Math.floor(ev.stage)));
      const t = stage === maxStage ? 0 : Math.max(0, Math.min(1, ev.t));
      return { ...s, scrub: { stage, t }, anim: null };
    }

    case "scrub-clear":
      return { ...s, scrub: null };

    case "snap-start": {
      if (!s.bg || !s.fg) return s;
      const placements = snapPlacements(s, ev.nx, ev.ny);
      const seq = s.seq + 1;
      return {
        ...s,
        seq,
        snap: { seq, total: placements.length, arrows: [], failures: 0, placements },
      };
    }

    case "snap-result": {
      if (!s.snap || ev.seq !== s.snap.seq || !s.bg) return s;
      const placement = s.snap.placements[ev.index];
      if (!placement) return s;
      const H = ev.body.homographies;
      const h0 = H[0] as Mat3;
      const hN = H[H.length - 1] as Mat3;
      const cx = (s.bg.width - 1) / 2;
      const cy = (s.bg.height - 1) / 2;
      const from = apply(h0, { x: cx, y: cy });
      const to = apply(hN, { x: cx, y: cy });
      const arrow = { fromX: from.x, fromY: from.y, toX: to.x, toY: to.y };
      return { ...s, snap: { ...s.snap, arrows: [...s.snap.arrows, arrow] } };
    }

    case "snap-error": {
      if (!s.snap || ev.seq !== s.snap.seq) return s;
      return { ...s, snap: { ...s.snap, failures: s.snap.failures + 1 } };
    }

    case "snap-clear":
      return { ...s, snap: null };

    case "set-stages":
      return { ...s, stages: ev.stages };

    case "reset":
      return { ...initialState(), bg: s.bg, fg: s.fg };

    default:
      return s;
  }
}

/** Homography to draw the foreground with right now, or null when the
 * initial manual placement should be drawn instead (no response yet). */
export function currentHomography(s: SessionState): Mat3 | null {
  if (!s.response) return null;
  const hs = s.response.homographies;
  if (s.scrub) {
    const seqH = s.response.interp_homographies;
    if (seqH && INTERP_STEPS === (seqH.length - 1) / (s.response.states.length - 1)) {
      const idx = s.scrub.stage * INTERP_STEPS
        + Math.round(s.scrub.t * INTERP_STEPS);
      return seqH[Math.min(idx, seqH.length - 1)] as Mat3;
    }
    return hs[s.scrub.stage] as Mat3;
  }
  if (s.anim) {
    const seqH = s.response.interp_homographies;
    if (seqH) {
      return seqH[Math.min(Math.round(s.anim.pos), seqH.length - 1)] as Mat3;
    }
    const idx = Math.min(
      Math.round(s.anim.pos / s.anim.perStage), hs.length - 1);
    return hs[idx] as Mat3;
  }
  const h = hs[hs.length - 1] as Mat3;
  return translated(h, s.dragOffset.dx, s.dragOffset.dy);
}
