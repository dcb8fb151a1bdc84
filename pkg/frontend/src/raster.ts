/** Software compositor mirroring the canvas triangulated-quad path.
 *
 * Used by the tests to verify the client's rendering against server
 * previews, and as the reference for what the canvas renderer draws.
 * Sampling matches the service: bilinear with zero outside the source
 * raster, color and mask sampled with one shared grid, then a single
 * alpha-over pass.
 */

import { Mat3 } from "./mat3.js";
import { Tri, buildMesh } from "./mesh.js";

export interface Rgba {
  width: number;
  height: number;
  data: Float32Array; // h*w*4, [0, 1]
}

export interface Rgb {
  width: number;
  height: number;
  data: Float32Array; // h*w*3, [0, 1]
}

function bilinear(
  img: Float32Array, w: number, h: number, stride: number, ch: number,
  x: number, y: number,
): number {
  const x0 = Math.floor(x);
  const y0 = Math.floor(y);
  const fx = x - x0;
  const fy = y - y0;
  let acc = 0;
  for (let dy = 0; dy <= 1; dy++) {
    const yy = y0 + dy;
    if (yy < 0 || yy >= h) continue;
    const wy = dy ? fy : 1 - fy;
    for (let dx = 0; dx <= 1; dx++) {
      const xx = x0 + dx;
      if (xx < 0 || xx >= w) continue;
      const wx = dx ? fx : 1 - fx;
      acc += img[(yy * w + xx) * stride + ch] * wx * wy;
    }
  }
  return acc;
}

/** Render the warped foreground into color + mask buffers (overwrite,
 * no blending), one triangle at a time. */
export function rasterizeLayer(
  fg: Rgba, tris: Tri[], outW: number, outH: number,
): { color: Float32Array; mask: Float32Array } {
  const color = new Float32Array(outW * outH * 3);
  const mask = new Float32Array(outW * outH);
  for (const t of tris) {
    const [x0, y0, x1, y1, x2, y2] = t.dst;
    const minX = Math.max(0, Math.ceil(Math.min(x0, x1, x2) - 1e-9));
    const maxX = Math.min(outW - 1, Math.floor(Math.max(x0, x1, x2) + 1e-9));
    const minY = Math.max(0, Math.ceil(Math.min(y0, y1, y2) - 1e-9));
    const maxY = Math.min(outH - 1, Math.floor(Math.max(y0, y1, y2) + 1e-9));
    const d = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2);
    if (Math.abs(d) < 1e-12) continue;
    const [a, b, c, e, f, g] = t.toSrc;
    for (let py = minY; py <= maxY; py++) {
      for (let px = minX; px <= maxX; px++) {
        // barycentric inside test, edge-inclusive; adjacent triangles
        // agree along shared edges so overwrites are harmless
        const l0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / d;
        const l1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / d;
        const l2 = 1 - l0 - l1;
        if (l0 < -1e-7 || l1 < -1e-7 || l2 < -1e-7) continue;
        const sx = a * px + b * py + c;
        const sy = e * px + f * py + g;
        const o = py * outW + px;
        color[o * 3] = bilinear(fg.data, fg.width, fg.height, 4, 0, sx, sy);
        color[o * 3 + 1] = bilinear(fg.data, fg.width, fg.height, 4, 1, sx, sy);
        color[o * 3 + 2] = bilinear(fg.data, fg.width, fg.height, 4, 2, sx, sy);
        mask[o] = bilinear(fg.data, fg.width, fg.height, 4, 3, sx, sy);
      }
    }
  }
  return { color, mask };
}

/** Full client-side composite of fg over bg through a homography. */
export function compositeThrough(
  fg: Rgba, bg: Rgb, h: Mat3, subdivisions: number = 8,
): Rgb {
  const tris = buildMesh(h, bg.width, bg.height, fg.width, fg.height,
                         subdivisions);
  const { color, mask } = rasterizeLayer(fg, tris, bg.width, bg.height);
  const out = new Float32Array(bg.data.length);
  for (let i = 0; i < bg.width * bg.height; i++) {
    const m = mask[i];
    for (let ch = 0; ch < 3; ch++) {
      out[i * 3 + ch] = color[i * 3 + ch] * m + bg.data[i * 3 + ch] * (1 - m);
    }
  }
  return { width: bg.width, height: bg.height, data: out };
}

export function meanAbsDiff(
  a: { data: Float32Array }, b: { data: Float32Array },
): number {
  if (a.data.length !== b.data.length) throw new Error("size mismatch");
  let s = 0;
  for (let i = 0; i < a.data.length; i++) s += Math.abs(a.data[i] - b.data[i]);
  return s / a.data.length;
}
