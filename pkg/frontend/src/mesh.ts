/** Triangulated-quad approximation of a projective warp.
 *
 * The foreground is identified with the background extent: its pixel
 * rectangle is stretched over the background's outer pixel edges
 * [-0.5, W-0.5] x [-0.5, H-0.5], subdivided into an n x n grid, and
 * each grid point is mapped through the homography exactly.  Every
 * cell then splits into two triangles rendered with per-triangle
 * affine maps; the per-cell error of the affine approximation shrinks
 * quadratically with n.
 */

import { Mat3, apply } from "./mat3.js";

export interface Tri {
  // destination triangle, background pixel coords
  dst: [number, number, number, number, number, number];
  // affine dst -> source fg pixel coords: [a, b, c, d, e, f] with
  // sx = a*x + b*y + c, sy = d*x + e*y + f
  toSrc: [number, number, number, number, number, number];
}

function affineFromTris(
  sx: number[], sy: number[], dx: number[], dy: number[],
): [number, number, number, number, number, number] | null {
  // solve the 3-point correspondence dst -> src
  const det =
    dx[0] * (dy[1] - dy[2]) - dy[0] * (dx[1] - dx[2]) +
    (dx[1] * dy[2] - dx[2] * dy[1]);
  if (Math.abs(det) < 1e-9) return null; // degenerate destination
  const s = 1 / det;
  const a = (sx[0] * (dy[1] - dy[2]) + sx[1] * (dy[2] - dy[0]) + sx[2] * (dy[0] - dy[1])) * s;
  const b = (sx[0] * (dx[2] - dx[1]) + sx[1] * (dx[0] - dx[2]) + sx[2] * (dx[1] - dx[0])) * s;
  const c = sx[0] - a * dx[0] - b * dy[0];
  const d = (sy[0] * (dy[1] - dy[2]) + sy[1] * (dy[2] - dy[0]) + sy[2] * (dy[0] - dy[1])) * s;
  const e = (sy[0] * (dx[2] - dx[1]) + sy[1] * (dx[0] - dx[2]) + sy[2] * (dx[1] - dx[0])) * s;
  const f = sy[0] - d * dx[0] - e * dy[0];
  return [a, b, c, d, e, f];
}

export function buildMesh(
  h: Mat3,
  bgW: number, bgH: number,
  fgW: number, fgH: number,
  n: number = 8,
): Tri[] {
  if (n < 2) n = 2; // contract: at least 2x2 subdivision
  const xs: number[][] = [];
  const ys: number[][] = [];
  const us: number[][] = [];
  const vs: number[][] = [];
  for (let j = 0; j <= n; j++) {
    xs.push([]); ys.push([]); us.push([]); vs.push([]);
    for (let i = 0; i <= n; i++) {
      // grid point on the bg extent, outer-edge pinned
      const gx = -0.5 + (i / n) * bgW;
      const gy = -0.5 + (j / n) * bgH;
      const p = apply(h, { x: gx, y: gy });
      xs[j].push(p.x);
      ys[j].push(p.y);
      // matching source position in fg pixel coords
      us[j].push((gx + 0.5) * (fgW / bgW) - 0.5);
      vs[j].push((gy + 0.5) * (fgH / bgH) - 0.5);
    }
  }
  const tris: Tri[] = [];
  for (let j = 0; j < n; j++) {
    for (let i = 0; i < n; i++) {
      const corners = [
        [i, j], [i + 1, j], [i + 1, j + 1], [i, j + 1],
      ];
      for (const order of [[0, 1, 2], [0, 2, 3]]) {
        const sx: number[] = [], sy: number[] = [];
        const dx: number[] = [], dy: number[] = [];
        for (const k of order) {
          const [ci, cj] = corners[k];
          sx.push(us[cj][ci]); sy.push(vs[cj][ci]);
          dx.push(xs[cj][ci]); dy.push(ys[cj][ci]);
        }
        const aff = affineFromTris(sx, sy, dx, dy);
        if (aff) {
          tris.push({
            dst: [dx[0], dy[0], dx[1], dy[1], dx[2], dy[2]],
            toSrc: aff,
          });
        }
      }
    }
  }
  return tris;
}
