/** Canvas rendering.
 *
 * The warped foreground is drawn as a triangulated quad: the same mesh
 * the software rasterizer uses, pushed through ctx.transform with a
 * per-triangle affine clip.  The projective divide happens at the mesh
 * vertices only, so subdivision controls how closely the piecewise
 * affine drawing tracks the true homography.
 */

import { Mat3 } from "./mat3.js";
import { buildMesh, Tri } from "./mesh.js";

export const SUBDIVISIONS = 8;

export interface Layers {
  bg: HTMLCanvasElement | ImageBitmap;
  fg: HTMLCanvasElement | ImageBitmap;
}

function drawTri(
  ctx: CanvasRenderingContext2D, fg: Layers["fg"], tri: Tri,
) {
  const [x0, y0, x1, y1, x2, y2] = tri.dst;
  // dst -> src affine [a b c; d e f]; canvas wants src -> dst
  const [a, b, c, d, e, f] = tri.toSrc;
  const det = a * e - b * d;
  if (Math.abs(det) < 1e-12) return;
  const ia = e / det, ib = -b / det;
  const id = -d / det, ie = a / det;
  const ic = -(ia * c + ib * f);
  const if_ = -(id * c + ie * f);

  ctx.save();
  ctx.beginPath();
  ctx.moveTo(x0, y0);
  ctx.lineTo(x1, y1);
  ctx.lineTo(x2, y2);
  ctx.closePath();
  ctx.clip();
  // expand the clip path slightly via overdraw: the neighbouring
  // triangle repaints the shared edge so hairline seams stay invisible
  ctx.transform(ia, id, ib, ie, ic, if_);
  ctx.drawImage(fg, 0, 0);
  ctx.restore();
}

export function render(
  ctx: CanvasRenderingContext2D,
  layers: Layers,
  h: Mat3,
  bgW: number, bgH: number, fgW: number, fgH: number,
) {
  ctx.clearRect(0, 0, bgW, bgH);
  ctx.drawImage(layers.bg, 0, 0);
  let tris: Tri[];
  try {
    tris = buildMesh(h, bgW, bgH, fgW, fgH, SUBDIVISIONS);
  } catch {
    return; // singular homography, draw the background alone
  }
  for (const tri of tris) drawTri(ctx, layers.fg, tri);
}

/** Draw the initial manual placement (pure similarity, no server state). */
export function placementHomography(
  tx: number, ty: number, scale: number, bgW: number, bgH: number,
): Mat3 {
  // scale about the background center, then translate by (tx, ty) px
  const cx = (bgW - 1) / 2;
  const cy = (bgH - 1) / 2;
  return [
    scale, 0, cx * (1 - scale) + tx,
    0, scale, cy * (1 - scale) + ty,
    0, 0, 1,
  ];
}

export function drawArrow(
  ctx: CanvasRenderingContext2D,
  fromX: number, fromY: number, toX: number, toY: number,
) {
  const dx = toX - fromX;
  const dy = toY - fromY;
  const len = Math.hypot(dx, dy);
  ctx.beginPath();
  ctx.moveTo(fromX, fromY);
  ctx.lineTo(toX, toY);
  ctx.stroke();
  if (len < 1e-6) return;
  const ux = dx / len, uy = dy / len;
  const headLen = Math.min(8, len * 0.4);
  ctx.beginPath();
  ctx.moveTo(toX, toY);
  ctx.lineTo(toX - headLen * (ux + 0.4 * uy), toY - headLen * (uy - 0.4 * ux));
  ctx.lineTo(toX - headLen * (ux - 0.4 * uy), toY - headLen * (uy + 0.4 * ux));
  ctx.closePath();
  ctx.fill();
}
