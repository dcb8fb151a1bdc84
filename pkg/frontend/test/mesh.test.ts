import { describe, it, expect } from "vitest";
import { buildMesh } from "../src/mesh.js";
import { apply, Mat3 } from "../src/mat3.js";

const H: Mat3 = [0.9, 0.05, 4, -0.02, 0.85, 2, 0.001, -0.0005, 1];

describe("buildMesh", () => {
  it("vertices land exactly on the homography image", () => {
    const tris = buildMesh(H, 32, 32, 32, 32, 4);
    expect(tris.length).toBe(4 * 4 * 2);
    for (const tri of tris) {
      for (let k = 0; k < 3; k++) {
        const dx = tri.dst[2 * k];
        const dy = tri.dst[2 * k + 1];
        // invert through the per-triangle affine, then forward through H
        const [a, b, c, d, e, f] = tri.toSrc;
        const sx = a * dx + b * dy + c;
        const sy = d * dx + e * dy + f;
        // src grid is in fg pixels over the same extent as the bg grid
        const roundTrip = apply(H, { x: sx, y: sy });
        expect(roundTrip.x).toBeCloseTo(dx, 8);
        expect(roundTrip.y).toBeCloseTo(dy, 8);
      }
    }
  });

  it("covers the outer pixel edges of the source", () => {
    const tris = buildMesh(
      [1, 0, 0, 0, 1, 0, 0, 0, 1], 10, 10, 10, 10, 2);
    const xs = tris.flatMap((t) => [t.dst[0], t.dst[2], t.dst[4]]);
    expect(Math.min(...xs)).toBeCloseTo(-0.5, 12);
    expect(Math.max(...xs)).toBeCloseTo(9.5, 12);
  });

  it("maps a smaller foreground onto the background extent", () => {
    const tris = buildMesh(
      [1, 0, 0, 0, 1, 0, 0, 0, 1], 40, 40, 20, 20, 2);
    // dst corner (-0.5,-0.5) comes from fg corner (-0.5,-0.5)
    const corner = tris[0];
    const [a, b, c, d, e, f] = corner.toSrc;
    const sx = a * corner.dst[0] + b * corner.dst[1] + c;
    const sy = d * corner.dst[0] + e * corner.dst[1] + f;
    expect(sx).toBeCloseTo(-0.5, 10);
    expect(sy).toBeCloseTo(-0.5, 10);
    // dst center maps to fg center
    let mid = { sx: 0, sy: 0 };
    for (const t of tris) {
      const [ta, tb, tc, td, te, tf] = t.toSrc;
      const x = 19.5, y = 19.5; // bg center on the grid (n=2)
      if (t.dst.some((v, i) => i % 2 === 0 && Math.abs(v - x) < 1e-9)) {
        mid = { sx: ta * x + tb * y + tc, sy: td * x + te * y + tf };
      }
    }
    expect(mid.sx).toBeCloseTo(9.5, 10);
    expect(mid.sy).toBeCloseTo(9.5, 10);
  });

  it("enforces a minimum subdivision", () => {
    const tris = buildMesh(H, 8, 8, 8, 8, 0);
    expect(tris.length).toBeGreaterThanOrEqual(2 * 2 * 2);
  });
});
