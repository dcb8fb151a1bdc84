import { describe, it, expect } from "vitest";
import { mul, inv, apply, translated, IDENTITY, Mat3 } from "../src/mat3.js";

describe("mat3", () => {
  it("multiplies against identity", () => {
    const m: Mat3 = [2, 1, 3, 0, 1, -2, 0.1, 0, 1];
    expect(mul(m, IDENTITY)).toEqual(m);
    expect(mul(IDENTITY, m)).toEqual(m);
  });

  it("inverts a projective matrix", () => {
    const m: Mat3 = [1.2, 0.1, 5, -0.2, 0.9, -3, 0.001, -0.002, 1];
    const prod = mul(m, inv(m));
    for (let i = 0; i < 9; i++) {
      expect(prod[i]).toBeCloseTo(IDENTITY[i], 10);
    }
  });

  it("throws on a singular matrix", () => {
    expect(() => inv([1, 2, 3, 2, 4, 6, 0, 0, 0])).toThrow(/singular/);
  });

  it("applies with projective divide", () => {
    // x' = (x + 1) / (0.5 x + 1)
    const m: Mat3 = [1, 0, 1, 0, 1, 0, 0.5, 0, 1];
    const p = apply(m, { x: 2, y: 3 });
    expect(p.x).toBeCloseTo(3 / 2, 12);
    expect(p.y).toBeCloseTo(3 / 2, 12);
  });

  it("translated prepends a pixel shift", () => {
    const m: Mat3 = [2, 0, 1, 0, 2, -1, 0, 0, 1];
    const t = translated(m, 3, -4);
    const a = apply(m, { x: 1, y: 1 });
    const b = apply(t, { x: 1, y: 1 });
    expect(b.x).toBeCloseTo(a.x + 3, 12);
    expect(b.y).toBeCloseTo(a.y - 4, 12);
  });
});
