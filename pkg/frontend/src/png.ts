/** Minimal PNG decode for tests and the e2e driver (the browser UI
 * decodes through Image elements instead).  Handles the subset the
 * service emits: 8-bit RGB / RGBA, non-interlaced.  The zlib inflate
 * is injected so this module stays runtime-neutral.
 */

export type Inflate = (data: Uint8Array) => Uint8Array;

const SIGNATURE = [137, 80, 78, 71, 13, 10, 26, 10];

function u32(b: Uint8Array, o: number): number {
  return ((b[o] << 24) | (b[o + 1] << 16) | (b[o + 2] << 8) | b[o + 3]) >>> 0;
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

export interface DecodedPng {
  width: number;
  height: number;
  channels: 3 | 4;
  data: Uint8Array; // h*w*channels
}

export function decodePng(bytes: Uint8Array, inflate: Inflate): DecodedPng {
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new Error("not a PNG");
  }
  let width = 0, height = 0, bitDepth = 0, colorType = -1, interlace = 0;
  const idat: Uint8Array[] = [];
  let o = 8;
  while (o + 8 <= bytes.length) {
    const len = u32(bytes, o);
    const type = String.fromCharCode(bytes[o + 4], bytes[o + 5], bytes[o + 6], bytes[o + 7]);
    const body = bytes.subarray(o + 8, o + 8 + len);
    if (type === "IHDR") {
      width = u32(body, 0);
      height = u32(body, 4);
      bitDepth = body[8];
      colorType = body[9];
      interlace = body[12];
    } else if (type === "IDAT") {
      idat.push(body);
    } else if (type === "IEND") {
      break;
    }
    o += 12 + len; // length + type + body + crc
  }
  if (bitDepth !== 8) throw new Error(`unsupported bit depth ${bitDepth}`);
  if (colorType !== 2 && colorType !== 6) {
    throw new Error(`unsupported color type ${colorType}`);
  }
  if (interlace !== 0) throw new Error("interlaced PNG not supported");
  const channels = colorType === 2 ? 3 : 4;

  const zipped = new Uint8Array(idat.reduce((s, c) => s + c.length, 0));
  let zo = 0;
  for (const c of idat) { zipped.set(c, zo); zo += c.length; }
  const raw = inflate(zipped);

  const rowBytes = width * channels;
  const out = new Uint8Array(height * rowBytes);
  let ro = 0;
  for (let y = 0; y < height; y++) {
    const filter = raw[ro++];
    const row = out.subarray(y * rowBytes, (y + 1) * rowBytes);
    const prev = y > 0 ? out.subarray((y - 1) * rowBytes, y * rowBytes) : null;
    for (let x = 0; x < rowBytes; x++) {
      const rv = raw[ro + x];
      const left = x >= channels ? row[x - channels] : 0;
      const up = prev ? prev[x] : 0;
      const ul = prev && x >= channels ? prev[x - channels] : 0;
      let v: number;
      switch (filter) {
        case 0: v = rv; break;
        case 1: v = rv + left; break;
        case 2: v = rv + up; break;
        case 3: v = rv + ((left + up) >> 1); break;
        case 4: v = rv + paeth(left, up, ul); break;
        default: throw new Error(`bad filter ${filter}`);
      }
      row[x] = v & 0xff;
    }
    ro += rowBytes;
  }
  return { width, height, channels, data: out };
}

export function toFloat(png: DecodedPng): Float32Array {
  const f = new Float32Array(png.data.length);
  for (let i = 0; i < png.data.length; i++) f[i] = png.data[i] / 255;
  return f;
}
