/** Color-region detector: connected components of similar color.
 *
 * Stands in for a learned open-vocabulary detector. Pixels are
 * quantized to a coarse color bucket (dark pixels are background);
 * 4-connected components of one bucket become detections scored by
 * area, so tiny specks fall below any sensible threshold.
 */

import type { ImageRGB } from "./types.js";

export interface Detection {
  /** Inclusive-exclusive pixel bbox [u0, v0, u1, v1]. */
  bbox: [number, number, number, number];
  score: number;
  /** Sorted row-major flat pixel indices of the component. */
  pixels: Int32Array;
  meanColor: [number, number, number];
}

const BACKGROUND_LUMA = 90; // r+g+b below this is background
const MIN_AREA = 20;

function bucketOf(data: Uint8Array, p: number): number {
  const r = data[p * 3];
  const g = data[p * 3 + 1];
  const b = data[p * 3 + 2];
  if (r + g + b < BACKGROUND_LUMA) return -1;
  return ((r >> 4) << 8) | ((g >> 4) << 4) | (b >> 4);
}

export function detectRegions(image: ImageRGB): Detection[] {
  const { width, height, data } = image;
  const n = width * height;
  const visited = new Uint8Array(n);
  const out: Detection[] = [];
  const stack: number[] = [];

  for (let seed = 0; seed < n; seed++) {
    if (visited[seed]) continue;
    visited[seed] = 1;
    const bucket = bucketOf(data, seed);
    if (bucket < 0) continue;

    const pixels: number[] = [];
    stack.push(seed);
    let u0 = width;
    let v0 = height;
    let u1 = 0;
    let v1 = 0;
    let sr = 0;
    let sg = 0;
    let sb = 0;
    while (stack.length > 0) {
      const p = stack.pop()!;
      pixels.push(p);
      const u = p % width;
      const v = (p - u) / width;
      if (u < u0) u0 = u;
      if (v < v0) v0 = v;
      if (u + 1 > u1) u1 = u + 1;
      if (v + 1 > v1) v1 = v + 1;
      sr += data[p * 3];
      sg += data[p * 3 + 1];
      sb += data[p * 3 + 2];
      const neighbors = [
        u > 0 ? p - 1 : -1,
        u + 1 < width ? p + 1 : -1,
        v > 0 ? p - width : -1,
        v + 1 < height ? p + width : -1,
      ];
      for (const q of neighbors) {
        if (q >= 0 && !visited[q] && bucketOf(data, q) === bucket) {
          visited[q] = 1;
          stack.push(q);
        }
      }
    }
    if (pixels.length < MIN_AREA) continue;
    pixels.sort((a, b) => a - b);
    const area = pixels.length;
    out.push({
      bbox: [u0, v0, u1, v1],
      score: Math.min(1, Math.sqrt(area) / 40),
      pixels: Int32Array.from(pixels),
      meanColor: [sr / area, sg / area, sb / area],
    });
  }
  // deterministic order: best first, ties by first pixel
  out.sort((a, b) => b.score - a.score || a.pixels[0] - b.pixels[0]);
  return out;
}

export interface Detector {
  detect(image: ImageRGB): Detection[];
}

export function makeDetector(spec: string): Detector {
  if (spec !== "color-region") {
    throw new Error(`unknown detector model '${spec}'`);
  }
  return { detect: detectRegions };
}
