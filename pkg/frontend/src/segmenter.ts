/** Box-prompted segmentation + template captioning.
 *
 * Stands in for a promptable segmenter-captioner: each detection box is
 * re-segmented by flood fill from the detection's pixels, keeping
 * neighbors whose color stays within a per-channel tolerance of the
 * component mean, clipped to the box. Captions are templated from the
 * region's nearest named color and its bbox aspect ratio.
 */

import type { Detection } from "./detector.js";
import type { ImageRGB } from "./types.js";

const COLOR_NAMES: Array<[string, [number, number, number]]> = [
  ["red", [220, 50, 50]],
  ["green", [60, 190, 70]],
  ["blue", [60, 90, 220]],
  ["yellow", [230, 220, 60]],
  ["cyan", [70, 210, 210]],
  ["magenta", [210, 70, 210]],
  ["orange", [235, 150, 50]],
  ["purple", [140, 70, 200]],
  ["white", [240, 240, 240]],
  ["gray", [128, 128, 128]],
  ["brown", [150, 100, 60]],
];

export interface Segment {
  pixels: Int32Array;
  caption: string;
}

export function nearestColorName(color: [number, number, number]): string {
  let best = COLOR_NAMES[0][0];
  let bestDist = Infinity;
  for (const [name, ref] of COLOR_NAMES) {
    const d = (color[0] - ref[0]) ** 2 + (color[1] - ref[1]) ** 2 + (color[2] - ref[2]) ** 2;
    if (d < bestDist) {
      bestDist = d;
      best = name;
    }
  }
  return best;
}

function shapeWord(bbox: [number, number, number, number]): string {
  const w = bbox[2] - bbox[0];
  const h = bbox[3] - bbox[1];
  const aspect = w / h;
  if (aspect > 1.6) return "slab";
  if (aspect < 0.625) return "pillar";
  return "box";
}

export function segmentDetection(image: ImageRGB, det: Detection, tolerance = 60): Segment {
  const { width, data } = image;
  const [u0, v0, u1, v1] = det.bbox;
  const [mr, mg, mb] = det.meanColor;
  const inTolerance = (p: number) =>
    Math.abs(data[p * 3] - mr) <= tolerance &&
    Math.abs(data[p * 3 + 1] - mg) <= tolerance &&
    Math.abs(data[p * 3 + 2] - mb) <= tolerance;

  const keep: number[] = [];
  const visited = new Set<number>();
  const stack = Array.from(det.pixels);
  for (const p of stack) visited.add(p);
  while (stack.length > 0) {
    const p = stack.pop()!;
    const u = p % width;
    const v = (p - u) / width;
    if (u < u0 || u >= u1 || v < v0 || v >= v1 || !inTolerance(p)) continue;
    keep.push(p);
    for (const q of [p - 1, p + 1, p - width, p + width]) {
      if (q >= 0 && !visited.has(q)) {
        visited.add(q);
        stack.push(q);
      }
    }
  }
  keep.sort((a, b) => a - b);
  const caption = `a ${nearestColorName(det.meanColor)} ${shapeWord(det.bbox)}`;
  return { pixels: Int32Array.from(keep), caption };
}

export interface Segmenter {
  segment(image: ImageRGB, det: Detection): Segment;
}

export function makeSegmenter(spec: string): Segmenter {
  if (spec !== "flood-fill") {
    throw new Error(`unknown segmenter model '${spec}'`);
  }
  return { segment: (image, det) => segmentDetection(image, det) };
}
