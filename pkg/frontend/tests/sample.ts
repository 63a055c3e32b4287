/** Synthetic RGB-D recording used by the end-to-end tests.
 *
 * Ten 160x120 frames of three flat-colored boxes drifting one pixel per
 * frame in front of a dark far wall, with a strafing camera pose --
 * written to disk as the PPM/PGM/poses dataset layout the extractor
 * consumes, exactly like a tiny captured sequence would be.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { writePgm16, writePpm } from "../src/image.js";
import { frameBasename, stableJson } from "../src/formats.js";

export const SAMPLE_WIDTH = 160;
export const SAMPLE_HEIGHT = 120;

export interface SampleBox {
  u0: number;
  v0: number;
  u1: number;
  v1: number;
  color: [number, number, number];
  depthMm: number;
  name: string;
}

export const SAMPLE_BOXES: SampleBox[] = [
  { u0: 18, v0: 30, u1: 58, v1: 78, color: [230, 40, 40], depthMm: 900, name: "red" },
  { u0: 70, v0: 20, u1: 115, v1: 60, color: [40, 200, 60], depthMm: 1300, name: "green" },
  { u0: 100, v0: 70, u1: 150, v1: 110, color: [60, 80, 220], depthMm: 1600, name: "blue" },
];

const BACKGROUND: [number, number, number] = [10, 10, 12];
const WALL_DEPTH_MM = 3000;

export function paintFrame(shift: number): { rgb: Uint8Array; depth: Uint16Array } {
  const n = SAMPLE_WIDTH * SAMPLE_HEIGHT;
  const rgb = new Uint8Array(n * 3);
  const depth = new Uint16Array(n);
  for (let p = 0; p < n; p++) {
    rgb[p * 3] = BACKGROUND[0];
    rgb[p * 3 + 1] = BACKGROUND[1];
    rgb[p * 3 + 2] = BACKGROUND[2];
    depth[p] = WALL_DEPTH_MM;
  }
  for (const box of SAMPLE_BOXES) {
    for (let v = box.v0; v < box.v1; v++) {
      for (let u = box.u0 + shift; u < box.u1 + shift; u++) {
        const p = v * SAMPLE_WIDTH + u;
        rgb[p * 3] = box.color[0];
        rgb[p * 3 + 1] = box.color[1];
        rgb[p * 3 + 2] = box.color[2];
        depth[p] = box.depthMm;
      }
    }
  }
  return { rgb, depth };
}

export function writeSampleDataset(dir: string, nFrames = 10): void {
  fs.mkdirSync(path.join(dir, "color"), { recursive: true });
  fs.mkdirSync(path.join(dir, "depth"), { recursive: true });
  const poses: string[] = [];
  for (let i = 0; i < nFrames; i++) {
    const { rgb, depth } = paintFrame(i);
    const base = frameBasename(i);
    writePpm(path.join(dir, "color", `${base}.ppm`),
      { width: SAMPLE_WIDTH, height: SAMPLE_HEIGHT, data: rgb });
    writePgm16(path.join(dir, "depth", `${base}.pgm`), SAMPLE_WIDTH, SAMPLE_HEIGHT, depth);
    poses.push(`1 0 0 ${(0.02 * i).toFixed(2)} 0 1 0 0 0 0 1 0 0 0 0 1`);
  }
  fs.writeFileSync(path.join(dir, "poses.txt"), poses.join("\n") + "\n");
  fs.writeFileSync(path.join(dir, "intrinsics.json"), stableJson({
    fx: 128.0, fy: 128.0, cx: 80.0, cy: 60.0,
    width: SAMPLE_WIDTH, height: SAMPLE_HEIGHT,
  }));
}
