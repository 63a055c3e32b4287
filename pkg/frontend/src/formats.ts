/** Binary writers for the engine's sequence directory format.
 *
 * A sequence directory holds `manifest.json` plus four little-endian
 * binary files per frame under `frames/`; every file starts with a
 * 16-byte header (8-byte magic + two u32 fields). Mask pixels are
 * run-length encoded over row-major flat order. The byte layout here
 * must match the engine's reader exactly -- the end-to-end test feeds
 * these files straight into it.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import type { CameraIntrinsics, FrameBundle, MaskObservation, PoseMatrix } from "./types.js";

export const MANIFEST_VERSION = 1;

const DEPTH_MAGIC = "VXDEPTH\0";
const MASKS_MAGIC = "VXMASKS\0";
const FEAT_MAGIC = "VXFEATS\0";
const POSE_MAGIC = "VXPOSE\0\0";

const FLAG_ALLOW_OVERLAP = 1;

function header(magic: string, a: number, b: number): Buffer {
  const buf = Buffer.alloc(16);
  buf.write(magic, 0, "latin1");
  buf.writeUInt32LE(a, 8);
  buf.writeUInt32LE(b, 12);
  return buf;
}

/** Sorted unique flat indices -> [start, length] runs of consecutive pixels. */
export function rleEncode(pixels: Int32Array): Array<[number, number]> {
  const runs: Array<[number, number]> = [];
  let i = 0;
  while (i < pixels.length) {
    const start = pixels[i];
    let j = i + 1;
    while (j < pixels.length && pixels[j] === pixels[j - 1] + 1) j++;
    runs.push([start, j - i]);
    i = j;
  }
  return runs;
}

export function rleDecode(runs: Array<[number, number]>): Int32Array {
  let total = 0;
  for (const [, len] of runs) total += len;
  const out = new Int32Array(total);
  let k = 0;
  for (const [start, len] of runs) {
    for (let d = 0; d < len; d++) out[k++] = start + d;
  }
  return out;
}

export function encodeDepth(depth: Uint16Array, width: number, height: number): Buffer {
  if (depth.length !== width * height) {
    throw new Error(`depth has ${depth.length} pixels, expected ${width}x${height}`);
  }
  const data = Buffer.alloc(depth.length * 2);
  for (let i = 0; i < depth.length; i++) data.writeUInt16LE(depth[i], i * 2);
  return Buffer.concat([header(DEPTH_MAGIC, width, height), data]);
}

export function encodeMasks(masks: MaskObservation[], allowOverlap: boolean): Buffer {
  const parts: Buffer[] = [header(MASKS_MAGIC, masks.length, allowOverlap ? FLAG_ALLOW_OVERLAP : 0)];
  for (const m of masks) {
    const score = Buffer.alloc(8);
    score.writeDoubleLE(m.detectionScore, 0);
    parts.push(score);
    if (m.caption === undefined || m.caption === null) {
      parts.push(Buffer.from([0]));
    } else {
      const raw = Buffer.from(m.caption, "utf-8");
      const head = Buffer.alloc(5);
      head.writeUInt8(1, 0);
      head.writeUInt32LE(raw.length, 1);
      parts.push(head, raw);
    }
    const runs = rleEncode(m.pixels);
    const count = Buffer.alloc(4);
    count.writeUInt32LE(runs.length, 0);
    parts.push(count);
    const body = Buffer.alloc(runs.length * 16);
    runs.forEach(([start, len], i) => {
      body.writeBigUInt64LE(BigInt(start), i * 16);
      body.writeBigUInt64LE(BigInt(len), i * 16 + 8);
    });
    parts.push(body);
  }
  return Buffer.concat(parts);
}

export function encodeFeatures(features: Float32Array[], dim: number): Buffer {
  const parts: Buffer[] = [header(FEAT_MAGIC, features.length, dim)];
  for (const f of features) {
    if (f.length !== dim) {
      throw new Error(`feature has dimension ${f.length}, expected ${dim}`);
    }
    const row = Buffer.alloc(dim * 4);
    for (let i = 0; i < dim; i++) row.writeFloatLE(f[i], i * 4);
    parts.push(row);
  }
  return Buffer.concat(parts);
}

export function encodePose(pose: PoseMatrix): Buffer {
  if (pose.length !== 16) throw new Error(`pose must have 16 entries, got ${pose.length}`);
  const body = Buffer.alloc(128);
  pose.forEach((v, i) => body.writeDoubleLE(v, i * 8));
  return Buffer.concat([header(POSE_MAGIC, 4, 4), body]);
}

export function decodeFeatures(buf: Buffer): { dim: number; rows: Float32Array[] } {
  if (buf.length < 16 || buf.toString("latin1", 0, 8) !== FEAT_MAGIC) {
    throw new Error("bad feature file magic");
  }
  const count = buf.readUInt32LE(8);
  const dim = buf.readUInt32LE(12);
  if (buf.length !== 16 + 4 * count * dim) throw new Error("feature file truncated");
  const rows: Float32Array[] = [];
  for (let r = 0; r < count; r++) {
    const row = new Float32Array(dim);
    for (let i = 0; i < dim; i++) row[i] = buf.readFloatLE(16 + (r * dim + i) * 4);
    rows.push(row);
  }
  return { dim, rows };
}

// ---------------------------------------------------------------------------
// validation mirroring the engine's reader, so problems surface here first
// ---------------------------------------------------------------------------

export function validateFrame(frame: FrameBundle, dim: number | null, where: string): void {
  const { width, height } = frame.intrinsics;
  if (frame.depth.length !== width * height) {
    throw new Error(`${where}: depth raster does not match intrinsics ${width}x${height}`);
  }
  const seen = new Set<number>();
  frame.masks.forEach((m, i) => {
    const w = `${where}: masks[${i}]`;
    if (m.pixels.length === 0) throw new Error(`${w}: mask is empty`);
    for (let k = 0; k < m.pixels.length; k++) {
      const p = m.pixels[k];
      if (p < 0 || p >= width * height) throw new Error(`${w}: pixel index outside raster`);
      if (k > 0 && p <= m.pixels[k - 1]) throw new Error(`${w}: pixels must be sorted and unique`);
      if (!frame.allowOverlap) {
        if (seen.has(p)) throw new Error(`${w}: masks overlap but overlap flag is not set`);
        seen.add(p);
      }
    }
    if (dim !== null && m.feature.length !== dim) {
      throw new Error(`${w}: feature dimension ${m.feature.length} != sequence dimension ${dim}`);
    }
    let norm = 0;
    for (const v of m.feature) {
      if (!Number.isFinite(v)) throw new Error(`${w}: feature has non-finite entries`);
      norm += v * v;
    }
    if (norm <= 0) throw new Error(`${w}: feature norm must be positive`);
    if (!(m.detectionScore >= 0 && m.detectionScore <= 1)) {
      throw new Error(`${w}: detection_score ${m.detectionScore} outside [0, 1]`);
    }
  });
}

// ---------------------------------------------------------------------------
// sequence directory
// ---------------------------------------------------------------------------

/** JSON.stringify with recursively sorted keys, matching the engine's manifests. */
export function stableJson(value: unknown): string {
  const sort = (v: unknown): unknown => {
    if (Array.isArray(v)) return v.map(sort);
    if (v !== null && typeof v === "object") {
      const out: Record<string, unknown> = {};
      for (const key of Object.keys(v as object).sort()) {
        out[key] = sort((v as Record<string, unknown>)[key]);
      }
      return out;
    }
    return v;
  };
  return JSON.stringify(sort(value), null, 2) + "\n";
}

export function frameBasename(frameId: number): string {
  return String(frameId).padStart(6, "0");
}

function intrinsicsDict(intr: CameraIntrinsics) {
  return {
    fx: intr.fx, fy: intr.fy, cx: intr.cx, cy: intr.cy,
    width: intr.width, height: intr.height,
  };
}

export interface WriteOptions {
  resolution?: number;
  embeddingDim?: number;
}

/** Write a full sequence directory; returns the manifest object. */
export function writeSequence(frames: FrameBundle[], outDir: string,
                              options: WriteOptions = {}): Record<string, unknown> {
  let dim = options.embeddingDim ?? null;
  if (dim === null) {
    const dims = new Set<number>();
    for (const fr of frames) for (const m of fr.masks) dims.add(m.feature.length);
    if (dims.size > 1) throw new Error(`inconsistent feature dimensions: ${[...dims].sort()}`);
    if (dims.size === 0) throw new Error("embeddingDim required for a sequence with no masks");
    dim = [...dims][0];
  }

  fs.mkdirSync(path.join(outDir, "frames"), { recursive: true });
  const entries = [];
  let lastId = -Infinity;
  for (const fr of frames) {
    validateFrame(fr, dim, `frame ${fr.frameId}`);
    if (fr.frameId <= lastId) throw new Error(`frame_id ${fr.frameId} not increasing`);
    lastId = fr.frameId;
    const base = frameBasename(fr.frameId);
    const dir = path.join(outDir, "frames");
    fs.writeFileSync(path.join(dir, `${base}.depth`),
      encodeDepth(fr.depth, fr.intrinsics.width, fr.intrinsics.height));
    fs.writeFileSync(path.join(dir, `${base}.masks`), encodeMasks(fr.masks, fr.allowOverlap));
    fs.writeFileSync(path.join(dir, `${base}.feat`),
      encodeFeatures(fr.masks.map((m) => m.feature), dim));
    fs.writeFileSync(path.join(dir, `${base}.pose`), encodePose(fr.pose));
    entries.push({
      frame_id: fr.frameId,
      depth: `frames/${base}.depth`,
      masks: `frames/${base}.masks`,
      feat: `frames/${base}.feat`,
      pose: `frames/${base}.pose`,
      intrinsics: intrinsicsDict(fr.intrinsics),
      allow_overlap: fr.allowOverlap,
    });
  }

  const manifest = {
    version: MANIFEST_VERSION,
    resolution: options.resolution ?? 0.04,
    embedding_dim: dim,
    frame_count: frames.length,
    frames: entries,
  };
  fs.writeFileSync(path.join(outDir, "manifest.json"), stableJson(manifest));
  return manifest;
}
