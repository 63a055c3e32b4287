/** Detection -> segmentation+captioning -> caption encoding.
 *
 * The three model stages are pluggable by spec string; the defaults are
 * the deterministic built-ins, so the pipeline runs without weights or
 * network access. Output is the engine's frame-bundle schema, validated
 * before it is written.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { makeDetector, type Detector } from "./detector.js";
import { makeEncoder, type TextEncoder2 } from "./encoder.js";
import { encodeFeatures, validateFrame, writeSequence } from "./formats.js";
import { readPgm16, readPpm } from "./image.js";
import { makeSegmenter, type Segmenter } from "./segmenter.js";
import type { CameraIntrinsics, FrameBundle, ImageRGB, PoseMatrix } from "./types.js";

export interface PipelineConfig {
  detector: string;
  segmenter: string;
  encoder: string;
  /** Detections below this score are dropped; must be inside (0, 1). */
  scoreThreshold: number;
  /** Output embedding dimension. */
  dim: number;
}

export const DEFAULT_CONFIG: PipelineConfig = {
  detector: "color-region",
  segmenter: "flood-fill",
  encoder: "hash-lexicon",
  scoreThreshold: 0.3,
  dim: 384,
};

export interface Pipeline {
  cfg: PipelineConfig;
  detector: Detector;
  segmenter: Segmenter;
  encoder: TextEncoder2;
}

export function createPipeline(overrides: Partial<PipelineConfig> = {}): Pipeline {
  const cfg = { ...DEFAULT_CONFIG, ...overrides };
  if (!(cfg.scoreThreshold > 0 && cfg.scoreThreshold < 1)) {
    throw new Error(`scoreThreshold must be inside (0, 1), got ${cfg.scoreThreshold}`);
  }
  if (!Number.isInteger(cfg.dim) || cfg.dim < 1) {
    throw new Error(`embedding dimension must be a positive integer, got ${cfg.dim}`);
  }
  const encoder = makeEncoder(cfg.encoder, cfg.dim);
  if (encoder.dim !== cfg.dim) {
    throw new Error(`encoder dimension ${encoder.dim} != configured dimension ${cfg.dim}`);
  }
  return {
    cfg,
    detector: makeDetector(cfg.detector),
    segmenter: makeSegmenter(cfg.segmenter),
    encoder,
  };
}

export function extractFrame(pipeline: Pipeline, frameId: number, rgb: ImageRGB,
                             depth: Uint16Array, pose: PoseMatrix,
                             intrinsics: CameraIntrinsics): FrameBundle {
  if (rgb.width !== intrinsics.width || rgb.height !== intrinsics.height) {
    throw new Error(`image ${rgb.width}x${rgb.height} does not match intrinsics `
      + `${intrinsics.width}x${intrinsics.height}`);
  }
  if (depth.length !== intrinsics.width * intrinsics.height) {
    throw new Error(`depth has ${depth.length} pixels, expected `
      + `${intrinsics.width * intrinsics.height}`);
  }
  const detections = pipeline.detector.detect(rgb)
    .filter((d) => d.score >= pipeline.cfg.scoreThreshold);
  // higher-scoring segments claim contested pixels; emptied ones are dropped
  const claimed = new Set<number>();
  const masks = [];
  for (const det of detections) {
    const seg = pipeline.segmenter.segment(rgb, det);
    const own = Array.from(seg.pixels).filter((p) => !claimed.has(p));
    if (own.length === 0) continue;
    for (const p of own) claimed.add(p);
    masks.push({
      pixels: Int32Array.from(own),
      feature: pipeline.encoder.encode(seg.caption),
      detectionScore: det.score,
      caption: seg.caption,
    });
  }
  const frame: FrameBundle = { frameId, depth, pose, intrinsics, masks, allowOverlap: false };
  validateFrame(frame, pipeline.cfg.dim, `frame ${frameId}`);
  return frame;
}

/** Encode query texts into the engine's embedding-file format. */
export function encodeQueries(texts: string[], pipeline: Pipeline): Buffer {
  return encodeFeatures(texts.map((t) => pipeline.encoder.encode(t)), pipeline.cfg.dim);
}

// ---------------------------------------------------------------------------
// dataset directory -> sequence directory
// ---------------------------------------------------------------------------

/** Input layout: color/NNNNNN.ppm + depth/NNNNNN.pgm pairs,
 * poses.txt (16 row-major numbers per line, world-from-camera),
 * intrinsics.json ({fx, fy, cx, cy, width, height}). */
export function extractSequence(inDir: string, outDir: string, pipeline: Pipeline,
                                resolution = 0.04): number {
  const intrinsics: CameraIntrinsics =
    JSON.parse(fs.readFileSync(path.join(inDir, "intrinsics.json"), "utf-8"));
  const poseLines = fs.readFileSync(path.join(inDir, "poses.txt"), "utf-8")
    .split("\n").map((l) => l.trim()).filter((l) => l.length > 0);
  const colorFiles = fs.readdirSync(path.join(inDir, "color"))
    .filter((f) => f.endsWith(".ppm")).sort();
  if (colorFiles.length !== poseLines.length) {
    throw new Error(`${colorFiles.length} color frames but ${poseLines.length} poses`);
  }

  const frames: FrameBundle[] = [];
  colorFiles.forEach((file, i) => {
    const base = path.basename(file, ".ppm");
    const rgb = readPpm(path.join(inDir, "color", file));
    const depth = readPgm16(path.join(inDir, "depth", `${base}.pgm`));
    if (depth.width !== rgb.width || depth.height !== rgb.height) {
      throw new Error(`${base}: depth ${depth.width}x${depth.height} does not match color`);
    }
    const pose = poseLines[i].split(/\s+/).map(Number);
    if (pose.length !== 16 || pose.some((v) => !Number.isFinite(v))) {
      throw new Error(`poses.txt line ${i + 1}: expected 16 finite numbers`);
    }
    frames.push(extractFrame(pipeline, Number(base), rgb, depth.data, pose, intrinsics));
  });

  writeSequence(frames, outDir, { resolution, embeddingDim: pipeline.cfg.dim });
  return frames.length;
}
