import { spawnSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { afterEach, describe, expect, it } from "vitest";
import { main as cliMain } from "../src/cli.js";
import { detectRegions } from "../src/detector.js";
import { decodeFeatures } from "../src/formats.js";
import { createPipeline, extractFrame, extractSequence } from "../src/pipeline.js";
import { IDENTITY_POSE, type ImageRGB } from "../src/types.js";
import { paintFrame, writeSampleDataset, SAMPLE_BOXES, SAMPLE_HEIGHT, SAMPLE_WIDTH } from "./sample.js";

const REPO_ROOT = path.resolve(path.dirname(fileURLToPath(import.meta.url)), "..", "..");

const tmpDirs: string[] = [];

function tmpDir(): string {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "vx-pipe-"));
  tmpDirs.push(dir);
  return dir;
}

afterEach(() => {
  while (tmpDirs.length > 0) fs.rmSync(tmpDirs.pop()!, { recursive: true, force: true });
});

const INTRINSICS = {
  fx: 128, fy: 128, cx: 80, cy: 60, width: SAMPLE_WIDTH, height: SAMPLE_HEIGHT,
};

function sampleImage(shift = 0): { rgb: ImageRGB; depth: Uint16Array } {
  const { rgb, depth } = paintFrame(shift);
  return { rgb: { width: SAMPLE_WIDTH, height: SAMPLE_HEIGHT, data: rgb }, depth };
}

describe("createPipeline", () => {
  it("validates the score threshold", () => {
    expect(() => createPipeline({ scoreThreshold: 0 })).toThrow(/scoreThreshold/);
    expect(() => createPipeline({ scoreThreshold: 1 })).toThrow(/scoreThreshold/);
  });

  it("rejects unknown model specs", () => {
    expect(() => createPipeline({ detector: "yolo-13" })).toThrow(/unknown detector/);
    expect(() => createPipeline({ segmenter: "psychic" })).toThrow(/unknown segmenter/);
  });
});

describe("extractFrame", () => {
  it("finds every painted box with matching pixels and captions", () => {
    const { rgb, depth } = sampleImage();
    const frame = extractFrame(createPipeline(), 0, rgb, depth, IDENTITY_POSE, INTRINSICS);
    expect(frame.masks.length).toBe(SAMPLE_BOXES.length);
    const byCaption = new Map(frame.masks.map((m) => [m.caption, m]));
    for (const box of SAMPLE_BOXES) {
      const mask = byCaption.get(`a ${box.name} box`);
      expect(mask, box.name).toBeDefined();
      const want: number[] = [];
      for (let v = box.v0; v < box.v1; v++) {
        for (let u = box.u0; u < box.u1; u++) want.push(v * SAMPLE_WIDTH + u);
      }
      expect(Array.from(mask!.pixels)).toEqual(want);
      expect(mask!.feature.length).toBe(384);
      expect(mask!.detectionScore).toBeGreaterThanOrEqual(0.3);
    }
  });

  it("returns a valid zero-mask frame for a blank image", () => {
    const data = new Uint8Array(SAMPLE_WIDTH * SAMPLE_HEIGHT * 3).fill(8);
    const frame = extractFrame(createPipeline(), 0,
      { width: SAMPLE_WIDTH, height: SAMPLE_HEIGHT, data },
      new Uint16Array(SAMPLE_WIDTH * SAMPLE_HEIGHT).fill(2000),
      IDENTITY_POSE, INTRINSICS);
    expect(frame.masks).toEqual([]);
  });

  it("drops detections below the score threshold", () => {
    const { rgb, depth } = sampleImage();
    // a 5x6 speck: detected (area 30) but sqrt(30)/40 ~ 0.14 < 0.3
    for (let v = 0; v < 6; v++) {
      for (let u = 0; u < 5; u++) {
        const p = v * SAMPLE_WIDTH + u;
        rgb.data[p * 3] = 230;
        rgb.data[p * 3 + 1] = 40;
        rgb.data[p * 3 + 2] = 40;
      }
    }
    expect(detectRegions(rgb).length).toBe(SAMPLE_BOXES.length + 1);
    const frame = extractFrame(createPipeline(), 0, rgb, depth, IDENTITY_POSE, INTRINSICS);
    expect(frame.masks.length).toBe(SAMPLE_BOXES.length);
  });

  it("rejects an image that does not match the intrinsics", () => {
    const { rgb, depth } = sampleImage();
    expect(() => extractFrame(createPipeline(), 0, rgb, depth, IDENTITY_POSE,
      { ...INTRINSICS, width: 80 })).toThrow(/does not match/);
  });
});

describe("end-to-end against the engine", () => {
  it("builds a map from a 10-frame extracted sample with zero warnings", () => {
    const dataset = tmpDir();
    const seq = path.join(tmpDir(), "seq");
    const snap = path.join(tmpDir(), "snap");
    writeSampleDataset(dataset, 10);
    const n = extractSequence(dataset, seq, createPipeline());
    expect(n).toBe(10);

    const build = spawnSync("python3",
      ["-m", "voxelox", "build", seq, snap, "--progress",
       path.join(tmpDir(), "progress.jsonl")],
      { cwd: REPO_ROOT, encoding: "utf-8" });
    expect(build.error).toBeUndefined();
    expect(build.status, build.stderr).toBe(0);
    const warnings = build.stderr.split("\n").filter((l) => l.startsWith("warning:"));
    expect(warnings).toEqual([]);

    const report = JSON.parse(fs.readFileSync(path.join(snap, "report.json"), "utf-8"));
    expect(report.summary.n_frames).toBe(10);
    expect(report.summary.n_instances).toBeGreaterThanOrEqual(3);

    // retrieval interop: an encoded caption query must hit its instance
    const queries = path.join(tmpDir(), "queries.feat");
    expect(cliMain(["encode-queries", queries, "a red box"])).toBe(0);
    const query = spawnSync("python3",
      ["-m", "voxelox", "query", snap, "--embedding-file", queries, "-k", "1"],
      { cwd: REPO_ROOT, encoding: "utf-8" });
    expect(query.status, query.stderr).toBe(0);
    const [rank, , score] = query.stdout.trim().split("\n")[0].split("\t");
    expect(rank).toBe("1");
    expect(Number(score)).toBeGreaterThan(0.99);
  }, 120_000);

  it("writes manifests the engine parses with embedding dimension 384", () => {
    const dataset = tmpDir();
    const seq = path.join(tmpDir(), "seq");
    writeSampleDataset(dataset, 2);
    extractSequence(dataset, seq, createPipeline());
    const manifest = JSON.parse(fs.readFileSync(path.join(seq, "manifest.json"), "utf-8"));
    expect(manifest.embedding_dim).toBe(384);
    expect(manifest.frame_count).toBe(2);
  });
});

describe("cli", () => {
  it("extracts a dataset directory", () => {
    const dataset = tmpDir();
    const seq = path.join(tmpDir(), "out");
    writeSampleDataset(dataset, 2);
    expect(cliMain(["extract", dataset, seq])).toBe(0);
    expect(fs.existsSync(path.join(seq, "manifest.json"))).toBe(true);
  });

  it("supports --dim on encode-queries", () => {
    const out = path.join(tmpDir(), "q.feat");
    expect(cliMain(["encode-queries", out, "sofa", "lamp", "--dim", "64"])).toBe(0);
    const { dim, rows } = decodeFeatures(fs.readFileSync(out));
    expect(dim).toBe(64);
    expect(rows.length).toBe(2);
  });

  it("returns a usage error for unknown commands and bad flags", () => {
    expect(cliMain(["transmogrify"])).toBe(1);
    expect(cliMain(["extract", "only-one-arg"])).toBe(1);
    expect(cliMain(["encode-queries"])).toBe(1);
  });

  it("returns a processing error for an invalid threshold", () => {
    const dataset = tmpDir();
    writeSampleDataset(dataset, 1);
    expect(cliMain(["extract", dataset, path.join(tmpDir(), "o"), "--threshold", "2"])).toBe(2);
  });
});
