#!/usr/bin/env node
/** Command-line front-end.
 *
 *   voxelox-extract extract <dataset_dir> <out_dir> [--threshold T] [--dim D] [--resolution R]
 *   voxelox-extract encode-queries <out.feat> <text> [text ...] [--dim D]
 *
 * `extract` converts a color/depth/pose dataset directory into an
 * engine-readable sequence directory; `encode-queries` writes query
 * texts as an embedding file for retrieval.
 */

import * as fs from "node:fs";
import { createPipeline, encodeQueries, extractSequence, type PipelineConfig } from "./pipeline.js";

function parseFlags(args: string[], flags: Record<string, "number" | "string">): {
  positional: string[];
  values: Record<string, number | string>;
} {
  const positional: string[] = [];
  const values: Record<string, number | string> = {};
  for (let i = 0; i < args.length; i++) {
    const arg = args[i];
    if (arg.startsWith("--")) {
      const name = arg.slice(2);
      if (!(name in flags)) throw new UsageError(`unknown flag ${arg}`);
      const raw = args[++i];
      if (raw === undefined) throw new UsageError(`${arg} needs a value`);
      if (flags[name] === "number") {
        const v = Number(raw);
        if (!Number.isFinite(v)) throw new UsageError(`${arg} needs a number, got '${raw}'`);
        values[name] = v;
      } else {
        values[name] = raw;
      }
    } else {
      positional.push(arg);
    }
  }
  return { positional, values };
}

class UsageError extends Error {}

const USAGE = `usage:
  voxelox-extract extract <dataset_dir> <out_dir> [--threshold T] [--dim D] [--resolution R]
  voxelox-extract encode-queries <out.feat> <text> [text ...] [--dim D]`;

export function main(argv: string[]): number {
  try {
    const [command, ...rest] = argv;
    if (command === "extract") {
      const { positional, values } = parseFlags(rest, {
        threshold: "number", dim: "number", resolution: "number",
      });
      if (positional.length !== 2) throw new UsageError(USAGE);
      const overrides: Partial<PipelineConfig> = {};
      if ("threshold" in values) overrides.scoreThreshold = values.threshold as number;
      if ("dim" in values) overrides.dim = values.dim as number;
      const pipeline = createPipeline(overrides);
      const n = extractSequence(positional[0], positional[1], pipeline,
        (values.resolution as number) ?? 0.04);
      console.log(`${positional[1]} (${n} frames, dimension ${pipeline.cfg.dim})`);
      return 0;
    }
    if (command === "encode-queries") {
      const { positional, values } = parseFlags(rest, { dim: "number" });
      if (positional.length < 1) throw new UsageError(USAGE);
      const overrides: Partial<PipelineConfig> = {};
      if ("dim" in values) overrides.dim = values.dim as number;
      const pipeline = createPipeline(overrides);
      const [outFile, ...texts] = positional;
      fs.writeFileSync(outFile, encodeQueries(texts, pipeline));
      console.log(`${outFile} (${texts.length} queries, dimension ${pipeline.cfg.dim})`);
      return 0;
    }
    throw new UsageError(USAGE);
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(err.message);
      return 1;
    }
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 2;
  }
}

if (import.meta.url === `file://${process.argv[1]}`) {
  process.exit(main(process.argv.slice(2)));
}
