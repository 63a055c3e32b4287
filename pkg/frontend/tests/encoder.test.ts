import { describe, expect, it } from "vitest";
import { cosine, encodeText, makeEncoder, tokenize } from "../src/encoder.js";
import { decodeFeatures } from "../src/formats.js";
import { createPipeline, encodeQueries } from "../src/pipeline.js";

describe("tokenize", () => {
  it("lowercases and splits on non-alphanumerics", () => {
    expect(tokenize("A red, Box!")).toEqual(["a", "red", "box"]);
    expect(tokenize("   ")).toEqual([]);
  });
});

describe("encodeText", () => {
  it("produces unit vectors of the requested dimension", () => {
    for (const dim of [16, 384]) {
      const v = encodeText("a green slab", dim);
      expect(v.length).toBe(dim);
      let norm = 0;
      for (const x of v) norm += x * x;
      expect(Math.abs(Math.sqrt(norm) - 1)).toBeLessThan(1e-6);
    }
  });

  it("is deterministic: identical texts give identical embeddings", () => {
    const a = encodeText("a blue pillar near the wall", 384);
    const b = encodeText("a blue pillar near the wall", 384);
    expect(Array.from(a)).toEqual(Array.from(b));
  });

  it("gives blank text a valid embedding", () => {
    const v = encodeText("", 384);
    let norm = 0;
    for (const x of v) norm += x * x;
    expect(norm).toBeGreaterThan(0);
  });

  it("places synonyms far closer than unrelated words", () => {
    const sofa = encodeText("sofa", 384);
    expect(cosine(sofa, encodeText("couch", 384)))
      .toBeGreaterThan(cosine(sofa, encodeText("airplane", 384)));
    expect(cosine(sofa, encodeText("couch", 384))).toBeGreaterThan(0.5);
    expect(Math.abs(cosine(sofa, encodeText("airplane", 384)))).toBeLessThan(0.3);
    const tv = encodeText("tv", 384);
    expect(cosine(tv, encodeText("television", 384)))
      .toBeGreaterThan(cosine(tv, encodeText("refrigerator", 384)));
  });

  it("rejects unknown encoder specs", () => {
    expect(() => makeEncoder("clairvoyance-v9", 384)).toThrow(/unknown encoder/);
  });
});

describe("encodeQueries", () => {
  it("defaults to dimension 384", () => {
    const pipeline = createPipeline();
    const { dim, rows } = decodeFeatures(encodeQueries(["sofa", "lamp"], pipeline));
    expect(dim).toBe(384);
    expect(rows.length).toBe(2);
  });

  it("writes a valid empty file for no queries", () => {
    const buf = encodeQueries([], createPipeline());
    expect(buf.length).toBe(16);
    const { dim, rows } = decodeFeatures(buf);
    expect(dim).toBe(384);
    expect(rows.length).toBe(0);
  });

  it("matches encodeText row for row", () => {
    const pipeline = createPipeline({ dim: 32 });
    const { rows } = decodeFeatures(encodeQueries(["a red box"], pipeline));
    expect(Array.from(rows[0])).toEqual(Array.from(encodeText("a red box", 32)));
  });
});
