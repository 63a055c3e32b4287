/** Netpbm image I/O: P6 (binary RGB) and P5 (binary 16-bit grayscale).
 *
 * Color frames are read from PPM and depth frames from 16-bit PGM with
 * big-endian samples, per the Netpbm convention. Depth values are
 * millimeters, 0 = invalid, exactly as the engine expects.
 */

import * as fs from "node:fs";
import type { ImageRGB } from "./types.js";

interface PnmHeader {
  magic: string;
  width: number;
  height: number;
  maxval: number;
  offset: number;
}

function parseHeader(buf: Buffer, file: string): PnmHeader {
  // magic, width, height, maxval separated by whitespace/comments, then
  // exactly one whitespace byte before the raster
  const fields: string[] = [];
  let i = 0;
  while (fields.length < 4) {
    while (i < buf.length && /\s/.test(String.fromCharCode(buf[i]))) i++;
    if (i < buf.length && buf[i] === 0x23) { // '#' comment
      while (i < buf.length && buf[i] !== 0x0a) i++;
      continue;
    }
    let start = i;
    while (i < buf.length && !/\s/.test(String.fromCharCode(buf[i]))) i++;
    if (start === i) throw new Error(`${file}: truncated header`);
    fields.push(buf.toString("latin1", start, i));
  }
  i++; // single whitespace after maxval
  const [magic, w, h, maxval] = fields;
  return { magic, width: Number(w), height: Number(h), maxval: Number(maxval), offset: i };
}

export function readPpm(file: string): ImageRGB {
  const buf = fs.readFileSync(file);
  const head = parseHeader(buf, file);
  if (head.magic !== "P6" || head.maxval !== 255) {
    throw new Error(`${file}: expected binary P6 with maxval 255`);
  }
  const n = head.width * head.height * 3;
  if (buf.length < head.offset + n) throw new Error(`${file}: raster truncated`);
  return {
    width: head.width,
    height: head.height,
    data: new Uint8Array(buf.subarray(head.offset, head.offset + n)),
  };
}

export function writePpm(file: string, image: ImageRGB): void {
  const head = Buffer.from(`P6\n${image.width} ${image.height}\n255\n`, "latin1");
  fs.writeFileSync(file, Buffer.concat([head, Buffer.from(image.data)]));
}

export function readPgm16(file: string): { width: number; height: number; data: Uint16Array } {
  const buf = fs.readFileSync(file);
  const head = parseHeader(buf, file);
  if (head.magic !== "P5" || head.maxval !== 65535) {
    throw new Error(`${file}: expected binary P5 with maxval 65535`);
  }
  const n = head.width * head.height;
  if (buf.length < head.offset + 2 * n) throw new Error(`${file}: raster truncated`);
  const data = new Uint16Array(n);
  for (let i = 0; i < n; i++) data[i] = buf.readUInt16BE(head.offset + 2 * i);
  return { width: head.width, height: head.height, data };
}

export function writePgm16(file: string, width: number, height: number, data: Uint16Array): void {
  const head = Buffer.from(`P5\n${width} ${height}\n65535\n`, "latin1");
  const body = Buffer.alloc(data.length * 2);
  for (let i = 0; i < data.length; i++) body.writeUInt16BE(data[i], 2 * i);
  fs.writeFileSync(file, Buffer.concat([head, body]));
}
