export type {
  CameraIntrinsics, FrameBundle, ImageRGB, MaskObservation, PoseMatrix,
} from "./types.js";
export { IDENTITY_POSE, translationPose } from "./types.js";
export {
  encodeDepth, encodeFeatures, encodeMasks, encodePose, decodeFeatures,
  frameBasename, rleDecode, rleEncode, stableJson, validateFrame, writeSequence,
} from "./formats.js";
export { readPgm16, readPpm, writePgm16, writePpm } from "./image.js";
export { cosine, encodeText, makeEncoder, tokenize } from "./encoder.js";
export { detectRegions, makeDetector, type Detection } from "./detector.js";
export { makeSegmenter, nearestColorName, segmentDetection, type Segment } from "./segmenter.js";
export {
  DEFAULT_CONFIG, createPipeline, encodeQueries, extractFrame, extractSequence,
  type Pipeline, type PipelineConfig,
} from "./pipeline.js";
