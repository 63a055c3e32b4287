/** Shared value types mirroring the engine's frame-bundle schema. */

export interface CameraIntrinsics {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
}

/** World-from-camera rigid transform as a row-major 4x4 matrix. */
export type PoseMatrix = number[];

export interface MaskObservation {
  /** Sorted unique row-major flat pixel indices (v * width + u). */
  pixels: Int32Array;
  /** Caption embedding, length = sequence embedding dimension. */
  feature: Float32Array;
  /** Detector confidence in [0, 1]. */
  detectionScore: number;
  caption?: string;
}

export interface FrameBundle {
  frameId: number;
  /** Depth in millimeters, 0 = invalid; length = width * height. */
  depth: Uint16Array;
  pose: PoseMatrix;
  intrinsics: CameraIntrinsics;
  masks: MaskObservation[];
  allowOverlap: boolean;
}

export interface ImageRGB {
  width: number;
  height: number;
  /** Interleaved RGB, 3 bytes per pixel, row-major. */
  data: Uint8Array;
}

export const IDENTITY_POSE: PoseMatrix = [
  1, 0, 0, 0,
  0, 1, 0, 0,
  0, 0, 1, 0,
  0, 0, 0, 1,
];

export function translationPose(tx: number, ty: number, tz: number): PoseMatrix {
  return [1, 0, 0, tx, 0, 1, 0, ty, 0, 0, 1, tz, 0, 0, 0, 1];
}
