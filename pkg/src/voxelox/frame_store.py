"""On-disk frame bundle format: the contract replacing the neural front-end.

A sequence is a directory::

    manifest.json
    frames/000000.depth   u16 depth, millimeters, 0 = invalid
    frames/000000.masks   RLE masks + detection scores + captions
    frames/000000.feat    float32 feature rows, one per mask
    frames/000000.pose    4x4 float64 world-from-camera matrix

All binary files start with a 16-byte header (8-byte magic + two u32
fields) and every integer on disk is little-endian. Mask pixels are
run-length encoded over row-major flat pixel order. The manifest is
JSON with ``"version": 1``; floats written by :mod:`json` round-trip
bit-exactly, so write-then-read is an identity on every field.

Reading is streaming: :func:`read_sequence` is a generator holding one
frame at a time, validating every invariant eagerly and naming the
offending file and field on failure.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import SchemaError, ValidationError
from .geometry import CameraIntrinsics, Pose

MANIFEST_VERSION = 1

_DEPTH_MAGIC = b"VXDEPTH\0"
_MASKS_MAGIC = b"VXMASKS\0"
_FEAT_MAGIC = b"VXFEATS\0"
_POSE_MAGIC = b"VXPOSE\0\0"

_FLAG_ALLOW_OVERLAP = 1


@dataclass
class MaskObservation:
    """One segmentation mask with its caption embedding.

    ``pixels`` are sorted unique row-major flat indices (v * width + u).
    """

    pixels: np.ndarray
    feature: np.ndarray
    detection_score: float
    caption: str | None = None

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.int64)
        self.feature = np.asarray(self.feature, dtype=np.float32)

    @classmethod
    def from_bool_mask(cls, mask: np.ndarray, feature: np.ndarray,
                       detection_score: float = 1.0, caption: str | None = None) -> "MaskObservation":
        flat = np.nonzero(mask.reshape(-1))[0].astype(np.int64)
        return cls(pixels=flat, feature=feature, detection_score=detection_score, caption=caption)

    def to_bool_mask(self, height: int, width: int) -> np.ndarray:
        out = np.zeros(height * width, dtype=bool)
        out[self.pixels] = True
        return out.reshape(height, width)

    def pixel_rows_cols(self, width: int) -> tuple[np.ndarray, np.ndarray]:
        return self.pixels // width, self.pixels % width

    def validate(self, width: int, height: int, dim: int | None, where: str = "mask") -> None:
        if self.pixels.size == 0:
            raise ValidationError(f"{where}: mask is empty")
        if self.pixels.min() < 0 or self.pixels.max() >= width * height:
            raise ValidationError(f"{where}: pixel index outside {width}x{height} raster")
        if np.any(np.diff(self.pixels) <= 0):
            raise ValidationError(f"{where}: pixel indices must be sorted and unique")
        if self.feature.ndim != 1:
            raise ValidationError(f"{where}: feature must be a vector")
        if dim is not None and self.feature.shape[0] != dim:
            raise ValidationError(
                f"{where}: feature dimension {self.feature.shape[0]} != sequence dimension {dim}")
        if not np.all(np.isfinite(self.feature)):
            raise ValidationError(f"{where}: feature has non-finite entries")
        if float(np.linalg.norm(self.feature)) <= 0.0:
            raise ValidationError(f"{where}: feature norm must be positive")
        if not (0.0 <= self.detection_score <= 1.0):
            raise ValidationError(f"{where}: detection_score {self.detection_score} outside [0, 1]")


@dataclass
class FrameBundle:
    """Everything the engine consumes for one time step."""

    frame_id: int
    depth: np.ndarray
    pose: Pose
    intrinsics: CameraIntrinsics
    masks: list[MaskObservation] = field(default_factory=list)
    allow_overlap: bool = False

    def __post_init__(self) -> None:
        self.depth = np.asarray(self.depth, dtype=np.uint16)

    def validate(self, dim: int | None = None, where: str = "frame") -> None:
        h, w = self.depth.shape
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValidationError(
                f"{where}: depth raster {w}x{h} does not match intrinsics "
                f"{self.intrinsics.width}x{self.intrinsics.height}")
        for i, mask in enumerate(self.masks):
            mask.validate(w, h, dim, where=f"{where}: masks[{i}]")
        dims = {m.feature.shape[0] for m in self.masks}
        if len(dims) > 1:
            raise ValidationError(f"{where}: inconsistent feature dimensions {sorted(dims)}")
        if not self.allow_overlap and len(self.masks) > 1:
            all_px = np.concatenate([m.pixels for m in self.masks])
            if np.unique(all_px).size != all_px.size:
                raise ValidationError(
                    f"{where}: masks overlap but overlap flag is not set")


@dataclass
class SequenceManifest:
    version: int
    resolution: float
    embedding_dim: int
    frame_count: int
    frames: list[dict]
    ground_truth: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "version": self.version,
            "resolution": self.resolution,
            "embedding_dim": self.embedding_dim,
            "frame_count": self.frame_count,
            "frames": self.frames,
        }
        if self.ground_truth is not None:
            d["ground_truth"] = self.ground_truth
        return d


# ---------------------------------------------------------------------------
# run-length encoding over sorted flat indices
# ---------------------------------------------------------------------------


def rle_encode(flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique flat indices -> (starts, lengths)."""
    flat = np.asarray(flat, dtype=np.int64)
    if flat.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    breaks = np.nonzero(np.diff(flat) != 1)[0]
    starts = np.concatenate([[flat[0]], flat[breaks + 1]])
    ends = np.concatenate([flat[breaks], [flat[-1]]])
    return starts, ends - starts + 1


def rle_decode(starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """(starts, lengths) -> sorted flat indices."""
    starts = np.asarray(starts, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if starts.size == 0:
        return np.empty(0, np.int64)
    total = int(lengths.sum())
    out = np.ones(total, np.int64)
    out[0] = starts[0]
    cuts = np.cumsum(lengths)[:-1]
    out[cuts] = starts[1:] - (starts[:-1] + lengths[:-1] - 1)
    return np.cumsum(out)


# ---------------------------------------------------------------------------
# per-frame binary codecs
# ---------------------------------------------------------------------------


def _read_header(f, magic: bytes, path: Path) -> tuple[int, int]:
    head = f.read(16)
    if len(head) != 16 or head[:8] != magic:
        raise SchemaError(f"{path}: bad magic, expected {magic!r}")
    a, b = struct.unpack("<II", head[8:])
    return a, b


def write_depth(path: Path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(_DEPTH_MAGIC + struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(depth, dtype="<u2").tobytes())


def read_depth(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_header(f, _DEPTH_MAGIC, path)
        buf = f.read(2 * w * h)
        if len(buf) != 2 * w * h:
            raise SchemaError(f"{path}: depth raster truncated (field: data)")
        return np.frombuffer(buf, dtype="<u2").reshape(h, w).copy()


def write_masks(path: Path, masks: list[MaskObservation], allow_overlap: bool) -> None:
    flags = _FLAG_ALLOW_OVERLAP if allow_overlap else 0
    with open(path, "wb") as f:
        f.write(_MASKS_MAGIC + struct.pack("<II", len(masks), flags))
        for m in masks:
            f.write(struct.pack("<d", float(m.detection_score)))
            if m.caption is None:
                f.write(struct.pack("<B", 0))
            else:
                raw = m.caption.encode("utf-8")
                f.write(struct.pack("<BI", 1, len(raw)))
                f.write(raw)
            starts, lengths = rle_encode(m.pixels)
            f.write(struct.pack("<I", starts.size))
            runs = np.empty((starts.size, 2), dtype="<u8")
            runs[:, 0] = starts
            runs[:, 1] = lengths
            f.write(runs.tobytes())


def read_masks(path: Path) -> tuple[list[tuple[np.ndarray, float, str | None]], bool]:
    """Returns ([(pixels, score, caption)], allow_overlap); features come from .feat."""
    with open(path, "rb") as f:
        count, flags = _read_header(f, _MASKS_MAGIC, path)
        out = []
        for i in range(count):
            raw = f.read(8)
            if len(raw) != 8:
                raise SchemaError(f"{path}: masks[{i}]: truncated detection_score")
            (score,) = struct.unpack("<d", raw)
            flag = f.read(1)
            if len(flag) != 1:
                raise SchemaError(f"{path}: masks[{i}]: truncated caption flag")
            caption = None
            if flag[0] == 1:
                (clen,) = struct.unpack("<I", f.read(4))
                craw = f.read(clen)
                if len(craw) != clen:
                    raise SchemaError(f"{path}: masks[{i}]: truncated caption")
                caption = craw.decode("utf-8")
            elif flag[0] != 0:
                raise SchemaError(f"{path}: masks[{i}]: bad caption flag {flag[0]}")
            (n_runs,) = struct.unpack("<I", f.read(4))
            buf = f.read(16 * n_runs)
            if len(buf) != 16 * n_runs:
                raise SchemaError(f"{path}: masks[{i}]: truncated runs")
            runs = np.frombuffer(buf, dtype="<u8").reshape(n_runs, 2)
            pixels = rle_decode(runs[:, 0].astype(np.int64), runs[:, 1].astype(np.int64))
            out.append((pixels, score, caption))
        return out, bool(flags & _FLAG_ALLOW_OVERLAP)


def write_features(path: Path, features: list[np.ndarray], dim: int) -> None:
    with open(path, "wb") as f:
        f.write(_FEAT_MAGIC + struct.pack("<II", len(features), dim))
        for feat in features:
            f.write(np.ascontiguousarray(feat, dtype="<f4").tobytes())


def read_features(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        count, dim = _read_header(f, _FEAT_MAGIC, path)
        buf = f.read(4 * count * dim)
        if len(buf) != 4 * count * dim:
            raise SchemaError(f"{path}: feature rows truncated (field: data)")
        return np.frombuffer(buf, dtype="<f4").reshape(count, dim).copy()


def write_pose(path: Path, pose: Pose) -> None:
    with open(path, "wb") as f:
        f.write(_POSE_MAGIC + struct.pack("<II", 4, 4))
        f.write(np.ascontiguousarray(pose.matrix(), dtype="<f8").tobytes())


def read_pose(path: Path) -> Pose:
    with open(path, "rb") as f:
        rows, cols = _read_header(f, _POSE_MAGIC, path)
        if (rows, cols) != (4, 4):
            raise SchemaError(f"{path}: pose shape {rows}x{cols}, expected 4x4")
        buf = f.read(16 * 8)
        if len(buf) != 128:
            raise SchemaError(f"{path}: pose matrix truncated (field: data)")
        m = np.frombuffer(buf, dtype="<f8").reshape(4, 4)
        try:
            return Pose.from_matrix(m)
        except ValidationError as e:
            raise SchemaError(f"{path}: pose: {e}") from e


# ---------------------------------------------------------------------------
# sequence directory
# ---------------------------------------------------------------------------


def frame_basename(frame_id: int) -> str:
    return f"{frame_id:06d}"


def write_sequence(frames: list[FrameBundle], path: str | Path,
                   resolution: float = 0.04, embedding_dim: int | None = None,
                   ground_truth: dict | None = None) -> SequenceManifest:
    """Write a sequence directory; returns the manifest.

    ``embedding_dim`` may be omitted when any frame carries a mask (it is
    then inferred) but is required for sequences with no masks at all.
    """
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    if embedding_dim is None:
        dims = {m.feature.shape[0] for fr in frames for m in fr.masks}
        if len(dims) > 1:
            raise ValidationError(f"inconsistent feature dimensions across frames: {sorted(dims)}")
        if not dims:
            raise ValidationError("embedding_dim required for a sequence with no masks")
        embedding_dim = dims.pop()

    entries = []
    for fr in frames:
        fr.validate(dim=embedding_dim, where=f"frame {fr.frame_id}")
        base = frame_basename(fr.frame_id)
        write_depth(path / "frames" / f"{base}.depth", fr.depth)
        write_masks(path / "frames" / f"{base}.masks", fr.masks, fr.allow_overlap)
        write_features(path / "frames" / f"{base}.feat",
                       [m.feature for m in fr.masks], embedding_dim)
        write_pose(path / "frames" / f"{base}.pose", fr.pose)
        entries.append({
            "frame_id": fr.frame_id,
            "depth": f"frames/{base}.depth",
            "masks": f"frames/{base}.masks",
            "feat": f"frames/{base}.feat",
            "pose": f"frames/{base}.pose",
            "intrinsics": fr.intrinsics.to_dict(),
            "allow_overlap": fr.allow_overlap,
        })

    manifest = SequenceManifest(
        version=MANIFEST_VERSION, resolution=float(resolution),
        embedding_dim=int(embedding_dim), frame_count=len(frames),
        frames=entries, ground_truth=ground_truth,
    )
    write_manifest(path / "manifest.json", manifest)
    return manifest


def write_manifest(path: Path, manifest: SequenceManifest) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path: str | Path) -> SequenceManifest:
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    try:
        with open(mpath, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise SchemaError(f"{mpath}: invalid JSON: {e}") from e
    for fld in ("version", "resolution", "embedding_dim", "frame_count", "frames"):
        if fld not in raw:
            raise SchemaError(f"{mpath}: missing field '{fld}'")
    if raw["version"] != MANIFEST_VERSION:
        raise SchemaError(f"{mpath}: unsupported version {raw['version']} (field: version)")
    if len(raw["frames"]) != raw["frame_count"]:
        raise SchemaError(f"{mpath}: frame_count {raw['frame_count']} != {len(raw['frames'])} "
                          f"entries (field: frame_count)")
    return SequenceManifest(
        version=raw["version"], resolution=float(raw["resolution"]),
        embedding_dim=int(raw["embedding_dim"]), frame_count=int(raw["frame_count"]),
        frames=raw["frames"], ground_truth=raw.get("ground_truth"),
    )


def read_sequence(path: str | Path, on_warning: Callable[[str], None] | None = None
                  ) -> Iterator[FrameBundle]:
    """Stream the frames of a sequence directory in frame_id order.

    Validates every invariant eagerly per frame; memory use is bounded by
    one frame. Soft irregularities (none currently defined beyond what
    validation rejects) would be routed to ``on_warning``.
    """
    path = Path(path)
    manifest = read_manifest(path)
    last_id = None
    for i, entry in enumerate(manifest.frames):
        where = f"{path / 'manifest.json'}: frames[{i}]"
        for fld in ("frame_id", "depth", "masks", "feat", "pose", "intrinsics"):
            if fld not in entry:
                raise SchemaError(f"{where}: missing field '{fld}'")
        frame_id = int(entry["frame_id"])
        if last_id is not None and frame_id <= last_id:
            raise SchemaError(f"{where}: frame_id {frame_id} not increasing (field: frame_id)")
        last_id = frame_id
        try:
            intr = CameraIntrinsics.from_dict(entry["intrinsics"])
        except (KeyError, ValidationError) as e:
            raise SchemaError(f"{where}: intrinsics: {e}") from e
        depth = read_depth(path / entry["depth"])
        mask_data, allow_overlap = read_masks(path / entry["masks"])
        feats = read_features(path / entry["feat"])
        pose = read_pose(path / entry["pose"])
        if feats.shape[0] != len(mask_data):
            raise SchemaError(f"{path / entry['feat']}: {feats.shape[0]} feature rows for "
                              f"{len(mask_data)} masks (field: count)")
        if feats.shape[0] and feats.shape[1] != manifest.embedding_dim:
            raise SchemaError(f"{path / entry['feat']}: dimension {feats.shape[1]} != manifest "
                              f"embedding_dim {manifest.embedding_dim} (field: dim)")
        if bool(entry.get("allow_overlap", False)) != allow_overlap:
            raise SchemaError(f"{path / entry['masks']}: overlap flag disagrees with manifest "
                              f"(field: flags)")
        masks = [MaskObservation(pixels=px, feature=feats[j], detection_score=score, caption=cap)
                 for j, (px, score, cap) in enumerate(mask_data)]
        bundle = FrameBundle(frame_id=frame_id, depth=depth, pose=pose,
                             intrinsics=intr, masks=masks, allow_overlap=allow_overlap)
        try:
            bundle.validate(dim=manifest.embedding_dim, where=f"frame {frame_id}")
        except ValidationError as e:
            raise SchemaError(f"{path / entry['masks']}: {e}") from e
        yield bundle
