"""Read-side services over a map: rendering, retrieval, labeling, export.

Everything here is read-only with respect to the map and codebook and
deterministic given identical inputs, so snapshots and exports from the
same state are bit-identical.
"""

from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SchemaError, ValidationError
from .evolution import Codebook, CodebookRecord
from .geometry import CameraIntrinsics, Pose, back_project_pixels, pack_keys, unpack_keys
from .voxel_map import VoxelMap, count_triples, from_triples

BACKGROUND = -1

_SNAPSHOT_MAGIC = b"VXSNAPS\0"
_LABELED_MAGIC = b"VXLABEL\0"


@dataclass
class RenderedMask:
    labels: np.ndarray       # (H, W) int32, BACKGROUND where unobserved
    confidence: np.ndarray   # (H, W) float64 in [0, 1]


@dataclass
class RetrievalHit:
    instance_id: int
    score: float
    rank: int  # 1-based


def render_mask(vmap: VoxelMap, intrinsics: CameraIntrinsics, pose: Pose,
                depth: np.ndarray) -> RenderedMask:
    """Project the map into a view: per-pixel argmax label + confidence.

    Each valid-depth pixel is back-projected into exactly the voxel that
    contains it; pixels landing in unobserved voxels (or with invalid
    depth) render as BACKGROUND with confidence 0.
    """
    depth = np.asarray(depth)
    if depth.shape != (intrinsics.height, intrinsics.width):
        raise ValidationError(
            f"depth shape {depth.shape} does not match intrinsics "
            f"({intrinsics.height}, {intrinsics.width})")
    labels = np.full(depth.shape, BACKGROUND, np.int32)
    conf = np.zeros(depth.shape, np.float64)
    vr, uc = np.nonzero(depth > 0)
    if vr.size:
        points = back_project_pixels(uc.astype(np.float64), vr.astype(np.float64),
                                     depth[vr, uc].astype(np.float64) / 1000.0,
                                     intrinsics, pose)
        keys = pack_keys(np.floor(points / vmap.resolution).astype(np.int64))
        lab, c = vmap.argmax_for_keys(keys)
        labels[vr, uc] = lab
        conf[vr, uc] = c
    return RenderedMask(labels=labels, confidence=conf)


def retrieve(codebook: Codebook, query_embedding: np.ndarray, k: int) -> list[RetrievalHit]:
    """Top-k codebook instances by cosine similarity, ties to smaller ID.

    Scores are raw cosines (no clamping; ranking only needs order).
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    ids = codebook.ids()
    if not ids:
        return []
    q = np.asarray(query_embedding, np.float64)
    if codebook.dim is not None and q.shape != (codebook.dim,):
        raise ValidationError(
            f"query dimension {q.shape} does not match codebook ({codebook.dim},)")
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValidationError("query embedding has zero norm")
    mat = np.stack([codebook.embedding(g) for g in ids])
    norms = np.linalg.norm(mat, axis=1)
    scores = np.where(norms > 0, mat @ q / np.where(norms > 0, norms, 1.0) / qn, -1.0)
    order = np.lexsort((ids, -scores))[:k]
    return [RetrievalHit(instance_id=int(ids[i]), score=float(scores[i]), rank=r + 1)
            for r, i in enumerate(order)]


def semantic_labels(codebook: Codebook,
                    class_embeddings: list[tuple[int, np.ndarray]]) -> dict[int, int]:
    """Map each instance to its argmax-cosine class (ties: smaller class ID)."""
    if not class_embeddings:
        raise ValidationError("class table must be non-empty")
    ordered = sorted(class_embeddings, key=lambda item: item[0])
    table = np.stack([np.asarray(e, np.float64) for _, e in ordered])
    cls_ids = [int(c) for c, _ in ordered]
    if codebook.dim is not None and table.shape[1] != codebook.dim:
        raise ValidationError(
            f"class embedding dimension {table.shape[1]} does not match "
            f"codebook ({codebook.dim})")
    tnorm = np.linalg.norm(table, axis=1)
    if np.any(tnorm == 0):
        raise ValidationError("class embeddings must have nonzero norm")
    out = {}
    for gamma in codebook.ids():
        f = codebook.embedding(gamma)
        fn = np.linalg.norm(f)
        scores = table @ f / (tnorm * fn) if fn > 0 else np.full(len(cls_ids), -1.0)
        best = int(np.argmax(scores))  # argmax takes the first (smallest) on ties
        out[gamma] = cls_ids[best]
    return out


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def instance_color(gamma: int) -> tuple[int, int, int]:
    """Stable, well-spread RGB for an instance ID (golden-ratio hue)."""
    hue = (gamma * 0.6180339887498949) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def _top3_per_voxel(vmap: VoxelMap, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(gamma, theta) of the 3 largest count slots per row, padded (-1, 0)."""
    n = rows.size
    out_g = np.full((n, 3), -1, np.int32)
    out_t = np.zeros((n, 3), np.float32)
    totals = vmap._totals[rows].astype(np.float64)
    plain = ~vmap._has_overflow[rows]
    if plain.any():
        pr = rows[plain]
        sg = vmap._slot_gamma[pr]
        sc = vmap._slot_count[pr].astype(np.float64)
        sc[sg < 0] = -1.0  # sink empty slots to the end of the sort
        k = sg.shape[1]
        rowi = np.repeat(np.arange(pr.size), k)
        order = np.lexsort((sg.ravel(), -sc.ravel(), rowi))
        sg_sorted = sg.ravel()[order].reshape(pr.size, k)[:, :3]
        sc_sorted = sc.ravel()[order].reshape(pr.size, k)[:, :3]
        keep = sg_sorted >= 0
        dst = np.flatnonzero(plain)
        for j in range(3):
            sel = keep[:, j]
            out_g[dst[sel], j] = sg_sorted[sel, j]
            out_t[dst[sel], j] = (sc_sorted[sel, j] / totals[plain][sel]).astype(np.float32)
    for i in np.flatnonzero(~plain):
        row = int(rows[i])
        pairs: dict[int, int] = dict(vmap._overflow.get(row, {}))
        for g, c in zip(vmap._slot_gamma[row], vmap._slot_count[row]):
            if g >= 0:
                pairs[int(g)] = int(c)
        top = sorted(pairs.items(), key=lambda it: (-it[1], it[0]))[:3]
        for j, (g, c) in enumerate(top):
            out_g[i, j] = g
            out_t[i, j] = c / totals[i]
    return out_g, out_t


def export_map(vmap: VoxelMap, codebook: Codebook, path: str | Path,
               format: str = "pointlist") -> Path:
    """Write the map (and codebook.json) into a directory.

    ``pointlist``: ASCII PLY of voxel centers colored by argmax instance
    with per-vertex confidence. ``labeled-voxels``: binary dump of
    (packed key, argmax ID, confidence, top-3 (instance, theta) pairs).
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    keys, _, _ = count_triples(vmap)
    ukeys = np.unique(keys)
    order_rows = vmap.rows_for_keys(ukeys)
    labels, conf = vmap.argmax_for_keys(ukeys)

    if format == "pointlist":
        centers = (unpack_keys(ukeys).astype(np.float64) + 0.5) * vmap.resolution
        lines = [
            "ply", "format ascii 1.0",
            f"element vertex {ukeys.size}",
            "property float x", "property float y", "property float z",
            "property uchar red", "property uchar green", "property uchar blue",
            "property float confidence",
            "end_header",
        ]
        for i in range(ukeys.size):
            r, g, b = instance_color(int(labels[i]))
            x, y, z = centers[i]
            lines.append(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b} {conf[i]:.6f}")
        (out / "voxels.ply").write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif format == "labeled-voxels":
        top_g, top_t = _top3_per_voxel(vmap, order_rows)
        with open(out / "voxels.bin", "wb") as f:
            f.write(_LABELED_MAGIC + struct.pack("<Q", ukeys.size))
            f.write(np.ascontiguousarray(ukeys, "<i8").tobytes())
            f.write(np.ascontiguousarray(labels, "<i4").tobytes())
            f.write(np.ascontiguousarray(conf, "<f4").tobytes())
            f.write(np.ascontiguousarray(top_g, "<i4").tobytes())
            f.write(np.ascontiguousarray(top_t, "<f4").tobytes())
    else:
        raise ValidationError(f"unknown export format {format!r}")

    with open(out / "codebook.json", "w", encoding="utf-8") as f:
        json.dump(codebook_to_json_dict(codebook), f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def read_labeled_voxels(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:8] != _LABELED_MAGIC:
            raise SchemaError(f"{path}: bad magic for labeled-voxel export")
        (n,) = struct.unpack("<Q", head[8:])
        def take(dtype, count, shape):
            buf = f.read(np.dtype(dtype).itemsize * count)
            if len(buf) != np.dtype(dtype).itemsize * count:
                raise SchemaError(f"{path}: truncated labeled-voxel export")
            return np.frombuffer(buf, dtype).reshape(shape).copy()
        return {
            "keys": take("<i8", n, (n,)),
            "labels": take("<i4", n, (n,)),
            "confidence": take("<f4", n, (n,)),
            "top_gamma": take("<i4", 3 * n, (n, 3)),
            "top_theta": take("<f4", 3 * n, (n, 3)),
        }


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def codebook_to_json_dict(codebook: Codebook) -> dict:
    instances = []
    for gamma in codebook.ids():
        rec = codebook.get(gamma)
        instances.append({
            "instance_id": rec.instance_id,
            "weight": rec.weight,
            "caption": rec.caption,
            "caption_weight": rec.caption_weight,
            "argmax_extent": rec.argmax_extent,
            "embedding": [float(x) for x in rec.embedding],
        })
    return {"version": 1, "embedding_dim": codebook.dim, "instances": instances}


def codebook_from_json_dict(doc: dict) -> Codebook:
    if doc.get("version") != 1:
        raise SchemaError(f"codebook: unsupported version {doc.get('version')!r}")
    cb = Codebook()
    for entry in doc["instances"]:
        cb.insert_record(CodebookRecord(
            instance_id=int(entry["instance_id"]),
            embedding=np.array(entry["embedding"], np.float64),
            weight=float(entry["weight"]),
            caption=entry["caption"],
            caption_weight=float(entry["caption_weight"]),
            argmax_extent=int(entry["argmax_extent"]),
        ))
    return cb


def save_snapshot(vmap: VoxelMap, codebook: Codebook, path: str | Path) -> Path:
    """Persist full map + codebook state into a directory (bit-stable)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    keys, gammas, counts = count_triples(vmap)
    with open(out / "counts.bin", "wb") as f:
        f.write(_SNAPSHOT_MAGIC + struct.pack("<Q", keys.size))
        f.write(np.ascontiguousarray(keys, "<i8").tobytes())
        f.write(np.ascontiguousarray(gammas, "<i4").tobytes())
        f.write(np.ascontiguousarray(counts, "<i8").tobytes())
    meta = {
        "version": 1,
        "resolution": vmap.resolution,
        "next_instance_id": vmap.next_instance_id,
        "n_voxels": vmap.n_voxels,
        "total_count": vmap.total_count,
    }
    with open(out / "meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "codebook.json", "w", encoding="utf-8") as f:
        json.dump(codebook_to_json_dict(codebook), f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def load_snapshot(path: str | Path) -> tuple[VoxelMap, Codebook]:
    root = Path(path)
    try:
        with open(root / "meta.json", encoding="utf-8") as f:
            meta = json.load(f)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{root}: invalid snapshot meta ({exc})") from exc
    if meta.get("version") != 1:
        raise SchemaError(f"{root}: unsupported snapshot version {meta.get('version')!r}")
    with open(root / "counts.bin", "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:8] != _SNAPSHOT_MAGIC:
            raise SchemaError(f"{root}/counts.bin: bad magic for snapshot")
        (n,) = struct.unpack("<Q", head[8:])

        def take(dtype, name):
            dt = np.dtype(dtype)
            buf = f.read(dt.itemsize * n)
            if len(buf) != dt.itemsize * n:
                raise SchemaError(f"{root}/counts.bin: truncated snapshot (field: {name})")
            return np.frombuffer(buf, dt)

        keys = take("<i8", "keys")
        gammas = take("<i4", "gammas")
        counts = take("<i8", "counts")
    vmap = from_triples(float(meta["resolution"]), keys.copy(), gammas.copy(),
                        counts.copy(), next_instance_id=int(meta["next_instance_id"]))
    with open(root / "codebook.json", encoding="utf-8") as f:
        codebook = codebook_from_json_dict(json.load(f))
    return vmap, codebook
