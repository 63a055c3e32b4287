"""Live map evolution: apply association decisions to the map and codebook.

Voxel side: every voxel of every assigned mask gets one observation
count of its instance (the counting sensor model — integer evidence,
one observation = one count).

Codebook side: each instance keeps a credibility-weighted running mean
of the mask embeddings assigned to it. The credibility of one
observation is w = A * R, where A is the association probability and R
is the visibility ratio — how much of the instance's current extent the
mask covers (clamped to 1). A new instance starts from its initializing
embedding with w = 1: full visibility by definition, and the
initializing feature is the only evidence there is.

``integrate_frame`` chains validation, association, voxel update, and
codebook update. Validation happens before any mutation, so a rejected
frame leaves both structures untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .association import (
    AssociationConfig,
    AssociationResult,
    associate_frame,
    baseline_associate_iou,
)
from .errors import ValidationError
from .frame_store import FrameBundle
from .voxel_map import VoxelMap


@dataclass
class CodebookRecord:
    """Embedding state of one instance.

    ``embedding`` is a weighted running mean and not necessarily unit
    norm — cosine similarity is scale-invariant, so it is never
    renormalized. ``argmax_extent`` mirrors the map's cached voxel count
    for the instance, refreshed after every integrated frame.
    """

    instance_id: int
    embedding: np.ndarray
    weight: float
    caption: str | None = None
    caption_weight: float = 0.0
    argmax_extent: int = 0


class Codebook:
    """Instance ID -> CodebookRecord."""

    def __init__(self) -> None:
        self._records: dict[int, CodebookRecord] = {}

    def __contains__(self, gamma: int) -> bool:
        return gamma in self._records

    def __len__(self) -> int:
        return len(self._records)

    def ids(self) -> list[int]:
        return sorted(self._records)

    def get(self, gamma: int) -> CodebookRecord:
        return self._records[gamma]

    def embedding(self, gamma: int) -> np.ndarray:
        return self._records[gamma].embedding

    def records(self) -> list[CodebookRecord]:
        return [self._records[g] for g in self.ids()]

    @property
    def dim(self) -> int | None:
        for rec in self._records.values():
            return int(rec.embedding.shape[0])
        return None

    def add(self, gamma: int, embedding: np.ndarray, caption: str | None = None,
            weight: float = 1.0) -> CodebookRecord:
        if gamma in self._records:
            raise ValidationError(f"instance {gamma} already has a codebook record")
        emb = np.asarray(embedding, np.float64).copy()
        if self.dim is not None and emb.shape[0] != self.dim:
            raise ValidationError(f"embedding dimension {emb.shape[0]} != codebook dim {self.dim}")
        rec = CodebookRecord(instance_id=gamma, embedding=emb, weight=float(weight),
                             caption=caption, caption_weight=float(weight) if caption else 0.0)
        self._records[gamma] = rec
        return rec

    def insert_record(self, record: CodebookRecord) -> None:
        """Install a fully-specified record (snapshot restore path)."""
        if record.instance_id in self._records:
            raise ValidationError(
                f"instance {record.instance_id} already has a codebook record")
        if self.dim is not None and record.embedding.shape[0] != self.dim:
            raise ValidationError(
                f"embedding dimension {record.embedding.shape[0]} != codebook dim {self.dim}")
        self._records[record.instance_id] = record

    def fuse(self, gamma: int, f_obs: np.ndarray, w: float, caption: str | None = None) -> None:
        """Weighted-mean update: f <- (W f + w f_obs) / (W + w); W <- W + w."""
        rec = self._records[gamma]
        f_obs = np.asarray(f_obs, np.float64)
        if f_obs.shape != rec.embedding.shape:
            raise ValidationError(
                f"embedding dimension {f_obs.shape} != record dimension {rec.embedding.shape}")
        if w < 0:
            raise ValidationError(f"credibility weight must be >= 0, got {w}")
        if w == 0.0:
            return
        rec.embedding = (rec.weight * rec.embedding + w * f_obs) / (rec.weight + w)
        rec.weight += w
        if caption is not None and w > rec.caption_weight:
            rec.caption = caption
            rec.caption_weight = w

    def merge_records(self, src: int, dst: int) -> None:
        """Fuse src's record into dst's by their weights and drop src."""
        if src not in self._records or dst not in self._records:
            self._records.pop(src, None)
            return
        a, b = self._records[src], self._records[dst]
        total = a.weight + b.weight
        b.embedding = (a.weight * a.embedding + b.weight * b.embedding) / total
        b.weight = total
        if a.caption is not None and a.caption_weight > b.caption_weight:
            b.caption = a.caption
            b.caption_weight = a.caption_weight
        del self._records[src]


def update_voxels(vmap: VoxelMap, result: AssociationResult) -> None:
    """Count one observation of its instance at every voxel of every mask."""
    for a in result.assignments:
        vmap.increment_batch(a.voxel_keys, a.instance_id)


def visibility_ratio(voxel_keys: np.ndarray, vmap: VoxelMap, gamma: int) -> float:
    """|V_m| over the instance's current argmax extent, clamped to 1.

    A zero-extent (degenerate) instance yields 1.0. Note that inside
    ``integrate_frame`` the ratio was already computed during
    association, against the pre-update extents.
    """
    vmap._check_gamma(gamma)
    ext = int(vmap._extents[gamma])
    if ext <= 0:
        return 1.0
    return min(1.0, voxel_keys.size / ext)


def update_codebook(codebook: Codebook, result: AssociationResult, vmap: VoxelMap,
                    frame: FrameBundle) -> None:
    """Fuse each assigned mask's embedding into its instance record.

    Credibility w = A * R with R stashed by association (computed against
    pre-update extents). New instances are created from their mask's
    embedding with weight 1.
    """
    for a in result.assignments:
        mask = frame.masks[a.mask_index]
        if a.is_new:
            codebook.add(a.instance_id, mask.feature, caption=mask.caption, weight=1.0)
        else:
            w = a.A * a.visibility
            codebook.fuse(a.instance_id, mask.feature, w, caption=mask.caption)
    for a in result.assignments:
        rec = codebook.get(a.instance_id)
        rec.argmax_extent = int(vmap._extents[a.instance_id])


@dataclass
class FrameReport:
    """Per-frame integration summary (JSON-serializable, no timing)."""

    frame_id: int
    n_masks: int
    n_skipped: int
    n_new_instances: int
    n_assigned: int
    n_instances: int
    n_voxels: int
    total_count: int
    associations: AssociationResult = field(repr=False, default=None)

    def to_json_dict(self) -> dict:
        return {
            "frame_id": self.frame_id, "n_masks": self.n_masks,
            "n_skipped": self.n_skipped, "n_new_instances": self.n_new_instances,
            "n_assigned": self.n_assigned, "n_instances": self.n_instances,
            "n_voxels": self.n_voxels, "total_count": self.total_count,
        }


def integrate_frame(vmap: VoxelMap, codebook: Codebook, frame: FrameBundle,
                    cfg: AssociationConfig | None = None, *,
                    backend: str = "probabilistic",
                    iou_threshold: float = 0.5) -> FrameReport:
    """Associate, then update voxels, then update the codebook.

    Validation failures abort before any mutation, so the map and
    codebook are left bit-identical to their pre-frame state.
    """
    cfg = cfg or AssociationConfig()
    frame.validate(dim=codebook.dim, where=f"frame {frame.frame_id}")
    if backend == "probabilistic":
        result = associate_frame(frame, vmap, codebook, cfg)
    elif backend == "iou":
        result = baseline_associate_iou(frame, vmap, iou_threshold)
    else:
        raise ValidationError(f"unknown association backend {backend!r}")
    update_voxels(vmap, result)
    update_codebook(codebook, result, vmap, frame)
    return FrameReport(
        frame_id=frame.frame_id,
        n_masks=len(frame.masks),
        n_skipped=len(result.skipped),
        n_new_instances=sum(1 for a in result.assignments if a.is_new),
        n_assigned=sum(1 for a in result.assignments if not a.is_new),
        n_instances=len(codebook),
        n_voxels=vmap.n_voxels,
        total_count=vmap.total_count,
        associations=result,
    )
