"""Per-frame instance association.

Each mask is either matched to an existing instance or mints a new one.
The match score for candidate instance gamma is a convex combination

    A_gamma = geo_weight * S_geo(gamma) + fea_weight * S_fea(gamma)

where S_geo is the mean, over the mask's back-projected voxel set, of
the per-voxel probability theta[gamma] (unobserved voxels contribute
zero), and S_fea is the cosine similarity between the mask's embedding
and the instance's codebook embedding, clamped to [0, 1]. A mask whose
voxel region is essentially unobserved, or whose best candidate falls
below the similarity threshold, starts a new instance initialized from
its own embedding.

Scoring is read-only on both map and codebook: all masks of a frame are
scored against the pre-frame state, and count/codebook mutation happens
afterwards (module ``evolution``). Because of that, decisions for the
masks of one frame are order-independent; processing order (descending
detection score) only affects how fresh instance IDs are numbered.

An IoU-threshold comparator (``baseline_associate_iou``) implements the
conventional label-overlap association: no probabilistic evidence and no
feature term. It exists to let experiments measure what the counting
model buys under segmentation noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import ValidationError
from .frame_store import FrameBundle, MaskObservation
from .geometry import back_project_pixels, pack_keys, voxelize_points
from .voxel_map import VoxelMap

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, typing only
    from .evolution import Codebook


@dataclass(frozen=True)
class AssociationConfig:
    """Weights and thresholds of the association rule.

    geo_weight and fea_weight must be non-negative and sum to 1;
    similarity_threshold is the minimum fused score for a match;
    observed_fraction_floor is the fraction of a mask's voxels that must
    already carry counts for the region to count as "previously
    observed"; candidate_scope picks which instances get scored.
    """

    geo_weight: float = 0.5
    fea_weight: float = 0.5
    similarity_threshold: float = 0.4
    observed_fraction_floor: float = 0.05
    candidate_scope: str = "voxel-local"

    def __post_init__(self) -> None:
        if self.geo_weight < 0 or self.fea_weight < 0:
            raise ValidationError("association weights must be non-negative")
        if abs(self.geo_weight + self.fea_weight - 1.0) > 1e-9:
            raise ValidationError(
                f"geo_weight + fea_weight must equal 1, got {self.geo_weight + self.fea_weight}")
        if not (0.0 < self.similarity_threshold < 1.0):
            raise ValidationError(
                f"similarity_threshold must lie in (0, 1), got {self.similarity_threshold}")
        if not (0.0 <= self.observed_fraction_floor < 1.0):
            raise ValidationError(
                f"observed_fraction_floor must lie in [0, 1), got {self.observed_fraction_floor}")
        if self.candidate_scope not in ("voxel-local", "global"):
            raise ValidationError(
                f"candidate_scope must be 'voxel-local' or 'global', got {self.candidate_scope!r}")


@dataclass
class MaskAssociation:
    """Decision for one mask: the instance it joins and why."""

    mask_index: int
    instance_id: int
    A: float
    S_geo: float
    S_fea: float
    is_new: bool
    voxel_keys: np.ndarray  # packed int64, unique
    visibility: float       # |V_m| / pre-frame argmax extent of the instance, clamped to 1


@dataclass
class AssociationResult:
    frame_id: int
    assignments: list[MaskAssociation] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)  # mask indices with no valid depth


def project_mask(mask: MaskObservation, frame: FrameBundle, resolution: float) -> np.ndarray:
    """Back-project a mask into its deduplicated voxel set (packed keys).

    Pixels with depth 0 (invalid) are skipped; the result may be empty,
    in which case the caller skips the mask.
    """
    w = frame.intrinsics.width
    vs, us = mask.pixels // w, mask.pixels % w
    depth_mm = frame.depth.reshape(-1)[mask.pixels]
    valid = depth_mm > 0
    if not valid.any():
        return np.empty(0, np.int64)
    depths = depth_mm[valid].astype(np.float64) * 1e-3
    points = back_project_pixels(us[valid], vs[valid], depths, frame.intrinsics, frame.pose)
    return np.unique(pack_keys(voxelize_points(points, resolution)))


def geometric_similarity(voxel_keys: np.ndarray, vmap: VoxelMap, gamma: int) -> float:
    """Mean of theta[gamma] over the voxel set; unobserved voxels count as 0."""
    if voxel_keys.size == 0:
        raise ValidationError("geometric similarity of an empty voxel set is undefined")
    _, sums = vmap.gamma_theta_sums(voxel_keys)
    return sums.get(gamma, 0.0) / voxel_keys.size


def feature_similarity(f_map: np.ndarray, f_obs: np.ndarray) -> float:
    """Cosine similarity clamped to [0, 1] so A stays a convex combination."""
    f_map = np.asarray(f_map, np.float64)
    f_obs = np.asarray(f_obs, np.float64)
    if f_map.shape != f_obs.shape:
        raise ValidationError(f"feature dimensions differ: {f_map.shape} vs {f_obs.shape}")
    na, nb = np.linalg.norm(f_map), np.linalg.norm(f_obs)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity undefined for zero-norm vector")
    return max(0.0, float(f_map @ f_obs) / (na * nb))


def _mask_order(frame: FrameBundle) -> list[int]:
    scores = np.array([m.detection_score for m in frame.masks])
    return list(np.argsort(-scores, kind="stable"))


def _visibility(vmap: VoxelMap, gamma: int, n_mask_voxels: int, is_new: bool) -> float:
    if is_new:
        return 1.0
    ext = int(vmap._extents[gamma])
    if ext <= 0:
        return 1.0  # degenerate: instance currently claims no voxels
    return min(1.0, n_mask_voxels / ext)


def associate_frame(frame: FrameBundle, vmap: VoxelMap, codebook: "Codebook",
                    cfg: AssociationConfig) -> AssociationResult:
    """Assign every mask of the frame to an instance (existing or new).

    Read-only on map and codebook except for minting fresh instance IDs;
    one bad mask is skipped rather than failing the frame.
    """
    result = AssociationResult(frame_id=frame.frame_id)
    for idx in _mask_order(frame):
        mask = frame.masks[idx]
        keys = project_mask(mask, frame, vmap.resolution)
        if keys.size == 0:
            result.skipped.append(idx)
            continue
        observed, theta_sums = vmap.gamma_theta_sums(keys)
        observed_fraction = observed / keys.size

        best_gamma, best_a, best_geo, best_fea = -1, -1.0, 0.0, 0.0
        if observed_fraction >= cfg.observed_fraction_floor:
            if cfg.candidate_scope == "voxel-local":
                candidates = sorted(theta_sums)
            else:
                candidates = sorted(codebook.ids())
            inv = 1.0 / keys.size
            for gamma in candidates:
                if gamma not in codebook:
                    continue
                s_geo = theta_sums.get(gamma, 0.0) * inv
                s_fea = feature_similarity(codebook.embedding(gamma), mask.feature)
                a = cfg.geo_weight * s_geo + cfg.fea_weight * s_fea
                if a > best_a:  # ties keep the smaller ID (candidates ascend)
                    best_gamma, best_a, best_geo, best_fea = gamma, a, s_geo, s_fea

        if best_gamma >= 0 and best_a >= cfg.similarity_threshold:
            result.assignments.append(MaskAssociation(
                mask_index=idx, instance_id=best_gamma, A=best_a, S_geo=best_geo,
                S_fea=best_fea, is_new=False, voxel_keys=keys,
                visibility=_visibility(vmap, best_gamma, keys.size, False)))
        else:
            gamma = vmap.new_instance_id()
            result.assignments.append(MaskAssociation(
                mask_index=idx, instance_id=gamma, A=max(best_a, 0.0), S_geo=best_geo,
                S_fea=best_fea, is_new=True, voxel_keys=keys, visibility=1.0))
    return result


def baseline_associate_iou(frame: FrameBundle, vmap: VoxelMap,
                           iou_threshold: float = 0.5) -> AssociationResult:
    """Label-overlap comparator: match by argmax-voxel IoU, else new instance."""
    if not (0.0 < iou_threshold <= 1.0):
        raise ValidationError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    result = AssociationResult(frame_id=frame.frame_id)
    for idx in _mask_order(frame):
        mask = frame.masks[idx]
        keys = project_mask(mask, frame, vmap.resolution)
        if keys.size == 0:
            result.skipped.append(idx)
            continue
        labels, _ = vmap.argmax_for_keys(keys)
        present = labels[labels >= 0].astype(np.int64)
        best_gamma, best_iou = -1, -1.0
        if present.size:
            gammas, inter = np.unique(present, return_counts=True)
            for gamma, ninter in zip(gammas.tolist(), inter.tolist()):
                ext = int(vmap._extents[gamma])
                union = keys.size + ext - ninter
                iou = ninter / union if union else 0.0
                if iou > best_iou:  # gammas ascend, so ties keep the smaller ID
                    best_gamma, best_iou = gamma, iou
        if best_gamma >= 0 and best_iou >= iou_threshold:
            result.assignments.append(MaskAssociation(
                mask_index=idx, instance_id=best_gamma, A=best_iou, S_geo=best_iou,
                S_fea=0.0, is_new=False, voxel_keys=keys,
                visibility=_visibility(vmap, best_gamma, keys.size, False)))
        else:
            gamma = vmap.new_instance_id()
            result.assignments.append(MaskAssociation(
                mask_index=idx, instance_id=gamma, A=max(best_iou, 0.0), S_geo=max(best_iou, 0.0),
                S_fea=0.0, is_new=True, voxel_keys=keys, visibility=1.0))
    return result


def association_log_records(result: AssociationResult) -> list[dict]:
    """JSON-ready records, one per mask, for the association debug stream."""
    records = []
    for a in result.assignments:
        records.append({
            "frame_id": int(result.frame_id), "mask_index": int(a.mask_index),
            "instance_id": int(a.instance_id), "A": float(a.A),
            "S_geo": float(a.S_geo), "S_fea": float(a.S_fea),
            "is_new": bool(a.is_new), "n_voxels": int(a.voxel_keys.size),
        })
    for idx in result.skipped:
        records.append({"frame_id": int(result.frame_id), "mask_index": int(idx),
                        "skipped": True})
    records.sort(key=lambda r: r["mask_index"])
    return records
