"""Evaluation harness: instance AP, semantic mIoU/mAcc, retrieval recall.

The protocol follows the common 3D-instance-benchmark conventions:
predictions ranked by confidence (mean max-probability over each
instance's argmax voxels), greedy one-to-one matching against ground
truth at an IoU threshold, 101-point interpolated average precision,
and AP averaged over thresholds 0.50:0.05:0.95 (AP50/AP25 at fixed
0.50/0.25). Semantic scores are confusion-matrix mIoU/mAcc over the
union of labeled voxels; retrieval recall asks whether the correct
instance appears in the top-k of a cosine ranking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .voxel_map import VoxelMap, instance_voxel_sets

AP_THRESHOLDS = tuple(0.5 + 0.05 * i for i in range(10))


@dataclass
class GroundTruthMap:
    """Voxelized ground truth: per-voxel instance and class labels."""

    resolution: float
    keys: np.ndarray           # packed voxel keys, sorted ascending
    instance_ids: np.ndarray   # int32, parallel to keys
    class_ids: np.ndarray      # int32, parallel to keys

    def __post_init__(self) -> None:
        self.keys = np.asarray(self.keys, np.int64)
        self.instance_ids = np.asarray(self.instance_ids, np.int32)
        self.class_ids = np.asarray(self.class_ids, np.int32)
        if not (self.keys.size == self.instance_ids.size == self.class_ids.size):
            raise ValidationError("GT arrays must have equal length")
        if self.keys.size == 0:
            raise ValidationError("ground truth map must be nonempty")
        if np.any(np.diff(self.keys) < 0):
            raise ValidationError("GT keys must be sorted")

    def instance_voxel_sets(self) -> dict[int, np.ndarray]:
        order = np.argsort(self.instance_ids, kind="stable")
        ids = self.instance_ids[order]
        keys = self.keys[order]
        bounds = np.flatnonzero(np.diff(ids)) + 1
        groups = np.split(keys, bounds)
        uniq = np.concatenate([[ids[0]], ids[bounds]]) if ids.size else []
        return {int(g): np.sort(k) for g, k in zip(uniq, groups)}

    def instance_classes(self) -> dict[int, int]:
        return {int(g): int(c) for g, c in zip(self.instance_ids, self.class_ids)}


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap25: float
    miou: float | None
    macc: float | None
    recalls: dict[str, dict[int, float]]
    n_predictions: int
    n_gt_instances: int
    diagnostics: list[dict] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        doc = {
            "ap": self.ap, "ap50": self.ap50, "ap25": self.ap25,
            "n_predictions": self.n_predictions,
            "n_gt_instances": self.n_gt_instances,
            "recalls": {kind: {str(k): v for k, v in sorted(per.items())}
                        for kind, per in sorted(self.recalls.items())},
            "diagnostics": self.diagnostics,
        }
        if self.miou is not None:
            doc["miou"] = self.miou
        if self.macc is not None:
            doc["macc"] = self.macc
        return doc

    def to_text_table(self) -> str:
        rows = [("AP", self.ap), ("AP50", self.ap50), ("AP25", self.ap25)]
        if self.miou is not None:
            rows.append(("mIoU", self.miou))
        if self.macc is not None:
            rows.append(("mAcc", self.macc))
        for kind, per in sorted(self.recalls.items()):
            for k, v in sorted(per.items()):
                rows.append((f"recall@{k} ({kind})", v))
        width = max(len(name) for name, _ in rows)
        lines = [f"{name:<{width}}  {value:.4f}" for name, value in rows]
        header = f"{'metric':<{width}}  value"
        rule = "-" * len(header)
        return "\n".join([header, rule, *lines])


def voxel_iou(set_a, set_b) -> float:
    """|A ∩ B| / |A ∪ B| over voxel keys; empty union defined as 0."""
    a = np.unique(np.asarray(list(set_a) if isinstance(set_a, (set, frozenset)) else set_a,
                             np.int64))
    b = np.unique(np.asarray(list(set_b) if isinstance(set_b, (set, frozenset)) else set_b,
                             np.int64))
    n_inter = np.intersect1d(a, b, assume_unique=True).size
    n_union = a.size + b.size - n_inter
    if n_union == 0:
        return 0.0
    return n_inter / n_union


def map_predictions(vmap: VoxelMap) -> list[tuple[int, np.ndarray, float]]:
    """Predicted instances: (id, argmax voxel keys, confidence).

    Confidence is the mean max-probability over the instance's argmax
    voxels — the map's own certainty about the voxels it labels with
    this instance.
    """
    preds = []
    for gamma, keys in sorted(instance_voxel_sets(vmap).items()):
        _, conf = vmap.argmax_for_keys(keys)
        preds.append((gamma, keys, float(conf.mean())))
    return preds


def _ranked(predictions):
    return sorted(predictions, key=lambda p: (-p[2], p[0]))


def _greedy_tp_curve(ranked, gt_sets: dict[int, np.ndarray], threshold: float
                     ) -> tuple[np.ndarray, dict[int, tuple[int, float]]]:
    """Cumulative TP counts per rank plus the pred->(gt, IoU) matching."""
    unmatched = dict(gt_sets)
    curve = np.zeros(len(ranked), np.int64)
    matches: dict[int, tuple[int, float]] = {}
    tp = 0
    for rank, (pid, keys, _) in enumerate(ranked):
        best_gid, best_iou = -1, 0.0
        for gid in sorted(unmatched):
            iou = voxel_iou(keys, unmatched[gid])
            if iou > best_iou:
                best_gid, best_iou = gid, iou
        if best_gid >= 0 and best_iou >= threshold:
            del unmatched[best_gid]
            matches[pid] = (best_gid, best_iou)
            tp += 1
        curve[rank] = tp
    return curve, matches


def _ap_from_curve(curve: np.ndarray, n_gt: int) -> float:
    if curve.size == 0:
        return 0.0
    ranks = np.arange(1, curve.size + 1, dtype=np.float64)
    recall = curve / n_gt
    precision = curve / ranks
    # recall is non-decreasing in rank, so "all points with recall >= r"
    # is a rank suffix; take the running max of precision from the right
    suffix_best = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.array([i / 100.0 for i in range(101)])
    idx = np.searchsorted(recall, grid, side="left")
    hit = idx < recall.size
    vals = np.where(hit, suffix_best[np.minimum(idx, recall.size - 1)], 0.0)
    return float(vals.mean())


def _gt_sets(gt) -> dict[int, np.ndarray]:
    if isinstance(gt, GroundTruthMap):
        return gt.instance_voxel_sets()
    sets = {int(g): np.unique(np.asarray(list(v), np.int64)) for g, v in gt.items()}
    if not sets:
        raise ValidationError("ground truth must be nonempty")
    return sets


def ap_at_threshold(predictions, gt, threshold: float) -> float:
    gt_sets = _gt_sets(gt)
    curve, _ = _greedy_tp_curve(_ranked(predictions), gt_sets, threshold)
    return _ap_from_curve(curve, len(gt_sets))


def instance_ap(predictions, gt) -> tuple[float, float, float]:
    """(AP over 0.50:0.05:0.95, AP50, AP25) for prediction triples.

    ``predictions`` are (instance_id, voxel keys, confidence) triples as
    produced by map_predictions; ``gt`` is a GroundTruthMap or a dict of
    instance id -> voxel key set.
    """
    gt_sets = _gt_sets(gt)
    ranked = _ranked(predictions)
    per_thr = []
    for thr in AP_THRESHOLDS + (0.25,):
        curve, _ = _greedy_tp_curve(ranked, gt_sets, thr)
        per_thr.append(_ap_from_curve(curve, len(gt_sets)))
    ap = sum(per_thr[:-1]) / len(AP_THRESHOLDS)
    return ap, per_thr[0], per_thr[-1]


def semantic_scores(pred_classes, gt) -> tuple[float, float]:
    """(mIoU, mAcc) over the union of predicted and GT voxels.

    ``pred_classes`` maps packed voxel key -> class id. Accuracy per
    class is recall over that class's GT voxels; both scores average
    over the classes present in the ground truth.
    """
    if isinstance(gt, GroundTruthMap):
        gt_keys, gt_cls = gt.keys, gt.class_ids.astype(np.int64)
    else:
        items = sorted(gt.items())
        gt_keys = np.array([k for k, _ in items], np.int64)
        gt_cls = np.array([c for _, c in items], np.int64)
    if gt_keys.size == 0:
        raise ValidationError("ground truth must be nonempty")
    pk = np.fromiter(pred_classes.keys(), np.int64, len(pred_classes))
    pc = np.fromiter(pred_classes.values(), np.int64, len(pred_classes))

    domain = np.union1d(gt_keys, pk)
    g = np.full(domain.size, -1, np.int64)
    g[np.searchsorted(domain, gt_keys)] = gt_cls
    p = np.full(domain.size, -1, np.int64)
    if pk.size:
        p[np.searchsorted(domain, pk)] = pc

    ious, accs = [], []
    for c in np.unique(gt_cls):
        tp = int(np.count_nonzero((g == c) & (p == c)))
        fn = int(np.count_nonzero((g == c) & (p != c)))
        fp = int(np.count_nonzero((g != c) & (p == c)))
        ious.append(tp / (tp + fp + fn) if tp + fp + fn else 0.0)
        accs.append(tp / (tp + fn) if tp + fn else 0.0)
    return float(np.mean(ious)), float(np.mean(accs))


def _retrieval_hit_counts(codebook, queries, k_list) -> dict[int, int]:
    from .query import retrieve
    counts = {k: 0 for k in k_list}
    max_k = max(k_list)
    for embedding, expected in queries:
        if expected not in codebook:
            raise ValidationError(f"unknown instance id {expected} in retrieval query")
        hits = retrieve(codebook, np.asarray(embedding, np.float64), max_k)
        ids = [h.instance_id for h in hits]
        for k in k_list:
            if expected in ids[:k]:
                counts[k] += 1
    return counts


def retrieval_recall(codebook, queries, k_list=(1, 2, 3)) -> dict[int, float]:
    """Fraction of queries whose target instance ranks in the top-k."""
    if not queries:
        raise ValidationError("retrieval queries must be non-empty")
    counts = _retrieval_hit_counts(codebook, queries, k_list)
    return {k: counts[k] / len(queries) for k in k_list}


def evaluate_map(vmap: VoxelMap, codebook, gt: GroundTruthMap, *,
                 class_table: np.ndarray | None = None,
                 k_list=(1, 2, 3)) -> EvalReport:
    """Full protocol: AP triplet, semantic scores, retrieval recall.

    Retrieval queries each GT instance's class embedding and expects the
    predicted instance that the AP50 matching paired with it; GT
    instances left unmatched at IoU 0.5 count as retrieval misses.
    Semantic scores need ``class_table`` (row per class id) to label
    predicted instances by nearest class; omitted -> mIoU/mAcc are None.
    """
    if abs(vmap.resolution - gt.resolution) > 1e-12:
        raise ValidationError(
            f"resolution mismatch: map {vmap.resolution} vs GT {gt.resolution}")
    preds = map_predictions(vmap)
    gt_sets = gt.instance_voxel_sets()
    gt_classes = gt.instance_classes()
    ranked = _ranked(preds)
    ap, ap50, ap25 = instance_ap(preds, gt)
    _, matches50 = _greedy_tp_curve(ranked, gt_sets, 0.5)

    diagnostics = []
    for pid, keys, conf in ranked:
        gid, iou = matches50.get(pid, (None, None))
        diagnostics.append({"instance_id": pid, "n_voxels": int(keys.size),
                            "confidence": conf, "matched_gt": gid, "iou": iou})

    miou = macc = None
    recalls: dict[str, dict[int, float]] = {}
    if class_table is not None and len(codebook) > 0:
        from .query import semantic_labels
        class_embeddings = [(c, class_table[c]) for c in range(class_table.shape[0])]
        label_of = semantic_labels(codebook, class_embeddings)
        pred_classes: dict[int, int] = {}
        for pid, keys, _ in preds:
            if pid in label_of:
                cls = label_of[pid]
                for key in keys:
                    pred_classes[int(key)] = cls
        miou, macc = semantic_scores(pred_classes, gt)

        gt_to_pred = {gid: pid for pid, (gid, _) in matches50.items()}
        matched_queries = []
        n_unmatched = 0
        for gid in sorted(gt_sets):
            pid = gt_to_pred.get(gid)
            if pid is None or pid not in codebook:
                n_unmatched += 1
                continue
            matched_queries.append((class_table[gt_classes[gid]], pid))
        counts = (_retrieval_hit_counts(codebook, matched_queries, k_list)
                  if matched_queries else {k: 0 for k in k_list})
        recalls["class_embedding"] = {k: counts[k] / len(gt_sets) for k in k_list}

    return EvalReport(ap=ap, ap50=ap50, ap25=ap25, miou=miou, macc=macc,
                      recalls=recalls, n_predictions=len(preds),
                      n_gt_instances=len(gt_sets), diagnostics=diagnostics)
