"""Reference implementations of the evaluation metrics, kept deliberately
naive: scalar loops over plain sets and dicts, no numpy, no imports from
the package under test. Expected values in the metric tests are frozen
from these routines (and, for the tiny fixtures, re-derived by hand in
the test comments).
"""

from itertools import permutations


def oracle_voxel_iou(a, b):
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def _interpolated_ap(points, n_gt):
    """101-point interpolated AP from per-rank (tp_count, rank) pairs.

    points: list of cumulative TP counts, one per prediction rank.
    """
    if n_gt == 0:
        raise ValueError("empty ground truth")
    pr = []
    for rank, tp in enumerate(points, start=1):
        pr.append((tp / n_gt, tp / rank))
    total = 0.0
    for i in range(101):
        r = i / 100.0
        best = 0.0
        for rec, prec in pr:
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 101.0


def _ranked(preds):
    """(pred_id, voxels, confidence) sorted by confidence desc, id asc."""
    return sorted(preds, key=lambda p: (-p[2], p[0]))


def oracle_greedy_tp_curve(preds, gts, threshold):
    """Cumulative true-positive counts per rank under greedy matching.

    Each prediction, in rank order, claims the unmatched GT instance with
    the highest IoU if that IoU >= threshold (ties: smaller GT id).
    """
    unmatched = dict(gts)
    curve = []
    tp = 0
    for _, voxels, _ in _ranked(preds):
        best_gid, best_iou = None, 0.0
        for gid in sorted(unmatched):
            iou = oracle_voxel_iou(voxels, unmatched[gid])
            if iou > best_iou:
                best_gid, best_iou = gid, iou
        if best_gid is not None and best_iou >= threshold:
            del unmatched[best_gid]
            tp += 1
        curve.append(tp)
    return curve


def oracle_instance_ap(preds, gts, threshold):
    """AP at a single IoU threshold (greedy protocol, 101-point interp)."""
    if not gts:
        raise ValueError("empty ground truth")
    if not preds:
        return 0.0
    curve = oracle_greedy_tp_curve(preds, gts, threshold)
    return _interpolated_ap(curve, len(gts))


def oracle_ap_triplet(preds, gts):
    """(AP mean over 0.50:0.05:0.95, AP50, AP25)."""
    thresholds = [0.5 + 0.05 * i for i in range(10)]
    ap = sum(oracle_instance_ap(preds, gts, t) for t in thresholds) / len(thresholds)
    return ap, oracle_instance_ap(preds, gts, 0.5), oracle_instance_ap(preds, gts, 0.25)


def oracle_permutation_tp_curve(preds, gts, threshold):
    """TP curve by exhaustive search over GT assignment orders.

    For each permutation of the GT instances, predictions are matched in
    rank order to the first still-free GT (in permutation order) with
    IoU >= threshold whose IoU equals that prediction's best available
    IoU. Only feasible for tiny fixtures; used to cross-check that the
    greedy rule is insensitive to enumeration order on the toy cases.
    """
    ranked = _ranked(preds)
    gids = sorted(gts)
    best_curve = None
    for perm in permutations(gids):
        free = set(gids)
        tp = 0
        curve = []
        for _, voxels, _ in ranked:
            ious = {g: oracle_voxel_iou(voxels, gts[g]) for g in free}
            cands = [g for g in perm if g in free and ious[g] >= threshold]
            if cands:
                top = max(ious[g] for g in cands)
                pick = next(g for g in perm if g in free and ious[g] == top)
                free.discard(pick)
                tp += 1
            curve.append(tp)
        if best_curve is None:
            best_curve = curve
        elif curve != best_curve:
            raise AssertionError(
                f"greedy matching is order-sensitive on this fixture: "
                f"{curve} vs {best_curve}")
    return best_curve


def oracle_semantic_scores(pred_classes, gt_classes):
    """(mIoU, mAcc) over the union of labeled voxels.

    Per-class accuracy is recall on GT voxels; IoU counts false positives
    too. Means run over the classes present in the ground truth.
    """
    keys = set(pred_classes) | set(gt_classes)
    gt_present = sorted(set(gt_classes.values()))
    ious, accs = [], []
    for c in gt_present:
        tp = fp = fn = 0
        for k in keys:
            p = pred_classes.get(k)
            g = gt_classes.get(k)
            if g == c and p == c:
                tp += 1
            elif g == c:
                fn += 1
            elif p == c:
                fp += 1
        ious.append(tp / (tp + fp + fn) if (tp + fp + fn) else 0.0)
        accs.append(tp / (tp + fn) if (tp + fn) else 0.0)
    return sum(ious) / len(ious), sum(accs) / len(accs)
