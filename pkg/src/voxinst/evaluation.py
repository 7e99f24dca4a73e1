"""Instance-segmentation metrics: voxel-set IoU, class-wise average
precision with greedy highest-IoU matching (per-GT exclusivity, all-point
interpolated precision/recall area), the AP/AP50/AP25 summary, and the two
label-derived baselines (semantic-as-instance, per-class connected
components).

Predictions are (semantic_id, score, voxel index array) triples grouped by
scene; ground truth is an InstanceLabeling per scene. Voxels inside
ignored regions (ground/wall classes) are removed from prediction masks
before IoU, so they affect neither numerator nor denominator.
"""

from dataclasses import dataclass, field

import numpy as np

from .grid import connected_components

AP_TAUS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))  # 0.50 .. 0.95


def mask_iou(a, b):
    """IoU of two voxel index sets; 0 when both are empty."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.size == 0 and b.size == 0:
        return 0.0
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return inter / union if union else 0.0


@dataclass
class EvalReport:
    per_class: dict  # class id -> {"ap": x, "ap50": x, "ap25": x, "num_gt": n}
    average: dict  # same keys, averaged over classes present in GT
    scene_count: int
    details: list = field(default_factory=list)  # (scene, class, score, matched gt, iou) at tau=0.5
    note: str = "voxels of ignored classes are excluded from prediction masks before IoU"


def _scene_predictions_sorted(preds):
    """Deterministic processing order: score desc, then smaller first voxel."""

    def key(p):
        sem, score, voxels = p
        first = int(voxels[0]) if len(voxels) else -1
        return (-score, first, sem)

    return sorted(range(len(preds)), key=lambda i: key(preds[i]))


def _match_scene(preds, gt_masks, tau):
    """Greedy in score order: each prediction takes the unmatched GT with
    the highest IoU >= tau. Returns (score, tp, matched_gt, iou) rows."""
    taken = set()
    rows = []
    for i in _scene_predictions_sorted(preds):
        sem, score, voxels = preds[i]
        best_j, best_iou = None, 0.0
        for j, gmask in enumerate(gt_masks):
            if j in taken:
                continue
            iou = mask_iou(voxels, gmask)
            if iou >= tau and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j is not None:
            taken.add(best_j)
            rows.append((score, True, best_j, best_iou))
        else:
            rows.append((score, False, None, 0.0))
    return rows


def _ap_from_rows(rows, num_gt):
    """All-point interpolated area under precision/recall."""
    if num_gt == 0:
        return None
    if not rows:
        return 0.0
    rows = sorted(rows, key=lambda r: (-r[0], r[1]))  # global score order, deterministic
    tp = np.cumsum([r[2] for r in rows])
    fp = np.cumsum([not r[2] for r in rows])
    precision = tp / (tp + fp)
    recall = tp / num_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for i in range(len(rows)):
        if recall[i] > prev_r:
            ap += (recall[i] - prev_r) * envelope[i]
            prev_r = recall[i]
    return float(ap)


def _filter_ignored(voxels, ignore_voxels):
    if ignore_voxels is None or len(ignore_voxels) == 0:
        return np.asarray(voxels, dtype=np.int64)
    return np.setdiff1d(np.asarray(voxels, dtype=np.int64), ignore_voxels, assume_unique=False)


def average_precision(preds_by_scene, gt_by_scene, class_id, tau, ignore_by_scene=None):
    """AP for one class at one IoU threshold across scenes; None when the
    class has no GT instances (excluded from class averages)."""
    num_gt = 0
    rows = []  # (score, scene, tp)
    for scene, gt in gt_by_scene.items():
        gt_masks = [rec.voxels for _, rec in sorted(gt.items()) if rec.semantic == class_id]
        num_gt += len(gt_masks)
        preds = preds_by_scene.get(scene, [])
        ignore = None if ignore_by_scene is None else ignore_by_scene.get(scene)
        cls_preds = [
            (sem, score, _filter_ignored(voxels, ignore))
            for sem, score, voxels in preds
            if sem == class_id
        ]
        for score, tp, _, _ in _match_scene(cls_preds, gt_masks, tau):
            rows.append((score, scene, tp))
    return _ap_from_rows([(s, sc, tp) for s, sc, tp in rows], num_gt)


def ap_summary(preds_by_scene, gt_by_scene, ignore_classes=(1,), ignore_by_scene=None):
    """EvalReport over all classes present in the ground truth, excluding
    ignored classes. AP averages tau in {0.50..0.95 step 0.05}."""
    classes = sorted(
        {
            rec.semantic
            for gt in gt_by_scene.values()
            for _, rec in gt.items()
            if rec.semantic not in ignore_classes
        }
    )
    per_class = {}
    details = []
    for cls in classes:
        taus = {
            tau: average_precision(preds_by_scene, gt_by_scene, cls, tau, ignore_by_scene)
            for tau in AP_TAUS + (0.25,)
        }
        num_gt = sum(
            1 for gt in gt_by_scene.values() for _, rec in gt.items() if rec.semantic == cls
        )
        per_class[cls] = {
            "ap": float(np.mean([taus[t] for t in AP_TAUS])),
            "ap50": taus[0.50],
            "ap25": taus[0.25],
            "num_gt": num_gt,
        }
        for scene, gt in gt_by_scene.items():
            gt_rows = [rec.voxels for _, rec in sorted(gt.items()) if rec.semantic == cls]
            preds = [
                (sem, score, voxels)
                for sem, score, voxels in preds_by_scene.get(scene, [])
                if sem == cls
            ]
            for score, tp, j, iou in _match_scene(preds, gt_rows, 0.5):
                details.append((scene, cls, score, j if tp else None, iou))
    if per_class:
        average = {
            key: float(np.mean([v[key] for v in per_class.values()]))
            for key in ("ap", "ap50", "ap25")
        }
    else:
        average = {"ap": None, "ap50": None, "ap25": None}
    return EvalReport(per_class, average, scene_count=len(gt_by_scene), details=details)


# -- baselines -----------------------------------------------------------------


def baseline_seg_as_instance(grid, ignore_classes=(1,)):
    """One proposal per semantic class present: the whole class mask."""
    sem = grid.linear_semantic()
    out = []
    for cls in np.unique(sem):
        if cls == 0 or cls in ignore_classes:
            continue
        out.append((int(cls), 1.0, np.flatnonzero(sem == cls).astype(np.int64)))
    return out


def baseline_connected_components(grid, ignore_classes=(1,), connectivity=6):
    """Per class, each connected component of the class mask is a proposal."""
    sem = grid.linear_semantic()
    out = []
    for cls in np.unique(sem):
        if cls == 0 or cls in ignore_classes:
            continue
        for comp in connected_components(grid, np.flatnonzero(sem == cls), connectivity):
            out.append((int(cls), 1.0, comp))
    return out
