"""Evaluation metrics: voxel IoU, rotated-box IoU, and 11-point average precision.

All functions here are pure; evaluation over frames may run in parallel.
"""

from dataclasses import dataclass

import numpy as np

from .boxes import Box3D, difficulty_rank
from .grids import DenseOccupancyGrid


@dataclass(frozen=True)
class ConfusionCounts:
    """True-positive / false-positive / false-negative voxel counts."""

    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def iou(self):
        total = self.tp + self.fp + self.fn
        if total == 0:
            raise ValueError("IoU undefined for TP+FP+FN == 0")
        return self.tp / total


def _as_occupancy(grid, threshold):
    if isinstance(grid, DenseOccupancyGrid):
        occ = np.asarray(grid.occupancy)
        mask = np.asarray(grid.valid_mask) > 0
    else:
        occ = np.asarray(grid, dtype=np.float64)
        mask = np.ones(occ.shape, dtype=bool)
    return occ >= threshold, mask


def confusion_counts(pred, target, threshold=0.5) -> ConfusionCounts:
    """Count TP/FP/FN over valid voxels after binarizing pred at threshold."""
    p, pmask = _as_occupancy(pred, threshold)
    t, tmask = _as_occupancy(target, 0.5)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    valid = pmask & tmask
    p = p[valid]
    t = t[valid]
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    return ConfusionCounts(tp, fp, fn)


def voxel_iou(pred, target, threshold=0.5):
    """Occupancy IoU = TP / (TP + FP + FN) over valid voxels.

    When prediction and target are both empty the ratio is 0/0; that case is
    defined as 1.0 (perfect agreement on emptiness).
    """
    counts = confusion_counts(pred, target, threshold)
    if counts.tp + counts.fp + counts.fn == 0:
        return 1.0
    return counts.iou()


# ---------------------------------------------------------------------------
# Rotated-box IoU via convex polygon clipping
# ---------------------------------------------------------------------------

def _polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject, cx1, cy1, cx2, cy2):
    """Sutherland-Hodgman clip of `subject` against one edge of a convex clipper.

    Keeps points on the left of the directed edge (cx1,cy1)->(cx2,cy2).
    """
    ex, ey = cx2 - cx1, cy2 - cy1

    def inside(p):
        return ex * (p[1] - cy1) - ey * (p[0] - cx1) >= 0.0

    def intersect(p, q):
        dx, dy = q[0] - p[0], q[1] - p[1]
        denom = ex * dy - ey * dx
        t = (ex * (cy1 - p[1]) - ey * (cx1 - p[0])) / denom
        return (p[0] + t * dx, p[1] + t * dy)

    out = []
    n = len(subject)
    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        cur_in, nxt_in = inside(cur), inside(nxt)
        if cur_in:
            out.append(cur)
            if not nxt_in:
                out.append(intersect(cur, nxt))
        elif nxt_in:
            out.append(intersect(cur, nxt))
    return out


def convex_intersection_area(poly_a, poly_b):
    """Area of the intersection of two convex polygons given as (N, 2) arrays."""
    clipped = [tuple(p) for p in np.asarray(poly_a)]
    clipper = np.asarray(poly_b)
    n = len(clipper)
    for i in range(n):
        if not clipped:
            return 0.0
        x1, y1 = clipper[i]
        x2, y2 = clipper[(i + 1) % n]
        clipped = _clip_polygon(clipped, x1, y1, x2, y2)
    return _polygon_area(clipped)


def box_iou_bev(a: Box3D, b: Box3D):
    """IoU of the rotated BEV footprints of two boxes."""
    ca, cb = a.bev_corners(), b.bev_corners()
    area_a, area_b = _polygon_area(ca), _polygon_area(cb)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = convex_intersection_area(ca, cb)
    union = area_a + area_b - inter
    return inter / union if union > 0.0 else 0.0


def box_iou_3d(a: Box3D, b: Box3D):
    """IoU of two oriented boxes: BEV footprint overlap times vertical overlap."""
    ca, cb = a.bev_corners(), b.bev_corners()
    area_a, area_b = _polygon_area(ca), _polygon_area(cb)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter_bev = convex_intersection_area(ca, cb)
    za0, za1 = a.z_interval()
    zb0, zb1 = b.z_interval()
    overlap_z = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_bev * overlap_z
    union = a.volume + b.volume - inter
    return inter / union if union > 0.0 else 0.0


# ---------------------------------------------------------------------------
# 11-point average precision
# ---------------------------------------------------------------------------

class PRCurve:
    """Precision-recall points from a score-sorted detection sweep.

    Interpolated precision at recall R is the maximum precision among points
    whose recall is >= R (0 when no such point exists).
    """

    def __init__(self, points):
        self.points = [(float(r), float(p)) for r, p in points]
        recalls = [r for r, _ in self.points]
        if any(r2 < r1 - 1e-12 for r1, r2 in zip(recalls, recalls[1:])):
            raise ValueError("recalls must be non-decreasing along the sweep")

    def interp(self, recall):
        best = 0.0
        for r, p in self.points:
            if r >= recall - 1e-12 and p > best:
                best = p
        return best

    def ap11(self):
        """Mean interpolated precision over recalls {0, 0.1, ..., 1}, in percent."""
        levels = [i / 10.0 for i in range(11)]
        return 100.0 * sum(self.interp(r) for r in levels) / 11.0


def match_frame(detections, gts, iou_thresh, count_gt):
    """Greedy per-frame matching in descending score order.

    count_gt is a boolean per ground-truth box; uncounted ("ignored") boxes
    can absorb a detection (the detection then counts as neither TP nor FP)
    but never contribute TPs or FNs themselves. Returns a per-detection status
    list in descending-score order: "tp", "fp" or "ignored".
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    matched = [False] * len(gts)
    status = []
    for di in order:
        det = detections[di]
        best_counted, best_counted_iou = -1, iou_thresh
        best_ignored, best_ignored_iou = -1, iou_thresh
        for gi, gt in enumerate(gts):
            if matched[gi] or gt.cls != det.cls:
                continue
            iou = box_iou_3d(det, gt)
            if iou < iou_thresh:
                continue
            if count_gt[gi]:
                if iou >= best_counted_iou:
                    best_counted, best_counted_iou = gi, iou
            elif iou >= best_ignored_iou:
                best_ignored, best_ignored_iou = gi, iou
        if best_counted >= 0:
            matched[best_counted] = True
            status.append("tp")
        elif best_ignored >= 0:
            matched[best_ignored] = True
            status.append("ignored")
        else:
            status.append("fp")
    scores = [detections[i].score for i in order]
    return scores, status


def pr_curve(detections_per_frame, gts_per_frame, iou_thresh, difficulty) -> PRCurve:
    """Build the PR sweep over all frames for one difficulty bucket.

    Ground truth in the bucket = boxes at the requested difficulty or easier;
    harder boxes are matchable but count as neither TP nor FN. Detections
    tied on score enter the sweep together.
    """
    if len(detections_per_frame) != len(gts_per_frame):
        raise ValueError("detections and ground truth must cover the same frames")
    rank = difficulty_rank(difficulty)
    n_gt = 0
    all_scores, all_status = [], []
    for dets, gts in zip(detections_per_frame, gts_per_frame):
        count_gt = [difficulty_rank(g.difficulty) <= rank for g in gts]
        n_gt += sum(count_gt)
        scores, status = match_frame(dets, gts, iou_thresh, count_gt)
        all_scores.extend(scores)
        all_status.extend(status)
    if n_gt == 0:
        raise ValueError(f"no ground-truth boxes in difficulty bucket {difficulty!r}")

    order = np.argsort(-np.asarray(all_scores, dtype=np.float64), kind="stable")
    points = []
    tp = fp = 0
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and all_scores[order[j]] == all_scores[order[i]]:
            st = all_status[order[j]]
            tp += st == "tp"
            fp += st == "fp"
            j += 1
        if tp + fp > 0:
            points.append((tp / n_gt, tp / (tp + fp)))
        i = j
    return PRCurve(points)


def ap11(detections_per_frame, gts_per_frame, iou_thresh=0.7, difficulty="moderate"):
    """11-point interpolated average precision in percent.

    Matching is greedy per frame in descending score, each ground-truth box
    matched at most once, and requires 3D IoU >= iou_thresh.
    """
    curve = pr_curve(detections_per_frame, gts_per_frame, iou_thresh, difficulty)
    return curve.ap11()
