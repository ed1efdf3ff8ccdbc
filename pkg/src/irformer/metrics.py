"""
Segmentation of confidence maps and detection metrics.

A detection counts as correct when its component overlaps a ground-truth
component by at least one pixel and their centroids are closer than
``dist_thresh`` pixels (strict).  Detections and targets are paired greedily
one-to-one by ascending centroid distance.

Pd = true detections / real targets, Fa = false detections / images.
The ROC curve sweeps a fixed global threshold; AUC integrates Pd over
Fa in [0, 2] and divides by 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from irformer.errors import ContractError, DimensionError

FA_POINT = 0.2
FA_MAX = 2.0
DEFAULT_THRESHOLDS = tuple(np.round(np.linspace(0.02, 0.98, 49), 4))

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class Component:
    pixels: np.ndarray          # (k, 2) int row/col coordinates
    centroid: tuple[float, float]
    area: int


@dataclass
class DetectionSet:
    components: list[Component]
    shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.components)

    def label_image(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.int32)
        for i, comp in enumerate(self.components, 1):
            out[comp.pixels[:, 0], comp.pixels[:, 1]] = i
        return out


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]] = field(default_factory=list)   # (detection idx, gt idx)


def adaptive_threshold(y: np.ndarray, k_sigma: float = 4.0, floor: float = 0.5) -> np.ndarray:
    """Binary mask ``y > max(floor, mean(y) + k_sigma * std(y))``."""
    y = np.asarray(y, dtype=np.float64)
    t = max(floor, float(y.mean() + k_sigma * y.std()))
    return y > t


def connected_components(mask: np.ndarray) -> DetectionSet:
    """8-connected components, largest first (ties broken by raster order)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DimensionError(f"connected_components expects a 2-D mask, got {mask.shape}")
    labels, count = ndimage.label(mask, structure=_EIGHT)
    comps = []
    if count:
        rows, cols = np.nonzero(labels)
        lab = labels[rows, cols]
        order = np.argsort(lab, kind="stable")
        rows, cols, lab = rows[order], cols[order], lab[order]
        bounds = np.searchsorted(lab, np.arange(1, count + 2))
        for i in range(count):
            r, c = rows[bounds[i]:bounds[i + 1]], cols[bounds[i]:bounds[i + 1]]
            comps.append(Component(np.stack([r, c], axis=1),
                                   (float(r.mean()), float(c.mean())), int(r.size)))
    # labels are assigned in raster order, so a stable sort keeps that as tiebreak
    comps.sort(key=lambda comp: -comp.area)
    return DetectionSet(comps, mask.shape)


def match(detections: DetectionSet, gt: DetectionSet, dist_thresh: float = 4.0) -> MatchResult:
    if detections.shape != gt.shape:
        raise DimensionError(f"detections {detections.shape} and ground truth {gt.shape} differ")
    gt_labels = gt.label_image()
    candidates = []
    for i, det in enumerate(detections.components):
        hit = np.unique(gt_labels[det.pixels[:, 0], det.pixels[:, 1]])
        for j in hit[hit > 0] - 1:
            g = gt.components[j]
            d = math.hypot(det.centroid[0] - g.centroid[0], det.centroid[1] - g.centroid[1])
            if d < dist_thresh:
                candidates.append((d, i, int(j)))
    candidates.sort()
    used_d, used_g, pairs = set(), set(), []
    for _, i, j in candidates:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
        pairs.append((i, j))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(detections) - tp, fn=len(gt) - tp, pairs=pairs)


def pd_fa(matches: Sequence[MatchResult], num_images: int) -> tuple[float, float]:
    if num_images < 1:
        raise ContractError("pd_fa needs at least one image")
    tp = sum(m.tp for m in matches)
    fp = sum(m.fp for m in matches)
    targets = sum(m.tp + m.fn for m in matches)
    pd = tp / targets if targets else 0.0
    return pd, fp / num_images


def f1(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def pixel_counts(pred_masks: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> tuple[int, int, int]:
    tp = fp = fn = 0
    for p, g in zip(pred_masks, gts):
        p, g = np.asarray(p, dtype=bool), np.asarray(g, dtype=bool)
        tp += int(np.count_nonzero(p & g))
        fp += int(np.count_nonzero(p & ~g))
        fn += int(np.count_nonzero(~p & g))
    return tp, fp, fn


def f1_scores(matches: Sequence[MatchResult], pred_masks: Sequence[np.ndarray],
              gts: Sequence[np.ndarray]) -> tuple[float, float]:
    """(target-level F1, pixel-level F1), counts pooled over all images."""
    t = (sum(m.tp for m in matches), sum(m.fp for m in matches), sum(m.fn for m in matches))
    return f1(*t), f1(*pixel_counts(pred_masks, gts))


@dataclass
class OperatingPoint:
    """Metrics of one segmentation of a whole image set."""

    threshold: Optional[float]
    pd: float
    fa: float
    f1_target: float
    f1_pixel: float
    tp: int
    fp: int
    fn: int
    pixel_tp: int
    pixel_fp: int
    pixel_fn: int
    num_images: int


def evaluate_masks(pred_masks: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                   dist_thresh: float = 4.0, threshold: Optional[float] = None) -> OperatingPoint:
    if len(pred_masks) != len(gts):
        raise DimensionError("prediction and ground-truth counts differ")
    if not gts:
        raise ContractError("cannot evaluate an empty image set")
    matches = [match(connected_components(p), connected_components(g), dist_thresh)
               for p, g in zip(pred_masks, gts)]
    pd, fa = pd_fa(matches, len(gts))
    ptp, pfp, pfn = pixel_counts(pred_masks, gts)
    tp, fp, fn = (sum(m.tp for m in matches), sum(m.fp for m in matches), sum(m.fn for m in matches))
    return OperatingPoint(threshold, pd, fa, f1(tp, fp, fn), f1(ptp, pfp, pfn),
                          tp, fp, fn, ptp, pfp, pfn, len(gts))


@dataclass
class RocResult:
    points: list[OperatingPoint]        # one per threshold, in sweep order
    curve: list[tuple[float, float]]    # (fa, pd) sorted by fa, upper envelope per fa
    pd_at_fa: Optional[float]           # None = undefined
    auc: Optional[float]                # None = undefined


def pd_curve(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """
    Best pd attainable at false-alarm rate <= fa, as sorted (fa, pd) pairs.

    Thresholds low enough to merge a target into clutter lose pd while
    gaining fa; such points are dominated and get lifted to the running max.
    """
    best: dict[float, float] = {}
    for fa, pd in points:
        best[fa] = max(pd, best.get(fa, -1.0))
    curve, running = [], -1.0
    for fa, pd in sorted(best.items()):
        running = max(running, pd)
        curve.append((fa, running))
    return curve


def pd_at(curve: Sequence[tuple[float, float]], fa_point: float = FA_POINT) -> Optional[float]:
    """
    Linear interpolation of pd at ``fa_point``; beyond the last point the
    curve is held at its last pd.  Undefined (None) when no operating point
    reaches fa <= fa_point.
    """
    if not curve or curve[0][0] > fa_point:
        return None
    fas = np.array([c[0] for c in curve])
    pds = np.array([c[1] for c in curve])
    return float(np.interp(fa_point, fas, pds))


def auc_pd_fa(curve: Sequence[tuple[float, float]], fa_max: float = FA_MAX) -> Optional[float]:
    """
    Trapezoidal area under pd(fa) on [0, fa_max], divided by fa_max.

    The curve is anchored at (0, 0) when it has no fa == 0 point, cut at
    fa_max by interpolation, and held at its last pd out to fa_max.
    Undefined (None) when every operating point has fa > fa_max.
    """
    if not curve or curve[0][0] > fa_max:
        return None
    pts = list(curve)
    if pts[0][0] > 0:
        pts.insert(0, (0.0, 0.0))
    fas = np.array([p[0] for p in pts])
    pds = np.array([p[1] for p in pts])
    keep = fas <= fa_max
    xs, ys = list(fas[keep]), list(pds[keep])
    if xs[-1] < fa_max:
        end = float(np.interp(fa_max, fas, pds)) if fas[-1] > fa_max else float(pds[-1])
        xs.append(fa_max)
        ys.append(end)
    return float(np.trapezoid(ys, xs) / fa_max)


def roc_sweep(confidence_maps: Sequence[np.ndarray], gts: Sequence[np.ndarray],
              thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
              dist_thresh: float = 4.0) -> RocResult:
    if len(thresholds) < 2:
        raise ContractError("roc_sweep needs at least two thresholds")
    gt_sets = [connected_components(g) for g in gts]
    points = []
    for t in thresholds:
        masks = [np.asarray(y) > t for y in confidence_maps]
        points.append(_evaluate_with_gt(masks, gts, gt_sets, dist_thresh, float(t)))
    curve = pd_curve([(p.fa, p.pd) for p in points])
    return RocResult(points, curve, pd_at(curve), auc_pd_fa(curve))


def _evaluate_with_gt(masks, gts, gt_sets, dist_thresh, threshold) -> OperatingPoint:
    matches = [match(connected_components(m), g, dist_thresh) for m, g in zip(masks, gt_sets)]
    pd, fa = pd_fa(matches, len(gts))
    ptp, pfp, pfn = pixel_counts(masks, gts)
    tp, fp, fn = (sum(m.tp for m in matches), sum(m.fp for m in matches), sum(m.fn for m in matches))
    return OperatingPoint(threshold, pd, fa, f1(tp, fp, fn), f1(ptp, pfp, pfn),
                          tp, fp, fn, ptp, pfp, pfn, len(gts))


@dataclass
class EvalReport:
    adaptive: OperatingPoint
    roc: RocResult
    k_sigma: float
    floor: float
    dist_thresh: float

    @property
    def pd(self) -> float:
        return self.adaptive.pd

    @property
    def fa(self) -> float:
        return self.adaptive.fa

    @property
    def f1_target(self) -> float:
        return self.adaptive.f1_target

    @property
    def f1_pixel(self) -> float:
        return self.adaptive.f1_pixel

    @property
    def auc(self) -> Optional[float]:
        return self.roc.auc

    @property
    def pd_at_fa(self) -> Optional[float]:
        return self.roc.pd_at_fa

    @property
    def curve(self) -> list[tuple[float, float]]:
        return self.roc.curve

    @property
    def best_f1_target(self) -> float:
        return max(p.f1_target for p in self.roc.points)

    @property
    def best_f1_pixel(self) -> float:
        return max(p.f1_pixel for p in self.roc.points)

    def best_pd_within(self, fa_limit: float) -> float:
        """Highest pd among sweep points with fa <= fa_limit (0 if none)."""
        return max((p.pd for p in self.roc.points if p.fa <= fa_limit), default=0.0)

    def summary(self) -> dict:
        return {
            "num_images": self.adaptive.num_images,
            "pd": self.pd,
            "fa": self.fa,
            "f1_target": self.f1_target,
            "f1_pixel": self.f1_pixel,
            "tp": self.adaptive.tp,
            "fp": self.adaptive.fp,
            "fn": self.adaptive.fn,
            "pixel_tp": self.adaptive.pixel_tp,
            "pixel_fp": self.adaptive.pixel_fp,
            "pixel_fn": self.adaptive.pixel_fn,
            "pd_at_fa_0.2": self.pd_at_fa,
            "auc_fa_lt_2": self.auc,
            "best_f1_target": self.best_f1_target,
            "best_f1_pixel": self.best_f1_pixel,
            "k_sigma": self.k_sigma,
            "floor": self.floor,
            "dist_thresh": self.dist_thresh,
        }


def evaluate(confidence_maps: Sequence[np.ndarray], gts: Sequence[np.ndarray],
             k_sigma: float = 4.0, floor: float = 0.5, dist_thresh: float = 4.0,
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalReport:
    """Adaptive-threshold operating point plus the fixed-threshold ROC sweep."""
    confidence_maps = [np.asarray(y, dtype=np.float64) for y in confidence_maps]
    gts = [np.asarray(g, dtype=bool) for g in gts]
    masks = [adaptive_threshold(y, k_sigma, floor) for y in confidence_maps]
    adaptive = evaluate_masks(masks, gts, dist_thresh)
    roc = roc_sweep(confidence_maps, gts, thresholds, dist_thresh)
    return EvalReport(adaptive, roc, k_sigma, floor, dist_thresh)
