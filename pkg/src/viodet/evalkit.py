"""COCO-style detection metrics.

Matching and accumulation follow the COCO protocol: IoU thresholds
0.50:0.05:0.95, greedy score-ordered matching, area buckets small
(<= 32^2), medium (32^2..96^2) and large (>= 96^2) with the COCO
ignore rules, and 101-point interpolated precision.  Crowd regions are
not supported.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import MismatchError
from .geometry import BBox, CameraFrame, DetectionFrame, LabeledBox
from .pipeline import FrameResult, ScoredBox

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_GRID = np.linspace(0.0, 1.0, 101)
AREA_RANGES: dict[str, tuple[float, float]] = {
    "all": (0.0, 1e10),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, 1e10),
}
AP_MAX_DETS = 100
AR_MAX_DETS = 10
EVAL_FRAMES = ("native", "original")


@dataclass
class GroundTruthFrame:
    """Labels of one frame; ``corrected_boxes`` label the corrected image."""

    frame_id: int
    boxes: list[LabeledBox]
    corrected_boxes: Optional[list[LabeledBox]] = None

    @property
    def areas(self) -> list[float]:
        return [b.bbox.area for b in self.boxes]

    @classmethod
    def from_frame(cls, frame: CameraFrame) -> "GroundTruthFrame":
        corrected = frame.corrected_ground_truth
        return cls(frame.frame_id, list(frame.ground_truth or []), None if corrected is None else list(corrected))


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (D, 4) and (G, 4) xywh arrays."""
    if dets.shape[0] == 0 or gts.shape[0] == 0:
        return np.zeros((dets.shape[0], gts.shape[0]))
    dx1, dy1 = dets[:, 0:1], dets[:, 1:2]
    dx2, dy2 = dx1 + dets[:, 2:3], dy1 + dets[:, 3:4]
    gx1, gy1 = gts[:, 0], gts[:, 1]
    gx2, gy2 = gx1 + gts[:, 2], gy1 + gts[:, 3]
    iw = np.clip(np.minimum(dx2, gx2) - np.maximum(dx1, gx1), 0, None)
    ih = np.clip(np.minimum(dy2, gy2) - np.maximum(dy1, gy1), 0, None)
    inter = iw * ih
    union = (dets[:, 2:3] * dets[:, 3:4]) + gts[:, 2] * gts[:, 3] - inter
    return inter / union


def _greedy(ious: np.ndarray, thresh: float, gt_ignore: Sequence[bool]) -> list[int]:
    """Greedy matching of score-sorted detections (rows) to GTs (columns).

    GT columns must be ordered with non-ignored ones first.  A detection
    takes the still-unmatched GT of highest IoU >= ``thresh``, preferring
    non-ignored GTs; ties go to the earlier GT.  Returns the matched column
    per row, -1 for unmatched.
    """
    n_det, n_gt = ious.shape
    gt_taken = [False] * n_gt
    out = [-1] * n_det
    for d in range(n_det):
        best = thresh
        m = -1
        row = ious[d]
        for g in range(n_gt):
            if gt_taken[g]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            v = row[g]
            if v < best or (m > -1 and v == best):
                continue
            best = v
            m = g
        if m > -1:
            gt_taken[m] = True
            out[d] = m
    return out


def _score_order(scores: Sequence[float]) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")


def match_detections(
    dets: Sequence[ScoredBox],
    gts: GroundTruthFrame | Sequence[LabeledBox],
    iou_thresh: float,
    max_dets: int = AP_MAX_DETS,
) -> list[Optional[int]]:
    """Greedy COCO matching for one frame.

    Detections are visited by descending score (ties in input order) and
    only the first ``max_dets`` take part.  Returns, per input detection,
    the index of the claimed ground-truth box, -1 for a false positive, or
    None when it fell beyond ``max_dets``.
    """
    boxes = gts.boxes if isinstance(gts, GroundTruthFrame) else list(gts)
    out: list[Optional[int]] = [None] * len(dets)
    order = _score_order([d.p for d in dets])[:max_dets]
    for label in {dets[i].label for i in order}:
        rows = [int(i) for i in order if dets[i].label == label]
        cols = [g for g, b in enumerate(boxes) if b.label == label]
        ious = iou_matrix(
            np.array([dets[i].bbox.as_tuple() for i in rows]).reshape(-1, 4),
            np.array([boxes[g].bbox.as_tuple() for g in cols]).reshape(-1, 4),
        )
        matched = _greedy(ious, iou_thresh, [False] * len(cols))
        for r, m in zip(rows, matched):
            out[r] = cols[m] if m >= 0 else -1
    return out


def average_precision(tp_flags: Sequence[bool], scores: Sequence[float], n_gt: int) -> Optional[float]:
    """101-point interpolated AP; None when there is no ground truth."""
    if n_gt <= 0:
        return None
    if len(tp_flags) == 0:
        return 0.0
    order = _score_order(scores)
    tp = np.asarray(tp_flags, dtype=bool)[order]
    return _ap_from_sorted(tp, n_gt)[0]


def _ap_from_sorted(tp: np.ndarray, n_gt: int) -> tuple[float, float]:
    tp_sum = np.cumsum(tp, dtype=np.float64)
    fp_sum = np.cumsum(~tp, dtype=np.float64)
    recall = tp_sum / n_gt
    # the running count is >= 1, so no epsilon guard; a perfect ranking scores exactly 1
    precision = tp_sum / (tp_sum + fp_sum)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    q = np.zeros(RECALL_GRID.shape[0])
    ok = idx < precision.shape[0]
    q[ok] = precision[idx[ok]]
    return float(q.mean()), float(recall[-1])


@dataclass(frozen=True)
class MetricsReport:
    """COCO summary numbers in [0, 1]; None marks an empty bucket."""

    AP: Optional[float]
    AP50: Optional[float]
    AP75: Optional[float]
    APs: Optional[float]
    APm: Optional[float]
    APl: Optional[float]
    AR10: Optional[float]
    ARs: Optional[float]
    ARm: Optional[float]
    ARl: Optional[float]

    AP_COLUMNS = ("AP", "AP50", "AP75", "APs", "APm", "APl")
    AR_COLUMNS = ("AR10", "ARs", "ARm", "ARl")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricsReport":
        return cls(**{f.name: data[f.name] for f in fields(cls)})


class _Image:
    """Per-frame, per-category detections and ground truth with cached IoUs."""

    __slots__ = ("scores", "det_area", "gt_area", "ious")

    def __init__(self, dets: list[ScoredBox], gts: list[LabeledBox]):
        self.scores = np.array([d.p for d in dets], dtype=np.float64)
        self.det_area = np.array([d.bbox.area for d in dets], dtype=np.float64)
        self.gt_area = np.array([g.bbox.area for g in gts], dtype=np.float64)
        self.ious = iou_matrix(
            np.array([d.bbox.as_tuple() for d in dets]).reshape(-1, 4),
            np.array([g.bbox.as_tuple() for g in gts]).reshape(-1, 4),
        )


def _frame_images(dets: list[ScoredBox], gts: list[LabeledBox], max_dets: int) -> dict[int, _Image]:
    order = _score_order([d.p for d in dets])[:max_dets]
    kept = [dets[i] for i in order]
    labels = {d.label for d in kept} | {g.label for g in gts}
    out = {}
    for label in sorted(labels):
        out[label] = _Image([d for d in kept if d.label == label], [g for g in gts if g.label == label])
    return out


def _evaluate_image(img: _Image, area: tuple[float, float], thresholds: np.ndarray):
    lo, hi = area
    gt_ig = (img.gt_area < lo) | (img.gt_area > hi)
    gt_order = np.argsort(gt_ig, kind="mergesort")
    gt_ig_sorted = gt_ig[gt_order].tolist()
    ious = img.ious[:, gt_order]
    det_out = (img.det_area < lo) | (img.det_area > hi)
    n_det = ious.shape[0]
    matched = np.zeros((thresholds.shape[0], n_det), dtype=bool)
    ignored = np.zeros((thresholds.shape[0], n_det), dtype=bool)
    for t, thr in enumerate(thresholds):
        m = _greedy(ious, float(thr), gt_ig_sorted) if n_det and ious.shape[1] else [-1] * n_det
        for d, g in enumerate(m):
            if g >= 0:
                matched[t, d] = True
                ignored[t, d] = gt_ig_sorted[g]
            else:
                ignored[t, d] = det_out[d]
    return matched, ignored, int((~gt_ig).sum())


def _accumulate(
    pairs: Iterable[tuple[list[ScoredBox], list[LabeledBox]]],
    max_dets: int,
    area: tuple[float, float],
    thresholds: np.ndarray = IOU_THRESHOLDS,
) -> tuple[np.ndarray, np.ndarray]:
    """Per (threshold, category) AP and max recall; NaN where undefined."""
    per_label: dict[int, list] = {}
    for dets, gts in pairs:
        for label, img in _frame_images(dets, gts, max_dets).items():
            matched, ignored, n_gt = _evaluate_image(img, area, thresholds)
            per_label.setdefault(label, []).append((img.scores, matched, ignored, n_gt))

    labels = sorted(per_label)
    ap = np.full((thresholds.shape[0], len(labels)), np.nan)
    ar = np.full_like(ap, np.nan)
    for k, label in enumerate(labels):
        chunks = per_label[label]
        n_gt = sum(c[3] for c in chunks)
        if n_gt == 0:
            continue
        scores = np.concatenate([c[0] for c in chunks])
        order = np.argsort(-scores, kind="mergesort")
        matched = np.concatenate([c[1] for c in chunks], axis=1)[:, order]
        ignored = np.concatenate([c[2] for c in chunks], axis=1)[:, order]
        for t in range(thresholds.shape[0]):
            keep = ~ignored[t]
            tp = matched[t][keep]
            if tp.shape[0] == 0:
                ap[t, k], ar[t, k] = 0.0, 0.0
            else:
                ap[t, k], ar[t, k] = _ap_from_sorted(tp, n_gt)
    return ap, ar


def _mean(values: np.ndarray) -> Optional[float]:
    values = values[~np.isnan(values)]
    return float(values.mean()) if values.size else None


def _frame_pair(res: FrameResult, gt: GroundTruthFrame, frame: str):
    if frame == "original" or res.native_frame is DetectionFrame.ORIGINAL:
        return res.outputs, gt.boxes
    if gt.corrected_boxes is None:
        raise MismatchError(
            f"frame {res.frame_id}: detections were made in the corrected frame but the ground truth "
            f"has no corrected-frame labels; evaluate in the original frame instead"
        )
    return res.native_outputs, gt.corrected_boxes


def _pairs_for(results: Sequence[FrameResult], gts: Sequence[GroundTruthFrame], frame: str = "native"):
    if frame not in EVAL_FRAMES:
        raise ValueError(f"frame must be one of {EVAL_FRAMES}")
    by_id = {}
    for g in gts:
        if g.frame_id in by_id:
            raise MismatchError(f"duplicate ground-truth frame {g.frame_id}")
        by_id[g.frame_id] = g
    res_ids = [r.frame_id for r in results]
    if len(set(res_ids)) != len(res_ids):
        raise MismatchError("duplicate frame ids in results")
    if set(res_ids) != set(by_id):
        missing = sorted(set(by_id) - set(res_ids))[:5]
        extra = sorted(set(res_ids) - set(by_id))[:5]
        raise MismatchError(
            f"results and ground truth cover different frames "
            f"(missing results for {missing}, no ground truth for {extra})"
        )
    return [_frame_pair(r, by_id[r.frame_id], frame) for r in results]


def metrics_from_pairs(
    pairs: Sequence[tuple[list[ScoredBox], list[LabeledBox]]],
    ar_max_dets: int = AR_MAX_DETS,
    ap_max_dets: int = AP_MAX_DETS,
) -> MetricsReport:
    """Metrics over already-aligned (detections, ground truth) frame pairs."""
    pairs = list(pairs)
    values: dict[str, Optional[float]] = {}
    ap_all, _ = _accumulate(pairs, ap_max_dets, AREA_RANGES["all"])
    values["AP"] = _mean(ap_all)
    values["AP50"] = _mean(ap_all[0])
    values["AP75"] = _mean(ap_all[5])
    for suffix, name in (("s", "small"), ("m", "medium"), ("l", "large")):
        values["AP" + suffix] = _mean(_accumulate(pairs, ap_max_dets, AREA_RANGES[name])[0])
    values["AR10"] = _mean(_accumulate(pairs, ar_max_dets, AREA_RANGES["all"])[1])
    for suffix, name in (("s", "small"), ("m", "medium"), ("l", "large")):
        values["AR" + suffix] = _mean(_accumulate(pairs, ar_max_dets, AREA_RANGES[name])[1])
    return MetricsReport(**values)


def coco_metrics(
    results: Sequence[FrameResult],
    gts: Sequence[GroundTruthFrame],
    ar_max_dets: int = AR_MAX_DETS,
    frame: str = "native",
) -> MetricsReport:
    """COCO summary for one session; frame ids of both sides must coincide.

    With ``frame="native"`` each frame is scored in the image frame its
    detector ran in (corrected-frame detections against corrected-frame
    labels); ``"original"`` scores the original-frame outputs throughout.
    """
    return metrics_from_pairs(_pairs_for(results, gts, frame), ar_max_dets)


def coco_metrics_pooled(
    sessions: Iterable[tuple[Sequence[FrameResult], Sequence[GroundTruthFrame]]],
    ar_max_dets: int = AR_MAX_DETS,
    frame: str = "native",
) -> MetricsReport:
    """COCO summary over several sessions treated as one image collection."""
    pairs = []
    for results, gts in sessions:
        pairs.extend(_pairs_for(results, gts, frame))
    return metrics_from_pairs(pairs, ar_max_dets)


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{100 * value:.2f}"


def format_report(rows: Mapping[str, MetricsReport]) -> str:
    """Two aligned text tables (AP metrics, AR metrics), values in percent."""
    out = []
    for title, cols in (("AP Metrics", MetricsReport.AP_COLUMNS), ("AR Metrics", MetricsReport.AR_COLUMNS)):
        header = ["Data", *cols]
        body = [[label, *(_fmt(getattr(rep, c)) for c in cols)] for label, rep in rows.items()]
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
        line = lambda r: "  ".join(
            cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths))
        ).rstrip()
        out.append(title)
        out.append(line(header))
        out.append("-" * len(line(header)))
        out.extend(line(r) for r in body)
        out.append("")
    return "\n".join(out)
