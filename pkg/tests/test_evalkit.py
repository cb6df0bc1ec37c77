import contextlib
import io
import itertools

import numpy as np
import pytest

from viodet.errors import MismatchError
from viodet.evalkit import (
    IOU_THRESHOLDS,
    AREA_RANGES,
    GroundTruthFrame,
    MetricsReport,
    _accumulate,
    average_precision,
    coco_metrics,
    format_report,
    iou,
    match_detections,
    metrics_from_pairs,
)
from viodet.geometry import BBox, DetectionFrame, LabeledBox
from viodet.pipeline import FrameResult, ScoredBox

TOL = 1e-9
LABELS = (1, 2, 3)


def _random_frame(rng, max_boxes=5, n_labels=2, size=(10, 150)):
    n_gt = int(rng.integers(0, max_boxes + 1))
    gts = [
        LabeledBox(int(rng.integers(1, n_labels + 1)), BBox(*rng.uniform(0, 400, 2), *rng.uniform(*size, 2)))
        for _ in range(n_gt)
    ]
    dets = []
    for g in gts:
        if rng.random() < 0.8:
            jit = rng.normal(0, 0.15, 4) * np.array([g.bbox.w, g.bbox.h, g.bbox.w, g.bbox.h])
            label = g.label if rng.random() < 0.9 else int(rng.integers(1, n_labels + 1))
            dets.append(ScoredBox(label, float(rng.random()), BBox(g.bbox.x + jit[0], g.bbox.y + jit[1], g.bbox.w + abs(jit[2]), g.bbox.h + abs(jit[3]))))
    while len(dets) < max_boxes and rng.random() < 0.5:
        dets.append(ScoredBox(int(rng.integers(1, n_labels + 1)), float(rng.random()), BBox(*rng.uniform(0, 400, 2), *rng.uniform(*size, 2))))
    return dets[:max_boxes], gts


def exhaustive_match(dets, gts, thresh):
    """Best assignment under the greedy rule, found by enumerating every one.

    Visiting detections by descending score, each one should hold the
    highest-IoU ground truth still free (ties to the earlier box).  That is
    the lexicographic maximum, over all partial one-to-one label-consistent
    assignments, of the per-detection key (IoU, -gt index).
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].p)
    best_key, best = None, None
    choices = [-1] + list(range(len(gts)))
    for assign in itertools.product(choices, repeat=len(order)):
        used = [g for g in assign if g >= 0]
        if len(used) != len(set(used)):
            continue
        key = []
        ok = True
        for i, g in zip(order, assign):
            if g < 0:
                key.append((-1.0, 0))
                continue
            v = iou(dets[i].bbox, gts[g].bbox)
            if gts[g].label != dets[i].label or v < thresh:
                ok = False
                break
            key.append((v, -g))
        if ok and (best_key is None or key > best_key):
            best_key, best = key, assign
    out = [-1] * len(dets)
    for i, g in zip(order, best):
        out[i] = g
    return out


def _results(pairs):
    res = [FrameResult(i, dets, []) for i, (dets, _) in enumerate(pairs)]
    gts = [GroundTruthFrame(i, gt) for i, (_, gt) in enumerate(pairs)]
    return res, gts


class TestIoU:
    def test_identical(self):
        assert iou(BBox(1, 2, 3, 4), BBox(1, 2, 3, 4)) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 1, 1)) == 0.0

    def test_half_overlap(self):
        assert abs(iou(BBox(0, 0, 1, 1), BBox(0.5, 0, 1, 1)) - 1 / 3) <= TOL


class TestMatching:
    def test_single_hit(self):
        gt = [LabeledBox(1, BBox(10, 10, 50, 50))]
        assert match_detections([ScoredBox(1, 0.9, BBox(10, 10, 50, 50))], gt, 0.5) == [0]

    def test_duplicate_goes_to_higher_score(self):
        gt = [LabeledBox(1, BBox(10, 10, 50, 50))]
        dets = [ScoredBox(1, 0.4, BBox(10, 10, 50, 50)), ScoredBox(1, 0.9, BBox(11, 10, 50, 50))]
        assert match_detections(dets, gt, 0.5) == [-1, 0]

    def test_hand_frames_against_oracle(self):
        frames = [
            # a weaker-IoU detection scored higher claims the box first
            ([ScoredBox(1, 0.9, BBox(0, 0, 12, 10)), ScoredBox(1, 0.8, BBox(0, 0, 10, 10))], [LabeledBox(1, BBox(0, 0, 10, 10))]),
            # two boxes, two detections, crossed preferences
            (
                [ScoredBox(1, 0.7, BBox(0, 0, 10, 10)), ScoredBox(1, 0.6, BBox(4, 0, 10, 10))],
                [LabeledBox(1, BBox(1, 0, 10, 10)), LabeledBox(1, BBox(5, 0, 10, 10))],
            ),
            # a label mismatch never matches
            ([ScoredBox(2, 0.9, BBox(0, 0, 10, 10))], [LabeledBox(1, BBox(0, 0, 10, 10))]),
        ]
        expected = [[0, -1], [0, 1], [-1]]
        for (dets, gts), want in zip(frames, expected):
            assert match_detections(dets, gts, 0.5) == want == exhaustive_match(dets, gts, 0.5)

    def test_random_frames_against_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            dets, gts = _random_frame(rng)
            for thr in IOU_THRESHOLDS:
                assert match_detections(dets, gts, float(thr)) == exhaustive_match(dets, gts, float(thr))

    def test_order_free_without_ties(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            dets, gts = _random_frame(rng, max_boxes=8)
            perm = rng.permutation(len(dets))
            a = match_detections(dets, gts, 0.5)
            b = match_detections([dets[i] for i in perm], gts, 0.5)
            assert [a[i] for i in perm] == b


class TestAveragePrecision:
    def test_all_tp(self):
        assert average_precision([True] * 4, [0.9, 0.8, 0.7, 0.6], 4) == 1.0

    def test_all_fp(self):
        assert average_precision([False] * 3, [0.9, 0.8, 0.7], 3) == 0.0

    def test_hand_pr_integral(self):
        # precision envelope 1 up to recall 1/3 (34 grid points), 2/3 up to 2/3 (33), 0.6 up to 1 (34)
        ap = average_precision([True, False, True, False, True], [0.9, 0.8, 0.7, 0.6, 0.5], 3)
        assert abs(ap - (34 * 1.0 + 33 * 2 / 3 + 34 * 0.6) / 101) <= TOL

    def test_no_ground_truth(self):
        assert average_precision([False], [0.5], 0) is None


class TestCocoMetrics:
    def test_perfect(self):
        gt = [LabeledBox(1, BBox(10, 10, 50, 50)), LabeledBox(2, BBox(100, 100, 20, 20))]
        res, gts = _results([([ScoredBox(g.label, 0.9, g.bbox) for g in gt], gt)])
        rep = coco_metrics(res, gts)
        assert rep.AP == 1.0 and rep.AR10 == 1.0

    def test_no_detections(self):
        res, gts = _results([([], [LabeledBox(1, BBox(10, 10, 50, 50))])])
        assert coco_metrics(res, gts).AP == 0.0

    def test_empty_buckets_are_undefined(self):
        res, gts = _results([([ScoredBox(1, 0.9, BBox(10, 10, 50, 50))], [LabeledBox(1, BBox(10, 10, 50, 50))])])
        rep = coco_metrics(res, gts)
        assert rep.APs is None and rep.APl is None and rep.APm == 1.0

    def test_mismatched_frames(self):
        res, gts = _results([([], [])])
        with pytest.raises(MismatchError):
            coco_metrics(res, [GroundTruthFrame(7, [])])

    def test_native_frame_needs_corrected_labels(self):
        box = ScoredBox(1, 0.9, BBox(10, 10, 50, 50))
        res = [FrameResult(0, [box], [], DetectionFrame.CORRECTED, [box])]
        with pytest.raises(MismatchError):
            coco_metrics(res, [GroundTruthFrame(0, [LabeledBox(1, box.bbox)])])
        rep = coco_metrics(res, [GroundTruthFrame(0, [], [LabeledBox(1, box.bbox)])])
        assert rep.AP == 1.0
        assert coco_metrics(res, [GroundTruthFrame(0, [LabeledBox(1, box.bbox)])], frame="original").AP == 1.0

    def test_report_table(self):
        rep = MetricsReport(0.5, 0.6, 0.4, None, 0.3, 0.2, 0.7, None, 0.6, 0.5)
        text = format_report({"SSD": rep, "ALL": rep})
        lines = text.splitlines()
        assert lines[0] == "AP Metrics" and lines[1].split() == ["Data", "AP", "AP50", "AP75", "APs", "APm", "APl"]
        assert lines[3].split() == ["SSD", "50.00", "60.00", "40.00", "-", "30.00", "20.00"]
        assert "AR Metrics" in lines and MetricsReport.from_dict(rep.to_dict()) == rep


class TestAgainstPycocotools:
    def test_random_sessions(self):
        coco_mod = pytest.importorskip("pycocotools.coco")
        cocoeval = pytest.importorskip("pycocotools.cocoeval")
        rng = np.random.default_rng(42)
        for _ in range(10):
            pairs = [_random_frame(rng, max_boxes=8, n_labels=3, size=(5, 200)) for _ in range(30)]
            images, anns, dets = [], [], []
            for i, (d, g) in enumerate(pairs):
                images.append({"id": i, "width": 640, "height": 480})
                for b in g:
                    anns.append({"id": len(anns) + 1, "image_id": i, "category_id": b.label, "bbox": list(b.bbox.as_tuple()), "area": b.bbox.area, "iscrowd": 0})
                for s in d:
                    dets.append({"image_id": i, "category_id": s.label, "bbox": list(s.bbox.as_tuple()), "score": s.p})
            if not dets or not anns:
                continue
            with contextlib.redirect_stdout(io.StringIO()):
                gt = coco_mod.COCO()
                gt.dataset = {"images": images, "annotations": anns, "categories": [{"id": c} for c in LABELS]}
                gt.createIndex()
                ev = cocoeval.COCOeval(gt, gt.loadRes(dets), "bbox")
                ev.evaluate()
                ev.accumulate()
                ev.summarize()
            # at most 8 detections per frame, so the 10 and 100 budgets coincide
            ours = metrics_from_pairs(pairs)
            ref = dict(zip(("AP", "AP50", "AP75", "APs", "APm", "APl"), ev.stats[:6]))
            ref.update(AR10=ev.stats[7], ARs=ev.stats[9], ARm=ev.stats[10], ARl=ev.stats[11])
            for key, want in ref.items():
                got = getattr(ours, key)
                if want < 0:
                    assert got is None
                else:
                    assert abs(got - want) <= 1e-12, key


class TestMetricInvariants:
    def _pairs(self, rng, n=20):
        return [_random_frame(rng, max_boxes=6, n_labels=3) for _ in range(n)]

    def test_low_scored_fp_never_helps(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            pairs = self._pairs(rng)
            base = metrics_from_pairs(pairs).AP
            lo = min((d.p for ds, _ in pairs for d in ds), default=1.0)
            k = int(rng.integers(len(pairs)))
            dets, gts = pairs[k]
            extra = ScoredBox(int(rng.integers(1, 4)), lo / 2, BBox(*rng.uniform(0, 400, 2), 30, 30))
            pairs[k] = (dets + [extra], gts)
            after = metrics_from_pairs(pairs).AP
            if base is not None:
                assert after <= base + 1e-12

    def test_score_scaling_invariant(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            pairs = self._pairs(rng)
            c = float(rng.uniform(0.01, 0.99))
            scaled = [([ScoredBox(d.label, d.p * c, d.bbox) for d in ds], g) for ds, g in pairs]
            assert metrics_from_pairs(pairs) == metrics_from_pairs(scaled)

    def test_threshold_ordering(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            ap, _ = _accumulate(self._pairs(rng), 100, AREA_RANGES["all"])
            with np.errstate(invalid="ignore"):
                m = np.nanmean(ap, axis=1) if ap.size else ap
            if ap.size and not np.isnan(m).all():
                assert m[0] >= m[5] - 1e-12 and m[5] >= m[9] - 1e-12
