import math

import numpy as np
import pytest

from sinodet.detectnet import init_detector_params
from sinodet.evaluation import (FROC_FP_ABSCISSAE, Detection, cnr, froc, iou,
                                nms, sliding_window_detect)
from sinodet.geometry import Volume


class Ann:
    def __init__(self, c):
        self.center = tuple(c)


def brute_nms(dets, thr):
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept = []
    for i in order:
        if all(k.scan_id != dets[i].scan_id or iou(k, dets[i]) <= thr
               for k in kept):
            kept.append(dets[i])
    return kept


def brute_froc_point(dets_ps, anns_ps, tau):
    """Per-scan greedy matching of the detections at or above tau."""
    tp_total, n_ann, fp_total = 0, 0, 0
    for sid, anns in anns_ps.items():
        n_ann += len(anns)
        ds = sorted([d for d in dets_ps.get(sid, []) if d.score >= tau],
                    key=lambda d: -d.score)
        used = [False] * len(anns)
        for d in ds:
            hit = False
            for j, a in enumerate(anns):
                if not used[j] and d.contains(a.center):
                    used[j] = True
                    hit = True
                    break
            if hit:
                tp_total += 1
            else:
                fp_total += 1
    return fp_total / len(anns_ps), tp_total / max(n_ann, 1)


def box(sid, center, extents=(8.0, 8.0, 8.0), score=0.5):
    return Detection(sid, tuple(center), tuple(extents), score)


class TestIou:
    def test_identical_boxes(self):
        a = box("s", (0, 0, 0))
        assert iou(a, a) == pytest.approx(1.0)

    def test_disjoint_boxes(self):
        assert iou(box("s", (0, 0, 0)), box("s", (100, 0, 0))) == 0.0

    def test_half_width_offset(self):
        # same-size boxes offset by half an edge: overlap 1/2, union 3/2
        a = box("s", (0, 0, 0))
        b = box("s", (4.0, 0, 0))
        assert iou(a, b) == pytest.approx(1.0 / 3.0)


class TestNms:
    def test_keeps_highest_of_overlapping_pair(self):
        a = box("s", (0, 0, 0), score=0.9)
        b = box("s", (1, 0, 0), score=0.4)
        assert nms([b, a], 0.5) == [a]

    def test_different_scans_never_suppress(self):
        a = box("s1", (0, 0, 0), score=0.9)
        b = box("s2", (0, 0, 0), score=0.4)
        assert nms([a, b], 0.5) == [a, b]

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        dets = [box("s", rng.uniform(-10, 10, 3), rng.uniform(4, 12, 3),
                    float(rng.random())) for _ in range(50)]
        once = nms(dets, 0.3)
        assert nms(once, 0.3) == once

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            dets = [box(f"s{rng.integers(0, 3)}", rng.uniform(-20, 20, 3),
                        rng.uniform(4, 16, 3), float(np.round(rng.random(), 2)))
                    for _ in range(rng.integers(0, 12))]
            assert nms(dets, 0.3) == brute_nms(dets, 0.3)


class TestFroc:
    def test_single_hit(self):
        anns = {"s": [Ann((0, 0, 0))]}
        dets = {"s": [box("s", (1, 1, 1), score=0.8)]}
        curve = froc(dets, anns, n_boot=10, seed=0)
        assert curve.sensitivity[-1] == pytest.approx(1.0)
        assert curve.fp_per_scan[-1] == pytest.approx(0.0)
        assert curve.mean_sensitivity == pytest.approx(1.0)

    def test_single_miss(self):
        anns = {"s": [Ann((0, 0, 0))]}
        dets = {"s": [box("s", (50, 50, 50), score=0.8)]}
        curve = froc(dets, anns, n_boot=10, seed=0)
        assert np.all(curve.sensitivity == 0.0)
        assert curve.mean_sensitivity == 0.0

    def test_each_annotation_matched_at_most_once(self):
        # two overlapping detections around one annotation: exactly one TP
        anns = {"s": [Ann((0, 0, 0))]}
        dets = {"s": [box("s", (0, 0, 0), score=0.9),
                      box("s", (1, 0, 0), score=0.8)]}
        curve = froc(dets, anns, n_boot=10, seed=0)
        assert curve.sensitivity[-1] == pytest.approx(1.0)
        assert curve.fp_per_scan[-1] == pytest.approx(1.0)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(2)
        anns = {"s": [Ann(rng.uniform(-10, 10, 3)) for _ in range(3)]}
        dets = {"s": [box("s", rng.uniform(-15, 15, 3), score=float(rng.random()))
                      for _ in range(20)]}
        curve = froc(dets, anns, n_boot=10, seed=0)
        assert np.all(np.diff(curve.sensitivity) >= 0)
        assert np.all(np.diff(curve.fp_per_scan) >= 0)

    def test_matches_brute_force_sweep(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n_scans = int(rng.integers(1, 4))
            dets_ps, anns_ps = {}, {}
            for s in range(n_scans):
                sid = f"s{s}"
                anns_ps[sid] = [Ann(rng.uniform(-20, 20, 3))
                                for _ in range(rng.integers(0, 4))]
                dets_ps[sid] = nms(
                    [box(sid, rng.uniform(-20, 20, 3), rng.uniform(4, 16, 3),
                         float(np.round(rng.random(), 2)))
                     for _ in range(rng.integers(0, 10))], 0.5)
            if sum(len(a) for a in anns_ps.values()) == 0:
                anns_ps["s0"].append(Ann(rng.uniform(-20, 20, 3)))
            curve = froc(dets_ps, anns_ps, n_boot=5, seed=0)
            for i, tau in enumerate(curve.thresholds):
                fp, se = brute_froc_point(dets_ps, anns_ps, tau)
                assert abs(fp - curve.fp_per_scan[i]) < 1e-12
                assert abs(se - curve.sensitivity[i]) < 1e-12
            pts = [brute_froc_point(dets_ps, anns_ps, t)
                   for t in curve.thresholds]
            ms = np.mean([max([se for fp, se in pts if fp <= q] + [0.0])
                          for q in FROC_FP_ABSCISSAE])
            assert abs(ms - curve.mean_sensitivity) < 1e-12

    def test_bootstrap_deterministic_and_brackets_curve(self):
        rng = np.random.default_rng(4)
        anns = {f"s{i}": [Ann(rng.uniform(-10, 10, 3))] for i in range(4)}
        dets = {f"s{i}": [box(f"s{i}", rng.uniform(-12, 12, 3),
                              score=float(rng.random())) for _ in range(6)]
                for i in range(4)}
        a = froc(dets, anns, n_boot=50, seed=7)
        b = froc(dets, anns, n_boot=50, seed=7)
        assert np.array_equal(a.lo95, b.lo95) and np.array_equal(a.hi95, b.hi95)
        assert np.all(a.lo95 <= a.hi95)

    def test_requires_annotations(self):
        with pytest.raises(ValueError):
            froc({"s": []}, {"s": []}, n_boot=1)


class TestCnr:
    def make_vol(self):
        v = np.full((8, 16, 16), 100.0)
        v[3:5, 6:10, 6:10] = 200.0
        return Volume(v, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), "HU")

    def test_uniform_background_gives_inf(self):
        vol = self.make_vol()
        assert cnr(vol, (8.0, 8.0, 3.5), 1.5, (2.0, 2.0, 1.0), 1.5) == math.inf

    def test_hand_computed_value(self):
        v = np.full((4, 12, 12), 0.0)
        v[:, :, 6:] = 2.0  # right half brighter: bg std over the split disk
        v[2, 2, 2] = 10.0
        vol = Volume(v, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), "HU")
        got = cnr(vol, (2.0, 2.0, 2.0), 0.5, (5.5, 5.5, 1.0), 1.6)
        sel = []
        for y in range(12):
            for x in range(12):
                if (x - 5.5) ** 2 + (y - 5.5) ** 2 <= 1.6 ** 2:
                    sel.append(v[1, y, x])
        sel = np.array(sel)
        assert got == pytest.approx((10.0 - sel.mean()) / sel.std())

    def test_roi_outside_slice_rejected(self):
        vol = self.make_vol()
        with pytest.raises(ValueError):
            cnr(vol, (0.5, 0.5, 3.0), 3.0, (2.0, 2.0, 1.0), 1.0)


class TestSlidingWindow:
    def test_lattice_count_matches_oracle(self):
        vol = Volume(np.full((12, 20, 20), -800.0), (2.0, 2.0, 2.0),
                     (0.0, 0.0, 0.0), "HU")
        mask = vol.like(np.ones_like(vol.values))
        eta = init_detector_params(seed=0, patch_shape=(8, 8, 4),
                                   stage_channels=(4, 8, 8), head_channels=16)
        dets = sliding_window_detect(vol, mask, eta, step_mm=6.0,
                                     patch_shape=(8, 8, 4))
        # centers from origin + (p-1)/2*spacing to the far end, step 6 mm
        def n_axis(n, p, s):
            lo = (p - 1) / 2.0 * s
            hi = (n - 1 - (p - 1) / 2.0) * s
            return len(np.arange(lo, hi + 1e-9, 6.0))
        expect = n_axis(20, 8, 2.0) ** 2 * n_axis(12, 4, 2.0)
        assert len(dets) == expect
        assert all(0.0 < d.score < 1.0 for d in dets)

    def test_empty_mask_gives_no_detections(self):
        vol = Volume(np.full((8, 16, 16), -800.0), (2.0, 2.0, 2.0),
                     (0.0, 0.0, 0.0), "HU")
        mask = vol.like(np.zeros_like(vol.values))
        eta = init_detector_params(seed=0, patch_shape=(8, 8, 4),
                                   stage_channels=(4, 8, 8), head_channels=16)
        assert sliding_window_detect(vol, mask, eta, patch_shape=(8, 8, 4)) == []

    def test_requires_hu_volume(self):
        vol = Volume(np.zeros((8, 16, 16)), (2.0, 2.0, 2.0), (0, 0, 0), "MU")
        mask = vol.like(np.ones_like(vol.values))
        eta = init_detector_params(seed=0, patch_shape=(8, 8, 4),
                                   stage_channels=(4, 8, 8), head_channels=16)
        with pytest.raises(ValueError):
            sliding_window_detect(vol, mask, eta, patch_shape=(8, 8, 4))
