"""Sliding-window detection, NMS, FROC analysis and image quality metrics.

Detections are axis-aligned boxes the size of one detector patch, scored
with the patch classifier on a regular lattice of window centers inside
the lung mask.  FROC curves sweep the score threshold; a detection is a
true positive when an unmatched annotation center falls inside its box,
with higher-scoring detections matched first and each annotation counted
at most once.  Confidence bands come from bootstrapping scans.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .detectnet import PATCH_SHAPE, detect_patches, normalize_hu
from .geometry import Volume

log = logging.getLogger(__name__)

FROC_FP_ABSCISSAE = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
DEFAULT_STEP_MM = 4.0
DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Detection:
    scan_id: str
    center: tuple  # (x, y, z) mm
    extents: tuple  # box edge lengths (mm)
    score: float

    def bounds(self):
        c = np.asarray(self.center)
        h = np.asarray(self.extents) / 2.0
        return c - h, c + h

    def contains(self, point) -> bool:
        lo, hi = self.bounds()
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p >= lo) and np.all(p <= hi))


def iou(a: Detection, b: Detection) -> float:
    """Intersection over union of two axis-aligned boxes."""
    alo, ahi = a.bounds()
    blo, bhi = b.bounds()
    inter = np.prod(np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0, None))
    va = np.prod(ahi - alo)
    vb = np.prod(bhi - blo)
    union = va + vb - inter
    return float(inter / union) if union > 0 else 0.0


def sliding_window_detect(vol: Volume, mask: Volume, eta, step_mm=DEFAULT_STEP_MM,
                          patch_shape=PATCH_SHAPE, batch=64, scan_id="scan"):
    """Score patches on a step_mm lattice of centers inside the mask.

    ``vol`` is an HU image.  Returns a list of Detection, one per lattice
    point whose nearest voxel is inside the mask.
    """
    if vol.unit != "HU":
        raise ValueError(f"detection expects an HU volume, got {vol.unit}")
    if vol.values.shape != mask.values.shape:
        raise ValueError("image and mask shapes differ")
    spacing = np.asarray(vol.spacing)
    origin = np.asarray(vol.origin)
    shape_xyz = np.asarray(vol.shape_xyz)
    half = (np.asarray(patch_shape) - 1) / 2.0
    extents = tuple(float(e) for e in np.asarray(patch_shape) * spacing)

    # lattice of world centers; the patch must fit inside the volume
    lo = origin + half * spacing
    hi = origin + (shape_xyz - 1 - half) * spacing
    axes = [np.arange(l, h + 1e-9, step_mm) for l, h in zip(lo, hi)]
    if any(a.size == 0 for a in axes):
        return []
    cx, cy, cz = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel(), cz.ravel()], axis=1)

    vox = np.rint((centers - origin) / spacing).astype(int)
    vox = np.clip(vox, 0, shape_xyz - 1)
    inside = mask.values[vox[:, 2], vox[:, 1], vox[:, 0]] > 0.5
    centers = centers[inside]
    vox = vox[inside]
    corners = np.clip(
        np.rint(vox - half).astype(int), 0, shape_xyz - np.asarray(patch_shape))

    dets = []
    px, py, pz = patch_shape
    with ad.no_grad():
        for lo_i in range(0, len(corners), batch):
            chunk = corners[lo_i:lo_i + batch]
            patches = np.stack([
                np.transpose(
                    vol.values[c[2]:c[2] + pz, c[1]:c[1] + py, c[0]:c[0] + px],
                    (2, 1, 0))
                for c in chunk])
            scores = detect_patches(normalize_hu(patches), eta).data
            for c, cen, s in zip(chunk, centers[lo_i:lo_i + batch], scores):
                box_center = origin + (c + (np.asarray(patch_shape) - 1) / 2.0) * spacing
                dets.append(Detection(scan_id, tuple(box_center), extents, float(s)))
    return dets


def nms(dets, iou_threshold=DEFAULT_IOU_THRESHOLD):
    """Greedy non-maximum suppression, highest score first.

    Ties break on input order (stable).  Boxes from different scans never
    suppress each other.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept = []
    for i in order:
        d = dets[i]
        if any(k.scan_id == d.scan_id and iou(k, d) > iou_threshold for k in kept):
            continue
        kept.append(d)
    return kept


def _match_detections(dets, annotations):
    """Per-scan greedy matching: flag each detection TP/FP at its own score.

    Because matching runs in descending score order, the flags are valid
    for every threshold at once (restricting to scores above a threshold
    never changes the matches among the survivors).
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = [False] * len(annotations)
    tp = np.zeros(len(dets), dtype=bool)
    for i in order:
        for j, ann in enumerate(annotations):
            if used[j]:
                continue
            if dets[i].contains(ann.center):
                used[j] = True
                tp[i] = True
                break
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return scores, tp


@dataclass
class FrocCurve:
    fp_per_scan: np.ndarray
    sensitivity: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    mean_sensitivity: float  # mean over FROC_FP_ABSCISSAE
    thresholds: np.ndarray = field(default_factory=lambda: np.empty(0))


def _curve_at(fps, sens, query_fp):
    """Step interpolation: best sensitivity at fp rate <= query."""
    idx = np.searchsorted(fps, query_fp, side="right") - 1
    out = np.where(idx >= 0, sens[np.clip(idx, 0, None)], 0.0)
    return out


def _sweep(scores, tps, n_anns, n_scans, thresholds):
    """Sensitivity and FP/scan at each threshold (inclusive >=)."""
    if scores.size == 0:
        z = np.zeros(len(thresholds))
        return z, z
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    tp_sorted = tps[order]
    cum_tp = np.cumsum(tp_sorted)
    cum_fp = np.cumsum(~tp_sorted)
    counts = np.searchsorted(-s_sorted, -thresholds, side="right")
    sens = np.where(counts > 0, cum_tp[np.clip(counts - 1, 0, None)], 0)
    fps = np.where(counts > 0, cum_fp[np.clip(counts - 1, 0, None)], 0)
    sens = sens / max(n_anns, 1)
    fps = fps / max(n_scans, 1)
    return fps, sens


def froc(dets_per_scan: dict, anns_per_scan: dict, n_boot=1000, seed=0) -> FrocCurve:
    """Bootstrapped FROC over a scan collection.

    ``dets_per_scan``: scan_id -> list[Detection] (already NMS-filtered).
    ``anns_per_scan``: scan_id -> list of annotations with a ``center``
    attribute (sub-3mm markers should be excluded by the caller).
    Bootstrap resamples scans with replacement; resamples that contain no
    annotation at all are redrawn.
    """
    scan_ids = sorted(anns_per_scan)
    if not scan_ids:
        raise ValueError("froc needs at least one scan")
    per_scan = {}
    for sid in scan_ids:
        per_scan[sid] = _match_detections(
            dets_per_scan.get(sid, []), anns_per_scan[sid])
    n_scans = len(scan_ids)
    total_anns = sum(len(anns_per_scan[s]) for s in scan_ids)
    if total_anns == 0:
        raise ValueError("froc needs at least one annotation")

    all_scores = np.concatenate([per_scan[s][0] for s in scan_ids]) \
        if any(len(per_scan[s][0]) for s in scan_ids) else np.empty(0)
    all_tps = np.concatenate([per_scan[s][1] for s in scan_ids]) \
        if all_scores.size else np.empty(0, dtype=bool)
    thresholds = np.unique(all_scores)[::-1]
    if thresholds.size == 0:
        z = np.zeros(1)
        return FrocCurve(z, z, z, z, 0.0, z)

    fps, sens = _sweep(all_scores, all_tps, total_anns, n_scans, thresholds)
    mean_sens = float(np.mean(_curve_at(fps, sens, np.asarray(FROC_FP_ABSCISSAE))))

    rng = np.random.default_rng(seed)
    boot = np.empty((n_boot, fps.size))
    for b in range(n_boot):
        while True:
            pick = rng.integers(0, n_scans, size=n_scans)
            n_anns_b = sum(len(anns_per_scan[scan_ids[i]]) for i in pick)
            if n_anns_b > 0:
                break
        sc = np.concatenate([per_scan[scan_ids[i]][0] for i in pick])
        tp = np.concatenate([per_scan[scan_ids[i]][1] for i in pick])
        fps_b, sens_b = _sweep(sc, tp, n_anns_b, n_scans, thresholds)
        # evaluate the resampled curve on the main curve's fp axis
        boot[b] = _curve_at(fps_b, sens_b, fps)
    lo = np.percentile(boot, 2.5, axis=0)
    hi = np.percentile(boot, 97.5, axis=0)
    return FrocCurve(fps, sens, lo, hi, mean_sens, thresholds)


def cnr(vol: Volume, roi_center, roi_radius_mm, bg_center, bg_radius_mm) -> float:
    """Contrast-to-noise ratio between two circular ROIs on one axial slice.

    Each center is (x, y, z) in mm; the ROI is a disk of the given radius
    in the slice nearest the center's z.  (mean_roi - mean_bg) / std_bg
    with the population standard deviation; returns +/-inf when the
    background is exactly uniform.
    """
    nz, ny, nx = vol.values.shape

    def region(center, radius):
        c = np.asarray(center, dtype=np.float64)
        iz = int(round((c[2] - vol.origin[2]) / vol.spacing[2]))
        if not 0 <= iz < nz:
            raise ValueError(f"ROI slice z={c[2]} mm outside the volume")
        yy, xx = np.mgrid[0:ny, 0:nx]
        dx = vol.origin[0] + xx * vol.spacing[0] - c[0]
        dy = vol.origin[1] + yy * vol.spacing[1] - c[1]
        sel = dx * dx + dy * dy <= radius ** 2
        if not sel.any():
            raise ValueError(f"ROI at {tuple(c)} r={radius} selects no voxels")
        if (np.abs(c[:2] - np.asarray(vol.origin[:2]) -
                   np.array([(nx - 1) * vol.spacing[0],
                             (ny - 1) * vol.spacing[1]]) / 2.0) + radius >
                np.array([(nx - 1) * vol.spacing[0],
                          (ny - 1) * vol.spacing[1]]) / 2.0).any():
            raise ValueError(f"ROI at {tuple(c)} r={radius} extends outside the slice")
        return vol.values[iz][sel]

    roi = region(roi_center, roi_radius_mm)
    bg = region(bg_center, bg_radius_mm)
    contrast = float(roi.mean() - bg.mean())
    sd = float(bg.std())
    if sd == 0.0:
        return math.copysign(math.inf, contrast) if contrast else 0.0
    return contrast / sd
