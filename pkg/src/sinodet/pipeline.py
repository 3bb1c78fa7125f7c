"""Dataset plumbing and the four-variant comparison harness.

The comparison trains one detector per image source and evaluates each on
its own images: ``reference`` detects on the ground-truth volumes,
``fbp`` on filtered backprojections, ``two-step`` on the learned
reconstruction with a separately trained detector, and ``end-to-end`` on
the jointly fine-tuned reconstruction/detector pair.  Noise, when
enabled, is applied to test sinograms only.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .evaluation import FrocCurve, froc, nms, sliding_window_detect
from .fbp import fbp
from .geometry import FanbeamGeometry, ImageGrid, Sinogram, Volume, hu_to_mu, mu_to_hu
from .noise import add_poisson_noise
from .phantom import PhantomSpec, generate_phantom
from .projector import forward_project
from .reconnet import reconstruct_volume
from .sampling import lung_mask, sample_negatives, sample_positives
from .training import PIPELINE_VARIANTS

log = logging.getLogger(__name__)


@dataclass
class ScanRecord:
    scan_id: str
    split: str  # "train" or "test"
    volume: Volume  # ground truth, HU
    mask: Volume    # ground truth lung+structures mask
    annotations: list
    sinogram: Sinogram = None


def scan_seed(base_seed: int, index: int) -> int:
    """Stable per-scan seed, independent of scheduling order."""
    return int(np.random.SeedSequence([base_seed, 17, index]).generate_state(1)[0])


def make_scans(cfg: RunConfig, seed: int) -> list:
    """Generate the train/test phantom suite described by the config."""
    ph = cfg["phantom"]
    scans = []
    n_total = ph["n_train"] + ph["n_test"]
    for i in range(n_total):
        split = "train" if i < ph["n_train"] else "test"
        scan_id = f"{split}{i if split == 'train' else i - ph['n_train']:03d}"
        spec = PhantomSpec(
            extents=tuple(ph["extents"]),
            spacing=tuple(ph["spacing"]),
            seed=scan_seed(seed, i),
            nodule_count=tuple(ph["nodule_count"]),
            diameter_range=tuple(ph["diameter_range"]),
            vessel_count=ph["vessel_count"],
            small_marker_count=ph["small_marker_count"],
        )
        vol, mask, anns = generate_phantom(spec, scan_id)
        scans.append(ScanRecord(scan_id, split, vol, mask, anns))
    return scans


def project_scans(scans, geom: FanbeamGeometry, threads=1):
    def work(rec):
        rec.sinogram = forward_project(hu_to_mu(rec.volume), geom)
    _run(work, scans, threads)
    return scans


def _run(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fn, items))
    else:
        for it in items:
            fn(it)


def noisy_sinogram(rec: ScanRecord, n0, base_seed: int, index: int) -> Sinogram:
    if n0 is None or not np.isfinite(n0):
        return rec.sinogram
    return add_poisson_noise(rec.sinogram, n0, seed=scan_seed(base_seed + 1, index))


def variant_image(variant: str, rec: ScanRecord, theta, grid: ImageGrid,
                  sino: Sinogram = None) -> Volume:
    """HU image a variant's detector sees for one scan."""
    if variant == "reference":
        return rec.volume
    if sino is None:
        sino = rec.sinogram
    if sino is None:
        raise ValueError(f"scan {rec.scan_id} has no sinogram")
    if variant == "fbp":
        return mu_to_hu(fbp(sino, grid))
    if variant in ("two-step", "end-to-end"):
        if theta is None:
            raise ValueError(f"variant {variant!r} needs reconstruction weights")
        return mu_to_hu(reconstruct_volume(sino, theta, grid))
    raise ValueError(f"unknown variant {variant!r}, expected one of {PIPELINE_VARIANTS}")


def sample_scan_patches(rec: ScanRecord, mask: Volume, cfg: RunConfig, index: int):
    """Positive and negative patch specs for one scan (shared across
    variants so every detector trains on the same coordinates)."""
    sa = cfg["sampling"]
    shape = cfg.patch_shape()
    seed_p = scan_seed(cfg["train"]["seed"] + 2, index)
    seed_n = scan_seed(cfg["train"]["seed"] + 3, index)
    pos = sample_positives(rec.annotations, rec.volume, seed=seed_p,
                           patch_shape=shape, n_aug=sa["pos_aug"],
                           translate_mm=sa["translate_mm"])
    neg = sample_negatives(mask, pos, rec.annotations, rec.volume, seed=seed_n,
                           patch_shape=shape, n_lung=sa["n_lung"],
                           n_edge=sa["n_edge"],
                           per_nonnodule=sa["per_nonnodule"],
                           margin_mm=sa["margin_mm"])
    return pos + neg


def detection_mask(variant: str, rec: ScanRecord, theta, grid, sino=None) -> Volume:
    """Lung mask used to restrict the sliding window.  Derived from the
    FBP image for every sinogram-based variant, and from the reference
    image when sinograms are out of scope."""
    if variant == "reference":
        return lung_mask(rec.volume)
    return lung_mask(mu_to_hu(fbp(sino if sino is not None else rec.sinogram, grid)))


def detect_scan(variant: str, rec: ScanRecord, theta, eta, cfg: RunConfig,
                grid: ImageGrid, n0=None, index: int = 0):
    """Full single-scan detection chain for one variant: image, mask,
    sliding window, NMS."""
    ev = cfg["eval"]
    sino = None if variant == "reference" else noisy_sinogram(
        rec, n0, cfg["eval"]["seed"], index)
    image = variant_image(variant, rec, theta, grid, sino)
    mask = detection_mask(variant, rec, theta, grid, sino)
    if not (mask.values > 0.5).any():
        log.warning("scan %s: empty detection mask", rec.scan_id)
        return []
    dets = sliding_window_detect(image, mask, eta, step_mm=ev["step_mm"],
                                 patch_shape=cfg.patch_shape(),
                                 scan_id=rec.scan_id)
    return nms(dets, ev["iou_threshold"])


def evaluate_variant(variant: str, test_scans, theta, eta, cfg: RunConfig,
                     grid: ImageGrid, n0=None, threads=1):
    """Returns (FrocCurve, detections per scan) for one variant/noise pair."""
    dets_per_scan = {}
    anns_per_scan = {}

    def work(item):
        i, rec = item
        dets_per_scan[rec.scan_id] = detect_scan(
            variant, rec, theta, eta, cfg, grid, n0=n0, index=i)

    _run(work, list(enumerate(test_scans)), threads)
    for rec in test_scans:
        anns_per_scan[rec.scan_id] = [a for a in rec.annotations if a.is_non_small]
    return froc(dets_per_scan, anns_per_scan, n_boot=cfg["eval"]["n_boot"],
                seed=cfg["eval"]["seed"]), dets_per_scan


def noise_label(n0) -> str:
    if n0 is None or not np.isfinite(n0):
        return "none"
    return f"{n0:g}"
