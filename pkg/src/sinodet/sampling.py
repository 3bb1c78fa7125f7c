"""Patch extraction, positive/negative sampling policy, and lung masking.

Patch values are stored (x, y, z) with the full-scale default extents of
32x32x16 voxels.  Extraction (and the axis flips used for augmentation)
is a pure gather, so its transpose is a scatter and gradients can flow
through it during end-to-end fine tuning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .detectnet import PATCH_SHAPE
from .geometry import Volume
from .phantom import Annotation

log = logging.getLogger(__name__)

LUNG_HU_THRESHOLD = -400.0
EDGE_SHELL_VOXELS = 3
DEFAULT_MARGIN_MM = 64.0
POS_AUG_COUNT = 20
POS_TRANSLATE_MM = 8.0
NONNODULE_AUG_COUNT = 5


@dataclass(frozen=True)
class PatchSpec:
    scan_id: str
    corner: tuple  # (ix, iy, iz) voxel index of the low corner
    flips: tuple = (0, 0, 0)
    label: int = 0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if any(f not in (0, 1) for f in self.flips):
            raise ValueError(f"flips must be 0/1, got {self.flips}")


def _check_bounds(vol: Volume, spec: PatchSpec, patch_shape):
    nz, ny, nx = vol.values.shape
    px, py, pz = patch_shape
    ix, iy, iz = spec.corner
    if not (0 <= ix <= nx - px and 0 <= iy <= ny - py and 0 <= iz <= nz - pz):
        raise IndexError(
            f"patch corner {spec.corner} with shape {patch_shape} outside "
            f"volume extents {(nx, ny, nz)}"
        )


def extract_patch(vol: Volume, spec: PatchSpec, patch_shape=PATCH_SHAPE) -> np.ndarray:
    """(px, py, pz) block copy with the PatchSpec's axis flips applied."""
    _check_bounds(vol, spec, patch_shape)
    px, py, pz = patch_shape
    ix, iy, iz = spec.corner
    block = vol.values[iz:iz + pz, iy:iy + py, ix:ix + px]
    patch = np.transpose(block, (2, 1, 0))
    axes = tuple(i for i, f in enumerate(spec.flips) if f)
    return np.flip(patch, axes).copy() if axes else patch.copy()


def scatter_patch(patch: np.ndarray, spec: PatchSpec, vol_shape) -> np.ndarray:
    """Transpose of :func:`extract_patch`: scatter a patch (or a patch
    gradient) back into an empty volume."""
    out = np.zeros(vol_shape)
    px, py, pz = patch.shape
    ix, iy, iz = spec.corner
    axes = tuple(i for i, f in enumerate(spec.flips) if f)
    p = np.flip(patch, axes) if axes else patch
    out[iz:iz + pz, iy:iy + py, ix:ix + px] = np.transpose(p, (2, 1, 0))
    return out


def extract_patch_op(vol_tensor: Tensor, spec: PatchSpec,
                     patch_shape=PATCH_SHAPE) -> Tensor:
    """Differentiable patch extraction from an (nz, ny, nx) volume tensor."""
    px, py, pz = patch_shape
    ix, iy, iz = spec.corner
    block = vol_tensor[iz:iz + pz, iy:iy + py, ix:ix + px]
    patch = ad.transpose(block, (2, 1, 0))
    axes = tuple(i for i, f in enumerate(spec.flips) if f)
    return ad.flip(patch, axes) if axes else patch


def patch_center_world(vol: Volume, spec: PatchSpec, patch_shape=PATCH_SHAPE) -> np.ndarray:
    """World position (mm) of the patch center."""
    c = np.asarray(spec.corner, dtype=np.float64) + (np.asarray(patch_shape) - 1) / 2.0
    return np.asarray(vol.origin) + c * np.asarray(vol.spacing)


def _corner_for_center_voxel(center_vox, patch_shape, vol_shape_xyz):
    corner = np.round(np.asarray(center_vox) - (np.asarray(patch_shape) - 1) / 2.0)
    hi = np.asarray(vol_shape_xyz) - np.asarray(patch_shape)
    clipped = np.clip(corner, 0, hi)
    return tuple(int(v) for v in clipped), bool(np.any(clipped != corner))


def annotation_in_patch(vol: Volume, ann: Annotation, spec: PatchSpec,
                        patch_shape=PATCH_SHAPE) -> bool:
    """Whether the annotation center lies inside the patch block."""
    v = vol.world_to_voxel(ann.center)
    lo = np.asarray(spec.corner) - 0.5
    hi = np.asarray(spec.corner) + np.asarray(patch_shape) - 0.5
    return bool(np.all(v >= lo) and np.all(v < hi))


def sample_positives(annotations, vol: Volume, seed=0, patch_shape=PATCH_SHAPE,
                     n_aug=POS_AUG_COUNT, translate_mm=POS_TRANSLATE_MM):
    """Augmented positive patch specs: per non-small nodule, ``n_aug``
    random translations (uniform per axis in +-translate_mm) with
    independent axis flips.  The nodule center always stays inside."""
    rng = np.random.default_rng(seed)
    specs = []
    n_clipped = 0
    spacing = np.asarray(vol.spacing)
    for ann in annotations:
        if not ann.is_non_small:
            continue
        center_vox = vol.world_to_voxel(ann.center)
        for _ in range(n_aug):
            t = rng.uniform(-translate_mm, translate_mm, 3) / spacing
            corner, clipped = _corner_for_center_voxel(
                center_vox + t, patch_shape, vol.shape_xyz)
            n_clipped += clipped
            flips = tuple(int(f) for f in rng.integers(0, 2, 3))
            spec = PatchSpec(ann.scan_id, corner, flips, label=1)
            assert annotation_in_patch(vol, ann, spec, patch_shape)
            specs.append(spec)
    if n_clipped:
        log.warning("%d positive samplings clipped at the volume edge", n_clipped)
    return specs


def sample_negatives(mask: Volume, positives, annotations, vol: Volume, seed=0,
                     patch_shape=PATCH_SHAPE, n_lung=400, n_edge=100,
                     per_nonnodule=NONNODULE_AUG_COUNT,
                     margin_mm=DEFAULT_MARGIN_MM):
    """Negative patch specs: ``n_lung`` random in-lung centers, ``n_edge``
    centers on the lung-mask boundary shell, plus ``per_nonnodule`` jittered
    samples per sub-3mm annotation.  Every center keeps an L-inf margin of
    ``margin_mm`` from every positive patch center and no emitted patch
    contains a non-small nodule center."""
    rng = np.random.default_rng(seed)
    m = mask.values > 0.5
    scan_id = positives[0].scan_id if positives else (
        annotations[0].scan_id if annotations else "scan")
    pos_centers = np.array([patch_center_world(vol, s, patch_shape) for s in positives]) \
        if positives else np.empty((0, 3))
    nodules = [a for a in annotations if a.is_non_small]

    def admissible(spec):
        c = patch_center_world(vol, spec, patch_shape)
        if pos_centers.size and np.min(
                np.max(np.abs(pos_centers - c), axis=1)) < margin_mm:
            return False
        return not any(annotation_in_patch(vol, a, spec, patch_shape) for a in nodules)

    def draw_from(voxels, want, tag):
        out = []
        if voxels[0].size == 0:
            if want:
                log.warning("no %s voxels available, emitting 0 of %d", tag, want)
            return out
        n_cand = voxels[0].size
        attempts = 0
        while len(out) < want and attempts < 50 * max(want, 1):
            attempts += 1
            j = rng.integers(n_cand)
            center = (voxels[2][j], voxels[1][j], voxels[0][j])  # (ix, iy, iz)
            corner, _ = _corner_for_center_voxel(center, patch_shape, vol.shape_xyz)
            spec = PatchSpec(scan_id, corner, (0, 0, 0), label=0)
            if admissible(spec):
                out.append(spec)
        if len(out) < want:
            log.warning("emitted %d of %d %s negatives", len(out), want, tag)
        return out

    in_lung = np.nonzero(m)
    eroded = ndimage.binary_erosion(m, iterations=EDGE_SHELL_VOXELS) \
        if m.any() else m
    shell = np.nonzero(m & ~eroded)
    specs = draw_from(in_lung, n_lung, "in-lung")
    specs += draw_from(shell, n_edge, "lung-edge")

    spacing = np.asarray(vol.spacing)
    for ann in annotations:
        if ann.is_non_small:
            continue
        center_vox = vol.world_to_voxel(ann.center)
        emitted = 0
        for _ in range(20 * per_nonnodule):
            if emitted >= per_nonnodule:
                break
            t = rng.uniform(-POS_TRANSLATE_MM, POS_TRANSLATE_MM, 3) / spacing
            corner, _ = _corner_for_center_voxel(
                center_vox + t, patch_shape, vol.shape_xyz)
            spec = PatchSpec(ann.scan_id, corner, (0, 0, 0), label=0)
            if admissible(spec):
                specs.append(spec)
                emitted += 1
        if emitted < per_nonnodule:
            log.warning("emitted %d of %d negatives for non-nodule annotation",
                        emitted, per_nonnodule)
    return specs


def lung_mask(vol: Volume) -> Volume:
    """Segment the lungs from an HU volume (typically the FBP result).

    Air-like voxels (HU < -400) are labelled in 3D (6-connectivity);
    components touching the lateral (x/y) volume faces are discarded as
    outside air, the two largest remaining components are kept, and
    internal holes are filled slice by slice.
    """
    if vol.unit != "HU":
        raise ValueError(f"lung_mask expects an HU volume, got {vol.unit}")
    cand = vol.values < LUNG_HU_THRESHOLD
    labels, n = ndimage.label(cand)  # default structure = 6-connectivity
    if n == 0:
        log.warning("no lung-like component found, returning empty mask")
        return vol.like(np.zeros_like(vol.values), unit="MASK")
    border = np.zeros_like(cand)
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    outside = np.unique(labels[border & cand])
    sizes = ndimage.sum_labels(cand, labels, index=np.arange(1, n + 1))
    for lab in outside:
        if lab > 0:
            sizes[lab - 1] = 0
    keep = np.argsort(sizes)[::-1][:2] + 1
    keep = [int(k) for k in keep if sizes[k - 1] > 0]
    if not keep:
        log.warning("no lung-like component found, returning empty mask")
        return vol.like(np.zeros_like(vol.values), unit="MASK")
    m = np.isin(labels, keep)
    filled = np.stack([ndimage.binary_fill_holes(sl) for sl in m])
    return vol.like(filled.astype(np.float64), unit="MASK")


PATCH_SPEC_HEADER = ["scan_id", "ix", "iy", "iz", "fx", "fy", "fz", "label"]


def write_patch_specs(specs, path):
    from .io import write_csv
    rows = [(s.scan_id, *map(float, s.corner), *map(float, s.flips), float(s.label))
            for s in specs]
    write_csv(path, PATCH_SPEC_HEADER, rows)


def read_patch_specs(path):
    from .io import DataError, read_csv_rows
    header, rows = read_csv_rows(path)
    if header != PATCH_SPEC_HEADER:
        raise DataError(f"{path}: bad patch spec header {header}")
    specs = []
    for row in rows:
        specs.append(PatchSpec(row[0],
                               tuple(int(float(v)) for v in row[1:4]),
                               tuple(int(float(v)) for v in row[4:7]),
                               int(float(row[7]))))
    return specs
