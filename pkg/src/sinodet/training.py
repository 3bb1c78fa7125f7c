"""Three-stage training schedule.

Stage 1 fits the reconstruction weights to ground truth images (L2 on
randomly drawn 3-slice windows).  Stage 2 fits the detector on labeled
patches from a chosen image source, leaving the reconstruction weights
untouched.  Stage 3 fine-tunes both parameter sets jointly on the
detection cross entropy, backpropagating through reconstruction, patch
extraction and the detector.

Stage 3 keeps memory bounded by treating the per-window reconstructions
as graph cut points: the detector loss is backpropagated to the window
outputs first, then each window is re-run with gradient tracking and
seeded with its accumulated output gradient.  This recomputes the forward
pass once but never materializes more than one window graph at a time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamSet, Tensor, adam_step
from .detectnet import PATCH_SHAPE, detect_patches, normalize_hu, normalize_hu_op
from .fbp import fbp
from .geometry import MU_WATER, ImageGrid, Sinogram, Volume, mu_to_hu
from .reconnet import (WINDOW_SLICES, aggregate_windows, pd_forward,
                       reconstruct_volume, window_starts)
from .sampling import extract_patch, extract_patch_op

log = logging.getLogger(__name__)

PIPELINE_VARIANTS = ("reference", "fbp", "two-step", "end-to-end")

BLOCK_SLICES = 32  # z extent of a fine-tuning block (fewer when the scan is shorter)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 1
    minibatch: int = 50
    samples_per_scan: int = 50
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    variant: str = "two-step"

    def __post_init__(self):
        if self.variant not in PIPELINE_VARIANTS:
            raise ValueError(f"unknown pipeline variant {self.variant!r}")

    @classmethod
    def for_stage(cls, stage: int, **over) -> "TrainConfig":
        defaults = {
            1: dict(stage=1, epochs=1, samples_per_scan=50),
            2: dict(stage=2, epochs=10, minibatch=50),
            3: dict(stage=3, epochs=1),
        }
        if stage not in defaults:
            raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
        cfg = dict(defaults[stage])
        cfg.update(over)
        return cls(**cfg)

    def adam(self, params: ParamSet) -> AdamState:
        return AdamState(params, lr=self.lr, beta1=self.beta1, beta2=self.beta2)


def _check_finite(loss: float, step: int):
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {step}")


# -- stage 1 ------------------------------------------------------------------

def train_recon(scans, theta: ParamSet, config: TrainConfig, grid: ImageGrid):
    """Minimize the window-level L2 error of the reconstruction network.

    ``scans`` is a sequence of (sinogram, ground-truth MU volume) pairs.
    Returns the per-step loss trace (normalized image units).
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    state = config.adam(theta)
    trace = []
    step = 0
    for _ in range(config.epochs):
        draws = []
        for si, (sino, gt) in enumerate(scans):
            nz = sino.n_slices
            starts = rng.integers(0, nz - WINDOW_SLICES + 1,
                                  size=config.samples_per_scan)
            draws.extend((si, int(k)) for k in starts)
        order = rng.permutation(len(draws))
        for j in order:
            si, k = draws[j]
            sino, gt = scans[si]
            out = pd_forward(sino.window(k), theta, grid)
            target = gt.values[k:k + WINDOW_SLICES]
            diff = (out - Tensor(target)) * (1.0 / MU_WATER)
            loss = ad.square(diff).mean()
            _check_finite(float(loss.data), step)
            theta.zero_grad()
            loss.backward()
            adam_step(theta, state)
            trace.append((step, float(loss.data)))
            step += 1
    return trace


def recon_l2(scans, theta: ParamSet, grid: ImageGrid) -> float:
    """Mean normalized L2 error of full-volume reconstructions."""
    errs = []
    for sino, gt in scans:
        rec = reconstruct_volume(sino, theta, grid)
        errs.append(np.mean(((rec.values - gt.values) / MU_WATER) ** 2))
    return float(np.mean(errs))


def fbp_l2(scans, grid: ImageGrid, window="hann") -> float:
    errs = []
    for sino, gt in scans:
        rec = fbp(sino, grid, window=window)
        errs.append(np.mean(((rec.values - gt.values) / MU_WATER) ** 2))
    return float(np.mean(errs))


# -- stage 2 ------------------------------------------------------------------

def build_patch_dataset(volumes, specs_per_scan, patch_shape=PATCH_SHAPE):
    """Materialize normalized patches + labels from HU image volumes.

    ``volumes`` maps scan_id -> Volume[HU]; ``specs_per_scan`` maps
    scan_id -> list of PatchSpec.
    """
    patches, labels = [], []
    for scan_id, specs in specs_per_scan.items():
        vol = volumes[scan_id]
        for spec in specs:
            patches.append(normalize_hu(extract_patch(vol, spec, patch_shape)))
            labels.append(spec.label)
    if not patches:
        raise ValueError("empty patch dataset")
    return np.stack(patches), np.asarray(labels, dtype=np.float64)


def train_detector(patches, labels, eta: ParamSet, config: TrainConfig):
    """Minimize patch-wise cross entropy over minibatches.  Only the
    detector parameters are touched (the reconstruction weights are not
    even visible here)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    state = config.adam(eta)
    trace = []
    step = 0
    n = len(labels)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.minibatch):
            idx = order[lo:lo + config.minibatch]
            scores = detect_patches(patches[idx], eta)
            loss = ad.cross_entropy(scores, labels[idx])
            _check_finite(float(loss.data), step)
            eta.zero_grad()
            loss.backward()
            adam_step(eta, state)
            trace.append((step, float(loss.data)))
            step += 1
    return trace


def detector_accuracy(patches, labels, eta: ParamSet, batch=64) -> float:
    correct = 0
    with ad.no_grad():
        for lo in range(0, len(labels), batch):
            scores = detect_patches(patches[lo:lo + batch], eta).data
            correct += int(np.sum((scores >= 0.5) == (labels[lo:lo + batch] >= 0.5)))
    return correct / len(labels)


def detector_loss(patches, labels, eta: ParamSet, batch=64) -> float:
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(labels), batch):
            scores = detect_patches(patches[lo:lo + batch], eta)
            total += float(ad.cross_entropy(scores, labels[lo:lo + batch],
                                            reduce="sum").data)
    return total / len(labels)


# -- stage 3 ------------------------------------------------------------------

def plan_blocks(nz: int, specs, patch_shape=PATCH_SHAPE, block=BLOCK_SLICES):
    """First-fit assignment of patch specs to 32-slice blocks.

    Blocks step by (block - patch_z) so every patch z-extent fits in some
    block; each spec is assigned to the first block that contains it, so
    one epoch visits every spec exactly once.
    """
    pz = patch_shape[2]
    block = min(block, nz)
    if block < pz:
        raise ValueError(f"scan has {nz} slices but patches need {pz}")
    stride = max(block - pz, 1)
    starts = list(range(0, nz - block + 1, stride))
    if starts[-1] != nz - block:
        starts.append(nz - block)
    assignment = {b: [] for b in starts}
    for spec in specs:
        iz = spec.corner[2]
        home = next((b for b in starts if b <= iz and iz + pz <= b + block), None)
        if home is None:
            raise ValueError(f"patch at z={iz} fits no block (nz={nz})")
        assignment[home].append(spec)
    return [(b, assignment[b]) for b in starts if assignment[b]]


def e2e_block_loss(sino: Sinogram, block_start: int, block_nz: int, specs,
                   theta: ParamSet, eta: ParamSet, grid: ImageGrid,
                   patch_shape=PATCH_SHAPE, chunk: int = 16) -> float:
    """Cross entropy of the detector on patches cut from the block
    reconstruction; gradients accumulate into both parameter sets.

    Implements the two-phase (checkpointed) backward described in the
    module docstring.
    """
    starts = window_starts(block_nz)
    windows = [sino.window(block_start + k) for k in starts]
    with ad.no_grad():
        outs = [pd_forward(w, theta, grid).data for w in windows]
    leaves = [Tensor(o, requires_grad=True) for o in outs]
    vol_t = aggregate_windows(leaves, starts, block_nz)
    hu_t = vol_t * (1000.0 / MU_WATER) - 1000.0
    norm_t = normalize_hu_op(hu_t)
    n_total = len(specs)
    total_loss = 0.0
    for lo in range(0, n_total, chunk):
        batch = specs[lo:lo + chunk]
        pts = []
        for spec in batch:
            shifted = replace(spec, corner=(spec.corner[0], spec.corner[1],
                                            spec.corner[2] - block_start))
            pts.append(extract_patch_op(norm_t, shifted, patch_shape))
        scores = detect_patches(ad.stack(pts, axis=0), eta)
        labels = np.array([s.label for s in batch], dtype=np.float64)
        loss = ad.cross_entropy(scores, labels, reduce="sum") * (1.0 / n_total)
        total_loss += float(loss.data)
        loss.backward()
    # phase 2: pull the output gradients back through each window
    for leaf, w in zip(leaves, windows):
        if leaf.grad is None:
            continue
        out = pd_forward(w, theta, grid)
        out.backward(seed=leaf.grad)
    return total_loss


def finetune_e2e(scans, theta: ParamSet, eta: ParamSet, config: TrainConfig,
                 grid: ImageGrid, patch_shape=PATCH_SHAPE):
    """One (by default) epoch of joint fine-tuning.

    ``scans`` is a sequence of (sinogram, patch_specs) pairs reusing the
    stage-2 sampling coordinates.  Returns the per-step loss trace.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    state_theta = config.adam(theta)
    state_eta = config.adam(eta)
    trace = []
    step = 0
    for _ in range(config.epochs):
        tasks = []
        for si, (sino, specs) in enumerate(scans):
            for block_start, block_specs in plan_blocks(
                    sino.n_slices, specs, patch_shape):
                tasks.append((si, block_start, block_specs))
        order = rng.permutation(len(tasks))
        for j in order:
            si, block_start, block_specs = tasks[j]
            sino, _ = scans[si]
            block_nz = min(BLOCK_SLICES, sino.n_slices)
            theta.zero_grad()
            eta.zero_grad()
            loss = e2e_block_loss(sino, block_start, block_nz, block_specs,
                                  theta, eta, grid, patch_shape)
            _check_finite(loss, step)
            adam_step(theta, state_theta)
            adam_step(eta, state_eta)
            trace.append((step, loss))
            step += 1
    return trace
