"""Synthetic chest phantoms with exact nodule ground truth.

The phantom is deliberately simple: an elliptical body (+40 HU) in air
(-1000 HU), two ellipsoidal lungs (-800 HU), random tubular vessels
(+20 HU) inside the lungs, and spherical nodules (0 HU) whose exact
center and diameter are recorded as annotations.  Small sub-3mm markers
on vessels play the role of non-nodule annotations (hard negatives).
Everything is a deterministic function of the spec and its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Volume

HU_AIR = -1000.0
HU_BODY = 40.0
HU_LUNG = -800.0
HU_VESSEL = 20.0
HU_NODULE = 0.0

NON_SMALL_MM = 3.0  # nodules at or above this diameter are detection targets


@dataclass(frozen=True)
class Annotation:
    scan_id: str
    center: tuple  # (x, y, z) in mm, world coordinates
    diameter: float  # mm

    def __post_init__(self):
        if self.diameter <= 0:
            raise ValueError(f"diameter must be positive, got {self.diameter}")

    @property
    def is_non_small(self) -> bool:
        return self.diameter >= NON_SMALL_MM


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple = (128, 128, 32)   # (nx, ny, nz)
    spacing: tuple = (1.0, 1.0, 2.0)  # mm
    seed: int = 0
    nodule_count: tuple = (2, 5)      # inclusive range
    diameter_range: tuple = (6.0, 16.0)  # mm
    vessel_count: int = 12
    small_marker_count: int = 3

    def __post_init__(self):
        if self.diameter_range[0] < 3.0 or self.diameter_range[1] > 25.0:
            raise ValueError(
                f"nodule diameters must stay within [3, 25] mm, got {self.diameter_range}"
            )
        if self.nodule_count[0] < 0 or self.nodule_count[1] < self.nodule_count[0]:
            raise ValueError(f"bad nodule count range {self.nodule_count}")


def _world_axes(spec: PhantomSpec):
    nx, ny, nz = spec.extents
    sx, sy, sz = spec.spacing
    xs = (np.arange(nx) - (nx - 1) / 2.0) * sx
    ys = (np.arange(ny) - (ny - 1) / 2.0) * sy
    zs = (np.arange(nz) - (nz - 1) / 2.0) * sz
    return xs, ys, zs


def _ellipsoid_mask(xs, ys, zs, center, semi):
    x = (xs[None, None, :] - center[0]) / semi[0]
    y = (ys[None, :, None] - center[1]) / semi[1]
    z = (zs[:, None, None] - center[2]) / semi[2]
    return x * x + y * y + z * z <= 1.0


def _stamp_ball(mask, spec, center, radius, supersample=1):
    """Mark voxels covered by a ball; with supersampling a voxel is marked
    when at least half of its sub-samples fall inside."""
    xs, ys, zs = _world_axes(spec)
    sx, sy, sz = spec.spacing
    ix = np.nonzero(np.abs(xs - center[0]) <= radius + sx)[0]
    iy = np.nonzero(np.abs(ys - center[1]) <= radius + sy)[0]
    iz = np.nonzero(np.abs(zs - center[2]) <= radius + sz)[0]
    if not (ix.size and iy.size and iz.size):
        return
    if supersample <= 1:
        dx = xs[ix] - center[0]
        dy = ys[iy] - center[1]
        dz = zs[iz] - center[2]
        inside = (dx[None, None, :] ** 2 + dy[None, :, None] ** 2
                  + dz[:, None, None] ** 2) <= radius ** 2
    else:
        offs = (np.arange(supersample) + 0.5) / supersample - 0.5
        occ = np.zeros((iz.size, iy.size, ix.size))
        for oz in offs:
            for oy in offs:
                for ox in offs:
                    dx = xs[ix] + ox * sx - center[0]
                    dy = ys[iy] + oy * sy - center[1]
                    dz = zs[iz] + oz * sz - center[2]
                    occ += (dx[None, None, :] ** 2 + dy[None, :, None] ** 2
                            + dz[:, None, None] ** 2) <= radius ** 2
        inside = occ >= (supersample ** 3) / 2.0
    mask[np.ix_(iz, iy, ix)] |= inside


def generate_phantom(spec: PhantomSpec, scan_id: str = "scan"):
    """Build one phantom.

    Returns ``(hu_volume, lung_mask_volume, annotations)``; the mask marks
    exactly the lung, vessel and nodule voxels.  If the requested nodule
    count cannot be placed without overlap, fewer nodules are emitted.
    """
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.extents
    xs, ys, zs = _world_axes(spec)
    ext_mm = (nx * spec.spacing[0], ny * spec.spacing[1], nz * spec.spacing[2])

    hu = np.full((nz, ny, nx), HU_AIR)
    body_semi = (0.45 * ext_mm[0], 0.40 * ext_mm[1], 2.0 * ext_mm[2])
    body = _ellipsoid_mask(xs, ys, zs, (0.0, 0.0, 0.0), body_semi)
    hu[body] = HU_BODY

    lung_specs = []
    for side in (-1.0, 1.0):
        center = (side * 0.22 * ext_mm[0], -0.03 * ext_mm[1], 0.0)
        semi = (0.17 * ext_mm[0], 0.28 * ext_mm[1], 0.55 * ext_mm[2])
        lung_specs.append((center, semi))
    lungs = np.zeros_like(body)
    for center, semi in lung_specs:
        lungs |= _ellipsoid_mask(xs, ys, zs, center, semi)
    hu[lungs] = HU_LUNG

    def random_point_in_lung(margin=0.0):
        # rejection sample in the shrunk analytic ellipsoids
        for _ in range(1000):
            center, semi = lung_specs[rng.integers(len(lung_specs))]
            u = rng.uniform(-1.0, 1.0, 3)
            if np.sum(u * u) > 1.0:
                continue
            shrunk = np.maximum(np.asarray(semi) - margin, 1e-3)
            if margin > 0 and np.any(shrunk <= 0):
                continue
            p = np.asarray(center) + u * shrunk
            return p
        raise RuntimeError("could not sample a lung point")

    # vessels: short random tubes inside the lungs
    vessels = np.zeros_like(lungs)
    vessel_points = []
    for _ in range(spec.vessel_count):
        a = random_point_in_lung(margin=3.0)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        length = rng.uniform(10.0, 30.0)
        radius = rng.uniform(1.0, 2.0)
        n_steps = max(int(length / (min(spec.spacing) / 2.0)), 2)
        ts = np.linspace(0.0, length, n_steps)
        for t in ts:
            _stamp_ball(vessels, spec, a + t * d, radius)
        vessel_points.append(a + rng.uniform(0.3, 0.7) * length * d)
    vessels &= lungs
    hu[vessels] = HU_VESSEL

    # nodules: non-overlapping spheres fully inside a lung
    n_lo, n_hi = spec.nodule_count
    n_want = int(rng.integers(n_lo, n_hi + 1)) if n_hi > n_lo else n_lo
    placed = []  # (center, diameter)
    attempts = 0
    while len(placed) < n_want and attempts < 500:
        attempts += 1
        d = rng.uniform(*spec.diameter_range)
        r = d / 2.0
        try:
            c = random_point_in_lung(margin=r + 2.0)
        except RuntimeError:
            break
        if any(np.linalg.norm(c - np.asarray(pc)) < (pd + d) / 2.0 + 2.0
               for pc, pd in placed):
            continue
        placed.append((tuple(c), d))
    nodules = np.zeros_like(lungs)
    for c, d in placed:
        _stamp_ball(nodules, spec, np.asarray(c), d / 2.0, supersample=3)
    nodules &= lungs
    hu[nodules] = HU_NODULE

    annotations = [Annotation(scan_id, c, d) for c, d in placed]
    # sub-3mm vessel markers act as non-nodule annotations
    for i in range(min(spec.small_marker_count, len(vessel_points))):
        p = vessel_points[i]
        annotations.append(Annotation(scan_id, tuple(p), 2.0))

    mask = (lungs | vessels | nodules).astype(np.float64)
    vol = Volume(hu, spacing=spec.spacing, unit="HU")
    mask_vol = Volume(mask, spacing=spec.spacing, unit="MASK")
    return vol, mask_vol, annotations
