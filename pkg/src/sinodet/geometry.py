"""Scan geometry and the core data containers (volumes, sinograms).

Conventions
-----------
* World coordinates are in mm.  View angles are uniform over 2*pi,
  starting at 0 and increasing counter-clockwise; the source at angle
  ``b`` sits at ``(-R*sin(b), R*cos(b))`` with ``R`` the source-center
  distance.  Detector channels are equiangular; channel ``c`` is rotated
  by ``gamma_c = (c - (n_channels - 1)/2) * dgamma`` from the central ray,
  with ``dgamma = channel_arc_width / dist_source_detector``.
* Volumes store values as ``values[z, y, x]`` (x fastest); sinograms as
  ``values[slice, view, channel]`` (channel fastest).  Each detector row
  maps one-to-one onto one volume slice (stacked fanbeam, no cone angle).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

MU_WATER = 0.0192  # linear attenuation of water, mm^-1 (~70 keV)

VALID_UNITS = ("HU", "MU", "MASK")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class FanbeamGeometry:
    """All acquisition constants of the multi-slice fanbeam scanner."""

    n_views: int = 144
    n_channels: int = 736
    channel_arc_width: float = 1.2858  # mm at the detector
    row_height: float = 2.0            # mm, one detector row per slice
    dist_source_center: float = 595.0
    dist_source_detector: float = 1086.5

    def __post_init__(self):
        if self.n_views < 1 or self.n_channels < 1:
            raise GeometryError("n_views and n_channels must be >= 1")
        if not (self.dist_source_detector > self.dist_source_center > 0):
            raise GeometryError(
                "need dist_source_detector > dist_source_center > 0, got "
                f"{self.dist_source_detector} and {self.dist_source_center}"
            )

    @property
    def dgamma(self) -> float:
        return self.channel_arc_width / self.dist_source_detector

    @property
    def view_angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_views) / self.n_views

    @property
    def channel_gammas(self) -> np.ndarray:
        return (np.arange(self.n_channels) - (self.n_channels - 1) / 2.0) * self.dgamma

    @property
    def fov_radius(self) -> float:
        """Radius of the circle covered by all fans."""
        gmax = (self.n_channels / 2.0) * self.dgamma
        return self.dist_source_center * np.sin(min(gmax, np.pi / 2))

    def source_position(self, angle: float) -> np.ndarray:
        r = self.dist_source_center
        return np.array([-r * np.sin(angle), r * np.cos(angle)])


@dataclass(frozen=True)
class ImageGrid:
    """In-plane reconstruction grid: pixel (ix, iy) center lies at
    ``(origin_x + ix*sx, origin_y + iy*sy)``."""

    nx: int
    ny: int
    sx: float = 1.0
    sy: float = 1.0
    origin_x: float = None  # type: ignore[assignment]
    origin_y: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.sx <= 0 or self.sy <= 0:
            raise GeometryError(f"bad grid {self}")
        if self.origin_x is None:
            object.__setattr__(self, "origin_x", -(self.nx - 1) / 2.0 * self.sx)
        if self.origin_y is None:
            object.__setattr__(self, "origin_y", -(self.ny - 1) / 2.0 * self.sy)

    @property
    def xs(self) -> np.ndarray:
        return self.origin_x + self.sx * np.arange(self.nx)

    @property
    def ys(self) -> np.ndarray:
        return self.origin_y + self.sy * np.arange(self.ny)

    def corner_radius(self) -> float:
        rx = max(abs(self.xs[0]), abs(self.xs[-1]))
        ry = max(abs(self.ys[0]), abs(self.ys[-1]))
        return float(np.hypot(rx, ry))


@dataclass
class Volume:
    """3D voxel grid with physical spacing and origin.

    ``values`` has shape (nz, ny, nx); ``spacing``/``origin`` are
    (sx, sy, sz) and the world position of voxel (0, 0, 0)'s center.
    """

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 2.0)
    origin: tuple = None
    unit: str = "HU"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"volume values must be 3D, got {self.values.shape}")
        if self.unit not in VALID_UNITS:
            raise ValueError(f"unknown unit tag {self.unit!r}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("volume contains non-finite values")
        if self.origin is None:
            nz, ny, nx = self.values.shape
            self.origin = (
                -(nx - 1) / 2.0 * self.spacing[0],
                -(ny - 1) / 2.0 * self.spacing[1],
                -(nz - 1) / 2.0 * self.spacing[2],
            )
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def shape_xyz(self) -> tuple:
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    @property
    def nz(self) -> int:
        return self.values.shape[0]

    def plane_grid(self) -> ImageGrid:
        nz, ny, nx = self.values.shape
        return ImageGrid(nx, ny, self.spacing[0], self.spacing[1],
                         self.origin[0], self.origin[1])

    def voxel_center(self, ix, iy, iz) -> np.ndarray:
        return np.array([
            self.origin[0] + ix * self.spacing[0],
            self.origin[1] + iy * self.spacing[1],
            self.origin[2] + iz * self.spacing[2],
        ])

    def world_to_voxel(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return (xyz - np.array(self.origin)) / np.array(self.spacing)

    def like(self, values, unit=None) -> "Volume":
        return Volume(values, spacing=self.spacing, origin=self.origin,
                      unit=unit or self.unit)


@dataclass
class Sinogram:
    """Per-slice fanbeam line integrals, ``values[slice, view, channel]``."""

    values: np.ndarray
    geometry: FanbeamGeometry = field(default_factory=FanbeamGeometry)
    z_origin: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"sinogram values must be 3D, got {self.values.shape}")
        ns, nv, nc = self.values.shape
        if nv != self.geometry.n_views or nc != self.geometry.n_channels:
            raise GeometryError(
                f"sinogram extents {(nv, nc)} do not match geometry "
                f"{(self.geometry.n_views, self.geometry.n_channels)}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram contains non-finite values")

    @property
    def n_slices(self) -> int:
        return self.values.shape[0]

    @property
    def shape_spec(self) -> tuple:
        """(n_views, n_channels, n_slices) ordering used in file headers."""
        ns, nv, nc = self.values.shape
        return (nv, nc, ns)

    def window(self, start: int, width: int = 3) -> "Sinogram":
        if start < 0 or start + width > self.n_slices:
            raise ValueError(f"window [{start}, {start + width}) outside {self.n_slices} slices")
        return Sinogram(self.values[start:start + width],
                        geometry=self.geometry,
                        z_origin=self.z_origin + start * self.geometry.row_height)


# -- unit conversion ----------------------------------------------------------

def hu_to_mu(vol: Volume, mu_water: float = MU_WATER) -> Volume:
    """HU -> linear attenuation: mu = mu_water * (1 + HU/1000)."""
    if vol.unit != "HU":
        raise ValueError(f"hu_to_mu expects an HU volume, got {vol.unit}")
    return vol.like(mu_water * (1.0 + vol.values / 1000.0), unit="MU")


def mu_to_hu(vol: Volume, mu_water: float = MU_WATER) -> Volume:
    """Exact inverse of :func:`hu_to_mu`."""
    if vol.unit != "MU":
        raise ValueError(f"mu_to_hu expects a MU volume, got {vol.unit}")
    return vol.like(1000.0 * (vol.values / mu_water - 1.0), unit="HU")


def hu_mu_convert(vol: Volume, direction: str) -> Volume:
    if direction == "hu_to_mu":
        return hu_to_mu(vol)
    if direction == "mu_to_hu":
        return mu_to_hu(vol)
    raise ValueError(f"unknown direction {direction!r}")
