"""Transmission Poisson noise for sinograms.

Counts are drawn as I ~ Poisson(n0 * exp(-p)) and converted back to line
integrals via p' = -ln(max(I, 1) / n0); the max() clamp handles rays with
zero detected photons.
"""

from __future__ import annotations

import numpy as np

from .geometry import Sinogram


def add_poisson_noise(sino: Sinogram, n0, seed=0) -> Sinogram:
    """Noisy copy of ``sino`` at ``n0`` photons per ray.  ``n0=None`` (or
    inf) is the noiseless passthrough; results are reproducible from
    ``seed``."""
    if n0 is None or np.isinf(n0):
        return Sinogram(sino.values.copy(), geometry=sino.geometry,
                        z_origin=sino.z_origin)
    n0 = float(n0)
    if n0 <= 0:
        raise ValueError(f"photon count must be positive, got {n0}")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(n0 * np.exp(-sino.values))
    noisy = -np.log(np.maximum(counts, 1) / n0)
    return Sinogram(noisy, geometry=sino.geometry, z_origin=sino.z_origin)
