"""Unrolled primal-dual reconstruction network on 3-slice windows.

The network keeps 6 primal channels (image domain) and 6 dual channels
(sinogram domain): 2 state variables per window slice.  Each of the
unrolled iterations applies a residual dual update fed by [y, A z, p] and
a residual primal update fed by [z, A^T y], with per-iteration (untied)
3-layer CNNs.  The initial image is the FBP of the window; with all CNN
weights zero the whole network reduces to that FBP exactly, which anchors
training at the classical baseline.

States are kept in physical units; fixed scale factors are applied on the
CNN inputs (images via 1/mu_water, sinogram-domain data additionally via
the projector operator norm) so activations are O(1).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .fbp import fbp
from .geometry import MU_WATER, FanbeamGeometry, ImageGrid, Sinogram
from .geometry import Volume
from .projector import backproject_op, operator_norm, project_op

WINDOW_SLICES = 3
STATE_CHANNELS = 2 * WINDOW_SLICES  # 2 variables x 3 slices


def init_recon_params(seed=0, n_iters=5, hidden=32) -> ParamSet:
    """Untied CNN weights for every unrolled iteration.

    Hidden layers use He-uniform fan-in init; the last layer of every CNN
    starts at zero so the untrained network reproduces FBP.
    """
    rng = np.random.default_rng(seed)
    params = ParamSet("recon")
    dual_in = STATE_CHANNELS + WINDOW_SLICES + WINDOW_SLICES  # y, Az, p
    primal_in = STATE_CHANNELS + WINDOW_SLICES                # z, At y
    for i in range(1, n_iters + 1):
        for branch, c_in in (("dual", dual_in), ("primal", primal_in)):
            widths = [(c_in, hidden), (hidden, hidden), (hidden, STATE_CHANNELS)]
            for j, (ci, co) in enumerate(widths, start=1):
                name = f"recon.iter{i}.{branch}.conv{j}"
                if j == len(widths):
                    w = np.zeros((co, ci, 3, 3))
                else:
                    lim = np.sqrt(6.0 / (ci * 9))
                    w = rng.uniform(-lim, lim, size=(co, ci, 3, 3))
                params.add(f"{name}.weight", w)
                params.add(f"{name}.bias", np.zeros(co))
                if j < len(widths):
                    params.add(f"recon.iter{i}.{branch}.prelu{j}.alpha",
                               np.full(co, 0.25))
    return params


def recon_iterations(theta: ParamSet) -> int:
    i = 0
    while f"recon.iter{i + 1}.dual.conv1.weight" in theta:
        i += 1
    if i == 0:
        raise ValueError("parameter set contains no reconstruction iterations")
    return i


def _cnn(theta: ParamSet, prefix: str, x: Tensor) -> Tensor:
    h = x
    j = 1
    while f"{prefix}.conv{j}.weight" in theta:
        h = ad.conv(h, theta[f"{prefix}.conv{j}.weight"],
                    theta[f"{prefix}.conv{j}.bias"], padding="zero")
        if f"{prefix}.prelu{j}.alpha" in theta:
            h = ad.prelu(h, theta[f"{prefix}.prelu{j}.alpha"], channel_axis=0)
        j += 1
    return h


def pd_forward(window: Sinogram, theta: ParamSet, grid: ImageGrid,
               fbp_window: str = "hann") -> Tensor:
    """Run the primal-dual network on one 3-slice sinogram window.

    Returns the reconstructed (3, ny, nx) image tensor in attenuation
    units, differentiable w.r.t. ``theta`` (and through A / A^T).
    """
    if window.n_slices != WINDOW_SLICES:
        raise ValueError(f"window must have {WINDOW_SLICES} slices, got {window.n_slices}")
    geom = window.geometry
    sigma = operator_norm(geom, grid)
    s_img = 1.0 / MU_WATER
    s_sino = 1.0 / (MU_WATER * sigma)

    x0 = fbp(window, grid, window=fbp_window, geom=geom).values  # (3, ny, nx)
    z = ad.concat([Tensor(x0), Tensor(x0)], axis=0)              # 6 channels
    y = Tensor(np.zeros((STATE_CHANNELS, geom.n_views, geom.n_channels)))
    p_scaled = Tensor(window.values * s_sino)

    for i in range(1, recon_iterations(theta) + 1):
        az = project_op(z[:WINDOW_SLICES], geom, grid) * s_sino
        dual_in = ad.concat([y, az, p_scaled], axis=0)
        y = y + _cnn(theta, f"recon.iter{i}.dual", dual_in)
        aty = backproject_op(y[:WINDOW_SLICES], geom, grid) * (1.0 / sigma)
        primal_in = ad.concat([z * s_img, aty], axis=0)
        z = z + _cnn(theta, f"recon.iter{i}.primal", primal_in) * MU_WATER
    return z[:WINDOW_SLICES]


def window_starts(nz: int, stride: int = 1) -> list:
    if nz < WINDOW_SLICES:
        raise ValueError(f"need at least {WINDOW_SLICES} slices, got {nz}")
    starts = list(range(0, nz - WINDOW_SLICES + 1, stride))
    if starts[-1] != nz - WINDOW_SLICES:
        starts.append(nz - WINDOW_SLICES)
    return starts


def coverage(nz: int, stride: int = 1) -> np.ndarray:
    """How many windows contribute to each slice (the denominator of the
    aggregation: 1, 2, 3, 3, ..., 3, 2, 1 at stride 1)."""
    counts = np.zeros(nz, dtype=np.int64)
    for k in window_starts(nz, stride):
        counts[k:k + WINDOW_SLICES] += 1
    return counts


def aggregate_windows(outputs, starts, nz: int) -> Tensor:
    """Average overlapping window outputs into an (nz, ny, nx) tensor.

    The per-slice mean is computed in shifted form, first contribution
    plus mean of differences, which is exact (bitwise) when all
    contributions to a slice are identical, e.g. for zero CNN weights.
    """
    per_slice = [[] for _ in range(nz)]
    for out, k in zip(outputs, starts):
        for j in range(WINDOW_SLICES):
            per_slice[k + j].append(out[j])
    slices = []
    for s, contribs in enumerate(per_slice):
        if not contribs:
            raise ValueError(f"slice {s} not covered by any window")
        first = contribs[0]
        if len(contribs) == 1:
            slices.append(first)
            continue
        delta = contribs[1] - first
        for other in contribs[2:]:
            delta = delta + (other - first)
        slices.append(first + delta * (1.0 / len(contribs)))
    return ad.stack(slices, axis=0)


def reconstruct_tensor(sino: Sinogram, theta: ParamSet, grid: ImageGrid,
                       stride: int = 1, fbp_window: str = "hann") -> Tensor:
    starts = window_starts(sino.n_slices, stride)
    outputs = [pd_forward(sino.window(k), theta, grid, fbp_window) for k in starts]
    return aggregate_windows(outputs, starts, sino.n_slices)


def reconstruct_volume(sino: Sinogram, theta: ParamSet, grid: ImageGrid,
                       stride: int = 1, fbp_window: str = "hann") -> Volume:
    """Full-volume reconstruction (inference; no gradient graph)."""
    with ad.no_grad():
        t = reconstruct_tensor(sino, theta, grid, stride, fbp_window)
    return Volume(t.data, spacing=(grid.sx, grid.sy, sino.geometry.row_height),
                  origin=(grid.origin_x, grid.origin_y, sino.z_origin),
                  unit="MU")
