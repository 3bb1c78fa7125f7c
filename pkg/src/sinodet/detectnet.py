"""3D CNN patch detector.

Default architecture for 32x32x16 patches: three zero-padded 3x3x3 conv +
PReLU + 2x2x2 max-pool stages (32, 64, 128 channels), one valid 4x4x2
conv collapsing the remaining extent to 1x1x1 at 256 channels, and a
1x1x1 conv producing a single logit passed through a sigmoid.  The valid
convolution makes the network accept exactly one patch geometry.

Smaller patch geometries (used by micro-scale gradient checks) reuse the
same stage layout; each pool axis halves only while the extent stays
even, and the valid kernel covers whatever extent remains.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

PATCH_SHAPE = (32, 32, 16)  # voxels (x, y, z)

HU_NORM_OFFSET = 1000.0
HU_NORM_SCALE = 1400.0  # aligned with the -1400..200 HU display window
HU_NORM_CLIP = (0.0, 1.2)


def normalize_hu(values: np.ndarray) -> np.ndarray:
    """Map HU to detector input units, clipped to [0, 1.2]."""
    return np.clip((values + HU_NORM_OFFSET) / HU_NORM_SCALE, *HU_NORM_CLIP)


def normalize_hu_op(x: Tensor) -> Tensor:
    """Differentiable version of :func:`normalize_hu`."""
    return ad.clamp((x + HU_NORM_OFFSET) * (1.0 / HU_NORM_SCALE), *HU_NORM_CLIP)


def pool_plan(patch_shape, n_stages: int):
    """Per-stage pool windows and the extent left for the valid conv."""
    ext = list(patch_shape)
    windows = []
    for _ in range(n_stages):
        w = [2 if e % 2 == 0 and e > 1 else 1 for e in ext]
        ext = [e // wi for e, wi in zip(ext, w)]
        windows.append(tuple(w))
    return windows, tuple(ext)


def init_detector_params(seed=0, patch_shape=PATCH_SHAPE,
                         stage_channels=(32, 64, 128),
                         head_channels=256) -> ParamSet:
    rng = np.random.default_rng(seed)
    params = ParamSet("det")

    def he_conv(c_out, c_in, ksp):
        fan_in = c_in * int(np.prod(ksp))
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, size=(c_out, c_in) + tuple(ksp))

    _, final_ext = pool_plan(patch_shape, len(stage_channels))
    c_in = 1
    for s, c_out in enumerate(stage_channels, start=1):
        params.add(f"det.stage{s}.conv.weight", he_conv(c_out, c_in, (3, 3, 3)))
        params.add(f"det.stage{s}.conv.bias", np.zeros(c_out))
        params.add(f"det.stage{s}.prelu.alpha", np.full(c_out, 0.25))
        c_in = c_out
    params.add("det.head.conv.weight", he_conv(head_channels, c_in, final_ext))
    params.add("det.head.conv.bias", np.zeros(head_channels))
    params.add("det.head.prelu.alpha", np.full(head_channels, 0.25))
    # zero output layer: the untrained detector scores everything 0.5, so
    # training starts at the ln(2) baseline instead of a saturated sigmoid
    params.add("det.out.weight", np.zeros((1, head_channels, 1, 1, 1)))
    params.add("det.out.bias", np.zeros(1))
    return params


def detector_stages(eta: ParamSet) -> int:
    s = 0
    while f"det.stage{s + 1}.conv.weight" in eta:
        s += 1
    if s == 0:
        raise ValueError("parameter set contains no detector stages")
    return s


def expected_patch_shape(eta: ParamSet) -> tuple:
    """Patch extents the parameter set was built for (inverse of the pool
    plan applied to the valid-conv kernel)."""
    n_stages = detector_stages(eta)
    ext = list(eta["det.head.conv.weight"].shape[2:])
    for _ in range(n_stages):
        ext = [e * 2 for e in ext]
    # pool axes that stopped halving early cannot be inverted blindly; the
    # default geometry doubles every stage, which is what we reconstruct
    return tuple(ext)


def detect_patches(patches, eta: ParamSet) -> Tensor:
    """Score a batch of patches.

    ``patches``: array or Tensor shaped (N, px, py, pz) or (N, 1, px, py,
    pz) in normalized intensity units.  Returns an (N,) tensor of nodule
    probabilities in (0, 1).
    """
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches))
    if x.ndim == 4:
        x = ad.reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.ndim != 5 or x.shape[1] != 1:
        raise ad.ShapeError(f"patches must be (N, [1,] px, py, pz), got {x.shape}")
    patch_shape = x.shape[2:]
    n_stages = detector_stages(eta)
    windows, final_ext = pool_plan(patch_shape, n_stages)
    head_ksp = eta["det.head.conv.weight"].shape[2:]
    if tuple(final_ext) != tuple(head_ksp):
        raise ad.ShapeError(
            f"patch extents {tuple(patch_shape)} leave {tuple(final_ext)} after "
            f"pooling but the valid conv expects {tuple(head_ksp)}"
        )
    h = x
    for s in range(1, n_stages + 1):
        h = ad.conv(h, eta[f"det.stage{s}.conv.weight"],
                    eta[f"det.stage{s}.conv.bias"], padding="zero")
        h = ad.prelu(h, eta[f"det.stage{s}.prelu.alpha"], channel_axis=1)
        h = ad.maxpool3d(h, windows[s - 1])
    h = ad.conv(h, eta["det.head.conv.weight"], eta["det.head.conv.bias"],
                padding="valid")
    h = ad.prelu(h, eta["det.head.prelu.alpha"], channel_axis=1)
    h = ad.conv(h, eta["det.out.weight"], eta["det.out.bias"], padding="valid")
    # h: (N, 1, 1, 1, 1) by construction
    return ad.sigmoid(ad.reshape(h, (h.shape[0],)))


def detect_patch(patch, eta: ParamSet) -> float:
    """Probability for a single patch (inference)."""
    with ad.no_grad():
        return float(detect_patches(np.asarray(patch)[None], eta).data[0])
