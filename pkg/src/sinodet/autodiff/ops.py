"""Neural-network operations for the autodiff engine.

Convolutions use cross-correlation semantics and are implemented with
``sliding_window_view`` + ``tensordot`` so the heavy lifting lands in BLAS.
2D and 3D spatial ranks are supported; inputs may be given either as
``(C_in, *spatial)`` or batched as ``(N, C_in, *spatial)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make

CE_EPS = 1e-7  # clamp applied to probabilities inside the cross-entropy log


def _as_batched(x: Tensor, kernel_ndim: int):
    """Return (data with batch axis, had_batch flag)."""
    if x.ndim == kernel_ndim:
        return x.data, True
    if x.ndim == kernel_ndim - 1:
        return x.data[None], False
    raise ShapeError(
        f"conv input rank {x.ndim} incompatible with kernel rank {kernel_ndim}"
    )


def conv(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "zero") -> Tensor:
    """N-d convolution (cross-correlation) over the trailing spatial axes.

    kernel: (C_out, C_in, *k).  padding "zero" keeps spatial extents and
    requires odd kernels; "valid" shrinks each extent by k-1.  Gradients
    are defined for the input, the kernel and the bias.
    """
    kd = kernel.data
    if kd.ndim < 4:
        raise ShapeError(f"kernel must be (C_out, C_in, *spatial), got {kd.shape}")
    srank = kd.ndim - 2
    ksp = kd.shape[2:]
    xd, batched = _as_batched(x, kd.ndim)
    if xd.shape[1] != kd.shape[1]:
        raise ShapeError(
            f"input channels {xd.shape[1]} do not match kernel C_in {kd.shape[1]} "
            f"(input {x.shape}, kernel {kd.shape})"
        )
    if padding == "zero":
        if any(k % 2 == 0 for k in ksp):
            raise ShapeError(f"zero padding needs odd kernel extents, got {ksp}")
        pads = [k // 2 for k in ksp]
    elif padding == "valid":
        pads = [0] * srank
    else:
        raise ValueError(f"unknown padding {padding!r}")
    if any(xd.shape[2 + i] + 2 * pads[i] < ksp[i] for i in range(srank)):
        raise ShapeError(f"input spatial {xd.shape[2:]} smaller than kernel {ksp}")

    if any(pads):
        pad_spec = [(0, 0), (0, 0)] + [(p, p) for p in pads]
        xp = np.pad(xd, pad_spec)
    else:
        xp = xd
    sp_axes = tuple(range(2, 2 + srank))
    win = sliding_window_view(xp, ksp, axis=sp_axes)
    # win: (N, C_in, *out, *k); contract C_in and kernel axes against kernel
    wax = (1,) + tuple(range(2 + srank, 2 + 2 * srank))
    kax = (1,) + tuple(range(2, 2 + srank))
    out = np.tensordot(win, kd, axes=(wax, kax))  # (N, *out, C_out)
    out = np.moveaxis(out, -1, 1)
    if bias is not None:
        if bias.shape != (kd.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({kd.shape[0]},)")
        out = out + bias.data.reshape((1, -1) + (1,) * srank)
    out_sp = out.shape[2:]

    def backward(g):
        gb = g if batched else g[None]
        # bias gradient: sum over batch and spatial
        gbias = None
        if bias is not None:
            gbias = gb.sum(axis=(0,) + tuple(range(2, 2 + srank)))
        # kernel gradient: correlate input windows with the upstream grad
        gax = (0,) + tuple(range(2, 2 + srank))
        vax = (0,) + tuple(range(2, 2 + srank))
        gkern = np.tensordot(gb, win, axes=(gax, vax))  # (C_out, C_in, *k)
        # input gradient: full correlation with the flipped kernel
        back_pads = [k - 1 - p for k, p in zip(ksp, pads)]
        pad_spec = [(0, 0), (0, 0)] + [(bp, bp) for bp in back_pads]
        gp = np.pad(gb, pad_spec)
        gwin = sliding_window_view(gp, ksp, axis=sp_axes)
        kflip = np.flip(kd, axis=tuple(range(2, kd.ndim)))
        gx = np.tensordot(gwin, kflip, axes=((1,) + tuple(range(2 + srank, 2 + 2 * srank)),
                                             (0,) + tuple(range(2, 2 + srank))))
        gx = np.moveaxis(gx, -1, 1)
        if not batched:
            gx = gx[0]
        if bias is not None:
            return gx, gkern, gbias
        return gx, gkern

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    res = _make(out if batched else out[0], parents, backward)
    assert res.shape[-srank:] == out_sp
    return res


def maxpool3d(x: Tensor, window) -> Tensor:
    """Max over disjoint 3D windows; ties route the gradient to the first
    occurrence (flattened window order)."""
    wx, wy, wz = window
    xd = x.data if x.ndim == 5 else x.data[None]
    batched = x.ndim == 5
    if x.ndim not in (4, 5):
        raise ShapeError(f"maxpool3d wants (C,x,y,z) or (N,C,x,y,z), got {x.shape}")
    n, c, sx, sy, sz = xd.shape
    if sx % wx or sy % wy or sz % wz:
        raise ShapeError(f"spatial extents {(sx, sy, sz)} not divisible by window {window}")
    ox, oy, oz = sx // wx, sy // wy, sz // wz
    xr = xd.reshape(n, c, ox, wx, oy, wy, oz, wz)
    xr = xr.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, ox, oy, oz, wx * wy * wz)
    idx = np.argmax(xr, axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, ox, oy, oz, wx * wy * wz))
        np.put_along_axis(gwin, idx[..., None], (g if batched else g[None])[..., None], axis=-1)
        gx = gwin.reshape(n, c, ox, oy, oz, wx, wy, wz)
        gx = gx.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(n, c, sx, sy, sz)
        return (gx if batched else gx[0],)

    return _make(out if batched else out[0], (x,), backward)


# -- activations --------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (np.where(mask, g, 0.0),))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def prelu(x: Tensor, alpha: Tensor, channel_axis: int = 0) -> Tensor:
    """PReLU with one slope per channel along ``channel_axis``."""
    nchan = x.shape[channel_axis]
    if alpha.shape != (nchan,):
        raise ShapeError(
            f"alpha shape {alpha.shape} != ({nchan},) for channel axis {channel_axis}"
        )
    ashape = [1] * x.ndim
    ashape[channel_axis] = nchan
    a = alpha.data.reshape(ashape)
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)

    def backward(g):
        gx = np.where(pos, g, a * g)
        axes = tuple(i for i in range(x.ndim) if i != channel_axis)
        galpha = np.where(pos, 0.0, g * x.data).sum(axis=axes)
        return gx, galpha

    return _make(out, (x, alpha), backward)


# -- losses -------------------------------------------------------------------

def cross_entropy(score: Tensor, label, reduce: str = "mean") -> Tensor:
    """Binary cross entropy on probabilities.

    ``score`` holds probabilities in (0, 1); values are clamped to
    [CE_EPS, 1 - CE_EPS] before the log.  ``label`` is 0/1, broadcastable
    to ``score``.  ``reduce="mean"`` gives the minibatch average.
    """
    lab = np.asarray(label, dtype=np.float64)
    if not np.all((lab == 0.0) | (lab == 1.0)):
        raise ValueError("labels must be 0 or 1")
    s = np.clip(score.data, CE_EPS, 1.0 - CE_EPS)
    per = -(lab * np.log(s) + (1.0 - lab) * np.log1p(-s))
    inside = (score.data > CE_EPS) & (score.data < 1.0 - CE_EPS)

    def backward(g):
        gs = np.where(inside, (s - lab) / (s * (1.0 - s)), 0.0)
        return (g * gs,)

    per_t = _make(per, (score,), backward)
    if reduce == "mean":
        return per_t.mean()
    if reduce == "sum":
        return per_t.sum()
    if reduce == "none":
        return per_t
    raise ValueError(f"unknown reduce {reduce!r}")


# -- opaque linear operators --------------------------------------------------

def linear_map(x: Tensor, matvec, rmatvec, name=None) -> Tensor:
    """Apply a linear operator given by ``matvec``; its gradient is
    ``rmatvec`` (the operator transpose).  Used for the projector pair."""
    out = matvec(x.data)
    return _make(out, (x,), lambda g: (rmatvec(g),))
