import numpy as np
import pytest

import sinodet.autodiff as ad
from sinodet.autodiff import Tensor
from sinodet.fbp import fbp
from sinodet.geometry import MU_WATER, ImageGrid, Volume
from sinodet.projector import forward_project, geometry_for_grid
from sinodet.reconnet import (WINDOW_SLICES, aggregate_windows, coverage,
                              init_recon_params, pd_forward,
                              reconstruct_volume, window_starts)


@pytest.fixture(scope="module")
def micro_setup():
    grid = ImageGrid(16, 16, 2.0, 2.0)
    geom = geometry_for_grid(grid, n_views=24)
    rng = np.random.default_rng(5)
    vals = np.zeros((4, 16, 16))
    yy, xx = np.mgrid[0:16, 0:16]
    disk = (xx - 8) ** 2 + (yy - 8) ** 2 < 36
    vals[:, disk] = MU_WATER
    vals += 0.1 * MU_WATER * rng.random(vals.shape) * disk
    vol = Volume(vals, (2.0, 2.0, geom.row_height), (-16.0, -16.0, 0.0), "MU")
    return grid, geom, vol, forward_project(vol, geom)


class TestWindowing:
    def test_window_starts_cover_all_slices(self):
        assert window_starts(3) == [0]
        assert window_starts(4) == [0, 1]
        assert window_starts(5) == [0, 1, 2]
        assert window_starts(16) == list(range(14))

    def test_coverage_vector(self):
        assert list(coverage(5)) == [1, 2, 3, 2, 1]
        assert list(coverage(3)) == [1, 1, 1]

    @pytest.mark.parametrize("nz", [3, 4, 5, 16])
    def test_partition_of_unity_identity(self, nz):
        # pushing ground-truth windows through the aggregation must give
        # back the volume itself
        rng = np.random.default_rng(nz)
        vol = rng.random((nz, 6, 7))
        starts = window_starts(nz)
        outs = [Tensor(vol[k:k + WINDOW_SLICES]) for k in starts]
        agg = aggregate_windows(outs, starts, nz)
        assert np.max(np.abs(agg.data - vol)) < 1e-12

    def test_aggregation_exact_for_identical_windows(self):
        rng = np.random.default_rng(1)
        vol = rng.random((7, 4, 4))
        starts = window_starts(7)
        outs = [Tensor(vol[k:k + WINDOW_SLICES]) for k in starts]
        agg = aggregate_windows(outs, starts, 7)
        assert np.array_equal(agg.data, vol)

    def test_aggregation_gradient_splits_by_coverage(self):
        nz = 5
        starts = window_starts(nz)
        outs = [Tensor(np.zeros((3, 2, 2)), requires_grad=True) for _ in starts]
        agg = aggregate_windows(outs, starts, nz)
        agg.backward(seed=np.ones((nz, 2, 2)))
        # each slice's gradient is divided equally among covering windows
        got = sum(float(o.grad.sum()) for o in outs)
        assert got == pytest.approx(nz * 4)


class TestZeroWeightAnchor:
    def test_zero_theta_is_fbp_bitwise(self, micro_setup):
        grid, geom, vol, sino = micro_setup
        theta = init_recon_params(seed=0, n_iters=3, hidden=8)
        rec = reconstruct_volume(sino, theta, grid)
        ref = fbp(sino, grid, window="hann")
        assert np.array_equal(rec.values, ref.values)
        assert rec.origin == ref.origin

    def test_nonzero_theta_departs_from_fbp(self, micro_setup):
        grid, geom, vol, sino = micro_setup
        theta = init_recon_params(seed=0, n_iters=2, hidden=8)
        rng = np.random.default_rng(0)
        for name in theta.names():
            theta[name].data += 0.01 * rng.standard_normal(theta[name].shape)
        rec = reconstruct_volume(sino, theta, grid)
        ref = fbp(sino, grid, window="hann")
        assert not np.array_equal(rec.values, ref.values)


class TestPdForward:
    def test_output_shape_and_units(self, micro_setup):
        grid, geom, vol, sino = micro_setup
        theta = init_recon_params(seed=0, n_iters=2, hidden=8)
        out = pd_forward(sino.window(0), theta, grid)
        assert out.shape == (3, 16, 16)
        # zero weights: output is the FBP of the window, in raw MU units
        assert np.max(np.abs(out.data)) < 10 * MU_WATER

    def test_gradients_match_finite_differences(self, micro_setup):
        grid, geom, vol, sino = micro_setup
        theta = init_recon_params(seed=0, n_iters=2, hidden=4)
        rng = np.random.default_rng(2)
        for name in theta.names():
            theta[name].data += 0.02 * rng.standard_normal(theta[name].shape)
        target = vol.values[0:3]

        def loss_value():
            out = pd_forward(sino.window(0), theta, grid)
            diff = (out - Tensor(target)) * (1.0 / MU_WATER)
            return ad.square(diff).mean()

        loss = loss_value()
        theta.zero_grad()
        loss.backward()
        names = list(theta.names())
        for name in names[::4]:
            arr = theta[name].data
            idx = tuple(rng.integers(0, s) for s in arr.shape) if arr.ndim else ()
            h = 1e-5
            old = arr[idx]
            arr[idx] = old + h
            lp = float(loss_value().data)
            arr[idx] = old - h
            lm = float(loss_value().data)
            arr[idx] = old
            fd = (lp - lm) / (2 * h)
            an = theta[name].grad[idx]
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4, name

    def test_reconstruction_no_graph(self, micro_setup):
        grid, geom, vol, sino = micro_setup
        theta = init_recon_params(seed=0, n_iters=2, hidden=4)
        rec = reconstruct_volume(sino, theta, grid)
        assert rec.unit == "MU"
        assert rec.values.shape == vol.values.shape
