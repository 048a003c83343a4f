"""Camera model: disparity mapping, projection round trips, warping."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import monovit.autodiff as ad
from monovit.autodiff import Tensor
from monovit.geometry import (DepthRange, Intrinsics, backproject,
                              disp_to_depth, pixel_grid, project, warp)
from monovit.gradcheck import numeric_grad
from monovit.posenet import SE3

K = Intrinsics(fx=50.0, fy=50.0, cx=3.5, cy=3.5)
RANGE = DepthRange(0.1, 100.0)


def identity_pose(n=1):
    return SE3(Tensor(np.broadcast_to(np.eye(3), (n, 3, 3)).copy()),
               Tensor(np.zeros((n, 3))))


def translation_pose(t, n=1):
    return SE3(Tensor(np.broadcast_to(np.eye(3), (n, 3, 3)).copy()),
               Tensor(np.tile(np.asarray(t, dtype=float), (n, 1))))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0)


def test_depth_range_validation():
    with pytest.raises(ValueError):
        DepthRange(0.5, 0.5)
    with pytest.raises(ValueError):
        DepthRange(0.0, 10.0)


def test_disp_to_depth_limits():
    lo = disp_to_depth(Tensor([[1.0 - 1e-12]]), RANGE)
    hi = disp_to_depth(Tensor([[1e-12]]), RANGE)
    np.testing.assert_allclose(lo.data, 0.1, rtol=1e-9)
    np.testing.assert_allclose(hi.data, 100.0, rtol=1e-9)


def test_disp_to_depth_midpoint():
    d = disp_to_depth(Tensor([[0.5]]), RANGE)
    # 1/100 + 0.5*(10 - 0.01) = 5.005 -> depth 0.1998001...
    np.testing.assert_allclose(d.data, 1.0 / 5.005, rtol=1e-12)


@given(st.floats(1e-6, 1.0 - 1e-6), st.floats(1e-6, 1.0 - 1e-6))
def test_disp_to_depth_strictly_decreasing(s1, s2):
    lo, hi = sorted([s1, s2])
    if lo == hi:
        return
    d_lo = disp_to_depth(Tensor([lo]), RANGE).data[0]
    d_hi = disp_to_depth(Tensor([hi]), RANGE).data[0]
    assert d_hi < d_lo


def test_backproject_principal_point():
    depth = np.full((1, 1, 8, 8), 5.0)
    pts = backproject(Tensor(depth), K).data
    # pixel (cx, cy) = (3.5, 3.5) is off-grid; check the ray formula instead
    u, v = 2, 6
    np.testing.assert_allclose(pts[0, :, v, u],
                               [(u - K.cx) / K.fx * 5, (v - K.cy) / K.fy * 5, 5.0])


def test_project_identity_recovers_pixel_grid():
    rng = np.random.default_rng(0)
    depth = Tensor(rng.uniform(2.0, 10.0, size=(2, 1, 8, 8)))
    grid, valid = project(backproject(depth, K), identity_pose(2), K)
    want = np.broadcast_to(pixel_grid(8, 8)[None], (2, 2, 8, 8))
    np.testing.assert_allclose(grid.data, want, atol=1e-10)
    assert valid.all()


def test_project_on_axis_z_translation_keeps_center():
    pts = Tensor(np.zeros((1, 3, 1, 1)) + np.array([0.0, 0.0, 4.0]).reshape(1, 3, 1, 1))
    grid, valid = project(pts, translation_pose([0.0, 0.0, 2.0]), K)
    np.testing.assert_allclose(grid.data[0, :, 0, 0], [K.cx, K.cy], atol=1e-12)


def test_project_x_translation_shift():
    k = Intrinsics(fx=100.0, fy=100.0, cx=10.0, cy=10.0)
    pts = Tensor(np.array([0.0, 0.0, 10.0]).reshape(1, 3, 1, 1))
    grid, _ = project(pts, translation_pose([1.0, 0.0, 0.0]), k)
    base, _ = project(pts, identity_pose(), k)
    # u shift = fx * tx / Z = 100/10
    np.testing.assert_allclose(grid.data[0, 0] - base.data[0, 0], 10.0, atol=1e-12)


def test_project_masks_points_behind_camera():
    pts = Tensor(np.array([0.0, 0.0, -1.0]).reshape(1, 3, 1, 1))
    _, valid = project(pts, identity_pose(), K)
    assert not valid.any()


def test_warp_identity_grid_returns_source():
    rng = np.random.default_rng(1)
    src = Tensor(rng.uniform(size=(1, 3, 6, 7)))
    grid = Tensor(pixel_grid(6, 7)[None])
    out = warp(src, grid)
    np.testing.assert_allclose(out.data, src.data, atol=1e-12)


def test_warp_half_pixel_shift_on_ramp():
    src = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    grid = Tensor(np.array([0.5, 0.5]).reshape(1, 2, 1, 1))
    out = warp(src, grid)
    np.testing.assert_allclose(out.data[0, 0, 0, 0], 0.5, atol=1e-12)


def test_warp_round_trip_identity_pose():
    rng = np.random.default_rng(2)
    src = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    depth = Tensor(rng.uniform(3.0, 9.0, size=(1, 1, 8, 8)))
    grid, valid = project(backproject(depth, K), identity_pose(), K)
    out = warp(src, grid, valid)
    np.testing.assert_allclose(out.data, src.data, atol=1e-12)
    assert valid.all()


def test_valid_mask_shrinks_with_larger_motion():
    depth = Tensor(np.full((1, 1, 8, 8), 5.0))
    pts = backproject(depth, K)
    counts = []
    for tx in (0.0, 0.2, 0.4, 0.8):
        _, valid = project(pts, translation_pose([tx, 0.0, 0.0]), K)
        counts.append(int(valid.sum()))
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[0] > counts[-1]


def test_depth_gradient_through_warp_chain_matches_differences():
    """disp -> depth -> project -> warp, FD-checked on an 8x8 probe."""
    rng = np.random.default_rng(4)
    h = w = 8
    # globally smooth source image: bilinear sampling of it is C1 in the grid
    uv = pixel_grid(h, w)
    src_img = np.stack([0.3 + 0.04 * uv[0] + 0.02 * uv[1],
                        0.5 - 0.03 * uv[0] + 0.01 * uv[1],
                        0.4 + 0.01 * uv[0] - 0.02 * uv[1]])[None]
    pose = SE3(Tensor(np.broadcast_to(np.eye(3), (1, 3, 3)).copy()),
               Tensor(np.array([[0.05, 0.02, 0.03]])))
    # sigmas chosen so depths sit at 2..9 units: sample drift stays sub-pixel
    sig0 = rng.uniform(0.01, 0.05, size=(1, 1, h, w))

    def forward(arrs):
        sig = arrs[0] if isinstance(arrs[0], Tensor) else Tensor(arrs[0])
        depth = disp_to_depth(sig, RANGE)
        grid, _ = project(backproject(depth, K), pose, K)
        out = warp(Tensor(src_img), grid)
        return ad.mean(out * out)

    sig_t = Tensor(sig0, requires_grad=True)
    ad.backward(forward([sig_t]))
    with ad.no_grad():
        num = numeric_grad(lambda arrs: float(forward(arrs).data), [sig0.copy()])[0]
    denom = np.maximum(np.maximum(np.abs(num), np.abs(sig_t.grad)), 1.0)
    assert np.max(np.abs(num - sig_t.grad) / denom) < 1e-3
