"""Differentiable pinhole camera: disparity→depth, backproject, project, warp.

Conventions, used identically by the renderer: pixel (u,v) = (column, row),
camera looks down +Z, x right, y down.  Pixel centers sit at integer
coordinates, so the image spans [0, W−1] × [0, H−1].
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Z_EPS = 1e-4  # points closer than this to the camera plane are masked out


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive: {self}")


@dataclass(frozen=True)
class DepthRange:
    d_min: float
    d_max: float

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self}")


def disp_to_depth(sigma: Tensor, rng: DepthRange) -> Tensor:
    """Map sigmoid output in (0,1) to depth in (d_min, d_max).

    Linear in inverse depth: d = 1/d_max + sigma·(1/d_min − 1/d_max), D = 1/d.
    """
    if not isinstance(rng, DepthRange):
        raise ValueError("disp_to_depth needs a DepthRange")
    lo, hi = 1.0 / rng.d_max, 1.0 / rng.d_min
    inv = lo + sigma * (hi - lo)
    return 1.0 / inv


def pixel_grid(h: int, w: int) -> np.ndarray:
    """[2,H,W] of (u,v) pixel-center coordinates."""
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([u, v])


_dirs_cache = {}


def _ray_dirs(h, w, k: Intrinsics):
    key = (h, w, k)
    if key not in _dirs_cache:
        uv = pixel_grid(h, w)
        _dirs_cache[key] = np.stack([(uv[0] - k.cx) / k.fx,
                                     (uv[1] - k.cy) / k.fy,
                                     np.ones((h, w))])
    return _dirs_cache[key]


def backproject(depth: Tensor, k: Intrinsics) -> Tensor:
    """Lift [N,1,H,W] depth to camera-frame points [N,3,H,W]."""
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise ValueError(f"backproject wants [N,1,H,W], got {depth.shape}")
    n, _, h, w = depth.shape
    dirs = Tensor(_ray_dirs(h, w, k)[None])  # [1,3,H,W]
    return depth * dirs


def project(points: Tensor, pose, k: Intrinsics):
    """Rigid transform + pinhole projection.

    points: [N,3,H,W]; pose: SE3 with rotation [N,3,3], translation [N,3].
    Returns (grid [N,2,H,W] of sample coordinates, valid [N,1,H,W] bool).
    The mask is a plain constant array: false where the transformed depth is
    ≤ Z_EPS or the sample lands outside the image.
    """
    if points.ndim != 4 or points.shape[1] != 3:
        raise ValueError(f"project wants [N,3,H,W], got {points.shape}")
    n, _, h, w = points.shape
    flat = ad.reshape(points, (n, 3, h * w))
    cam = ad.matmul(pose.rotation, flat) + ad.reshape(pose.translation, (n, 3, 1))
    x, y, z = cam[:, 0:1, :], cam[:, 1:2, :], cam[:, 2:3, :]
    z_safe = ad.clamp(z, lo=Z_EPS)
    u = x / z_safe * k.fx + k.cx
    v = y / z_safe * k.fy + k.cy
    grid = ad.reshape(ad.concat([u, v], axis=1), (n, 2, h, w))
    gd = grid.data
    tol = 1e-9  # identity round trips land at ±few ulp of the border pixels
    valid = ((z.data > Z_EPS).reshape(n, 1, h, w)
             & (gd[:, 0:1] >= -tol) & (gd[:, 0:1] <= w - 1 + tol)
             & (gd[:, 1:2] >= -tol) & (gd[:, 1:2] <= h - 1 + tol))
    return grid, valid


def warp(source: Tensor, grid: Tensor, valid=None) -> Tensor:
    """Bilinearly sample `source` [N,C,H,W] at `grid` [N,2,H,W].

    Out-of-view coordinates clamp to the border (the mask from `project`
    marks them; it is not applied here).  Differentiable in both arguments:
    the four corner indices are constants, the blend weights carry the
    gradient to the grid.
    """
    if source.ndim != 4 or grid.ndim != 4 or grid.shape[1] != 2:
        raise ValueError(f"warp wants [N,C,H,W]+[N,2,H,W], got "
                         f"{source.shape}, {grid.shape}")
    n, c, h, w = source.shape
    u = ad.clamp(grid[:, 0:1], 0.0, float(w - 1))   # [N,1,H,W]
    v = ad.clamp(grid[:, 1:2], 0.0, float(h - 1))
    u0 = np.minimum(np.floor(u.data), w - 2).astype(np.int64)
    v0 = np.minimum(np.floor(v.data), h - 2).astype(np.int64)
    wu = u - u0
    wv = v - v0

    chan = np.arange(c, dtype=np.int64).reshape(1, c, 1, 1)
    base = (np.arange(n, dtype=np.int64).reshape(n, 1, 1, 1) * c + chan) * (h * w)

    def gather(yy, xx):
        return ad.take(source, base + yy * w + xx)  # [N,C,H,W]

    s00 = gather(v0, u0)
    s01 = gather(v0, u0 + 1)
    s10 = gather(v0 + 1, u0)
    s11 = gather(v0 + 1, u0 + 1)
    one = 1.0
    return ((one - wv) * ((one - wu) * s00 + wu * s01)
            + wv * ((one - wu) * s10 + wu * s11))
