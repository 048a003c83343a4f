"""View-reconstruction training objective.

Pieces: SSIM over 3x3 mean-pooled windows, the 0.85/0.15 SSIM+L1 mix, the
per-pixel minimum over forward/backward reconstructions, the static-scene
automask, edge-aware disparity smoothness, and the four-scale total.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import backproject, disp_to_depth, project, warp

ALPHA = 0.85           # SSIM weight in the photometric mix
LAMBDA_SMOOTH = 1e-3   # smoothness weight per scale
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_BIG = 1e4             # pushed onto invalid pixels so the min avoids them


def _pool3(x):
    """3x3 mean with reflection padding: shape-preserving, differentiable."""
    c = x.shape[1]
    k = Tensor(np.full((c, 1, 3, 3), 1.0 / 9.0))
    return ad.conv2d(ad.reflect_pad2d(x, 1), k, None, stride=1, padding=0, groups=c)


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel structural similarity in [-1, 1] for images in [0, 1]."""
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    mu_a, mu_b = _pool3(a), _pool3(b)
    var_a = _pool3(a * a) - mu_a * mu_a
    var_b = _pool3(b * b) - mu_b * mu_b
    cov = _pool3(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def photometric(recon: Tensor, target: Tensor, alpha: float = ALPHA) -> Tensor:
    """alpha·(1−SSIM)/2 + (1−alpha)·L1, channel-averaged to [N,1,H,W]."""
    if recon.shape != target.shape:
        raise ValueError(f"photometric: shapes differ {recon.shape} vs {target.shape}")
    dssim = (1.0 - ssim(recon, target)) * 0.5
    l1 = ad.abs_(recon - target)
    mixed = alpha * dssim + (1.0 - alpha) * l1
    return ad.mean(mixed, axis=1, keepdims=True)


def min_reprojection(loss_fwd: Tensor, loss_bwd: Tensor) -> Tensor:
    """Per-pixel occlusion-softening minimum over the two source losses."""
    return ad.minimum(loss_fwd, loss_bwd)


def automask(warped_losses, identity_losses) -> np.ndarray:
    """mu = 1 where reconstruction beats doing nothing, as a constant map.

    Both arguments are pairs of per-pixel maps.  The comparison is strict,
    so a perfectly static triplet (identity loss 0) masks everything out.
    No gradient flows through mu by contract.
    """
    wmin = np.minimum(warped_losses[0].data, warped_losses[1].data)
    imin = np.minimum(identity_losses[0].data, identity_losses[1].data)
    # photometric error is >= 0 up to roundoff (SSIM can exceed 1 by ulps
    # after resampling); clear the dust so static scenes stay fully masked
    return (np.maximum(wmin, 0.0) < np.maximum(imin, 0.0)).astype(np.float64)


def _forward_diff_x(x):
    return x[:, :, :, 1:] - x[:, :, :, :-1]


def _forward_diff_y(x):
    return x[:, :, 1:, :] - x[:, :, :-1, :]


def smoothness(disp: Tensor, image: Tensor) -> Tensor:
    """Edge-aware first-order smoothness of mean-normalized disparity.

    Weights are e^(−|∂I|): image edges suppress the penalty.  Scale
    invariant because the disparity is divided by its per-image mean first.
    """
    if disp.ndim != 4 or disp.shape[1] != 1:
        raise ValueError(f"smoothness wants disp [N,1,H,W], got {disp.shape}")
    if image.shape[2:] != disp.shape[2:] or image.shape[0] != disp.shape[0]:
        raise ValueError(f"smoothness: disp {disp.shape} vs image {image.shape}")
    mu = ad.mean(disp, axis=(2, 3), keepdims=True)
    if np.any(np.abs(mu.data) < 1e-12):
        raise ValueError("smoothness: disparity mean is ~0, normalization undefined")
    d = disp / mu
    gx = ad.abs_(_forward_diff_x(d))
    gy = ad.abs_(_forward_diff_y(d))
    ix = ad.mean(ad.abs_(_forward_diff_x(image)), axis=1, keepdims=True)
    iy = ad.mean(ad.abs_(_forward_diff_y(image)), axis=1, keepdims=True)
    return ad.mean(gx * ad.exp(-ix)) + ad.mean(gy * ad.exp(-iy))


@dataclass
class LossReport:
    """Scalars logged once per training step."""

    total: float
    per_scale: tuple
    photometric: float
    smoothness: float
    automask_ratio: float


def total_loss(disps, target, sources, poses, k, depth_range,
               lambda_smooth: float = LAMBDA_SMOOTH, alpha: float = ALPHA):
    """Four-scale objective of one batch.

    disps: list of 4 sigmoid disparity maps, finest first, at 1, 1/2, 1/4,
    1/8 resolution.  sources/poses: pairs (forward, backward); each pose
    maps target-frame points into that source's camera.  Returns the scalar
    loss Tensor plus a LossReport of floats.
    """
    if len(disps) != 4:
        raise ValueError(f"expected 4 disparity scales, got {len(disps)}")
    n, _, h, w = target.shape
    identity = [photometric(src, target, alpha) for src in sources]

    total = None
    per_scale, photos, smooths, kept_ratios = [], [], [], []
    for s, disp in enumerate(disps):
        if disp.shape[2] * (2 ** s) != h or disp.shape[3] * (2 ** s) != w:
            raise ValueError(
                f"scale {s}: disparity {disp.shape} does not fit target {target.shape}")
        full = disp if s == 0 else ad.upsample(disp, 2 ** s, "bilinear")
        depth = disp_to_depth(full, depth_range)
        cam_points = backproject(depth, k)
        masked = []
        for src, pose in zip(sources, poses):
            grid, valid = project(cam_points, pose, k)
            loss_map = photometric(warp(src, grid), target, alpha)
            masked.append(loss_map + Tensor(_BIG * (1.0 - valid)))
        wmin = min_reprojection(masked[0], masked[1])
        mu = automask(masked, identity)
        count = mu.sum()
        photo = (ad.sum_(wmin * Tensor(mu)) / count if count > 0
                 else ad.sum_(wmin) * 0.0)
        smooth = smoothness(full, target)
        scale_loss = photo + lambda_smooth * smooth
        total = scale_loss if total is None else total + scale_loss
        per_scale.append(float(scale_loss.data))
        photos.append(float(photo.data))
        smooths.append(float(smooth.data))
        kept_ratios.append(count / mu.size)
    total = total * 0.25
    report = LossReport(
        total=float(total.data),
        per_scale=tuple(per_scale),
        photometric=float(np.mean(photos)),
        smoothness=float(np.mean(smooths)),
        automask_ratio=float(np.mean(kept_ratios)),
    )
    return total, report
