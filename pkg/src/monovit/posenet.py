"""Relative camera pose: the 6-DoF regression net and the SE(3) exponential."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .module import Module, ModuleList, Parameter, fan_in_conv, fan_in_linear

POSE_SCALE = 0.01  # keeps initial motions tiny so warping starts near identity


@dataclass
class Pose6DoF:
    """Batch of screw-motion parameters: [N,3] radians*axis, [N,3] translation."""

    axis_angle: Tensor
    translation: Tensor


@dataclass
class SE3:
    """Batch of rigid transforms: rotation [N,3,3], translation [N,3]."""

    rotation: Tensor
    translation: Tensor


def _skew(r):
    """[N,3] -> [N,3,3] cross-product matrices, differentiably."""
    rx, ry, rz = r[:, 0:1], r[:, 1:2], r[:, 2:3]
    zero = rx * 0.0
    rows = [ad.concat([zero, -rz, ry], axis=1),
            ad.concat([rz, zero, -rx], axis=1),
            ad.concat([-ry, rx, zero], axis=1)]
    n = r.shape[0]
    return ad.concat([ad.reshape(row, (n, 1, 3)) for row in rows], axis=1)


def se3_exp(p: Pose6DoF) -> SE3:
    """Rodrigues' formula R = I + A·K + B·K² with a series branch near θ = 0.

    A = sin θ / θ and B = (1 − cos θ)/θ² switch to their Taylor forms below
    θ = 1e-8; the switch is a constant mask so no NaN can leak into gradients.
    """
    r, t = p.axis_angle, p.translation
    if not (np.all(np.isfinite(r.data)) and np.all(np.isfinite(t.data))):
        raise ValueError("se3_exp: non-finite pose input")
    if r.ndim != 2 or r.shape[1] != 3 or t.shape != r.shape:
        raise ValueError(f"se3_exp: want [N,3]+[N,3], got {r.shape}, {t.shape}")
    n = r.shape[0]
    t2 = ad.sum_(r * r, axis=1, keepdims=True)            # θ², smooth in r
    small = (t2.data < 1e-16).astype(np.float64)          # constant branch mask
    m = Tensor(small)
    theta = ad.sqrt(t2 + m)  # masked lanes evaluate sqrt(θ²+1): finite grads
    a_big = ad.sin(theta) / theta
    b_big = (1.0 - ad.cos(theta)) / (t2 + m)
    a = (1.0 - m) * a_big + m * (1.0 - t2 * (1.0 / 6.0))
    b = (1.0 - m) * b_big + m * (0.5 - t2 * (1.0 / 24.0))
    k = _skew(r)
    eye = Tensor(np.broadcast_to(np.eye(3), (n, 3, 3)).copy())
    rot = eye + ad.reshape(a, (n, 1, 1)) * k + ad.reshape(b, (n, 1, 1)) * ad.matmul(k, k)
    return SE3(rotation=rot, translation=t)


class PoseNet(Module):
    """Concatenated frame pair -> 6-DoF motion, via a small strided conv stack.

    Five stride-2 3x3 convs (16..256 channels), global average pool, one
    linear head, everything scaled by POSE_SCALE.
    """

    CHANNELS = (16, 32, 64, 128, 256)

    def __init__(self, rng):
        c_in = 6
        convs = []
        for c_out in self.CHANNELS:
            convs.append(_ConvUnit(rng, c_in, c_out))
            c_in = c_out
        self.convs = ModuleList(convs)
        self.head_w = fan_in_linear(rng, 6, self.CHANNELS[-1])
        self.head_b = Parameter(np.zeros(6))

    def forward(self, pair: Tensor) -> Pose6DoF:
        if pair.ndim != 4 or pair.shape[1] != 6:
            raise ValueError(f"pose net wants [N,6,H,W], got {pair.shape}")
        x = pair
        for unit in self.convs:
            x = unit(x)
        pooled = ad.mean(x, axis=(2, 3))                  # [N,256]
        out = ad.linear(pooled, self.head_w, self.head_b) * POSE_SCALE
        return Pose6DoF(axis_angle=out[:, 0:3], translation=out[:, 3:6])

    __call__ = forward


class _ConvUnit(Module):
    def __init__(self, rng, c_in, c_out):
        self.w = fan_in_conv(rng, c_out, c_in, 3, 3)
        self.b = Parameter(np.zeros(c_out))

    def __call__(self, x):
        return ad.relu(ad.conv2d(x, self.w, self.b, stride=2, padding=1))
