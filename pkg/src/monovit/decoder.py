"""Depth decoder: top-down fusion with attention gates and sigmoid heads.

Level i runs at the resolution of encoder level i.  Each step upsamples the
decoder feature from the level below, concatenates the matching encoder skip
and (when present) the 4x-upsampled decoder feature from two levels below,
then applies a 3x3 conv and an attention block.  One extra half-resolution
step produces the full-resolution feature.  Heads emit disparity at full,
1/2, 1/4 and 1/8 resolution.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .module import Module, ModuleList, Parameter, fan_in_conv, fan_in_linear


class _Conv(Module):
    def __init__(self, rng, c_in, c_out, k=3):
        self.w = fan_in_conv(rng, c_out, c_in, k, k)
        self.b = Parameter(np.zeros(c_out))
        self.pad = k // 2

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=1, padding=self.pad)


class AttenBlock(Module):
    """Channel gate (GAP -> 2-layer MLP -> sigmoid) then spatial gate
    (channel mean -> 7x7 conv -> sigmoid).  Both gates live in (0,1), so the
    block can only attenuate."""

    def __init__(self, rng, c):
        hidden = max(c // 4, 4)
        self.mlp1_w = fan_in_linear(rng, hidden, c)
        self.mlp1_b = Parameter(np.zeros(hidden))
        self.mlp2_w = fan_in_linear(rng, c, hidden)
        self.mlp2_b = Parameter(np.zeros(c))
        self.spatial = _Conv(rng, 1, 1, k=7)

    def __call__(self, x):
        n, c = x.shape[0], x.shape[1]
        pooled = ad.mean(x, axis=(2, 3))                       # [N,C]
        gate_c = ad.sigmoid(ad.linear(
            ad.relu(ad.linear(pooled, self.mlp1_w, self.mlp1_b)),
            self.mlp2_w, self.mlp2_b))
        x = x * ad.reshape(gate_c, (n, c, 1, 1))
        gate_s = ad.sigmoid(self.spatial(ad.mean(x, axis=1, keepdims=True)))
        return x * gate_s


class DispHead(Module):
    """Two 3x3 convs and a sigmoid, per the four finest decoder levels."""

    def __init__(self, rng, c):
        self.conv1 = _Conv(rng, c, c)
        self.conv2 = _Conv(rng, c, 1)

    def __call__(self, x):
        return ad.sigmoid(self.conv2(ad.relu(self.conv1(x))))


class Decoder(Module):
    """FeaturePyramid (5 levels) -> list of 4 disparity maps, finest first."""

    def __init__(self, channels, rng, use_atten=True):
        if len(channels) != 5:
            raise ValueError("decoder mirrors 5 encoder stage channels")
        self.use_atten = use_atten
        ch = list(channels)
        self.top = _Conv(rng, ch[4], ch[4])
        pre, post = [], []
        # level i < 4 consumes: up2(conv(D[i+1])), skip E[i], up4(D[i+2])?
        for i in range(3, -1, -1):
            pre.append(_Conv(rng, ch[i + 1], ch[i]))
            cat_c = ch[i] + ch[i] + (ch[i + 2] if i + 2 <= 4 else 0)
            post.append(_Conv(rng, cat_c, ch[i]))
        # extra half step to full resolution: no skip exists there
        pre.append(_Conv(rng, ch[0], ch[0]))
        post.append(_Conv(rng, ch[0] + ch[1], ch[0]))
        self.pre = ModuleList(pre)
        self.post = ModuleList(post)
        if use_atten:
            self.atten = ModuleList([AttenBlock(rng, ch[4])]
                                    + [AttenBlock(rng, ch[i]) for i in (3, 2, 1, 0)]
                                    + [AttenBlock(rng, ch[0])])
        # heads at full, 1/2, 1/4, 1/8 target resolutions
        self.heads = ModuleList([DispHead(rng, ch[0]), DispHead(rng, ch[0]),
                                 DispHead(rng, ch[1]), DispHead(rng, ch[2])])

    def _gate(self, x, slot):
        return self.atten[slot](x) if self.use_atten else x

    def forward(self, pyramid):
        levels = list(pyramid)
        if len(levels) != 5:
            raise ValueError(f"expected a 5-level pyramid, got {len(levels)}")
        feats = {4: self._gate(ad.relu(self.top(levels[4])), 0)}
        slot = 1
        for step, i in enumerate(range(3, -1, -1)):
            parts = [ad.upsample(self.pre[step](feats[i + 1]), 2, "bilinear"),
                     levels[i]]
            if i + 2 <= 4:
                parts.append(ad.upsample(feats[i + 2], 4, "bilinear"))
            x = ad.concat(parts, axis=1)
            feats[i] = self._gate(ad.relu(self.post[step](x)), slot)
            slot += 1
        full = ad.concat([ad.upsample(self.pre[4](feats[0]), 2, "bilinear"),
                          ad.upsample(feats[1], 4, "bilinear")], axis=1)
        feats[-1] = self._gate(ad.relu(self.post[4](full)), slot)
        return [self.heads[0](feats[-1]), self.heads[1](feats[0]),
                self.heads[2](feats[1]), self.heads[3](feats[2])]

    __call__ = forward
