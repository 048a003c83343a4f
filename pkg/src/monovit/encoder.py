"""Depth encoder: conv stem and four stages of joint CNN/transformer blocks.

Each stage embeds the previous feature map four times in parallel (stacked
3x3 convs with receptive fields 3, 3, 5, 7, all stride-2 at the first conv),
runs one embedding through a local conv branch and three through factorized
transformer paths, then fuses everything with a 1x1 conv.  Branch counts are
configurable down to a pure-CNN block for the ablation studies.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .module import (Module, ModuleList, Parameter, fan_in_conv,
                     fan_in_linear, ones_param, zeros_param)


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple = (32, 48, 64, 96, 128)
    transformer_layers: tuple = (1, 1, 1, 1)   # paper setting: (1, 3, 6, 3)
    num_transformer_paths: int = 3
    use_conv_path: bool = True
    attention_heads: int = 2
    input_size: tuple = (64, 64)

    def __post_init__(self):
        if len(self.stage_channels) != 5:
            raise ValueError("stage_channels must list 5 stages")
        if len(self.transformer_layers) != 4:
            raise ValueError("transformer_layers must list 4 stages")
        if not 0 <= self.num_transformer_paths <= 3:
            raise ValueError("num_transformer_paths must be in 0..3")
        if not (self.use_conv_path or self.num_transformer_paths):
            raise ValueError("block needs at least one path")
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError(f"input size must be divisible by 32, got {h}x{w}")
        if self.attention_heads < 1:
            raise ValueError("attention_heads must be >= 1")
        for c in self.stage_channels[1:]:
            if c % self.attention_heads:
                raise ValueError(f"channels {c} not divisible by "
                                 f"{self.attention_heads} heads")


@dataclass
class FeaturePyramid:
    """Five maps at 1/2 .. 1/32 resolution, channel widths per config."""

    levels: list

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


class Conv3x3(Module):
    def __init__(self, rng, c_in, c_out, stride=1, groups=1):
        self.w = fan_in_conv(rng, c_out, c_in // groups, 3, 3)
        self.b = Parameter(np.zeros(c_out))
        self.stride = stride
        self.groups = groups

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=1,
                         groups=self.groups)


class Conv1x1(Module):
    def __init__(self, rng, c_in, c_out):
        self.w = fan_in_conv(rng, c_out, c_in, 1, 1)
        self.b = Parameter(np.zeros(c_out))

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=1, padding=0)


class ConvStem(Module):
    """Two 3x3 convs, stride 2 then 1, relu after each: 3 -> C at half size."""

    def __init__(self, rng, c_out):
        self.conv1 = Conv3x3(rng, 3, c_out, stride=2)
        self.conv2 = Conv3x3(rng, c_out, c_out, stride=1)

    def __call__(self, x):
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(f"stem input must be divisible by 32, got {x.shape}")
        return ad.relu(self.conv2(ad.relu(self.conv1(x))))


class PatchEmbed(Module):
    """Stack of `depth` 3x3 convs (stride 2 on the first), relu between."""

    def __init__(self, rng, c_in, c_out, depth, stride=2):
        convs = [Conv3x3(rng, c_in, c_out, stride=stride)]
        convs += [Conv3x3(rng, c_out, c_out) for _ in range(depth - 1)]
        self.convs = ModuleList(convs)

    def __call__(self, x):
        out = None
        for conv in self.convs:
            out = conv(x if out is None else ad.relu(out))
        return out


class ConvBranch(Module):
    """Local path: 1x1 -> relu -> 3x3 depthwise -> relu -> 1x1, plus residual."""

    def __init__(self, rng, c):
        self.pw1 = Conv1x1(rng, c, c)
        self.dw = Conv3x3(rng, c, c, groups=c)
        self.pw2 = Conv1x1(rng, c, c)

    def __call__(self, x):
        y = self.pw2(ad.relu(self.dw(ad.relu(self.pw1(x)))))
        return x + y


def factorized_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """(Q/sqrt(Ch)) · (softmax_over_tokens(K)^T · V) for [N,heads,L,Ch].

    Linear in token count: the K^T·V context matrix is [Ch,Ch] per head.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ValueError(
            f"attention wants matching [N,h,L,Ch], got {q.shape}/{k.shape}/{v.shape}")
    ch = q.shape[3]
    k_sm = ad.softmax(k, axis=2)                     # normalize over tokens
    context = ad.matmul(ad.permute(k_sm, (0, 1, 3, 2)), v)   # [N,h,Ch,Ch]
    return ad.matmul(q * (1.0 / np.sqrt(ch)), context)


class TransformerLayer(Module):
    """Pre-norm block: x + MHSA(LN(x)), then + FFN(LN(·)); FFN expands 4x."""

    def __init__(self, rng, c, heads):
        self.heads = heads
        self.ln1_g, self.ln1_b = ones_param(c), zeros_param(c)
        self.ln2_g, self.ln2_b = ones_param(c), zeros_param(c)
        self.wq = fan_in_linear(rng, c, c)
        self.wk = fan_in_linear(rng, c, c)
        self.wv = fan_in_linear(rng, c, c)
        self.wo = fan_in_linear(rng, c, c)
        self.bo = Parameter(np.zeros(c))
        self.ff1_w = fan_in_linear(rng, 4 * c, c)
        self.ff1_b = Parameter(np.zeros(4 * c))
        self.ff2_w = fan_in_linear(rng, c, 4 * c)
        self.ff2_b = Parameter(np.zeros(c))

    def _mhsa(self, x):
        n, l, c = x.shape
        h, ch = self.heads, c // self.heads

        def split(t):  # [N,L,C] -> [N,h,L,Ch]
            return ad.permute(ad.reshape(t, (n, l, h, ch)), (0, 2, 1, 3))

        q = split(ad.linear(x, self.wq))
        k = split(ad.linear(x, self.wk))
        v = split(ad.linear(x, self.wv))
        out = factorized_attention(q, k, v)
        merged = ad.reshape(ad.permute(out, (0, 2, 1, 3)), (n, l, c))
        return ad.linear(merged, self.wo, self.bo)

    def __call__(self, x):
        x = x + self._mhsa(ad.layernorm(x, -1, self.ln1_g, self.ln1_b))
        hidden = ad.gelu(ad.linear(ad.layernorm(x, -1, self.ln2_g, self.ln2_b),
                                   self.ff1_w, self.ff1_b))
        return x + ad.linear(hidden, self.ff2_w, self.ff2_b)


class TransformerPath(Module):
    """Flatten row-major to tokens, run M layers, restore the spatial map."""

    def __init__(self, rng, c, heads, m):
        self.layers = ModuleList([TransformerLayer(rng, c, heads)
                                  for _ in range(m)])

    def __call__(self, x):
        n, c, h, w = x.shape
        tokens = ad.reshape(ad.permute(x, (0, 2, 3, 1)), (n, h * w, c))
        for layer in self.layers:
            tokens = layer(tokens)
        return ad.permute(ad.reshape(tokens, (n, h, w, c)), (0, 3, 1, 2))


class JointBlock(Module):
    """One encoder stage: parallel embeds -> conv/transformer paths -> fuse."""

    # stacked-conv depths giving receptive fields 3, 3, 5, 7
    EMBED_DEPTHS = (1, 1, 2, 3)

    def __init__(self, rng, c_in, c_out, heads, m, n_paths, use_conv):
        self.use_conv = use_conv
        self.n_paths = n_paths
        embeds = []
        if use_conv:
            embeds.append(PatchEmbed(rng, c_in, c_out, self.EMBED_DEPTHS[0]))
            self.conv_branch = ConvBranch(rng, c_out)
        for i in range(n_paths):
            embeds.append(PatchEmbed(rng, c_in, c_out, self.EMBED_DEPTHS[1 + i]))
        self.embeds = ModuleList(embeds)
        if n_paths:
            self.paths = ModuleList([TransformerPath(rng, c_out, heads, m)
                                     for _ in range(n_paths)])
        self.fuse = Conv1x1(rng, c_out * len(embeds), c_out)

    def __call__(self, x):
        outs = []
        idx = 0
        if self.use_conv:
            outs.append(self.conv_branch(self.embeds[idx](x)))
            idx += 1
        for i in range(self.n_paths):
            outs.append(self.paths[i](self.embeds[idx + i](x)))
        fused = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
        return self.fuse(fused)


class Encoder(Module):
    """Image [N,3,H,W] -> FeaturePyramid of five levels."""

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        ch = cfg.stage_channels
        self.stem = ConvStem(rng, ch[0])
        self.stages = ModuleList([
            JointBlock(rng, ch[i], ch[i + 1], cfg.attention_heads,
                       cfg.transformer_layers[i], cfg.num_transformer_paths,
                       cfg.use_conv_path)
            for i in range(4)
        ])

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"encoder wants [N,3,H,W], got {image.shape}")
        levels = [self.stem(image)]
        for stage in self.stages:
            levels.append(stage(levels[-1]))
        return FeaturePyramid(levels)

    __call__ = forward
