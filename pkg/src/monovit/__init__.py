"""Self-supervised monocular depth on synthetic triplets.

Everything runs on a from-scratch numpy autodiff core: a joint
CNN/transformer depth encoder, an attention-gated decoder, a 6-DoF pose
network, differentiable view reconstruction losses, and an AdamW trainer,
plus the ray-cast dataset generator they are verified against.
"""

__version__ = "0.1.0"

from . import autodiff

Tensor = autodiff.Tensor
