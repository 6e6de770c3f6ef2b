"""Self-regularized attention maps emphasizing the dark regions of an image.

The attention map is one minus the luma of the input, so pitch-black pixels
receive full attention and bright pixels none. A max-pooled pyramid of the
map gates the enhancer's skip connections at matching scales.
"""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

# ITU-R BT.601 luma coefficients
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def luma(images):
    """Per-pixel luma of an (N, 3, H, W) batch as (N, 1, H, W)."""
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) input, got {tuple(images.shape)}")
    w = images.new_tensor(LUMA_WEIGHTS).view(1, 3, 1, 1)
    return (images * w).sum(dim=1, keepdim=True)


@dataclass
class AttentionMap:
    """Base map plus its max-pooled pyramid, level k at 1/2^(k+1) scale."""

    base: torch.Tensor
    pyramid: list = field(default_factory=list)


def compute_attention(images):
    """Attention map 1 - Y for a batch of [0, 1] images; no pyramid yet."""
    return AttentionMap(base=1.0 - luma(images))


def build_pyramid(attn, levels=4):
    """Attach ``levels`` of 2x2 stride-2 max pooling to an attention map."""
    base = attn.base
    h, w = base.shape[-2:]
    div = 1 << levels
    if h % div or w % div:
        raise ValueError(
            f"map size {h}x{w} is not divisible by {div} for {levels} pyramid levels"
        )
    pyramid = []
    cur = base
    for _ in range(levels):
        cur = F.max_pool2d(cur, kernel_size=2, stride=2)
        pyramid.append(cur)
    return AttentionMap(base=base, pyramid=pyramid)
