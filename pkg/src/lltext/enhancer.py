"""The image enhancement generator.

A U-shaped network of nine convolutional blocks: four encoder blocks, one
bottleneck and four decoder blocks, topped by a 1x1 projection back to RGB.
It consumes the 4-channel concatenation of the low-light image and its edge
map. Encoder features are multiplied by the attention pyramid at matching
scales before being concatenated into the decoder as skip connections.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_WIDTHS = (32, 64, 128, 256)
DEFAULT_BOTTLENECK = 512


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by a leaky rectifier."""

    def __init__(self, cin, cout, slope=0.2):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.slope = slope

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), self.slope)
        return F.leaky_relu(self.conv2(x), self.slope)


class Enhancer(nn.Module):
    def __init__(self, in_channels=4, widths=DEFAULT_WIDTHS,
                 bottleneck=DEFAULT_BOTTLENECK, slope=0.2):
        super().__init__()
        widths = tuple(widths)
        self.widths = widths
        self.slope = slope
        self.encoder = nn.ModuleList()
        prev = in_channels
        for w in widths:
            self.encoder.append(ConvBlock(prev, w, slope))
            prev = w
        self.bottleneck = ConvBlock(widths[-1], bottleneck, slope)
        self.upsamplers = nn.ModuleList()
        self.decoder = nn.ModuleList()
        prev = bottleneck
        for w in reversed(widths):
            self.upsamplers.insert(0, nn.ConvTranspose2d(prev, w, 2, stride=2))
            self.decoder.insert(0, ConvBlock(2 * w, w, slope))
            prev = w
        self.head = nn.Conv2d(widths[0], 3, 1)

    @property
    def depth(self):
        return len(self.encoder)

    def forward(self, x, attention=None):
        """Forward pass; output is unclamped.

        ``attention`` is an AttentionMap whose base gates the full-resolution
        skip and whose pyramid gates the deeper ones; None disables gating.
        """
        h, w = x.shape[-2:]
        div = 1 << self.depth
        if h % div or w % div:
            raise ValueError(f"input size {h}x{w} is not divisible by {div}")
        gates = None
        if attention is not None:
            if len(attention.pyramid) < self.depth - 1:
                raise ValueError(
                    f"attention pyramid has {len(attention.pyramid)} levels, "
                    f"need at least {self.depth - 1}"
                )
            gates = [attention.base, *attention.pyramid[: self.depth - 1]]
        feats = []
        out = x
        for i, block in enumerate(self.encoder):
            if i:
                out = F.max_pool2d(out, 2)
            out = block(out)
            feats.append(out)
        out = self.bottleneck(F.max_pool2d(out, 2))
        for i in reversed(range(self.depth)):
            out = self.upsamplers[i](out)
            skip = feats[i]
            if gates is not None:
                skip = skip * gates[i]
            out = self.decoder[i](torch.cat([out, skip], dim=1))
        return self.head(out)


def build_enhancer(seed=0, **kwargs):
    """Construct a seeded Enhancer; default init is fan-in-scaled uniform."""
    torch.manual_seed(seed)
    return Enhancer(**kwargs)


def enhance(low, edges, attention, net, clamp=True):
    """Run the generator on a low-light batch with its edge map.

    ``low`` is (N, 3, H, W), ``edges`` (N, 1, H, W), both in [0, 1] with
    spatial size divisible by 16. The output is clamped for evaluation and
    left unclamped during training so gradients survive.
    """
    if low.dim() != 4 or low.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) low image, got {tuple(low.shape)}")
    if edges.dim() != 4 or edges.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W) edge map, got {tuple(edges.shape)}")
    if low.shape[-2:] != edges.shape[-2:] or low.shape[0] != edges.shape[0]:
        raise ValueError(
            f"low/edge shape mismatch: {tuple(low.shape)} vs {tuple(edges.shape)}"
        )
    out = net(torch.cat([low, edges], dim=1), attention)
    return out.clamp(0.0, 1.0) if clamp else out


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())
