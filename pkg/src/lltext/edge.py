"""Edge maps for the enhancer.

Predicting edges directly on a dark frame gives mush, so a small trainable
network learns to predict bright-image edges from the low-light input. Its
training targets come from a deterministic teacher run on the ground-truth
exposure: Sobel gradient magnitude by default, or any plugged-in callable
with the same image-in, edge-map-out signature.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import luma
from .container import load_arrays, save_arrays
from .domain import to_nchw
from .enhancer import ConvBlock

# Largest per-axis Sobel response on a [0, 1] image is 4, so the magnitude
# is bounded by 4*sqrt(2).
_SOBEL_PEAK = 4.0 * math.sqrt(2.0)


def teacher_edges(images):
    """Sobel gradient magnitude of luma, scaled into [0, 1].

    Uses replicate padding so constant images produce exactly zero response
    at the borders too.
    """
    y = luma(images)
    kx = y.new_tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    ky = kx.t()
    padded = F.pad(y, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, kx.view(1, 1, 3, 3))
    gy = F.conv2d(padded, ky.view(1, 1, 3, 3))
    mag = torch.sqrt(gx * gx + gy * gy) / _SOBEL_PEAK
    return mag.clamp(0.0, 1.0)


class EdgeEstimator(nn.Module):
    """Small U-Net (3 down / 3 up) mapping an RGB image to an edge map.

    The final sigmoid bounds the output to [0, 1] for any finite weights.
    """

    def __init__(self, base_width=16, slope=0.2):
        super().__init__()
        widths = (base_width, 2 * base_width, 4 * base_width)
        self.base_width = base_width
        self.slope = slope
        self.encoder = nn.ModuleList()
        prev = 3
        for w in widths:
            self.encoder.append(ConvBlock(prev, w, slope))
            prev = w
        self.bottleneck = ConvBlock(widths[-1], 8 * base_width, slope)
        self.upsamplers = nn.ModuleList()
        self.decoder = nn.ModuleList()
        prev = 8 * base_width
        for w in reversed(widths):
            self.upsamplers.insert(0, nn.ConvTranspose2d(prev, w, 2, stride=2))
            self.decoder.insert(0, ConvBlock(2 * w, w, slope))
            prev = w
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        div = 1 << len(self.encoder)
        if h % div or w % div:
            raise ValueError(f"input size {h}x{w} is not divisible by {div}")
        feats = []
        out = x
        for i, block in enumerate(self.encoder):
            if i:
                out = F.max_pool2d(out, 2)
            out = block(out)
            feats.append(out)
        out = self.bottleneck(F.max_pool2d(out, 2))
        for i in reversed(range(len(self.encoder))):
            out = self.upsamplers[i](out)
            out = self.decoder[i](torch.cat([out, feats[i]], dim=1))
        return torch.sigmoid(self.head(out))


def build_edge_estimator(seed=0, base_width=16, slope=0.2):
    torch.manual_seed(seed)
    return EdgeEstimator(base_width=base_width, slope=slope)


def estimate_edges(images, net):
    with torch.no_grad():
        return net(images)


def train_edge_estimator(samples, steps=500, lr=1e-3, seed=0, base_width=16,
                         teacher=teacher_edges):
    """Fit an edge estimator to teacher edges of the bright images.

    The estimator sees the low-light input and regresses (mean absolute
    error) onto the teacher's output for the paired ground truth, so it
    learns bright-scene edges from dark frames. Returns the trained net and
    the per-step loss history.
    """
    if not samples:
        raise ValueError("need at least one paired sample")
    net = build_edge_estimator(seed=seed, base_width=base_width)
    pairs = []
    for s in samples:
        low = to_nchw(s.low)
        with torch.no_grad():
            target = teacher(to_nchw(s.gt))
        pairs.append((low, target))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    history = []
    for step in range(steps):
        low, target = pairs[step % len(pairs)]
        loss = (net(low) - target).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.detach().item())
    net.eval()
    return net, history


def save_edge_estimator(net, path):
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    meta = {"kind": "edge_estimator", "base_width": net.base_width, "slope": net.slope}
    save_arrays(path, arrays, meta)


def load_edge_estimator(path):
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "edge_estimator":
        raise ValueError(f"not an edge estimator checkpoint: {path}")
    net = EdgeEstimator(base_width=int(meta["base_width"]), slope=float(meta["slope"]))
    net.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    net.eval()
    return net
