"""Region score providers and character heatmap utilities.

A region score provider maps an RGB batch to a half-resolution heatmap of
character-center probability. Three kinds are supported: an analytic stub
(mean-pooled luma) for loss unit tests, a small trainable-then-frozen
convolutional scorer for desk-scale end-to-end runs, and scorer weights
loaded from a checkpoint file for externally supplied detectors. Any
callable with the same signature plugs in.
"""

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .attention import luma
from .container import load_arrays, save_arrays
from .domain import TextBox, to_nchw

log = logging.getLogger(__name__)


def region_score(images, provider):
    """Run a provider, enforcing the half-resolution output contract."""
    h, w = images.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"even image dimensions required, got {h}x{w}")
    out = provider(images)
    expected = (images.shape[0], 1, h // 2, w // 2)
    if tuple(out.shape) != expected:
        raise ValueError(
            f"provider returned shape {tuple(out.shape)}, expected {expected}"
        )
    return out


class PooledLumaProvider:
    """Analytic stub: the region score is the 2x2 mean-pooled luma."""

    def __call__(self, images):
        return F.avg_pool2d(luma(images), 2)


class ConvRegionScorer(nn.Module):
    """Small convolutional heatmap net predicting at half resolution."""

    def __init__(self, width=24, slope=0.2):
        super().__init__()
        self.width = width
        self.slope = slope
        self.conv1 = nn.Conv2d(3, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.head = nn.Conv2d(2 * width, 1, 1)

    def logits(self, x):
        x = F.leaky_relu(self.conv1(x), self.slope)
        x = F.leaky_relu(self.conv2(x), self.slope)
        x = F.leaky_relu(self.conv3(x), self.slope)
        return self.head(x)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))

    def freeze(self):
        self.requires_grad_(False)
        self.eval()
        return self


def build_region_scorer(seed=0, width=24, frozen=True):
    torch.manual_seed(seed)
    net = ConvRegionScorer(width=width)
    return net.freeze() if frozen else net


def save_region_scorer(net, path):
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    save_arrays(path, arrays, {"kind": "region_scorer", "width": net.width,
                               "slope": net.slope})


def load_region_scorer(path):
    """Load region scorer weights from a checkpoint file, frozen."""
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "region_scorer":
        raise ValueError(f"not a region scorer checkpoint: {path}")
    net = ConvRegionScorer(width=int(meta["width"]), slope=float(meta["slope"]))
    net.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return net.freeze()


def _unit_square_homography(quad):
    """3x3 matrix mapping unit-square corners to the quad's vertices."""
    src = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((u, v), (x, y)) in enumerate(zip(src, quad)):
        a[2 * i] = [u, v, 1, 0, 0, 0, -u * x, -v * x]
        a[2 * i + 1] = [0, 0, 0, u, v, 1, -u * y, -v * y]
        b[2 * i] = x
        b[2 * i + 1] = y
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def synth_region_target(boxes, width, height, sigma=0.25):
    """Render the ideal region score map for a set of text boxes.

    Each care box gets an anisotropic Gaussian warped onto its quad, peaking
    at 1 in the quad center and cut off at the quad edges; overlapping boxes
    composite by per-pixel max. Rendered at half resolution: output pixel
    (r, c) samples full-resolution point (2c + 1, 2r + 1), the center of its
    2x2 block.
    """
    h2, w2 = height // 2, width // 2
    out = np.zeros((h2, w2), dtype=np.float32)
    cols = 2.0 * np.arange(w2) + 1.0
    rows = 2.0 * np.arange(h2) + 1.0
    for box in boxes:
        if not box.care:
            continue
        quad = np.asarray(box.quad, dtype=np.float64)
        try:
            hom = _unit_square_homography(quad)
            inv = np.linalg.inv(hom)
        except np.linalg.LinAlgError:
            log.debug("skipping degenerate quad %s", quad.tolist())
            continue
        c0 = max(0, int((quad[:, 0].min() - 1) // 2))
        c1 = min(w2, int(quad[:, 0].max() // 2) + 1)
        r0 = max(0, int((quad[:, 1].min() - 1) // 2))
        r1 = min(h2, int(quad[:, 1].max() // 2) + 1)
        if c0 >= c1 or r0 >= r1:
            continue
        xs, ys = np.meshgrid(cols[c0:c1], rows[r0:r1])
        pts = np.stack([xs, ys, np.ones_like(xs)], axis=0).reshape(3, -1)
        mapped = inv @ pts
        u = mapped[0] / mapped[2]
        v = mapped[1] / mapped[2]
        inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
        g = np.exp(-((u - 0.5) ** 2 + (v - 0.5) ** 2) / (2.0 * sigma ** 2))
        patch = (g * inside).reshape(xs.shape).astype(np.float32)
        region = out[r0:r1, c0:c1]
        np.maximum(region, patch, out=region)
    return out


def train_region_scorer(samples, steps=400, lr=2e-3, seed=0, width=24,
                        sigma=0.25, dark_negatives=False, pos_weight=8.0):
    """Fit a scorer to synthetic heatmap targets of the bright images.

    Trains on the ground-truth images against their rendered box heatmaps
    and freezes the net so it can serve as a loss provider. Optimizes
    cross-entropy on the pre-sigmoid logits with up-weighted character
    pixels; a plain pixel loss collapses into the all-background minimum
    because the blobs cover so little area.

    With ``dark_negatives`` the low-light frames train toward the empty
    heatmap, the target of a frame whose text is unreadable. That mirrors
    how a full-scale detector behaves on dark inputs and makes the frozen
    scorer sensitive to restoration quality rather than to box geometry
    alone.
    """
    if not samples:
        raise ValueError("need at least one sample with boxes")
    net = build_region_scorer(seed=seed, width=width, frozen=False)
    images, targets = [], []
    for s in samples:
        h, w = s.gt.shape[:2]
        target = torch.from_numpy(synth_region_target(s.boxes, w, h, sigma))
        images.append(to_nchw(s.gt))
        targets.append(target[None, None])
        if dark_negatives:
            images.append(to_nchw(s.low))
            targets.append(torch.zeros_like(targets[-1]))
    x = torch.cat(images)
    t = torch.cat(targets)
    weight = torch.tensor(pos_weight)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    history = []
    for _ in range(steps):
        loss = F.binary_cross_entropy_with_logits(net.logits(x), t,
                                                  pos_weight=weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.detach().item())
    return net.freeze(), history


def extract_boxes(score_map, region_threshold=0.7, link_threshold=0.4,
                  min_pixels=2):
    """Threshold a half-resolution score map into full-resolution boxes.

    Pixels above ``link_threshold`` are grouped into connected components;
    components whose peak reaches ``region_threshold`` become axis-aligned
    boxes scaled back to image coordinates.
    """
    score = np.asarray(score_map.detach().cpu().numpy()
                       if isinstance(score_map, torch.Tensor) else score_map,
                       dtype=np.float32)
    score = score.reshape(score.shape[-2], score.shape[-1])
    labels, count = ndimage.label(score >= link_threshold)
    boxes = []
    for idx in range(1, count + 1):
        mask = labels == idx
        if mask.sum() < min_pixels or score[mask].max() < region_threshold:
            continue
        rows, cols = np.where(mask)
        x0, x1 = 2.0 * cols.min(), 2.0 * (cols.max() + 1)
        y0, y1 = 2.0 * rows.min(), 2.0 * (rows.max() + 1)
        boxes.append(TextBox(
            quad=[[x0, y0], [x1, y0], [x1, y1], [x0, y1]], transcription=""))
    return boxes
