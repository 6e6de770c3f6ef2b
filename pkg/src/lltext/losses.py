"""Training losses: pixel L1, multi-scale SSIM and the text detection loss.

The text detection loss compares the region score heatmaps a frozen text
detector produces for the enhanced image and for the ground truth, pulling
gradients through the detector into the enhanced image only. All losses are
dtype-generic so they can be cross-checked in float64.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .region import region_score

# Canonical five-scale weights; renormalized because the published constants
# sum to 1.0001.
_RAW_SCALE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
DEFAULT_SCALE_WEIGHTS = tuple(w / sum(_RAW_SCALE_WEIGHTS) for w in _RAW_SCALE_WEIGHTS)


@dataclass
class LossWeights:
    """Weights for the L1, MS-SSIM and text terms of the total loss."""

    w1: float = 0.85
    w2: float = 0.15
    w3: float = 0.425

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


@dataclass
class MsSsimParams:
    scales: int = 5
    scale_weights: tuple = DEFAULT_SCALE_WEIGHTS
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("need at least one scale")
        if len(self.scale_weights) != self.scales:
            raise ValueError(
                f"{self.scales} scales need {self.scales} weights, "
                f"got {len(self.scale_weights)}"
            )
        if abs(sum(self.scale_weights) - 1.0) > 1e-6:
            raise ValueError("scale weights must sum to 1")

    @property
    def c1(self):
        return self.k1 ** 2

    @property
    def c2(self):
        return self.k2 ** 2

    def min_side(self):
        return self.window_size * (1 << (self.scales - 1))

    @classmethod
    def for_scales(cls, scales, **kwargs):
        """Truncate the default weights to ``scales`` and renormalize."""
        if not 1 <= scales <= len(DEFAULT_SCALE_WEIGHTS):
            raise ValueError(f"scales must be in 1..{len(DEFAULT_SCALE_WEIGHTS)}")
        w = DEFAULT_SCALE_WEIGHTS[:scales]
        total = sum(w)
        return cls(scales=scales, scale_weights=tuple(x / total for x in w), **kwargs)


def _check_same_shape(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def l1_loss(pred, target):
    """Mean absolute difference over all pixels and channels."""
    _check_same_shape(pred, target)
    return (pred - target).abs().mean()


def gaussian_window(size, sigma, dtype=torch.float32, device=None):
    """Normalized 2D Gaussian window as a (size, size) tensor."""
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def _ssim_maps(x, y, window, c1, c2):
    """Luminance and contrast-structure maps from Gaussian local statistics."""
    channels = x.shape[1]
    w = window.expand(channels, 1, *window.shape)
    mu_x = F.conv2d(x, w, groups=channels)
    mu_y = F.conv2d(y, w, groups=channels)
    var_x = F.conv2d(x * x, w, groups=channels) - mu_x * mu_x
    var_y = F.conv2d(y * y, w, groups=channels) - mu_y * mu_y
    cov = F.conv2d(x * y, w, groups=channels) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    cs = (2 * cov + c2) / (var_x + var_y + c2)
    return lum, cs


def ms_ssim(pred, target, params=None):
    """Multi-scale structural similarity for (N, C, H, W) batches.

    Contrast-structure terms are averaged at every scale and the luminance
    term joins at the coarsest one; the weighted scale terms multiply into
    the final score. Scales are linked by 2x2 mean-pool downsampling.
    Computed per channel and averaged.
    """
    params = params or MsSsimParams()
    _check_same_shape(pred, target)
    if pred.dim() != 4:
        raise ValueError(f"expected (N, C, H, W) input, got {tuple(pred.shape)}")
    h, w = pred.shape[-2:]
    if min(h, w) // (1 << (params.scales - 1)) < params.window_size:
        raise ValueError(
            f"image {h}x{w} too small for {params.scales} scales: the smaller "
            f"side must be at least {params.min_side()}"
        )
    window = gaussian_window(params.window_size, params.sigma,
                             dtype=pred.dtype, device=pred.device)
    weights = pred.new_tensor(params.scale_weights)
    x, y = pred, target
    terms = []
    for j in range(params.scales):
        lum, cs = _ssim_maps(x, y, window, params.c1, params.c2)
        if j < params.scales - 1:
            terms.append(cs.mean())
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
        else:
            terms.append((lum * cs).mean())
    # negative terms would make fractional powers undefined
    stacked = torch.stack(terms).clamp(min=0.0)
    return torch.prod(stacked ** weights)


def ms_ssim_loss(pred, target, params=None):
    """1 - MS-SSIM."""
    return 1.0 - ms_ssim(pred, target, params)


def ssim(pred, target, window_size=11, sigma=1.5):
    """Single-scale SSIM, i.e. MS-SSIM restricted to one scale."""
    params = MsSsimParams(scales=1, scale_weights=(1.0,),
                          window_size=window_size, sigma=sigma)
    return ms_ssim(pred, target, params)


def text_detection_loss(pred, target, detector):
    """Mean absolute gap between region scores of prediction and target.

    The detector must be frozen; gradients flow through it into ``pred``
    only, never into its own parameters or the target branch.
    """
    _check_same_shape(pred, target)
    score_pred = region_score(pred, detector)
    with torch.no_grad():
        score_target = region_score(target, detector)
    return (score_pred - score_target).abs().mean()


def total_loss(pred, target, detector, weights=None, ms_params=None,
               use_msssim=True, use_text=True):
    """Weighted sum of the three losses, plus a per-term breakdown.

    Disabled terms contribute exactly zero. Returns ``(total, breakdown)``
    where ``total`` is a scalar tensor attached to the graph and
    ``breakdown`` maps term names to plain floats for logging.
    """
    weights = weights or LossWeights()
    zero = pred.new_zeros(())
    term_l1 = l1_loss(pred, target)
    term_ms = ms_ssim_loss(pred, target, ms_params) if use_msssim else zero
    term_text = text_detection_loss(pred, target, detector) if use_text else zero
    total = weights.w1 * term_l1 + weights.w2 * term_ms + weights.w3 * term_text
    breakdown = {
        "l1": term_l1.detach().item(),
        "ms_ssim": term_ms.detach().item(),
        "text": term_text.detach().item(),
    }
    # recombine in float64 so the logged total matches the logged terms
    breakdown["total"] = (weights.w1 * breakdown["l1"]
                          + weights.w2 * breakdown["ms_ssim"]
                          + weights.w3 * breakdown["text"])
    return total, breakdown
