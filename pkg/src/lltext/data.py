"""Dataset ingestion, synthetic darkening and paired augmentation.

Synthetic low-light pairs are built by darkening bright images with a
gamma-linearized exposure scale, Gaussian read noise and 8-bit
requantization, which mimics short-exposure capture closely enough for
training. Every darkening parameter lands in the manifest so the set can be
regenerated bit for bit.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import (PairedSample, TextBox, load_image, parse_annotations,
                     quad_area, save_image, write_annotations)

log = logging.getLogger(__name__)

DEFAULT_SCALE_RANGE = (1.0 / 100.0, 1.0 / 30.0)


@dataclass
class DarkenParams:
    scale: float
    sigma: float = 0.01
    gamma: float = 2.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.scale <= 1.0:
            raise ValueError(f"exposure scale must be in (0, 1], got {self.scale}")
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


def darken(image, params):
    """Darken a [0, 1] image as a short exposure would.

    Linearize with the gamma curve, scale the exposure, add seeded Gaussian
    read noise, re-apply the display gamma and requantize to 8-bit levels.
    Deterministic for a fixed seed.
    """
    img = np.asarray(image, dtype=np.float32)
    linear = np.power(img, params.gamma) * params.scale
    if params.sigma > 0:
        rng = np.random.default_rng(params.seed)
        linear = linear + rng.normal(0.0, params.sigma, img.shape).astype(np.float32)
    linear = np.clip(linear, 0.0, 1.0)
    out = np.power(linear, 1.0 / params.gamma)
    return np.clip(np.rint(out * 255.0) / 255.0, 0.0, 1.0).astype(np.float32)


@dataclass
class ManifestEntry:
    id: str
    low: str
    gt: str
    ann: str = None
    split: str = "train"
    source: str = "real"
    darken: dict = None


@dataclass
class DatasetManifest:
    """Paths to paired samples; relative paths resolve against ``root``."""

    entries: list = field(default_factory=list)
    root: Path = Path(".")

    def resolve(self, rel):
        path = Path(rel)
        return path if path.is_absolute() else self.root / path

    def validate(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ValueError(f"duplicate sample id {e.id!r} in manifest")
            seen.add(e.id)
            for kind in ("low", "gt", "ann"):
                rel = getattr(e, kind)
                if rel is not None and not self.resolve(rel).exists():
                    raise IOError(
                        f"manifest entry {e.id!r}: missing {kind} file {rel}")
        return self

    def for_split(self, split):
        return [e for e in self.entries if e.split == split]

    def save(self, path):
        payload = {
            "version": 1,
            "entries": [
                {k: v for k, v in vars(e).items() if v is not None}
                for e in self.entries
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        entries = [ManifestEntry(**e) for e in payload["entries"]]
        return cls(entries=entries, root=path.parent).validate()


class SampleRef:
    """Lazily loadable paired sample; image files are read on demand."""

    def __init__(self, manifest, entry):
        self._manifest = manifest
        self.entry = entry

    @property
    def id(self):
        return self.entry.id

    @property
    def source(self):
        return self.entry.source

    def load(self):
        low = load_image(self._manifest.resolve(self.entry.low))
        gt = load_image(self._manifest.resolve(self.entry.gt))
        boxes = []
        if self.entry.ann is not None:
            h, w = gt.shape[:2]
            boxes = parse_annotations(self._manifest.resolve(self.entry.ann), w, h)
        return PairedSample(low=low, gt=gt, boxes=boxes, id=self.entry.id,
                            source=self.entry.source)


def load_dataset(manifest, split):
    """The lazily loadable samples of one manifest split."""
    return [SampleRef(manifest, e) for e in manifest.for_split(split)]


def _clip_boxes(boxes, dx, dy, size):
    out = []
    for box in boxes:
        quad = box.quad.copy()
        quad[:, 0] -= dx
        quad[:, 1] -= dy
        quad = np.clip(quad, 0.0, float(size))
        if quad_area(quad) > 1e-3:
            out.append(TextBox(quad=quad, transcription=box.transcription))
    return out


def random_crop_pair(sample, size=512, rng=None):
    """Crop the same random window from both images of a pair.

    Images smaller than the crop are reflect-padded (bottom/right) up to
    size first, with a warning. Boxes are shifted into crop coordinates,
    clipped, and dropped once fully outside.
    """
    rng = rng if rng is not None else np.random.default_rng()
    low, gt = sample.low, sample.gt
    h, w = low.shape[:2]
    if h < size or w < size:
        log.warning("sample %s (%dx%d) smaller than crop %d, reflect-padding",
                    sample.id, h, w, size)
        pad_h, pad_w = max(0, size - h), max(0, size - w)
        pads = ((0, pad_h), (0, pad_w), (0, 0))
        low = np.pad(low, pads, mode="reflect")
        gt = np.pad(gt, pads, mode="reflect")
        h, w = low.shape[:2]
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    return PairedSample(
        low=np.ascontiguousarray(low[y0:y0 + size, x0:x0 + size]),
        gt=np.ascontiguousarray(gt[y0:y0 + size, x0:x0 + size]),
        boxes=_clip_boxes(sample.boxes, x0, y0, size),
        id=sample.id,
        source=sample.source,
    )


def _flip_boxes_h(boxes, width):
    return [TextBox(quad=np.stack([width - b.quad[::-1, 0], b.quad[::-1, 1]], 1),
                    transcription=b.transcription) for b in boxes]


def _flip_boxes_v(boxes, height):
    return [TextBox(quad=np.stack([b.quad[::-1, 0], height - b.quad[::-1, 1]], 1),
                    transcription=b.transcription) for b in boxes]


def _rot90_boxes(boxes, side):
    # one counter-clockwise quarter turn: (x, y) -> (y, side - x)
    return [TextBox(quad=np.stack([b.quad[:, 1], side - b.quad[:, 0]], 1),
                    transcription=b.transcription) for b in boxes]


def augment_pair(sample, rng=None):
    """Apply the same random flips and quarter-turn rotation to a pair.

    Horizontal flip, vertical flip and rotation each trigger with
    independent 50% probability; the rotation angle is a uniformly chosen
    multiple of 90 degrees and requires a square input.
    """
    rng = rng if rng is not None else np.random.default_rng()
    low, gt, boxes = sample.low, sample.gt, list(sample.boxes)
    h, w = low.shape[:2]
    if rng.random() < 0.5:
        low, gt = low[:, ::-1], gt[:, ::-1]
        boxes = _flip_boxes_h(boxes, w)
    if rng.random() < 0.5:
        low, gt = low[::-1], gt[::-1]
        boxes = _flip_boxes_v(boxes, h)
    if rng.random() < 0.5:
        k = int(rng.integers(0, 4))
        if k % 2 and h != w:
            raise ValueError(f"square input required for rotation, got {h}x{w}")
        for _ in range(k):
            side = low.shape[1]
            low, gt = np.rot90(low), np.rot90(gt)
            boxes = _rot90_boxes(boxes, side)
    return PairedSample(low=np.ascontiguousarray(low),
                        gt=np.ascontiguousarray(gt),
                        boxes=boxes, id=sample.id, source=sample.source)


def _find_annotation(ann_dir, stem):
    for name in (f"{stem}.txt", f"gt_{stem}.txt"):
        candidate = ann_dir / name
        if candidate.exists():
            return candidate
    return None


def build_synthetic_dataset(in_dir, out_dir, ann_dir=None,
                            scale_range=DEFAULT_SCALE_RANGE, sigma=0.01,
                            gamma=2.2, seed=0, split="train"):
    """Darken a directory of bright images into a paired synthetic set.

    Writes darkened PNGs and copied annotations under ``out_dir`` alongside
    a manifest whose entries record the exact darkening parameters used.
    Returns the manifest path.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    ann_dir = Path(ann_dir) if ann_dir else None
    low_dir = out_dir / "low"
    gt_dir = out_dir / "gt"
    copied_ann_dir = out_dir / "ann"
    for d in (low_dir, gt_dir, copied_ann_dir):
        d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    images = sorted(p for p in in_dir.iterdir()
                    if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    for path in images:
        img = load_image(path)
        params = DarkenParams(
            scale=float(rng.uniform(*scale_range)),
            sigma=sigma,
            gamma=gamma,
            seed=int(rng.integers(0, 2 ** 31)),
        )
        low = darken(img, params)
        stem = path.stem
        save_image(low, low_dir / f"{stem}.png")
        save_image(img, gt_dir / f"{stem}.png")
        ann_rel = None
        if ann_dir is not None:
            src_ann = _find_annotation(ann_dir, stem)
            if src_ann is not None:
                dst = copied_ann_dir / f"{stem}.txt"
                dst.write_text(src_ann.read_text(encoding="utf-8-sig"),
                               encoding="utf-8")
                ann_rel = str(Path("ann") / f"{stem}.txt")
        entries.append(ManifestEntry(
            id=stem,
            low=str(Path("low") / f"{stem}.png"),
            gt=str(Path("gt") / f"{stem}.png"),
            ann=ann_rel,
            split=split,
            source="synthetic",
            darken=vars(params).copy(),
        ))
    manifest = DatasetManifest(entries=entries, root=out_dir)
    manifest_path = out_dir / "manifest.json"
    manifest.save(manifest_path)
    log.info("darkened %d images into %s", len(entries), out_dir)
    return manifest_path
