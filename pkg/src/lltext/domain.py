"""Core image and annotation types shared by every other module.

Images live in memory as float32 HxWx3 arrays with values in [0, 1],
whatever their on-disk bit depth. Annotations follow the one-box-per-line
quad convention: eight comma-separated coordinates followed by the
transcription, with "###" marking unreadable (don't-care) text.
"""

import logging
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch

log = logging.getLogger(__name__)

DONT_CARE = "###"


class AnnotationError(ValueError):
    """Raised for malformed annotation lines; message names the line."""


def load_image(path):
    """Load an 8- or 16-bit RGB raster (PNG/JPEG) as float32 HxWx3 in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"cannot read image: {path}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {raw.shape}: {path}")
    if raw.dtype == np.uint8:
        peak = 255.0
    elif raw.dtype == np.uint16:
        peak = 65535.0
    else:
        raise ValueError(f"unsupported sample type {raw.dtype}: {path}")
    # cv2 loads BGR
    return np.ascontiguousarray(raw[:, :, ::-1].astype(np.float32) / peak)


def save_image(image, path):
    """Clamp to [0, 1], quantize to 8 bits and write as PNG."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    quantized = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), quantized[:, :, ::-1]):
        raise IOError(f"cannot write image: {path}")


def to_nchw(image):
    """HxWx3 float array -> (1, 3, H, W) float32 tensor."""
    arr = np.asarray(image, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def to_hwc(tensor):
    """(1, C, H, W) or (C, H, W) tensor -> HxWxC float32 array."""
    t = tensor.detach()
    if t.dim() == 4:
        t = t[0]
    return np.ascontiguousarray(t.permute(1, 2, 0).cpu().numpy().astype(np.float32))


def quad_area(quad):
    """Shoelace area of a (4, 2) vertex array."""
    x, y = quad[:, 0], quad[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(eq=False)
class TextBox:
    """Quadrilateral text annotation.

    ``quad`` is a (4, 2) array of (x, y) vertices in pixel coordinates,
    ordered around the box. ``care`` is False when the transcription is the
    don't-care marker.
    """

    quad: np.ndarray
    transcription: str = ""

    def __post_init__(self):
        self.quad = np.asarray(self.quad, dtype=np.float32).reshape(4, 2)

    @property
    def care(self):
        return self.transcription != DONT_CARE

    def area(self):
        return float(quad_area(self.quad))

    def __eq__(self, other):
        if not isinstance(other, TextBox):
            return NotImplemented
        return (
            np.array_equal(self.quad, other.quad)
            and self.transcription == other.transcription
        )

    def __repr__(self):
        pts = ",".join(f"({x:g},{y:g})" for x, y in self.quad)
        return f"TextBox([{pts}], {self.transcription!r})"


@dataclass
class PairedSample:
    """A low-light image, its bright ground truth and any text boxes."""

    low: np.ndarray
    gt: np.ndarray
    boxes: list = field(default_factory=list)
    id: str = ""
    source: str = "real"

    def __post_init__(self):
        if self.low.shape != self.gt.shape:
            raise ValueError(
                f"low/gt shape mismatch for sample {self.id!r}: "
                f"{self.low.shape} vs {self.gt.shape}"
            )


def _format_coord(v):
    v = float(v)
    return str(int(v)) if v == int(v) else repr(v)


def serialize_annotations(boxes):
    """Render boxes as annotation text, one quad per line."""
    lines = []
    for box in boxes:
        coords = ",".join(_format_coord(v) for v in box.quad.reshape(-1))
        lines.append(f"{coords},{box.transcription}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_annotations(boxes, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_annotations(boxes))


def parse_annotations(path, width, height):
    """Parse an annotation file, clipping coordinates to the image bounds.

    Each non-empty line must be ``x1,y1,x2,y2,x3,y3,x4,y4,transcription``.
    A UTF-8 BOM is tolerated. Out-of-bounds coordinates are clipped with a
    warning rather than rejected; real annotations overshoot by a pixel or
    two routinely.
    """
    boxes = []
    with open(path, "r", encoding="utf-8-sig") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            boxes.append(_parse_line(line, lineno, width, height, path))
    return boxes


def _parse_line(line, lineno, width, height, path):
    parts = line.split(",", 8)
    if len(parts) < 9:
        raise AnnotationError(
            f"{path}:{lineno}: expected 8 coordinates and a transcription, "
            f"got {len(parts)} fields"
        )
    try:
        coords = [float(p) for p in parts[:8]]
    except ValueError:
        raise AnnotationError(f"{path}:{lineno}: non-numeric coordinate in {line!r}")
    quad = np.array(coords, dtype=np.float32).reshape(4, 2)
    clipped = np.stack(
        [np.clip(quad[:, 0], 0, width), np.clip(quad[:, 1], 0, height)], axis=1
    )
    if not np.array_equal(clipped, quad):
        log.warning("%s:%d: coordinates outside %dx%d image were clipped",
                    path, lineno, width, height)
    return TextBox(quad=clipped, transcription=parts[8])
