"""Detection matching, H-Mean and the two-stage text spotting harness."""

import logging
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon

from .domain import TextBox

log = logging.getLogger(__name__)


def _polygon(box):
    poly = Polygon(np.asarray(box.quad, dtype=np.float64))
    if not poly.is_valid:
        poly = poly.buffer(0)
    return poly


def iou(a, b):
    """Polygon intersection over union; degenerate quads score 0."""
    pa, pb = _polygon(a), _polygon(b)
    if pa.area == 0.0 or pb.area == 0.0:
        return 0.0
    union = pa.union(pb).area
    if union == 0.0:
        return 0.0
    return pa.intersection(pb).area / union


@dataclass
class DetectionMatch:
    """One-to-one greedy matching between predictions and ground truth.

    ``pairs`` holds (prediction index, ground-truth index, IoU) triples for
    care boxes only. Predictions absorbed by don't-care boxes land in
    ``ignored_pred`` and count toward neither error.
    """

    pairs: list = field(default_factory=list)
    unmatched_pred: list = field(default_factory=list)
    unmatched_gt: list = field(default_factory=list)
    ignored_pred: list = field(default_factory=list)


def match_detections(pred, gt, threshold=0.5):
    """Greedily match predictions to care ground truths in IoU order.

    Only pairs at or above ``threshold`` are eligible. Leftover predictions
    overlapping a don't-care box at the threshold are then absorbed.
    """
    care = [g for g in range(len(gt)) if gt[g].care]
    dont_care = [g for g in range(len(gt)) if not gt[g].care]
    candidates = []
    for p in range(len(pred)):
        for g in care:
            score = iou(pred[p], gt[g])
            if score >= threshold:
                candidates.append((score, p, g))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_pred, used_gt = set(), set()
    pairs = []
    for score, p, g in candidates:
        if p in used_pred or g in used_gt:
            continue
        used_pred.add(p)
        used_gt.add(g)
        pairs.append((p, g, score))
    unmatched_pred = []
    ignored_pred = []
    for p in range(len(pred)):
        if p in used_pred:
            continue
        if any(iou(pred[p], gt[g]) >= threshold for g in dont_care):
            ignored_pred.append(p)
        else:
            unmatched_pred.append(p)
    unmatched_gt = [g for g in care if g not in used_gt]
    return DetectionMatch(pairs=pairs, unmatched_pred=unmatched_pred,
                          unmatched_gt=unmatched_gt, ignored_pred=ignored_pred)


def counted_predictions(match):
    """Predictions that count toward precision (matched + false positives)."""
    return len(match.pairs) + len(match.unmatched_pred)


def care_ground_truths(match):
    return len(match.pairs) + len(match.unmatched_gt)


def h_mean(match, care_gt_count, counted_pred_count):
    """Precision, recall and their harmonic mean for a matching."""
    matches = len(match.pairs)
    precision = matches / counted_pred_count if counted_pred_count else 0.0
    recall = matches / care_gt_count if care_gt_count else 0.0
    hmean = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, hmean


def crop_box(image, box):
    """Axis-aligned crop of a box's extent, clipped to the image."""
    h, w = image.shape[:2]
    x0 = int(np.clip(np.floor(box.quad[:, 0].min()), 0, w))
    x1 = int(np.clip(np.ceil(box.quad[:, 0].max()), 0, w))
    y0 = int(np.clip(np.floor(box.quad[:, 1].min()), 0, h))
    y1 = int(np.clip(np.ceil(box.quad[:, 1].max()), 0, h))
    return image[y0:y1, x0:x1]


def count_correct_words(image, match, pred, gt, recognizer):
    """Recognize each matched predicted region; count case-insensitive hits.

    A recognizer exception counts the word as incorrect and is logged.
    """
    correct = 0
    for p, g, _ in match.pairs:
        truth = gt[g]
        if not truth.care:
            continue
        crop = crop_box(image, pred[p])
        if crop.size == 0:
            continue
        try:
            word = recognizer(crop)
        except Exception:
            log.warning("recognizer failed on box %d (gt %r)", p,
                        truth.transcription, exc_info=True)
            continue
        if word.lower() == truth.transcription.lower():
            correct += 1
    return correct


def spotting_accuracy(image, match, pred, gt, recognizer):
    """Case-insensitive word accuracy over the care ground truths.

    Two-stage protocol: every matched prediction is cropped axis-aligned
    from the image and recognized without a lexicon. Unmatched ground truths
    count as misses.
    """
    care_total = sum(1 for b in gt if b.care)
    if care_total == 0:
        return 0.0
    return count_correct_words(image, match, pred, gt, recognizer) / care_total


def write_detections(boxes, path):
    """Write detections in submission format: eight coordinates per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for box in boxes:
            fh.write(",".join(str(int(round(float(v))))
                              for v in box.quad.reshape(-1)) + "\n")


def read_detections(path):
    """Read submission-format detections; a trailing transcription is kept."""
    boxes = []
    with open(path, "r", encoding="utf-8-sig") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",", 8)
            if len(parts) < 8:
                raise ValueError(f"{path}: bad detection line {line!r}")
            coords = [float(p) for p in parts[:8]]
            text = parts[8] if len(parts) > 8 else ""
            boxes.append(TextBox(quad=np.array(coords).reshape(4, 2),
                                 transcription=text))
    return boxes
