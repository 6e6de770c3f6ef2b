"""Training loop, checkpointing and the batch enhance/evaluate commands.

Per training step: sample, crop, augment, build the attention pyramid and
edge map, run the generator and back-propagate the weighted joint loss into
the generator only. The edge estimator and the text detector stay frozen
throughout. Checkpoints restore training bit-compatibly on the same
platform: parameters, optimizer moments and the data RNG state all round-
trip through the container format.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container
from .attention import build_pyramid, compute_attention
from .data import DatasetManifest, augment_pair, load_dataset, random_crop_pair
from .domain import load_image, parse_annotations, save_image, to_hwc, to_nchw
from .edge import EdgeEstimator, train_edge_estimator
from .enhancer import Enhancer, build_enhancer
from .losses import LossWeights, MsSsimParams, ssim, total_loss
from .region import PooledLumaProvider, extract_boxes, region_score
from .texteval import count_correct_words, counted_predictions, match_detections

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


def psnr(pred, target, cap=PSNR_CAP):
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


@dataclass
class TrainConfig:
    epochs: int = 4000
    learning_rate: float = 1e-4
    decayed_learning_rate: float = 1e-5
    decay_epoch: int = 2000
    batch_size: int = 1
    crop: int = 512
    loss_weights: LossWeights = field(default_factory=LossWeights)
    attention: bool = True
    edge: bool = True
    ms_ssim: bool = True
    text_loss: bool = True
    seed: int = 0
    checkpoint_interval: int = 0
    augment: bool = True
    enhancer_widths: tuple = (32, 64, 128, 256)
    enhancer_bottleneck: int = 512
    leaky_slope: float = 0.2
    edge_width: int = 16
    edge_pretrain_steps: int = 200
    ms_ssim_scales: int = 5
    adam_betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0 or self.decayed_learning_rate <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.crop % 16:
            raise ValueError("crop size must be divisible by 16")
        self.enhancer_widths = tuple(self.enhancer_widths)
        self.adam_betas = tuple(self.adam_betas)
        if not isinstance(self.loss_weights, LossWeights):
            self.loss_weights = LossWeights(**self.loss_weights)

    def ms_ssim_params(self):
        return MsSsimParams.for_scales(self.ms_ssim_scales)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainResult:
    enhancer: Enhancer
    edge_net: EdgeEstimator
    log: list
    checkpoint_path: Path = None


def _build_nets(config):
    net = build_enhancer(seed=config.seed, widths=config.enhancer_widths,
                         bottleneck=config.enhancer_bottleneck,
                         slope=config.leaky_slope)
    return net


def save_checkpoint(path, enhancer, edge_net, optimizer, epoch, config,
                    rng_state):
    arrays = {}
    for name, p in enhancer.state_dict().items():
        arrays[f"enhancer.{name}"] = p.detach().cpu().numpy()
    if edge_net is not None:
        for name, p in edge_net.state_dict().items():
            arrays[f"edge.{name}"] = p.detach().cpu().numpy()
    steps = {}
    if optimizer is not None:
        for name, p in enhancer.named_parameters():
            state = optimizer.state.get(p)
            if not state:
                continue
            arrays[f"adam.m.{name}"] = state["exp_avg"].detach().cpu().numpy()
            arrays[f"adam.v.{name}"] = state["exp_avg_sq"].detach().cpu().numpy()
            steps[name] = float(state["step"])
    meta = {
        "kind": "train",
        "epoch": epoch,
        "config": config.to_dict(),
        "rng_state": rng_state,
        "adam_steps": steps,
        "has_edge_net": edge_net is not None,
    }
    container.save_arrays(path, arrays, meta)
    return Path(path)


def load_checkpoint(path):
    """Rebuild the nets, optimizer state and RNG state from a checkpoint."""
    arrays, meta = container.load_arrays(path)
    if meta.get("kind") != "train":
        raise container.CheckpointError(f"not a training checkpoint: {path}")
    config = TrainConfig.from_dict(meta["config"])
    enhancer = Enhancer(widths=config.enhancer_widths,
                        bottleneck=config.enhancer_bottleneck,
                        slope=config.leaky_slope)
    enhancer.load_state_dict({
        k[len("enhancer."):]: torch.from_numpy(v)
        for k, v in arrays.items() if k.startswith("enhancer.")
    })
    edge_net = None
    if meta.get("has_edge_net"):
        edge_net = EdgeEstimator(base_width=config.edge_width,
                                 slope=config.leaky_slope)
        edge_net.load_state_dict({
            k[len("edge."):]: torch.from_numpy(v)
            for k, v in arrays.items() if k.startswith("edge.")
        })
        edge_net.eval()
    adam = {
        "steps": meta.get("adam_steps", {}),
        "m": {k[len("adam.m."):]: v for k, v in arrays.items()
              if k.startswith("adam.m.")},
        "v": {k[len("adam.v."):]: v for k, v in arrays.items()
              if k.startswith("adam.v.")},
    }
    return {
        "config": config,
        "enhancer": enhancer,
        "edge_net": edge_net,
        "adam": adam,
        "epoch": int(meta["epoch"]),
        "rng_state": meta["rng_state"],
    }


def _restore_optimizer(optimizer, enhancer, adam):
    for name, p in enhancer.named_parameters():
        if name not in adam["steps"]:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(adam["steps"][name]),
            "exp_avg": torch.from_numpy(adam["m"][name].copy()),
            "exp_avg_sq": torch.from_numpy(adam["v"][name].copy()),
        }


def _freeze(module):
    if isinstance(module, torch.nn.Module):
        module.requires_grad_(False)
        module.eval()


class _SampleCache:
    def __init__(self, refs):
        self.refs = refs
        self._loaded = {}

    def __len__(self):
        return len(self.refs)

    def __getitem__(self, idx):
        if idx not in self._loaded:
            self._loaded[idx] = self.refs[idx].load()
        return self._loaded[idx]


def train(config, manifest, detector, edge_net=None, out_dir=None,
          resume_from=None, split="train"):
    """Train the enhancer on a manifest split against a frozen detector.

    ``detector`` is any region score provider; its parameters, like the edge
    estimator's, receive no updates. With ``resume_from`` the checkpoint's
    config snapshot replaces ``config`` so the rebuilt nets always match the
    stored weights. Returns the trained nets, the per-step metrics log, and
    the final checkpoint path when ``out_dir`` is given.
    """
    if isinstance(manifest, (str, Path)):
        manifest = DatasetManifest.load(manifest)
    refs = load_dataset(manifest, split)
    if not refs:
        raise ValueError(f"manifest split {split!r} is empty")
    samples = _SampleCache(refs)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        config = state["config"]
        net = state["enhancer"]
        edge_net = state["edge_net"]
        np_rng = np.random.default_rng()
        np_rng.bit_generator.state = state["rng_state"]
        start_epoch = state["epoch"]
    else:
        net = _build_nets(config)
        np_rng = np.random.default_rng(config.seed)
        if config.edge and edge_net is None:
            log.info("no edge estimator supplied, pretraining one (%d steps)",
                     config.edge_pretrain_steps)
            edge_net, _ = train_edge_estimator(
                [samples[i] for i in range(len(samples))],
                steps=config.edge_pretrain_steps, seed=config.seed,
                base_width=config.edge_width)

    _freeze(detector)
    if edge_net is not None:
        _freeze(edge_net)

    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate,
                                 betas=config.adam_betas)
    if resume_from is not None:
        _restore_optimizer(optimizer, net, state["adam"])

    ms_params = config.ms_ssim_params() if config.ms_ssim else None
    metrics_log = []
    ckpt_path = None
    global_step = start_epoch * math.ceil(len(samples) / config.batch_size)

    for epoch in range(start_epoch, config.epochs):
        lr = (config.learning_rate if epoch < config.decay_epoch
              else config.decayed_learning_rate)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np_rng.permutation(len(samples))
        for chunk_start in range(0, len(order), config.batch_size):
            chunk = order[chunk_start:chunk_start + config.batch_size]
            lows, gts, ids = [], [], []
            for idx in chunk:
                s = random_crop_pair(samples[int(idx)], config.crop, np_rng)
                if config.augment:
                    s = augment_pair(s, np_rng)
                lows.append(to_nchw(s.low))
                gts.append(to_nchw(s.gt))
                ids.append(s.id)
            low_t = torch.cat(lows)
            gt_t = torch.cat(gts)
            attn = None
            if config.attention:
                attn = build_pyramid(compute_attention(low_t), levels=4)
            if config.edge and edge_net is not None:
                with torch.no_grad():
                    edges = edge_net(low_t)
            else:
                edges = torch.zeros_like(low_t[:, :1])
            pred = net(torch.cat([low_t, edges], dim=1), attn)
            loss, breakdown = total_loss(
                pred, gt_t, detector, weights=config.loss_weights,
                ms_params=ms_params, use_msssim=config.ms_ssim,
                use_text=config.text_loss)
            if not math.isfinite(breakdown["total"]):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {global_step} "
                    f"on sample(s) {ids}: {breakdown}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            metrics_log.append({"epoch": epoch, "step": global_step,
                                "lr": lr, "ids": ids, **breakdown})
            global_step += 1
        if (out_dir is not None and config.checkpoint_interval
                and (epoch + 1) % config.checkpoint_interval == 0):
            ckpt_path = save_checkpoint(
                out_dir / f"ckpt_epoch{epoch + 1:06d}.ckpt", net, edge_net,
                optimizer, epoch + 1, config, np_rng.bit_generator.state)

    if out_dir is not None:
        ckpt_path = save_checkpoint(
            out_dir / "final.ckpt", net, edge_net, optimizer, config.epochs,
            config, np_rng.bit_generator.state)
    net.eval()
    return TrainResult(enhancer=net, edge_net=edge_net, log=metrics_log,
                       checkpoint_path=ckpt_path)


def _pad_to_multiple(img, multiple):
    h, w = img.shape[:2]
    pad_h = (multiple - h % multiple) % multiple
    pad_w = (multiple - w % multiple) % multiple
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    return img, (h, w)


def enhance_image(image, enhancer, edge_net=None, use_attention=True,
                  use_edge=True):
    """Enhance one HxWx3 image, padding to a multiple of 16 transparently."""
    padded, (h, w) = _pad_to_multiple(image, 16)
    x = to_nchw(padded)
    attn = build_pyramid(compute_attention(x), levels=4) if use_attention else None
    with torch.no_grad():
        if use_edge and edge_net is not None:
            edges = edge_net(x)
        else:
            edges = torch.zeros_like(x[:, :1])
        out = enhancer(torch.cat([x, edges], dim=1), attn).clamp(0.0, 1.0)
    return to_hwc(out)[:h, :w]


def _list_images(directory):
    return sorted(p for p in Path(directory).iterdir()
                  if p.suffix.lower() in (".png", ".jpg", ".jpeg"))


def enhance_command(input_dir, checkpoint_path, output_dir,
                    dump_attention=None):
    """Enhance every image in a directory using a trained checkpoint."""
    state = load_checkpoint(checkpoint_path)
    config = state["config"]
    net = state["enhancer"]
    net.eval()
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dump_attention is not None:
        dump_attention = Path(dump_attention)
        dump_attention.mkdir(parents=True, exist_ok=True)
    written = []
    for path in _list_images(input_dir):
        img = load_image(path)
        out = enhance_image(img, net, state["edge_net"],
                            use_attention=config.attention,
                            use_edge=config.edge)
        dst = out_dir / f"{path.stem}.png"
        save_image(out, dst)
        if dump_attention is not None:
            s = to_hwc(compute_attention(to_nchw(img)).base)
            save_image(np.repeat(s, 3, axis=2), dump_attention / f"{path.stem}.png")
        written.append(dst)
    log.info("enhanced %d images into %s", len(written), out_dir)
    return written


def _find_annotation_file(ann_dir, stem):
    for name in (f"{stem}.txt", f"gt_{stem}.txt"):
        candidate = Path(ann_dir) / name
        if candidate.exists():
            return candidate
    return None


def evaluate_command(pred_dir, gt_dir, ann_dir=None, detector=None,
                     recognizer=None, report_path=None,
                     iou_threshold=0.5):
    """Score a directory of enhanced images against ground truth.

    Always reports mean PSNR and single-scale SSIM. With annotations, runs
    the detector on the enhanced images and adds precision/recall/H-Mean;
    with a recognizer as well, adds case-insensitive spotting accuracy.
    Odd-sized images lose their last row/column for the detector pass only,
    since region scores live at half resolution.
    """
    pred_paths = {p.stem: p for p in _list_images(pred_dir)}
    gt_paths = {p.stem: p for p in _list_images(gt_dir)}
    only_pred = sorted(set(pred_paths) - set(gt_paths))
    only_gt = sorted(set(gt_paths) - set(pred_paths))
    if only_pred or only_gt:
        raise ValueError(
            f"prediction/ground-truth mismatch: only in pred {only_pred}, "
            f"only in gt {only_gt}")
    if not pred_paths:
        raise ValueError("no images to evaluate")

    psnrs, ssims = [], []
    matched = care_total = counted_total = 0
    words_correct = 0
    detect = detector or PooledLumaProvider()
    for stem in sorted(pred_paths):
        pred = load_image(pred_paths[stem])
        gt = load_image(gt_paths[stem])
        psnrs.append(psnr(pred, gt))
        ssims.append(float(ssim(to_nchw(pred), to_nchw(gt))))
        if ann_dir is None:
            continue
        ann_file = _find_annotation_file(ann_dir, stem)
        if ann_file is None:
            log.warning("no annotation file for %s, skipping detection", stem)
            continue
        h, w = pred.shape[:2]
        gt_boxes = parse_annotations(ann_file, w, h)
        even = pred[:h - h % 2, :w - w % 2]
        with torch.no_grad():
            score = region_score(to_nchw(even), detect)
        pred_boxes = extract_boxes(score)
        match = match_detections(pred_boxes, gt_boxes, threshold=iou_threshold)
        matched += len(match.pairs)
        counted_total += counted_predictions(match)
        care_total += sum(1 for b in gt_boxes if b.care)
        if recognizer is not None:
            words_correct += count_correct_words(pred, match, pred_boxes,
                                                 gt_boxes, recognizer)

    report = {
        "images": len(psnrs),
        "psnr": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
    }
    if ann_dir is not None:
        precision = matched / counted_total if counted_total else 0.0
        recall = matched / care_total if care_total else 0.0
        hm = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        report.update(precision=precision, recall=recall, hmean=hm)
        if recognizer is not None:
            report["accuracy"] = words_correct / care_total if care_total else 0.0
    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report
