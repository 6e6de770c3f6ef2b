"""Extremely low-light image enhancement with scene text restoration."""

from .attention import AttentionMap, build_pyramid, compute_attention, luma
from .data import (DarkenParams, DatasetManifest, ManifestEntry, augment_pair,
                   build_synthetic_dataset, darken, load_dataset,
                   random_crop_pair)
from .domain import (DONT_CARE, AnnotationError, PairedSample, TextBox,
                     load_image, parse_annotations, save_image,
                     serialize_annotations, to_hwc, to_nchw,
                     write_annotations)
from .edge import (EdgeEstimator, build_edge_estimator, estimate_edges,
                   load_edge_estimator, save_edge_estimator, teacher_edges,
                   train_edge_estimator)
from .enhancer import Enhancer, build_enhancer, count_parameters, enhance
from .losses import (LossWeights, MsSsimParams, l1_loss, ms_ssim,
                     ms_ssim_loss, ssim, text_detection_loss, total_loss)
from .pipeline import (TrainConfig, TrainResult, enhance_command,
                       enhance_image, evaluate_command, load_checkpoint,
                       psnr, save_checkpoint, train)
from .region import (ConvRegionScorer, PooledLumaProvider, build_region_scorer,
                     extract_boxes, load_region_scorer, region_score,
                     save_region_scorer, synth_region_target,
                     train_region_scorer)
from .texteval import (DetectionMatch, h_mean, iou, match_detections,
                       read_detections, spotting_accuracy, write_detections)

__version__ = "0.1.0"
