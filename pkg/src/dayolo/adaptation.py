"""Image-level and instance-level domain classifiers and the three alignment losses.

Domain labels follow one convention everywhere: source = 0, target = 1.  All
classifiers output the probability that their input comes from the target
domain, and every classifier input passes through a gradient reversal layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .grl import grl_apply
from .model import STRIDES, Detection, FeatureMap, ShapeError, ValidationError, decode_grid, nms

EPS = 1e-7
SOURCE, TARGET = 0, 1


@dataclass(frozen=True)
class ScaleWeights:
    """Per-scale loss weights for strides 8, 16, 32.

    ``mode="ria"`` requires weights that decrease with depth; ``mode="eia"``
    requires them equal.
    """
    l1: float = 1.0
    l2: float = 0.5
    l3: float = 0.1
    mode: str = "ria"

    def __post_init__(self):
        w = self.as_tuple()
        if any(x < 0 for x in w):
            raise ValidationError(f"scale weights must be >= 0, got {w}")
        if self.mode == "ria" and not (w[0] >= w[1] >= w[2]):
            raise ValidationError(f"RIA weights must be non-increasing with depth, got {w}")
        if self.mode == "eia" and not (w[0] == w[1] == w[2]):
            raise ValidationError(f"EIA weights must be equal, got {w}")
        if self.mode not in ("ria", "eia", "free"):
            raise ValidationError(f"unknown weight mode {self.mode!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.l1, self.l2, self.l3)

    def __getitem__(self, k: int) -> float:
        return self.as_tuple()[k]

    @classmethod
    def equal(cls, value: float = 1.0) -> "ScaleWeights":
        return cls(value, value, value, mode="eia")


class ImageDomainClassifier(nn.Module):
    """Pointwise two-layer classifier producing a [B, 1, H, W] probability map."""

    def __init__(self, in_channels: int, scale_index: int, hidden: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.scale_index = scale_index
        self.conv1 = nn.Conv2d(in_channels, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, 1, 1)

    def logits(self, x: torch.Tensor, lambda_grl: float = 1.0) -> torch.Tensor:
        if x.shape[-3] != self.in_channels:
            raise ShapeError(
                f"scale-{self.scale_index} classifier expects {self.in_channels} channels, "
                f"got {x.shape[-3]}")
        x = grl_apply(x, lambda_grl)
        return self.conv2(F.relu(self.conv1(x)))

    def forward(self, x, lambda_grl: float = 1.0) -> torch.Tensor:
        if isinstance(x, FeatureMap):
            if x.scale_index != self.scale_index:
                raise ShapeError(
                    f"feature map of scale {x.scale_index} fed to scale-{self.scale_index} classifier")
            x = x.data
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        p = torch.sigmoid(self.logits(x, lambda_grl))
        return p[0] if squeeze else p


class InstanceDomainClassifier(nn.Module):
    """Flatten -> FC(hidden) -> ReLU -> FC(1) -> sigmoid, one probability per instance."""

    def __init__(self, in_channels: int, scale_index: int, pool_size: int = 3, hidden: int = 128):
        super().__init__()
        self.in_shape = (in_channels, pool_size, pool_size)
        self.scale_index = scale_index
        self.fc1 = nn.Linear(in_channels * pool_size * pool_size, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, feats: torch.Tensor, lambda_grl: float = 1.0) -> torch.Tensor:
        single = feats.ndim == 3
        if single:
            feats = feats.unsqueeze(0)
        if tuple(feats.shape[1:]) != self.in_shape:
            raise ShapeError(
                f"scale-{self.scale_index} instance classifier expects {self.in_shape}, "
                f"got {tuple(feats.shape[1:])}")
        x = grl_apply(feats, lambda_grl).flatten(1)
        p = torch.sigmoid(self.fc2(F.relu(self.fc1(x)))).squeeze(1)
        return p[0] if single else p


def _bce(p: torch.Tensor, label) -> torch.Tensor:
    p = p.clamp(EPS, 1 - EPS)
    return -(label * torch.log(p) + (1 - label) * torch.log(1 - p))


def ria_loss(prob_maps: Sequence[torch.Tensor], labels, weights: ScaleWeights) -> torch.Tensor:
    """Weighted BCE summed over images, scales and all map locations.

    ``prob_maps[k]`` is the [B, 1, H_k, W_k] output of the scale-k classifier;
    ``labels`` holds one domain label per image.
    """
    labels = torch.as_tensor(labels)
    total = prob_maps[0].new_zeros(())
    for k, pm in enumerate(prob_maps):
        if pm.shape[0] != labels.shape[0]:
            raise ShapeError(f"{pm.shape[0]} probability maps for {labels.shape[0]} labels")
        d = labels.to(pm.dtype).view(-1, *([1] * (pm.ndim - 1)))
        total = total + weights[k] * _bce(pm, d).sum()
    return total


def roi_pool(fmap, box, pool_size: int = 3) -> torch.Tensor:
    """Max-pool the feature cells under a normalized (cx, cy, w, h) box to [C, P, P].

    The box is mapped onto the grid and the covered cells split into P x P
    bins (adaptive-pool bin edges, so no bin is empty when the region is
    smaller than P).  Box coordinates are constants: gradients reach the map
    only.
    """
    data = fmap.data if isinstance(fmap, FeatureMap) else fmap
    if data.ndim != 3:
        raise ShapeError(f"roi_pool expects a [C, H, W] map, got {tuple(data.shape)}")
    _, h, w = data.shape
    if torch.is_tensor(box):
        box = box.detach().tolist()
    cx, cy, bw, bh = (float(v) for v in box)
    x0 = min(max(cx - bw / 2, 0.0), 1.0) * w
    x1 = min(max(cx + bw / 2, 0.0), 1.0) * w
    y0 = min(max(cy - bh / 2, 0.0), 1.0) * h
    y1 = min(max(cy + bh / 2, 0.0), 1.0) * h
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise ValidationError(f"degenerate ROI {tuple(box)}")
    tol = 1e-6
    c0, c1 = math.floor(x0 + tol), math.ceil(x1 - tol)
    r0, r1 = math.floor(y0 + tol), math.ceil(y1 - tol)
    c0, r0 = min(c0, w - 1), min(r0, h - 1)
    c1, r1 = max(min(c1, w), c0 + 1), max(min(r1, h), r0 + 1)
    return F.adaptive_max_pool2d(data[:, r0:r1, c0:c1], pool_size)


def msia_loss(probs: torch.Tensor, image_index, scale_index, labels,
              weights: ScaleWeights) -> torch.Tensor:
    """Weighted BCE summed over every pooled instance.

    ``probs[n]`` belongs to image ``image_index[n]`` and 0-based scale
    ``scale_index[n]``.  No instances gives 0.
    """
    labels = torch.as_tensor(labels)
    if probs.numel() == 0:
        return probs.new_zeros(())
    image_index = torch.as_tensor(image_index, dtype=torch.long)
    scale_index = torch.as_tensor(scale_index, dtype=torch.long)
    d = labels.to(probs.dtype)[image_index]
    lam = probs.new_tensor(weights.as_tuple())[scale_index]
    return (lam * _bce(probs, d)).sum()


def mlcr_loss(prob_maps: Sequence[torch.Tensor], probs: torch.Tensor, image_index,
              scale_index) -> torch.Tensor:
    """Sum of |mean image-level probability - instance probability| per instance.

    Each instance is compared with the spatial mean of the probability map of
    its own image and scale.
    """
    if probs.numel() == 0:
        return probs.new_zeros(())
    image_index = torch.as_tensor(image_index, dtype=torch.long)
    scale_index = torch.as_tensor(scale_index, dtype=torch.long)
    means = torch.stack([pm.flatten(1).mean(1) for pm in prob_maps], dim=1)  # [B, K]
    return (means[image_index, scale_index] - probs).abs().sum()


@dataclass
class InstanceBatch:
    """Pooled instance features with their image and (0-based) scale indices."""
    features: list[torch.Tensor]  # one [N_k, C_k, P, P] tensor per scale
    image_index: list[torch.Tensor]
    boxes: list[list[tuple]]

    def count(self) -> int:
        return sum(len(b) for b in self.boxes)


def select_detections(grids: Sequence[torch.Tensor], anchors, conf_threshold: float = 0.5,
                      nms_iou: float = 0.5, top_k: int = 8) -> list[list[list[Detection]]]:
    """Per image, per scale: thresholded, NMS-filtered detections capped at top-k by objectness."""
    batch = grids[0].shape[0]
    out = []
    for b in range(batch):
        per_scale = []
        for k, grid in enumerate(grids):
            dets = nms(decode_grid(grid[b], anchors[k], k + 1, conf_threshold), nms_iou)
            dets.sort(key=lambda d: (-d.objectness, d.box))
            per_scale.append(dets[:top_k])
        out.append(per_scale)
    return out


def pool_instances(feats: Sequence[torch.Tensor], boxes_per_image: Sequence[Sequence[Sequence]],
                   pool_size: int = 3) -> InstanceBatch:
    """ROI-pool ``boxes_per_image[b][k]`` from scale-k feature maps of image b."""
    features, image_index, boxes = [], [], []
    for k, fmap in enumerate(feats):
        pooled, idx, bx = [], [], []
        for b, per_scale in enumerate(boxes_per_image):
            for box in per_scale[k]:
                pooled.append(roi_pool(fmap[b], box, pool_size))
                idx.append(b)
                bx.append(tuple(box))
        if pooled:
            features.append(torch.stack(pooled))
        else:
            features.append(fmap.new_zeros((0, fmap.shape[1], pool_size, pool_size)))
        image_index.append(torch.tensor(idx, dtype=torch.long))
        boxes.append(bx)
    return InstanceBatch(features, image_index, boxes)


def boxes_from_annotations(annotations, anchors, grid_sizes) -> list[list[tuple]]:
    """Group ground-truth boxes of one image by the scale responsible for them."""
    from .model import assign_anchor

    per_scale: list[list[tuple]] = [[] for _ in anchors]
    for ann in annotations:
        k = assign_anchor(ann, anchors, grid_sizes)[0]
        per_scale[k].append((ann.cx, ann.cy, ann.w, ann.h))
    return per_scale


@dataclass
class DomainOutputs:
    prob_maps: list[torch.Tensor]  # per scale [B, 1, H_k, W_k]
    instance_probs: torch.Tensor  # [N]
    image_index: torch.Tensor  # [N]
    scale_index: torch.Tensor  # [N], 0-based
    boxes: list[tuple]


class DomainAdaptation(nn.Module):
    """Three image-level and three instance-level domain classifiers."""

    def __init__(self, channels: Sequence[int] = (64, 128, 256), pool_size: int = 3,
                 image_hidden: int = 64, instance_hidden: int = 128):
        super().__init__()
        self.pool_size = pool_size
        self.image = nn.ModuleList(
            ImageDomainClassifier(c, k + 1, image_hidden) for k, c in enumerate(channels))
        self.instance = nn.ModuleList(
            InstanceDomainClassifier(c, k + 1, pool_size, instance_hidden)
            for k, c in enumerate(channels))

    def image_probs(self, feats: Sequence[torch.Tensor], lambda_grl: float = 1.0):
        return [clf(f, lambda_grl) for clf, f in zip(self.image, feats)]

    def forward(self, feats: Sequence[torch.Tensor], boxes_per_image, lambda_grl: float = 1.0,
                with_images: bool = True, with_instances: bool = True) -> DomainOutputs:
        prob_maps = self.image_probs(feats, lambda_grl) if with_images else []
        probs, img_idx, scl_idx, boxes = [], [], [], []
        if with_instances:
            inst = pool_instances(feats, boxes_per_image, self.pool_size)
            for k, (f, idx) in enumerate(zip(inst.features, inst.image_index)):
                if f.shape[0]:
                    probs.append(self.instance[k](f, lambda_grl))
                    img_idx.append(idx)
                    scl_idx.append(torch.full_like(idx, k))
                    boxes.extend(inst.boxes[k])
        if probs:
            p, ii, si = torch.cat(probs), torch.cat(img_idx), torch.cat(scl_idx)
        else:
            p = feats[0].new_zeros((0,))
            ii = si = torch.zeros(0, dtype=torch.long)
        return DomainOutputs(prob_maps, p, ii, si, boxes)


__all__ = [
    "EPS", "SOURCE", "TARGET", "ScaleWeights", "ImageDomainClassifier",
    "InstanceDomainClassifier", "ria_loss", "msia_loss", "mlcr_loss", "roi_pool",
    "select_detections", "pool_instances", "boxes_from_annotations", "DomainAdaptation",
    "DomainOutputs", "InstanceBatch", "STRIDES",
]
