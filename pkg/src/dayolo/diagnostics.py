"""Measurements of domain confusion and classifier consensus on held-out data."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .adaptation import SOURCE, TARGET, DomainAdaptation, boxes_from_annotations, ria_loss, ScaleWeights
from .model import Detector, ImageSample


def _batches(samples: Sequence[ImageSample], batch_size: int):
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        yield chunk, torch.from_numpy(np.stack([s.pixels for s in chunk]))


@torch.no_grad()
def image_domain_accuracy(detector: Detector, adaptation: DomainAdaptation,
                          source: Sequence[ImageSample], target: Sequence[ImageSample],
                          batch_size: int = 16) -> dict:
    """Per-location accuracy of the image-level classifiers (threshold 0.5).

    Returns ``{"per_scale": [a1, a2, a3], "overall": a}`` where ``overall``
    weights every location of every scale equally.
    """
    detector.eval()
    adaptation.eval()
    correct = np.zeros(3)
    total = np.zeros(3)
    for samples, label in ((source, SOURCE), (target, TARGET)):
        for _, x in _batches(samples, batch_size):
            feats = detector.backbone(x)
            for k, p in enumerate(adaptation.image_probs(feats)):
                pred = (p >= 0.5).long()
                correct[k] += float((pred == label).sum())
                total[k] += p.numel()
    per_scale = (correct / np.maximum(total, 1)).tolist()
    return {"per_scale": per_scale, "overall": float(correct.sum() / max(total.sum(), 1))}


def train_probe_classifier(detector: Detector, source: Sequence[ImageSample],
                           target: Sequence[ImageSample], steps: int = 300, lr: float = 0.01,
                           seed: int = 0) -> DomainAdaptation:
    """Fit fresh image-level classifiers on frozen detector features (no reversal)."""
    torch.manual_seed(seed)
    detector.eval()
    probe = DomainAdaptation(detector.config.tap_channels)
    opt = torch.optim.SGD(probe.image.parameters(), lr=lr, momentum=0.9)
    rng = np.random.default_rng(seed)
    weights = ScaleWeights.equal(1.0)
    labels = torch.tensor([SOURCE, TARGET])
    probe.train()
    for _ in range(steps):
        s = source[int(rng.integers(len(source)))]
        t = target[int(rng.integers(len(target)))]
        with torch.no_grad():
            feats = detector.backbone(torch.from_numpy(np.stack([s.pixels, t.pixels])))
        maps = probe.image_probs(feats, lambda_grl=0.0)
        loss = ria_loss(maps, labels, weights) / sum(m[0].numel() for m in maps)
        opt.zero_grad()
        loss.backward()
        opt.step()
    probe.eval()
    return probe


@torch.no_grad()
def consensus_gap(detector: Detector, adaptation: DomainAdaptation,
                  samples: Sequence[ImageSample], batch_size: int = 16) -> float:
    """Mean |map mean - instance probability| over ground-truth instances.

    Every annotated object of every image contributes one instance at its
    responsible scale, pooled from the image's own feature map.
    """
    detector.eval()
    adaptation.eval()
    gaps = []
    for chunk, x in _batches(samples, batch_size):
        feats = detector.backbone(x)
        sizes = [tuple(f.shape[-2:]) for f in feats]
        boxes = [boxes_from_annotations(s.annotations, detector.anchors, sizes) for s in chunk]
        out = adaptation(feats, boxes)
        if out.instance_probs.numel() == 0:
            continue
        means = torch.stack([pm.flatten(1).mean(1) for pm in out.prob_maps], dim=1)
        gaps.append((means[out.image_index, out.scale_index] - out.instance_probs).abs())
    if not gaps:
        return 0.0
    return float(torch.cat(gaps).mean())
