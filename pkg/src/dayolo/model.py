"""Compact YOLOv3-style detector: backbone, three heads, decoding, NMS and loss.

Channel layout of a raw head grid ``[A * (5 + M), H_k, W_k]``: for anchor ``a``
the slice ``[a * (5 + M) : (a + 1) * (5 + M)]`` holds
``tx, ty, tw, th, objectness, class_0 .. class_{M-1}``.  ``tx``, ``ty``,
objectness and class channels are logits; ``tw``, ``th`` are raw log-scales.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

STRIDES = (8, 16, 32)

_BASE_ANCHORS = ((0.06, 0.06), (0.12, 0.10), (0.10, 0.14))
DEFAULT_ANCHORS = tuple(
    tuple((w * m, h * m) for w, h in _BASE_ANCHORS) for m in (1, 2, 4)
)


class ShapeError(ValueError):
    """Raised when an array does not have the shape an operation requires."""


class ValidationError(ValueError):
    """Raised when input values violate a documented contract."""


@dataclass
class BoxAnnotation:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class ImageSample:
    pixels: np.ndarray  # float32 [3, H, W] in [0, 1]
    domain: int  # 0 source, 1 target
    annotations: list[BoxAnnotation] = field(default_factory=list)
    id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ShapeError(f"pixels must be [3, H, W], got {self.pixels.shape}")
        _, h, w = self.pixels.shape
        for name, size in (("height", h), ("width", w)):
            if size <= 0 or size % 32:
                raise ShapeError(f"image {name} {size} is not a positive multiple of 32")
        if self.domain not in (0, 1):
            raise ValidationError(f"domain must be 0 or 1, got {self.domain}")


@dataclass
class FeatureMap:
    scale_index: int  # 1, 2, 3
    data: torch.Tensor  # [C, H, W] or batched [B, C, H, W]
    stride: int


@dataclass
class Detection:
    scale_index: int
    box: tuple[float, float, float, float]  # cx, cy, w, h normalized
    objectness: float
    class_scores: np.ndarray
    cell: tuple[int, int]  # (u, v) = (column, row)
    anchor_index: int

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_scores))

    @property
    def score(self) -> float:
        return float(self.objectness * self.class_scores[self.class_id])

    def to_dict(self) -> dict:
        return {
            "class": self.class_id,
            "score": self.score,
            "objectness": float(self.objectness),
            "cx": self.box[0], "cy": self.box[1], "w": self.box[2], "h": self.box[3],
            "scale": self.scale_index,
        }


@dataclass
class DetectorConfig:
    num_classes: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    num_anchors: int = 3
    anchors: tuple = DEFAULT_ANCHORS
    head_hidden: int = 64

    @property
    def tap_channels(self) -> tuple[int, int, int]:
        return tuple(self.widths[2:5])


def check_anchors(anchors) -> None:
    if len(anchors) != 3:
        raise ValidationError("anchor table needs exactly three scales")
    for scale in anchors:
        for w, h in scale:
            if w <= 0 or h <= 0:
                raise ValidationError(f"anchor sizes must be positive, got {(w, h)}")
    areas = [max(w * h for w, h in scale) for scale in anchors]
    if not areas[0] <= areas[1] <= areas[2]:
        raise ValidationError("coarser scales must carry larger anchors")


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.1),
    )


class Backbone(nn.Module):
    """Five stride-2 stages; the last three are tapped at strides 8, 16, 32."""

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128, 256)):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("backbone needs exactly five stage widths")
        stages = []
        cin = 3
        for cout in widths:
            stages.append(nn.Sequential(_conv_block(cin, cout, 2), _conv_block(cout, cout, 1)))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.widths = tuple(widths)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected a [B, 3, H, W] batch, got {tuple(x.shape)}")
        for name, size in (("height", x.shape[2]), ("width", x.shape[3])):
            if size % 32:
                raise ShapeError(f"input {name} {size} is not a multiple of 32")
        taps = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 2:
                taps.append(x)
        return taps


class DetectionHead(nn.Module):
    def __init__(self, in_channels: int, num_anchors: int, num_classes: int, hidden: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = num_anchors * (5 + num_classes)
        self.body = _conv_block(in_channels, hidden, 1)
        self.out = nn.Conv2d(hidden, self.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.in_channels:
            raise ShapeError(
                f"head expects {self.in_channels} channels, got {x.shape[-3]}")
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        y = self.out(self.body(x))
        return y[0] if squeeze else y


class Detector(nn.Module):
    """Backbone plus one head per scale.  The only component needed at test time."""

    def __init__(self, config: DetectorConfig | None = None):
        super().__init__()
        self.config = config or DetectorConfig()
        check_anchors(self.config.anchors)
        c = self.config
        self.backbone = Backbone(c.widths)
        self.heads = nn.ModuleList(
            DetectionHead(ch, c.num_anchors, c.num_classes, c.head_hidden) for ch in c.tap_channels
        )

    @property
    def anchors(self):
        return self.config.anchors

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        feats = self.backbone(x)
        grids = [head(f) for head, f in zip(self.heads, feats)]
        return feats, grids


def backbone_forward(model: Detector, batch: torch.Tensor) -> list[FeatureMap]:
    feats = model.backbone(batch)
    return [FeatureMap(k + 1, f, s) for k, (f, s) in enumerate(zip(feats, STRIDES))]


def head_forward(model: Detector, fmap: FeatureMap) -> torch.Tensor:
    return model.heads[fmap.scale_index - 1](fmap.data)


# ---------------------------------------------------------------------------
# boxes

def box_iou(a, b) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def clamp_box(cx: float, cy: float, w: float, h: float) -> tuple[float, float, float, float]:
    x0, y0 = min(max(cx - w / 2, 0.0), 1.0), min(max(cy - h / 2, 0.0), 1.0)
    x1, y1 = min(max(cx + w / 2, 0.0), 1.0), min(max(cy + h / 2, 0.0), 1.0)
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Per-class greedy NMS; drops boxes with IoU > threshold to a kept box."""
    order = sorted(detections, key=lambda d: (-d.score, d.box))
    kept: list[Detection] = []
    for det in order:
        if all(k.class_id != det.class_id or box_iou(k.box, det.box) <= iou_threshold
               for k in kept):
            kept.append(det)
    return kept


def decode_grid(grid: torch.Tensor, anchors_k, scale_index: int,
                conf_threshold: float) -> list[Detection]:
    """Decode one image's raw grid at one scale, keeping cells above threshold."""
    a = len(anchors_k)
    ch, h, w = grid.shape
    g = grid.detach().to(torch.float64).reshape(a, ch // a, h, w)
    obj = torch.sigmoid(g[:, 4])
    hits = torch.nonzero(obj >= conf_threshold, as_tuple=False).tolist()
    out = []
    for ai, v, u in hits:
        tx, ty, tw, th = (float(t) for t in g[ai, :4, v, u])
        cx = (_sigmoid(tx) + u) / w
        cy = (_sigmoid(ty) + v) / h
        bw = anchors_k[ai][0] * math.exp(min(tw, 20.0))
        bh = anchors_k[ai][1] * math.exp(min(th, 20.0))
        out.append(Detection(
            scale_index=scale_index,
            box=clamp_box(cx, cy, bw, bh),
            objectness=float(obj[ai, v, u]),
            class_scores=torch.sigmoid(g[ai, 5:, v, u]).numpy(),
            cell=(u, v),
            anchor_index=ai,
        ))
    return [d for d in out if d.box[2] > 0 and d.box[3] > 0]


def decode_detections(grids: Sequence[torch.Tensor], anchors, conf_threshold: float = 0.5,
                      nms_iou: float = 0.5) -> list[list[Detection]]:
    """Decode batched grids ``[B, A*(5+M), H_k, W_k]`` into per-image detections."""
    for name, t in (("conf_threshold", conf_threshold), ("nms_iou", nms_iou)):
        if not 0 < t < 1:
            raise ValidationError(f"{name} must lie in (0, 1), got {t}")
    batch = grids[0].shape[0]
    results = []
    for b in range(batch):
        dets = []
        for k, grid in enumerate(grids):
            dets.extend(decode_grid(grid[b], anchors[k], k + 1, conf_threshold))
        results.append(nms(dets, nms_iou))
    return results


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# ---------------------------------------------------------------------------
# targets and loss

def _shape_iou(w1, h1, w2, h2) -> float:
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def assign_anchor(ann: BoxAnnotation, anchors, grid_sizes) -> tuple[int, int, int, int]:
    """Return (scale, anchor, u, v) responsible for ``ann``.

    The scale and anchor are chosen by the best shape IoU over all anchors; the
    cell is the one containing the box center at that scale.
    """
    best = max(
        ((k, a) for k in range(len(anchors)) for a in range(len(anchors[k]))),
        key=lambda ka: (_shape_iou(ann.w, ann.h, *anchors[ka[0]][ka[1]]), -ka[0], -ka[1]),
    )
    k, a = best
    gh, gw = grid_sizes[k]
    u = min(int(ann.cx * gw), gw - 1)
    v = min(int(ann.cy * gh), gh - 1)
    return k, a, u, v


def _canonical(anns: Sequence[BoxAnnotation]) -> list[BoxAnnotation]:
    return sorted(anns, key=lambda a: (-a.w * a.h, a.cx, a.cy, a.w, a.h, a.class_id))


def build_targets(annotations: Sequence[Sequence[BoxAnnotation]], anchors, grid_sizes,
                  num_classes: int, dtype=torch.float32) -> list[dict[str, torch.Tensor]]:
    """Encode ground truth into per-scale target tensors.

    Each scale gets ``obj`` [B, A, H, W] (responsibility mask), ``x``/``y`` cell
    offsets, ``w``/``h`` normalized sizes and ``cls`` [B, A, M, H, W] one-hot.
    When two boxes claim the same predictor, the larger box wins regardless of
    list order.
    """
    batch = len(annotations)
    targets = []
    for k, (gh, gw) in enumerate(grid_sizes):
        na = len(anchors[k])
        targets.append({
            "obj": torch.zeros(batch, na, gh, gw, dtype=torch.bool),
            "x": torch.zeros(batch, na, gh, gw, dtype=dtype),
            "y": torch.zeros(batch, na, gh, gw, dtype=dtype),
            "w": torch.ones(batch, na, gh, gw, dtype=dtype),
            "h": torch.ones(batch, na, gh, gw, dtype=dtype),
            "cls": torch.zeros(batch, na, num_classes, gh, gw, dtype=dtype),
        })
    for b, anns in enumerate(annotations):
        for ann in _canonical(anns):
            if not 0 <= ann.class_id < num_classes:
                raise ValidationError(
                    f"annotation class {ann.class_id} outside [0, {num_classes})")
            if ann.w <= 0 or ann.h <= 0:
                raise ValidationError(f"annotation has non-positive size {(ann.w, ann.h)}")
            k, a, u, v = assign_anchor(ann, anchors, grid_sizes)
            t = targets[k]
            if t["obj"][b, a, v, u]:
                continue
            gh, gw = grid_sizes[k]
            t["obj"][b, a, v, u] = True
            t["x"][b, a, v, u] = ann.cx * gw - u
            t["y"][b, a, v, u] = ann.cy * gh - v
            t["w"][b, a, v, u] = ann.w
            t["h"][b, a, v, u] = ann.h
            t["cls"][b, a, ann.class_id, v, u] = 1.0
    return targets


def encode_grid_logits(targets: dict[str, torch.Tensor], anchors_k, num_classes: int,
                       batch_index: int = 0, off_logit: float = -1e4) -> torch.Tensor:
    """Inverse of decoding: raw grid whose decode reproduces the encoded boxes."""
    obj = targets["obj"][batch_index]
    na, gh, gw = obj.shape
    eps = 1e-7
    g = torch.full((na, 5 + num_classes, gh, gw), off_logit, dtype=torch.float64)
    x = targets["x"][batch_index].double().clamp(eps, 1 - eps)
    y = targets["y"][batch_index].double().clamp(eps, 1 - eps)
    g[:, 0] = torch.log(x) - torch.log1p(-x)
    g[:, 1] = torch.log(y) - torch.log1p(-y)
    aw = torch.tensor([a[0] for a in anchors_k], dtype=torch.float64).view(na, 1, 1)
    ah = torch.tensor([a[1] for a in anchors_k], dtype=torch.float64).view(na, 1, 1)
    g[:, 2] = torch.log(targets["w"][batch_index].double() / aw)
    g[:, 3] = torch.log(targets["h"][batch_index].double() / ah)
    g[:, 4] = torch.where(obj, torch.tensor(-off_logit, dtype=torch.float64),
                          torch.tensor(off_logit, dtype=torch.float64))
    cls = targets["cls"][batch_index].double()
    g[:, 5:] = torch.where(cls > 0.5, -off_logit, off_logit)
    return g.reshape(na * (5 + num_classes), gh, gw)


@dataclass
class DetectionLossParts:
    xy: torch.Tensor
    wh: torch.Tensor
    obj: torch.Tensor
    noobj: torch.Tensor
    cls: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.xy + self.wh + self.obj + self.noobj + self.cls


def detection_loss(grids: Sequence[torch.Tensor], annotations: Sequence[Sequence[BoxAnnotation]],
                   anchors, num_classes: int, lambda_coord: float = 5.0,
                   lambda_noobj: float = 0.5) -> DetectionLossParts:
    """Sum-squared YOLO loss over all predictors, divided by the batch size.

    ``lambda_coord`` weights the center and sqrt-size terms; ``lambda_noobj``
    weights the confidence term of predictors not responsible for any box.
    """
    batch = grids[0].shape[0]
    if len(annotations) != batch:
        raise ValidationError(f"{len(annotations)} annotation lists for a batch of {batch}")
    grid_sizes = [tuple(g.shape[-2:]) for g in grids]
    targets = build_targets(annotations, anchors, grid_sizes, num_classes, dtype=grids[0].dtype)
    zero = grids[0].new_zeros(())
    xy, wh, obj_l, noobj_l, cls_l = zero, zero, zero, zero, zero
    for k, grid in enumerate(grids):
        na = len(anchors[k])
        _, ch, gh, gw = grid.shape
        if ch != na * (5 + num_classes):
            raise ShapeError(f"grid {k} has {ch} channels, expected {na * (5 + num_classes)}")
        p = grid.view(batch, na, 5 + num_classes, gh, gw)
        t = targets[k]
        m = t["obj"]
        aw = grid.new_tensor([a[0] for a in anchors[k]]).view(1, na, 1, 1).expand(batch, na, gh, gw)
        ah = grid.new_tensor([a[1] for a in anchors[k]]).view(1, na, 1, 1).expand(batch, na, gh, gw)
        conf = torch.sigmoid(p[:, :, 4])
        noobj_l = noobj_l + (conf[~m] ** 2).sum()
        if not m.any():
            continue
        po = p.permute(0, 1, 3, 4, 2)[m]  # [n_obj, 5 + M]
        px, py = torch.sigmoid(po[:, 0]), torch.sigmoid(po[:, 1])
        # sqrt(anchor * exp(t)) written as sqrt(anchor) * exp(t / 2) to stay finite
        sw = aw[m].sqrt() * torch.exp(po[:, 2].clamp(-20.0, 20.0) / 2)
        sh = ah[m].sqrt() * torch.exp(po[:, 3].clamp(-20.0, 20.0) / 2)
        xy = xy + ((px - t["x"][m]) ** 2 + (py - t["y"][m]) ** 2).sum()
        wh = wh + ((sw - t["w"][m].sqrt()) ** 2 + (sh - t["h"][m].sqrt()) ** 2).sum()
        obj_l = obj_l + ((conf[m] - 1.0) ** 2).sum()
        cls_t = t["cls"].permute(0, 1, 3, 4, 2)[m]
        cls_l = cls_l + ((torch.sigmoid(po[:, 5:]) - cls_t) ** 2).sum()
    return DetectionLossParts(
        xy=lambda_coord * xy / batch,
        wh=lambda_coord * wh / batch,
        obj=obj_l / batch,
        noobj=lambda_noobj * noobj_l / batch,
        cls=cls_l / batch,
    )
