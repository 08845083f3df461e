"""Composite objective and the paired source/target training loop."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .adaptation import (SOURCE, TARGET, DomainAdaptation, ScaleWeights, boxes_from_annotations,
                         mlcr_loss, msia_loss, ria_loss, select_detections)
from .grl import GrlConfig
from .model import Detector, DetectorConfig, ImageSample, ValidationError, detection_loss

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, message: str, bundles: Sequence["LossBundle"] = ()):
        super().__init__(message)
        self.bundles = list(bundles)


@dataclass
class TrainConfig:
    num_classes: int = 3
    image_size: int = 128
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    anchors: tuple | None = None
    # adaptation
    lambda_da: float = 0.01
    image_alignment: str = "ria"  # "ria", "eia" or "none"
    ria_weights: tuple[float, float, float] = (1.0, 0.5, 0.1)
    eia_weight: float | None = None  # None: mean of ria_weights
    msia: bool = True
    mlcr: bool = True
    msia_source_gt: bool = False
    grl_lambda: float = 1.0
    grl_schedule: str = "constant"
    grl_gamma: float = 10.0
    msia_conf: float = 0.5
    msia_nms: float = 0.5
    msia_top_k: int = 8
    pool_size: int = 3
    # detection loss
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    # optimization
    lr_backbone: float = 0.001
    lr_rest: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    grad_clip: float | None = 10.0
    steps: int = 1000
    accumulate: int = 1
    seed: int = 0
    init_from: str | None = None  # checkpoint whose detector weights start training
    # evaluation / logging
    eval_interval: int = 0
    eval_conf: float = 0.05
    eval_nms: float = 0.5

    def __post_init__(self):
        if self.lambda_da < 0:
            raise ValidationError(f"lambda_da must be >= 0, got {self.lambda_da}")
        if self.image_alignment not in ("ria", "eia", "none"):
            raise ValidationError(f"image_alignment must be ria, eia or none, got {self.image_alignment!r}")
        if self.accumulate < 1 or self.steps < 0:
            raise ValidationError("accumulate must be >= 1 and steps >= 0")
        self.widths = tuple(self.widths)
        self.ria_weights = tuple(self.ria_weights)
        if self.anchors is not None:
            self.anchors = tuple(tuple(tuple(a) for a in s) for s in self.anchors)
        self.scale_weights()

    @property
    def adaptation_on(self) -> bool:
        return self.image_alignment != "none" or self.msia or self.mlcr

    def scale_weights(self) -> ScaleWeights:
        if self.image_alignment == "eia":
            w = self.eia_weight if self.eia_weight is not None else sum(self.ria_weights) / 3
            return ScaleWeights.equal(w)
        return ScaleWeights(*self.ria_weights, mode="ria")

    def detector_config(self) -> DetectorConfig:
        kw = dict(num_classes=self.num_classes, widths=self.widths)
        if self.anchors is not None:
            kw["anchors"] = self.anchors
        return DetectorConfig(**kw)

    def grl(self) -> GrlConfig:
        return GrlConfig(self.grl_lambda, self.grl_schedule, self.grl_gamma, max(self.steps, 1))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read a flat JSON or TOML config; ``DAYOLO_SEED`` overrides ``seed``."""
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            d = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            d = tomllib.loads(text)
        d = {k: v for k, v in d.items() if not isinstance(v, dict)} | d.get("train", {})
        if "DAYOLO_SEED" in os.environ:
            d["seed"] = int(os.environ["DAYOLO_SEED"])
        return cls.from_dict(d)


@dataclass
class LossBundle:
    step: int
    l_det: float
    l_ria: float
    l_msia: float
    l_mlcr: float
    l_total: float
    lambda_da: float
    n_instances: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class DAYolo(nn.Module):
    """Detector plus the training-only domain classifiers."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.detector = Detector(config.detector_config())
        self.adaptation = DomainAdaptation(self.detector.config.tap_channels, config.pool_size)

    def param_groups(self, config: TrainConfig) -> list[dict]:
        return [
            {"params": list(self.detector.backbone.parameters()), "lr": config.lr_backbone,
             "name": "backbone"},
            {"params": list(self.detector.heads.parameters()) + list(self.adaptation.parameters()),
             "lr": config.lr_rest, "name": "rest"},
        ]


def build_model(config: TrainConfig) -> DAYolo:
    torch.manual_seed(config.seed)
    return DAYolo(config)


def make_optimizer(model: DAYolo, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.param_groups(config), lr=config.lr_rest,
                           momentum=config.momentum, weight_decay=config.weight_decay)


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def compose_total_loss(l_det, l_ria, l_msia, l_mlcr, lambda_da: float):
    """``l_det + lambda_da * (l_ria + l_msia + l_mlcr)``; NaN in any part aborts."""
    parts = {"l_det": l_det, "l_ria": l_ria, "l_msia": l_msia, "l_mlcr": l_mlcr}
    values = {k: _scalar(v) for k, v in parts.items()}
    for name, v in values.items():
        if math.isnan(v):
            listing = ", ".join(f"{k}={x:.6g}" for k, x in values.items())
            raise DivergenceError(f"{name} is NaN ({listing})")
    return l_det + lambda_da * (l_ria + l_msia + l_mlcr)


def _check_pair(source: ImageSample, target: ImageSample | None) -> None:
    if source.domain != SOURCE:
        raise ValidationError(f"source image {source.id!r} has domain {source.domain}")
    if target is not None:
        if target.annotations:
            raise ValidationError(
                f"target image {target.id!r} carries annotations in the training path")
        if target.domain != TARGET:
            raise ValidationError(f"target image {target.id!r} has domain {target.domain}")


def compute_losses(model: DAYolo, source: ImageSample, target: ImageSample | None,
                   config: TrainConfig, lambda_grl: float = 1.0):
    """Forward one pair and return (total tensor, LossBundle without step)."""
    _check_pair(source, target)
    adapt = config.adaptation_on and target is not None
    samples = [source, target] if adapt else [source]
    x = torch.from_numpy(np.stack([s.pixels for s in samples]))
    det = model.detector
    feats, grids = det(x)
    l_det = detection_loss([g[:1] for g in grids], [source.annotations], det.anchors,
                           det.config.num_classes, config.lambda_coord, config.lambda_noobj).total
    zero = l_det.new_zeros(())
    l_ria = l_msia = l_mlcr = zero
    n_inst = 0
    if adapt:
        batch = len(samples)
        labels = torch.tensor([SOURCE, TARGET])
        weights = config.scale_weights()
        need_maps = config.image_alignment != "none" or config.mlcr
        need_inst = config.msia or config.mlcr
        boxes = [[[] for _ in grids] for _ in samples]
        if need_inst:
            picked = select_detections([g.detach() for g in grids], det.anchors,
                                       config.msia_conf, config.msia_nms, config.msia_top_k)
            boxes = [[[d.box for d in per] for per in img] for img in picked]
            if config.msia_source_gt:
                sizes = [tuple(g.shape[-2:]) for g in grids]
                boxes[0] = boxes_from_annotations(source.annotations, det.anchors, sizes)
        out = model.adaptation(feats, boxes, lambda_grl, with_images=need_maps,
                               with_instances=need_inst)
        n_inst = int(out.instance_probs.numel())
        if config.image_alignment != "none":
            l_ria = ria_loss(out.prob_maps, labels, weights) / batch
        if config.msia:
            l_msia = msia_loss(out.instance_probs, out.image_index, out.scale_index, labels,
                               weights) / batch
        if config.mlcr:
            l_mlcr = mlcr_loss(out.prob_maps, out.instance_probs, out.image_index,
                               out.scale_index) / batch
    parts = [t.double() for t in (l_det, l_ria, l_msia, l_mlcr)]
    total = compose_total_loss(*parts, config.lambda_da)
    bundle = LossBundle(0, *(_scalar(p) for p in parts), _scalar(total), config.lambda_da, n_inst)
    return total, bundle


def train_step(source: ImageSample, target: ImageSample | None, model: DAYolo,
               config: TrainConfig, optimizer: torch.optim.Optimizer | None = None,
               step: int = 0, apply_update: bool = True) -> LossBundle:
    """One pair: forward, backward, and (unless accumulating) an SGD update.

    The returned bundle reflects the weights before the update.
    """
    model.train()
    lam = config.grl().value(step)
    total, bundle = compute_losses(model, source, target, config, lam)
    bundle.step = step
    if optimizer is not None:
        (total / config.accumulate).backward()
        if apply_update:
            if config.grad_clip:
                params = [p for g in optimizer.param_groups for p in g["params"]]
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            optimizer.zero_grad(set_to_none=True)
    return bundle


@dataclass
class FitResult:
    model: DAYolo
    bundles: list[LossBundle]
    evals: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    log_path: Path | None = None


def _order(rng: np.random.Generator, n: int):
    while True:
        yield from rng.permutation(n).tolist()


def fit(config: TrainConfig, source_dataset, target_dataset=None, out_dir=None,
        val_datasets: dict | None = None, model: DAYolo | None = None,
        progress: bool = False) -> FitResult:
    """Train on paired source/target images, cycling the shorter dataset.

    Without adaptation toggles the target data is never touched.  Writes
    ``metrics.jsonl`` and ``checkpoint.npz`` under ``out_dir`` when given.
    """
    from .checkpoint import save_checkpoint
    from .evaluation import evaluate_detector

    if len(source_dataset) == 0:
        raise ValidationError("source dataset is empty")
    if not any(s.annotations for s in source_dataset.samples):
        raise ValidationError("source dataset carries no annotations")
    use_target = config.adaptation_on
    if use_target and (target_dataset is None or len(target_dataset) == 0):
        raise ValidationError("adaptation needs a non-empty target dataset")
    model = model if model is not None else build_model(config)
    if config.init_from:
        from .checkpoint import load_into

        load_into(model, config.init_from, sections=("detector",))
    optimizer = make_optimizer(model, config)
    src_order = _order(np.random.default_rng([config.seed, 1]), len(source_dataset))
    tgt_order = (_order(np.random.default_rng([config.seed, 2]), len(target_dataset))
                 if use_target else None)
    torch.manual_seed(config.seed + 1)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "w")
    bundles: list[LossBundle] = []
    evals: list[dict] = []
    lr = {"lr_backbone": config.lr_backbone, "lr_rest": config.lr_rest}
    try:
        for step in range(config.steps):
            for micro in range(config.accumulate):
                src = source_dataset.samples[next(src_order)]
                tgt = target_dataset.samples[next(tgt_order)] if use_target else None
                if tgt is not None and tgt.annotations:
                    tgt = dataclasses.replace(tgt, annotations=[])
                b = train_step(src, tgt, model, config, optimizer, step,
                               apply_update=micro == config.accumulate - 1)
                if not math.isfinite(b.l_total) or b.l_total > DIVERGENCE_LIMIT:
                    tail = (bundles + [b])[-10:]
                    if out is not None:
                        (out / "divergence.json").write_text(
                            json.dumps([x.to_dict() for x in tail], indent=2))
                    raise DivergenceError(
                        f"l_total={b.l_total} at step {step}; last bundles: "
                        + json.dumps([x.to_dict() for x in tail]), tail)
                bundles.append(b)
                if log_fh:
                    log_fh.write(json.dumps({**b.to_dict(), **lr, "micro": micro}) + "\n")
            if progress and step % 100 == 0:
                log.info("step %d  l_total %.3f  l_det %.3f  l_ria %.3f  l_msia %.3f  l_mlcr %.3f",
                         step, b.l_total, b.l_det, b.l_ria, b.l_msia, b.l_mlcr)
            if config.eval_interval and val_datasets and (step + 1) % config.eval_interval == 0:
                rec = {"step": step + 1, "eval": {
                    name: evaluate_detector(model.detector, ds, config.eval_conf,
                                            config.eval_nms).mAP
                    for name, ds in val_datasets.items()}}
                evals.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    ckpt = save_checkpoint(out / "checkpoint.npz", model, config, config.steps) if out else None
    return FitResult(model, bundles, evals, ckpt, out / "metrics.jsonl" if out else None)


def validate_log(path, tol: float = 1e-6) -> list[str]:
    """Check the composite-loss identity on every loss line of a metrics log.

    Returns a list of violation messages (empty when the log is consistent).
    """
    problems = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            rec = json.loads(line)
            if "l_total" not in rec:
                continue
            parts = [rec[k] for k in ("l_det", "l_ria", "l_msia", "l_mlcr", "l_total")]
            if not all(math.isfinite(p) for p in parts):
                problems.append(f"line {n}: non-finite component")
                continue
            expect = rec["l_det"] + rec["lambda_da"] * (rec["l_ria"] + rec["l_msia"] + rec["l_mlcr"])
            if abs(expect - rec["l_total"]) > tol:
                problems.append(f"line {n}: l_total {rec['l_total']} != {expect}")
    return problems
