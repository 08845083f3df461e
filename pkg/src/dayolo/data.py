"""Synthetic clean-vs-foggy detection benchmark and on-disk dataset IO.

Layout written by :func:`generate_synthetic_domain_pair`::

    root/manifest.json
    root/{source,target}/{train,val}/manifest.json
    root/{source,target}/{train,val}/images/*.png
    root/{source,target}/{train,val}/labels/*.json   (annotated splits only)

Label files hold ``{"boxes": [{"class", "cx", "cy", "w", "h"}]}`` in normalized
center-size coordinates.  The target training split is written without labels.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .model import BoxAnnotation, ImageSample, ValidationError

MANIFEST_FORMAT = "dayolo-manifest/1"

CLASS_COLORS = ((210, 50, 50), (60, 180, 70), (50, 80, 210))
PALETTE = ((120, 110, 100), (95, 100, 112), (140, 130, 118), (104, 118, 104), (128, 120, 132))


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    class_names: tuple[str, ...] = ("disc", "square", "triangle")
    objects_per_image: tuple[int, int] = (1, 4)
    object_scale: tuple[float, float] = (0.1, 0.3)
    palette: tuple = PALETTE
    clutter_density: float = 0.5  # expected clutter strokes per 32x32 patch

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 32:
            raise ValidationError(f"image_size {self.image_size} is not a multiple of 32")
        if len(self.class_names) > len(CLASS_COLORS):
            raise ValidationError(f"at most {len(CLASS_COLORS)} classes are renderable")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValidationError(f"bad object count range {self.objects_per_image}")
        lo, hi = self.object_scale
        if not 0 < lo <= hi < 1:
            raise ValidationError(f"bad object scale range {self.object_scale}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class CorruptionSpec:
    fog_strength: float = 0.0
    blur_radius: float = 0.0
    color_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    color_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.fog_strength < 0 or self.blur_radius < 0 or self.noise_sigma < 0:
            raise ValidationError("fog strength, blur radius and noise sigma must be >= 0")

    @classmethod
    def foggy(cls) -> "CorruptionSpec":
        """Default target-domain corruption of the benchmark."""
        return cls(fog_strength=0.6, blur_radius=0.8, color_gain=(0.95, 0.97, 1.05),
                   color_bias=(0.0, 0.0, 0.02), noise_sigma=0.02)


@dataclass
class DetectionDataset:
    samples: list[ImageSample]
    class_names: tuple[str, ...]
    domain: int = 0
    name: str = "dataset"
    annotated: bool = True
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> ImageSample:
        return self.samples[i]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def spec_hash(*specs) -> str:
    blob = json.dumps([dataclasses.asdict(s) for s in specs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, *keys])


# ---------------------------------------------------------------------------
# rendering

def _draw_object(draw: ImageDraw.ImageDraw, cls: int, x0: int, y0: int, x1: int, y1: int, color):
    # pixel extent is [x0, x1] x [y0, y1] inclusive
    if cls == 0:
        draw.ellipse([x0, y0, x1, y1], fill=color)
    elif cls == 1:
        draw.rectangle([x0, y0, x1, y1], fill=color)
    else:
        draw.polygon([((x0 + x1) / 2, y0), (x1, y1), (x0, y1)], fill=color)


def render_scene(scene: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[BoxAnnotation]]:
    """Render one clean scene; returns uint8 [H, W, 3] and its annotations."""
    s = scene.image_size
    top, bottom = rng.choice(len(scene.palette), size=2)
    c0 = np.asarray(scene.palette[top], dtype=np.float64)
    c1 = np.asarray(scene.palette[bottom], dtype=np.float64)
    ramp = np.linspace(0.0, 1.0, s)[:, None, None]
    bg = (c0 * (1 - ramp) + c1 * ramp) * np.ones((1, s, 1))
    img = Image.fromarray(np.clip(np.round(bg), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)

    n_clutter = rng.poisson(scene.clutter_density * (s / 32) ** 2)
    for _ in range(n_clutter):
        g = int(rng.integers(60, 200))
        x, y = rng.integers(0, s, size=2)
        dx, dy = rng.integers(-s // 6, s // 6 + 1, size=2)
        draw.line([int(x), int(y), int(x + dx), int(y + dy)], fill=(g, g, g),
                  width=int(rng.integers(1, 3)))

    lo, hi = scene.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    placed: list[tuple[int, int, int, int]] = []
    anns = []
    for _ in range(n_obj):
        for _attempt in range(30):
            cls = int(rng.integers(0, scene.num_classes))
            bw = int(round(rng.uniform(*scene.object_scale) * s))
            bh = int(round(bw * rng.uniform(0.75, 1.33)))
            bw, bh = max(bw, 4), min(max(bh, 4), s - 2)
            x0 = int(rng.integers(0, s - bw + 1))
            y0 = int(rng.integers(0, s - bh + 1))
            box = (x0, y0, x0 + bw, y0 + bh)
            if all(box[2] + 2 <= p[0] or p[2] + 2 <= box[0] or box[3] + 2 <= p[1]
                   or p[3] + 2 <= box[1] for p in placed):
                break
        else:
            continue
        placed.append(box)
        _draw_object(draw, cls, x0, y0, x0 + bw - 1, y0 + bh - 1, CLASS_COLORS[cls])
        anns.append(BoxAnnotation(cls, (x0 + bw / 2) / s, (y0 + bh / 2) / s, bw / s, bh / s))
    return np.asarray(img, dtype=np.uint8).copy(), anns


def apply_corruption(image: np.ndarray, corruption: CorruptionSpec,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Fog, color shift, blur and noise on a uint8 [H, W, 3] image.

    Fog blends toward white with ``t = fog * (0.3 + 0.7 * y / H)``.  The identity
    corruption returns the input bytes unchanged.
    """
    c = corruption
    out = image.astype(np.float64) / 255.0
    h = out.shape[0]
    if c.fog_strength > 0:
        t = c.fog_strength * (0.3 + 0.7 * np.arange(h) / h)
        t = np.clip(t, 0.0, 1.0)[:, None, None]
        out = (1 - t) * out + t
    if tuple(c.color_gain) != (1.0, 1.0, 1.0) or tuple(c.color_bias) != (0.0, 0.0, 0.0):
        out = out * np.asarray(c.color_gain) + np.asarray(c.color_bias)
    out8 = np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8)
    if c.blur_radius > 0:
        out8 = np.asarray(Image.fromarray(out8).filter(ImageFilter.GaussianBlur(c.blur_radius)))
    if c.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        noisy = out8 / 255.0 + rng.normal(0.0, c.noise_sigma, size=out8.shape)
        out8 = np.clip(np.round(noisy * 255.0), 0, 255).astype(np.uint8)
    return out8


def luminance_std(image: np.ndarray) -> float:
    """Mean over rows of the per-row luminance standard deviation.

    Fog is constant along a row, so this measures the contrast it washes out
    without counting the vertical fog ramp itself as contrast.
    """
    rgb = image.astype(np.float64) / 255.0
    return float((rgb @ np.array([0.299, 0.587, 0.114])).std(axis=1).mean())


def _to_sample(image: np.ndarray, domain: int, anns, sid: str) -> ImageSample:
    pixels = np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32) / 255.0
    return ImageSample(pixels, domain, list(anns), sid)


def generate_synthetic_domain_pair(out_dir, scene: SceneSpec = SceneSpec(),
                                   corruption: CorruptionSpec = CorruptionSpec.foggy(),
                                   counts: dict | None = None, seed: int = 0) -> Path:
    """Write source/target train/val splits under ``out_dir``; returns the root manifest path.

    Source and target training images come from disjoint scene streams.  The
    validation scene stream is shared, so target val image i is the corrupted
    version of source val image i.
    """
    counts = {"train_s": 800, "train_t": 800, "val_s": 200, "val_t": 200, **(counts or {})}
    for key, n in counts.items():
        if n < 1:
            raise ValidationError(f"count {key} must be >= 1, got {n}")
    root = Path(out_dir)
    streams = {"source/train": 1, "target/train": 2, "val": 3}

    def build(name, stream, n, corrupt, domain, annotated):
        samples = []
        for i in range(n):
            img, anns = render_scene(scene, _rng(seed, stream, i))
            if corrupt:
                img = apply_corruption(img, corruption, _rng(seed, stream, i, 7))
            samples.append(_to_sample(img, domain, anns if annotated else [], f"{i:06d}"))
        return DetectionDataset(samples, scene.class_names, domain, name, annotated)

    splits = {
        "source/train": build("source/train", streams["source/train"], counts["train_s"], False, 0, True),
        "source/val": build("source/val", streams["val"], counts["val_s"], False, 0, True),
        "target/train": build("target/train", streams["target/train"], counts["train_t"], True, 1, False),
        "target/val": build("target/val", streams["val"], counts["val_t"], True, 1, True),
    }
    h = spec_hash(scene, corruption)
    root_manifest = {
        "format": MANIFEST_FORMAT,
        "class_names": list(scene.class_names),
        "seed": seed,
        "spec_hash": h,
        "scene": dataclasses.asdict(scene),
        "corruption": dataclasses.asdict(corruption),
        "counts": counts,
        "splits": {},
    }
    for name, ds in splits.items():
        ds.meta = {"seed": seed, "spec_hash": h}
        path = save_dataset(ds, root / name)
        root_manifest["splits"][name] = {
            "manifest": path.relative_to(root).as_posix(),
            "domain": ds.domain,
            "annotated": ds.annotated,
            "role": name.split("/")[1],
            "count": len(ds),
        }
    root_manifest["created"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    path = root / "manifest.json"
    _write_json(path, root_manifest)
    return path


# ---------------------------------------------------------------------------
# IO

def _write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def save_dataset(dataset: DetectionDataset, directory) -> Path:
    directory = Path(directory)
    digest = hashlib.sha256()
    entries = []
    try:
        (directory / "images").mkdir(parents=True, exist_ok=True)
        if dataset.annotated:
            (directory / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {directory}: {e}") from e
    for i, s in enumerate(dataset.samples):
        sid = s.id or f"{i:06d}"
        img_rel = f"images/{sid}.png"
        arr = np.clip(np.round(s.pixels.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        try:
            Image.fromarray(arr).save(directory / img_rel)
        except OSError as e:
            raise OSError(f"cannot write {directory / img_rel}: {e}") from e
        digest.update(arr.tobytes())
        entry = {"id": sid, "image": img_rel, "label": None, "domain": s.domain}
        if dataset.annotated:
            label_rel = f"labels/{sid}.json"
            doc = {"boxes": [{"class": a.class_id, "cx": a.cx, "cy": a.cy, "w": a.w, "h": a.h}
                             for a in s.annotations]}
            text = json.dumps(doc, sort_keys=True)
            try:
                (directory / label_rel).write_text(text + "\n")
            except OSError as e:
                raise OSError(f"cannot write {directory / label_rel}: {e}") from e
            digest.update(text.encode())
            entry["label"] = label_rel
        entries.append(entry)
    manifest = {
        "format": MANIFEST_FORMAT,
        "name": dataset.name,
        "domain": dataset.domain,
        "annotated": dataset.annotated,
        "class_names": list(dataset.class_names),
        "entries": entries,
        "content_hash": digest.hexdigest(),
        "meta": dataset.meta,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = directory / "manifest.json"
    _write_json(path, manifest)
    return path


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as e:
        raise FileNotFoundError(f"missing file: {path}") from e


def resolve_split(manifest_path, split: str | None = None) -> Path:
    """Path of a split manifest, given either a split manifest or a root manifest plus split name."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = _read_json(path)
    if "splits" not in doc:
        return path
    if split is None:
        raise ValidationError(f"{path} is a root manifest; choose one of {sorted(doc['splits'])}")
    key = split.replace("-", "/")
    if key not in doc["splits"]:
        raise ValidationError(f"unknown split {split!r}; choose one of {sorted(doc['splits'])}")
    return path.parent / doc["splits"][key]["manifest"]


def load_dataset(manifest_path, split: str | None = None) -> DetectionDataset:
    """Load a split into memory.  Boxes are clamped to the unit square.

    Unannotated splits (the target training view) load with empty annotation
    lists even if label files are present.
    """
    path = resolve_split(manifest_path, split)
    doc = _read_json(path)
    base = path.parent
    class_names = tuple(doc["class_names"])
    m = len(class_names)
    annotated = bool(doc.get("annotated", True))
    samples = []
    for idx, entry in enumerate(doc["entries"]):
        img_path = base / entry["image"]
        try:
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except FileNotFoundError as e:
            raise FileNotFoundError(f"missing image for record {idx}: {img_path}") from e
        anns = []
        if annotated and entry.get("label"):
            label_path = base / entry["label"]
            for b in _read_json(label_path)["boxes"]:
                anns.append(_parse_box(b, m, idx, label_path))
        domain = int(entry.get("domain", doc.get("domain", 0)))
        samples.append(_to_sample(arr, domain, anns, str(entry["id"])))
    return DetectionDataset(samples, class_names, int(doc.get("domain", 0)),
                            doc.get("name", path.parent.name), annotated, doc.get("meta", {}))


def _parse_box(b: dict, num_classes: int, idx: int, path: Path) -> BoxAnnotation:
    cls = int(b["class"])
    cx, cy, w, h = (float(b[k]) for k in ("cx", "cy", "w", "h"))
    if not 0 <= cls < num_classes:
        raise ValidationError(f"record {idx} ({path}): class {cls} outside [0, {num_classes})")
    if w <= 0 or h <= 0:
        raise ValidationError(f"record {idx} ({path}): non-positive box size ({w}, {h})")
    x0, y0 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
    x1, y1 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
    if x1 <= x0 or y1 <= y0:
        raise ValidationError(f"record {idx} ({path}): box lies outside the image")
    if (x0, y0, x1, y1) != (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2):
        cx, cy, w, h = (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0
    return BoxAnnotation(cls, cx, cy, w, h)


def stack_pixels(samples: Sequence[ImageSample]):
    import torch

    return torch.from_numpy(np.stack([s.pixels for s in samples]))
