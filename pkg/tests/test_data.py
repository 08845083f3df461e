import json
from pathlib import Path

import numpy as np
import pytest

from dayolo.data import (CLASS_COLORS, CorruptionSpec, DetectionDataset, SceneSpec, _rng,
                         apply_corruption, generate_synthetic_domain_pair, load_dataset,
                         luminance_std, render_scene, save_dataset)
from dayolo.model import BoxAnnotation, ImageSample, ValidationError

SMALL = {"train_s": 8, "train_t": 8, "val_s": 4, "val_t": 4}
SCENE = SceneSpec(image_size=64)


def _tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def _strip_created(doc):
    if isinstance(doc, dict):
        return {k: _strip_created(v) for k, v in doc.items() if k != "created"}
    return doc


@pytest.fixture(scope="module")
def pair(tmp_path_factory):
    root = tmp_path_factory.mktemp("pair")
    generate_synthetic_domain_pair(root, SCENE, CorruptionSpec.foggy(), SMALL, seed=11)
    return root


def test_generation_is_deterministic(pair, tmp_path):
    generate_synthetic_domain_pair(tmp_path, SCENE, CorruptionSpec.foggy(), SMALL, seed=11)
    assert _tree_bytes(pair) == _tree_bytes(tmp_path)
    for m in pair.rglob("manifest.json"):
        other = tmp_path / m.relative_to(pair)
        assert _strip_created(json.loads(m.read_text())) == _strip_created(json.loads(other.read_text()))


def test_split_cardinality(pair):
    doc = json.loads((pair / "manifest.json").read_text())
    counts = {name: len(json.loads((pair / s["manifest"]).read_text())["entries"])
              for name, s in doc["splits"].items()}
    assert counts == {"source/train": 8, "target/train": 8, "source/val": 4, "target/val": 4}


def test_layout_and_unsupervised_target_train(pair):
    for split in ("source/train", "source/val", "target/val"):
        assert len(list((pair / split / "labels").glob("*.json"))) == (8 if "train" in split else 4)
        assert len(list((pair / split / "images").glob("*.png"))) == (8 if "train" in split else 4)
    assert not (pair / "target/train/labels").exists()
    tt = load_dataset(pair / "manifest.json", "target/train")
    assert all(s.annotations == [] and s.domain == 1 for s in tt.samples)
    tv = load_dataset(pair / "manifest.json", "target-val")
    assert any(s.annotations for s in tv.samples)


def test_identity_corruption_gives_identical_val_images(tmp_path):
    generate_synthetic_domain_pair(tmp_path, SCENE, CorruptionSpec(), SMALL, seed=3)
    for src in sorted((tmp_path / "source/val/images").glob("*.png")):
        tgt = tmp_path / "target/val/images" / src.name
        assert src.read_bytes() == tgt.read_bytes()


def test_paired_val_scenes_share_annotations(pair):
    sv = load_dataset(pair / "manifest.json", "source/val")
    tv = load_dataset(pair / "manifest.json", "target/val")
    for a, b in zip(sv.samples, tv.samples):
        assert a.annotations == b.annotations


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    samples = []
    for i in range(3):
        anns = [BoxAnnotation(int(rng.integers(0, 3)), *rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.3, 2))
                for _ in range(3)]
        px = (rng.integers(0, 256, (3, 32, 64)) / 255.0).astype(np.float32)
        samples.append(ImageSample(px, 0, anns, f"img{i}"))
    ds = DetectionDataset(samples, ("a", "b", "c"))
    back = load_dataset(save_dataset(ds, tmp_path / "ds"))
    for s, t in zip(ds.samples, back.samples):
        assert s.id == t.id
        np.testing.assert_array_equal(s.pixels, t.pixels)
        for a, b in zip(s.annotations, t.annotations):
            assert a.class_id == b.class_id
            assert (a.cx, a.cy, a.w, a.h) == pytest.approx((b.cx, b.cy, b.w, b.h), abs=1e-9)


def test_empty_dataset_manifest(tmp_path):
    path = save_dataset(DetectionDataset([], ("a",)), tmp_path / "empty")
    doc = json.loads(path.read_text())
    assert doc["entries"] == []
    assert len(load_dataset(path)) == 0


def test_two_saves_identical_modulo_timestamp(pair, tmp_path):
    ds = load_dataset(pair / "manifest.json", "source/val")
    a = json.loads(save_dataset(ds, tmp_path / "a").read_text())
    b = json.loads(save_dataset(ds, tmp_path / "b").read_text())
    assert _strip_created(a) == _strip_created(b)


def test_missing_image_is_io_error(pair, tmp_path):
    ds = load_dataset(pair / "manifest.json", "source/val")
    path = save_dataset(ds, tmp_path / "ds")
    (tmp_path / "ds/images/000001.png").unlink()
    with pytest.raises(FileNotFoundError, match="000001.png"):
        load_dataset(path)


def test_bad_class_is_validation_error(tmp_path):
    px = np.zeros((3, 32, 32), np.float32)
    ds = DetectionDataset([ImageSample(px, 0, [BoxAnnotation(0, 0.5, 0.5, 0.2, 0.2)], "x")], ("a", "b"))
    path = save_dataset(ds, tmp_path / "ds")
    label = tmp_path / "ds/labels/x.json"
    label.write_text(json.dumps({"boxes": [{"class": 2, "cx": 0.5, "cy": 0.5, "w": 0.2, "h": 0.2}]}))
    with pytest.raises(ValidationError, match="record 0"):
        load_dataset(path)
    label.write_text(json.dumps({"boxes": [{"class": 0, "cx": 0.5, "cy": 0.5, "w": 0.0, "h": 0.2}]}))
    with pytest.raises(ValidationError, match="record 0"):
        load_dataset(path)


def test_boxes_clamped_on_load(tmp_path):
    px = np.zeros((3, 32, 32), np.float32)
    path = save_dataset(DetectionDataset([ImageSample(px, 0, [], "x")], ("a",)), tmp_path / "ds")
    (tmp_path / "ds/labels/x.json").write_text(
        json.dumps({"boxes": [{"class": 0, "cx": 0.95, "cy": 0.5, "w": 0.2, "h": 0.2}]}))
    a = load_dataset(path).samples[0].annotations[0]
    assert a.cx + a.w / 2 == pytest.approx(1.0)
    assert a.cx - a.w / 2 == pytest.approx(0.85)


@pytest.mark.parametrize("seed", range(15))
def test_annotations_cover_rendered_objects(seed):
    scene = SceneSpec(image_size=128)
    img, anns = render_scene(scene, _rng(seed, 1, 0))
    for a in anns:
        if a.class_id == 2:
            continue
        color = np.array(CLASS_COLORS[a.class_id])
        mask = np.all(img == color, axis=2)
        x0, x1 = round((a.cx - a.w / 2) * 128), round((a.cx + a.w / 2) * 128)
        y0, y1 = round((a.cy - a.h / 2) * 128), round((a.cy + a.h / 2) * 128)
        # count object-colored pixels around the box and how many fall inside it
        wx0, wx1 = max(x0 - 6, 0), min(x1 + 6, 128)
        wy0, wy1 = max(y0 - 6, 0), min(y1 + 6, 128)
        window = mask[wy0:wy1, wx0:wx1].sum()
        inside = mask[y0:y1, x0:x1].sum()
        assert window > 0
        assert inside / window >= 0.9


@pytest.mark.parametrize("seed", range(5))
def test_fog_monotonically_lowers_contrast(seed):
    img, _ = render_scene(SceneSpec(), _rng(seed, 9, 0))
    stds = [luminance_std(apply_corruption(img, CorruptionSpec(fog_strength=b)))
            for b in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)]
    assert all(b < a for a, b in zip(stds, stds[1:]))


def test_object_count_and_bounds():
    scene = SceneSpec(objects_per_image=(2, 3))
    for i in range(20):
        _, anns = render_scene(scene, _rng(5, 1, i))
        assert len(anns) <= 3
        for a in anns:
            assert 0 <= a.cx - a.w / 2 and a.cx + a.w / 2 <= 1
            assert 0 <= a.cy - a.h / 2 and a.cy + a.h / 2 <= 1


def test_spec_validation():
    with pytest.raises(ValidationError):
        SceneSpec(image_size=100)
    with pytest.raises(ValidationError):
        CorruptionSpec(fog_strength=-1)
    with pytest.raises(ValidationError):
        generate_synthetic_domain_pair("/tmp/unused", counts={"train_s": 0})
