"""
Source-only versus adapted training, small scale
================================================

Pretrains a detector on clear images, then continues either without
adaptation or with image-level, instance-level and consensus alignment
against unlabeled foggy images.  Both runs are scored on foggy validation
images, features are exported for an embedding plot, and the adapted
checkpoint is run on one image.

The sizes here finish in a few minutes on one CPU core; expect noisy
numbers.  The acceptance suite runs the full-size version over three seeds.
"""
import json
import subprocess
import sys
from pathlib import Path

from dayolo.data import CorruptionSpec, SceneSpec, generate_synthetic_domain_pair, load_dataset
from dayolo.evaluation import evaluate_detector, export_features
from dayolo.training import TrainConfig, fit

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "adapt"
manifest = generate_synthetic_domain_pair(
    out / "data", SceneSpec(), CorruptionSpec.foggy(),
    {"train_s": 200, "train_t": 200, "val_s": 60, "val_t": 60}, seed=3)
split = {s: load_dataset(manifest, s) for s in ("source/train", "target/train", "source/val", "target/val")}

# Stage 1: supervised training on the clear domain only.
source_only = dict(image_alignment="none", msia=False, mlcr=False)
pre = fit(TrainConfig(steps=800, seed=0, **source_only), split["source/train"], out_dir=out / "pre")

# Stage 2: the same number of further steps, with and without alignment.
runs = {
    "source-only": TrainConfig(steps=400, seed=0, init_from=str(pre.checkpoint), **source_only),
    "adapted": TrainConfig(steps=400, seed=0, init_from=str(pre.checkpoint)),
}
for name, cfg in runs.items():
    res = fit(cfg, split["source/train"], split["target/train"], out / name,
              {"target/val": split["target/val"]})
    maps = {s: evaluate_detector(res.model.detector, split[s]).mAP for s in ("source/val", "target/val")}
    print(f"{name:12s} source mAP {maps['source/val']:.3f}  target mAP {maps['target/val']:.3f}")
    export_features(res.checkpoint, [split["source/val"], split["target/val"]], out / f"{name}_features.csv")

# Figures and a single-image detection go through the command line tool,
# which only reads files written above.
subprocess.run(["dayolo", "plot", "--metrics", str(out / "adapted/metrics.jsonl"),
                "--features", str(out / "source-only_features.csv"), str(out / "adapted_features.csv"),
                "--out-dir", str(out / "figures")], check=True)
image = out / "data/target/val/images/000000.png"
done = subprocess.run(["dayolo", "detect", "--ckpt", str(out / "adapted"), "--image", str(image),
                       "--manifest", str(manifest), "--conf", "0.25", "--out-png", str(out / "detect.png")],
                      check=True, capture_output=True, text=True)
print(json.dumps(json.loads(done.stdout)["detections"][:3], indent=1))
