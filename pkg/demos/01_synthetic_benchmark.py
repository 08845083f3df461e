"""
A clear-to-fog detection benchmark
==================================

Renders a handful of scenes with three shape classes, then shows the same
scenes under the target-domain corruption (fog that thickens toward the
bottom of the frame, a cool color cast, blur and sensor noise).
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from dayolo.data import (CorruptionSpec, SceneSpec, generate_synthetic_domain_pair,
                         load_dataset, luminance_std)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "bench"

# A small pair: 16 training images per domain and 8 paired validation scenes.
manifest = generate_synthetic_domain_pair(
    out, SceneSpec(image_size=128), CorruptionSpec.foggy(),
    {"train_s": 16, "train_t": 16, "val_s": 8, "val_t": 8}, seed=7)
print("root manifest:", manifest)

# Validation scenes are shared between domains, so the two val splits differ
# only by the corruption.  Target train images ship without labels.
src = load_dataset(manifest, "source/val")
tgt = load_dataset(manifest, "target/val")
print("target/train annotated:", load_dataset(manifest, "target/train").annotated)

for a, b in zip(src.samples[:3], tgt.samples[:3]):
    print(f"{a.id}: {len(a.annotations)} objects, "
          f"contrast {luminance_std(a.pixels.transpose(1, 2, 0) * 255):.3f} -> "
          f"{luminance_std(b.pixels.transpose(1, 2, 0) * 255):.3f}")

# Top row clear, bottom row foggy.
rows = [np.concatenate([s.pixels.transpose(1, 2, 0) for s in ds.samples[:6]], axis=1)
        for ds in (src, tgt)]
montage = (np.concatenate(rows, axis=0) * 255).astype(np.uint8)
Image.fromarray(montage).save(out / "montage.png")
print("wrote", out / "montage.png")
