"""Command-line entry point: ``dayolo <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error (including bad usage), 2 I/O error,
3 training divergence.  Results go to stdout as JSON; logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .model import ValidationError

log = logging.getLogger("dayolo")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _checkpoint_path(ckpt) -> Path:
    p = Path(ckpt)
    if p.is_dir():
        p = p / "checkpoint.npz"
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p


def _manifest_for(args) -> Path:
    """``--manifest`` if given, else the dataset the checkpoint was trained on."""
    if args.manifest:
        return Path(args.manifest)
    run = _checkpoint_path(args.ckpt).parent / "run.json"
    if not run.is_file():
        raise ValidationError("no --manifest given and no run.json next to the checkpoint")
    return Path(json.loads(run.read_text())["manifest"])


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    from .data import CorruptionSpec, SceneSpec, generate_synthetic_domain_pair

    scene = SceneSpec(image_size=args.image_size,
                      objects_per_image=(args.min_objects, args.max_objects),
                      object_scale=(args.min_scale, args.max_scale),
                      clutter_density=args.clutter)
    if args.clean_target:
        corruption = CorruptionSpec()
    else:
        corruption = CorruptionSpec(args.fog, args.blur, tuple(args.color_gain),
                                    tuple(args.color_bias), args.noise)
    counts = {"train_s": args.train_source, "train_t": args.train_target,
              "val_s": args.val_source, "val_t": args.val_target}
    root = generate_synthetic_domain_pair(args.out, scene, corruption, counts, args.seed)
    _emit({"manifest": str(root)})
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_dataset
    from .training import TrainConfig, fit

    cfg = TrainConfig.from_file(args.config)
    data = _config_tables(args.config).get("data", {})
    manifest = args.manifest or data.get("manifest")
    out = args.out or data.get("out")
    if not manifest or not out:
        raise ValidationError("train needs a dataset manifest and an output directory "
                              "(--manifest/--out or a [data] table in the config)")
    base = Path(args.config).parent
    manifest = Path(manifest) if Path(manifest).is_absolute() or args.manifest else base / manifest
    out = Path(out) if Path(out).is_absolute() or args.out else base / out
    source = load_dataset(manifest, "source/train")
    target = load_dataset(manifest, "target/train") if cfg.adaptation_on else None
    vals = {}
    if cfg.eval_interval:
        vals = {s: load_dataset(manifest, s) for s in ("source/val", "target/val")}
    log.info("training %d steps into %s", cfg.steps, out)
    res = fit(cfg, source, target, out, vals, progress=True)
    (out / "run.json").write_text(json.dumps(
        {"manifest": str(manifest.resolve()), "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    last = res.bundles[-1].to_dict() if res.bundles else None
    _emit({"checkpoint": str(res.checkpoint), "metrics": str(res.log_path), "last": last})
    return EXIT_OK


def _config_tables(path) -> dict:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(path.read_text())


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .evaluation import evaluate_detector, render_table, write_table_json

    detector, _, _ = load_checkpoint(_checkpoint_path(args.ckpt))
    ds = load_dataset(_manifest_for(args), args.split)
    res = evaluate_detector(detector, ds, args.conf, args.nms)
    table = res.table(ds.class_names)
    table.update(split=ds.name, conf_threshold=args.conf, nms_iou=args.nms)
    if args.out:
        write_table_json(table, args.out)
    if args.pr_out:
        curves = {ds.class_names[c]: {"recall": r.tolist(), "precision": p.tolist()}
                  for c, (r, p) in res.curves.items()}
        write_table_json({"split": ds.name, "curves": curves}, args.pr_out)
    print(render_table(table), file=sys.stderr)
    _emit(table)
    return EXIT_OK


def cmd_detect(args) -> int:
    import torch
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .model import decode_detections

    detector, _, header = load_checkpoint(_checkpoint_path(args.ckpt))
    img = np.asarray(Image.open(args.image).convert("RGB"))
    h, w = img.shape[:2]
    if h % 32 or w % 32:
        raise ValidationError(f"image size {w}x{h} is not a multiple of 32")
    x = torch.from_numpy(img.transpose(2, 0, 1).astype(np.float32)[None] / 255.0)
    with torch.no_grad():
        _, grids = detector(x)
    dets = decode_detections(grids, detector.anchors, args.conf, args.nms)[0]
    names = _class_names(args.manifest) if args.manifest else None
    out = []
    for d in sorted(dets, key=lambda d: -d.score):
        rec = d.to_dict()
        rec["box_px"] = [(d.box[0] - d.box[2] / 2) * w, (d.box[1] - d.box[3] / 2) * h,
                         (d.box[0] + d.box[2] / 2) * w, (d.box[1] + d.box[3] / 2) * h]
        if names:
            rec["label"] = names[rec["class"]]
        out.append(rec)
    if args.out_png:
        _draw(img, out, args.out_png)
    _emit({"image": str(args.image), "detections": out})
    return EXIT_OK


def _class_names(manifest) -> list[str] | None:
    doc = json.loads(Path(manifest).read_text())
    if "class_names" in doc:
        return doc["class_names"]
    for split in doc.get("splits", {}).values():
        sub = json.loads((Path(manifest).parent / split["manifest"]).read_text())
        return sub.get("class_names")
    return None


def _draw(img: np.ndarray, dets: list[dict], path) -> None:
    from PIL import Image, ImageDraw

    canvas = Image.fromarray(img).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for d in dets:
        draw.rectangle(d["box_px"], outline=(255, 255, 0))
        draw.text((d["box_px"][0] + 1, d["box_px"][1] + 1),
                  f"{d.get('label', d['class'])} {d['score']:.2f}", fill=(255, 255, 0))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)


def cmd_export_features(args) -> int:
    from .data import load_dataset
    from .evaluation import export_features

    manifest = _manifest_for(args)
    datasets = [load_dataset(manifest, s) for s in args.splits]
    path = export_features(_checkpoint_path(args.ckpt), datasets, args.out)
    _emit({"features": str(path), "records": 3 * sum(len(d) for d in datasets)})
    return EXIT_OK


def cmd_plot(args) -> int:
    from . import plotting

    written = []
    out = Path(args.out_dir)
    for m in args.metrics or []:
        written += plotting.plot_metrics(m, out, args.format)
    for p in args.pr or []:
        written += plotting.plot_pr(p, out, args.format)
    for f in args.features or []:
        written += plotting.plot_embedding(f, out, args.format, args.method, args.seed)
    if not written:
        raise ValidationError("nothing to plot: give --metrics, --pr or --features")
    _emit({"written": [str(p) for p in written]})
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .data import CorruptionSpec

    p = _Parser(prog="dayolo", description="Domain-adaptive detector toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic clear/fog dataset pair")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    g.add_argument("--image-size", type=int, default=128, help="square image side, multiple of 32")
    g.add_argument("--train-source", type=int, default=800, help="source train images")
    g.add_argument("--train-target", type=int, default=800, help="target train images")
    g.add_argument("--val-source", type=int, default=200, help="source val images")
    g.add_argument("--val-target", type=int, default=200, help="target val images")
    g.add_argument("--min-objects", type=int, default=1, help="minimum objects per image")
    g.add_argument("--max-objects", type=int, default=4, help="maximum objects per image")
    g.add_argument("--min-scale", type=float, default=0.1, help="minimum object size (fraction of side)")
    g.add_argument("--max-scale", type=float, default=0.3, help="maximum object size (fraction of side)")
    g.add_argument("--clutter", type=float, default=0.5, help="clutter strokes per 32x32 patch")
    fog = CorruptionSpec.foggy()
    g.add_argument("--fog", type=float, default=fog.fog_strength, help="target fog strength")
    g.add_argument("--blur", type=float, default=fog.blur_radius, help="target blur radius (px)")
    g.add_argument("--noise", type=float, default=fog.noise_sigma, help="target noise sigma")
    g.add_argument("--color-gain", type=float, nargs=3, default=list(fog.color_gain),
                   metavar=("R", "G", "B"), help="target per-channel gain")
    g.add_argument("--color-bias", type=float, nargs=3, default=list(fog.color_bias),
                   metavar=("R", "G", "B"), help="target per-channel bias")
    g.add_argument("--clean-target", action="store_true",
                   help="identity corruption: target val equals source val")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON/TOML config")
    t.add_argument("--config", required=True, help="config file (.json or .toml)")
    t.add_argument("--manifest", help="dataset root manifest (overrides [data] manifest)")
    t.add_argument("--out", help="run directory (overrides [data] out)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class AP and mAP of a checkpoint")
    e.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    e.add_argument("--manifest", help="dataset manifest (default: the one used for training)")
    e.add_argument("--split", default="target/val", help="split name, e.g. target-val (default)")
    e.add_argument("--conf", type=float, default=0.05, help="confidence threshold")
    e.add_argument("--nms", type=float, default=0.5, help="NMS IoU threshold")
    e.add_argument("--out", help="also write the AP table JSON here")
    e.add_argument("--pr-out", help="write precision/recall curves JSON here")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="run the detector on one image")
    d.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    d.add_argument("--image", required=True, help="RGB image, sides multiple of 32")
    d.add_argument("--conf", type=float, default=0.5, help="confidence threshold")
    d.add_argument("--nms", type=float, default=0.5, help="NMS IoU threshold")
    d.add_argument("--manifest", help="split manifest supplying class names")
    d.add_argument("--out-png", help="write an annotated copy of the image here")
    d.set_defaults(func=cmd_detect)

    x = sub.add_parser("export-features", help="spatially averaged tap features as CSV")
    x.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    x.add_argument("--manifest", help="dataset manifest (default: the one used for training)")
    x.add_argument("--splits", nargs="+", default=["source/val", "target/val"], help="splits to export")
    x.add_argument("--out", required=True, help="output CSV path")
    x.set_defaults(func=cmd_export_features)

    pl = sub.add_parser("plot", help="render metrics, PR curves or feature embeddings")
    pl.add_argument("--metrics", nargs="*", help="metrics.jsonl files")
    pl.add_argument("--pr", nargs="*", help="PR-curve JSON files from eval --pr-out")
    pl.add_argument("--features", nargs="*", help="feature CSV files from export-features")
    pl.add_argument("--method", choices=("tsne", "pca"), default="tsne", help="2-D embedding method")
    pl.add_argument("--seed", type=int, default=0, help="embedding seed")
    pl.add_argument("--format", choices=("png", "svg"), default="png", help="image format")
    pl.add_argument("--out-dir", required=True, help="output directory")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    from .training import DivergenceError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("dayolo: error: a subcommand is required", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"dayolo: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, ValueError, KeyError) as e:
        print(f"dayolo: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"dayolo: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
