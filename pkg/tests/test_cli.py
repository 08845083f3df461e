import json
from pathlib import Path

import pytest

from dayolo.cli import build_parser, main

GEN = ["--image-size", "64", "--train-source", "8", "--train-target", "8",
       "--val-source", "4", "--val-target", "4"]


def _run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "7", "--out", str(root / "ds")] + GEN) == 0
    cfg = root / "c.toml"
    cfg.write_text('steps = 4\nimage_size = 64\nwidths = [8, 8, 16, 16, 16]\n'
                   '[data]\nmanifest = "ds/manifest.json"\nout = "run"\n')
    assert main(["train", "--config", str(cfg)]) == 0
    return root


def test_gen_data_twice_identical(tmp_path, capsys):
    for d in ("a", "b"):
        code, out, _ = _run(capsys, ["gen-data", "--seed", "7", "--out", str(tmp_path / d)] + GEN)
        assert code == 0
        assert json.loads(out)["manifest"].endswith("manifest.json")
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_unknown_subcommand(capsys):
    code, out, err = _run(capsys, ["frobnicate"])
    assert code == 1
    assert out == ""
    assert "usage" in err


def test_unknown_flag_and_missing_subcommand(capsys):
    assert _run(capsys, ["eval", "--ckpt", "x", "--bogus"])[0] == 1
    code, _, err = _run(capsys, [])
    assert code == 1 and "usage" in err


def test_every_flag_has_help():
    parser = build_parser()
    subs = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    for name, sp in subs.choices.items():
        for action in sp._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, f"{name} {action.option_strings} lacks help"


def test_train_then_eval_pipeline(run_dir, capsys, tmp_path):
    assert (run_dir / "run/checkpoint.npz").is_file()
    assert (run_dir / "run/metrics.jsonl").is_file()
    table_path = tmp_path / "table.json"
    code, out, _ = _run(capsys, ["eval", "--ckpt", str(run_dir / "run"), "--split", "target-val",
                                 "--out", str(table_path)])
    assert code == 0
    table = json.loads(out)
    assert set(table["ap"]) == {"disc", "square", "triangle"}
    assert 0.0 <= table["mAP"] <= 1.0
    assert json.loads(table_path.read_text()) == table
    assert _run(capsys, ["eval", "--ckpt", str(run_dir / "run"), "--split", "target-val"])[1] == out


def test_eval_exit_codes(run_dir, capsys, tmp_path):
    assert _run(capsys, ["eval", "--ckpt", str(tmp_path / "missing.npz")])[0] == 2
    assert _run(capsys, ["eval", "--ckpt", str(run_dir / "run"), "--split", "nowhere"])[0] == 1
    assert _run(capsys, ["eval", "--ckpt", str(run_dir / "run"), "--conf", "1.5"])[0] == 1
    # target train carries no annotations
    assert _run(capsys, ["eval", "--ckpt", str(run_dir / "run"), "--split", "target/train"])[0] == 1


def test_divergence_exit_code(run_dir, capsys, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"steps": 30, "image_size": 64, "widths": [8, 8, 16, 16, 16],
                               "lr_backbone": 1e4, "lr_rest": 1e4, "grad_clip": None,
                               "image_alignment": "none", "msia": False, "mlcr": False}))
    code, _, err = _run(capsys, ["train", "--config", str(cfg), "--manifest",
                                 str(run_dir / "ds/manifest.json"), "--out", str(tmp_path / "r")])
    assert code == 3
    assert "diverged" in err
    assert (tmp_path / "r/divergence.json").is_file()


def test_train_config_errors(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"stepz": 3}))
    assert _run(capsys, ["train", "--config", str(cfg)])[0] == 1
    cfg.write_text(json.dumps({"steps": 3}))
    assert _run(capsys, ["train", "--config", str(cfg)])[0] == 1
    assert _run(capsys, ["train", "--config", str(tmp_path / "none.toml")])[0] == 2


def test_detect_json_and_png(run_dir, capsys, tmp_path):
    image = run_dir / "ds/target/val/images/000000.png"
    png = tmp_path / "det.png"
    code, out, _ = _run(capsys, ["detect", "--ckpt", str(run_dir / "run"), "--image", str(image),
                                 "--conf", "0.01", "--manifest", str(run_dir / "ds/manifest.json"),
                                 "--out-png", str(png)])
    assert code == 0
    doc = json.loads(out)
    assert png.is_file()
    scores = [d["score"] for d in doc["detections"]]
    assert scores == sorted(scores, reverse=True)
    for d in doc["detections"]:
        assert d["label"] in ("disc", "square", "triangle")
        assert 0 <= d["cx"] <= 1 and len(d["box_px"]) == 4


def test_detect_rejects_odd_size(run_dir, capsys, tmp_path):
    from PIL import Image

    Image.new("RGB", (50, 64)).save(tmp_path / "odd.png")
    code, _, err = _run(capsys, ["detect", "--ckpt", str(run_dir / "run"), "--image", str(tmp_path / "odd.png")])
    assert code == 1 and "multiple of 32" in err


def test_export_and_plot(run_dir, capsys, tmp_path):
    csv = tmp_path / "f.csv"
    code, out, _ = _run(capsys, ["export-features", "--ckpt", str(run_dir / "run"), "--out", str(csv)])
    assert code == 0 and json.loads(out)["records"] == 3 * 8
    first = csv.read_bytes()
    _run(capsys, ["export-features", "--ckpt", str(run_dir / "run"), "--out", str(csv)])
    assert csv.read_bytes() == first
    pr = tmp_path / "pr.json"
    _run(capsys, ["eval", "--ckpt", str(run_dir / "run"), "--conf", "0.01", "--pr-out", str(pr)])
    code, out, _ = _run(capsys, ["plot", "--metrics", str(run_dir / "run/metrics.jsonl"), "--pr", str(pr),
                                 "--features", str(csv), "--method", "pca", "--format", "svg",
                                 "--out-dir", str(tmp_path / "figs")])
    assert code == 0
    written = json.loads(out)["written"]
    assert len(written) == 3 and all(Path(p).is_file() for p in written)
    assert _run(capsys, ["plot", "--out-dir", str(tmp_path)])[0] == 1
