import dataclasses
import json

import numpy as np
import pytest
import torch

from dayolo.checkpoint import load_checkpoint, load_into, read_arrays, save_checkpoint
from dayolo.data import CorruptionSpec, SceneSpec, generate_synthetic_domain_pair, load_dataset
from dayolo.evaluation import evaluate_detector
from dayolo.model import BoxAnnotation, ValidationError
from dayolo.training import (DivergenceError, TrainConfig, build_model, compose_total_loss, fit,
                             make_optimizer, train_step, validate_log)

SMALL = dict(image_size=64, widths=(8, 8, 16, 16, 16))


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    counts = {"train_s": 12, "train_t": 12, "val_s": 6, "val_t": 6}
    manifest = generate_synthetic_domain_pair(root, SceneSpec(image_size=64), CorruptionSpec.foggy(),
                                              counts, seed=5)
    return {s: load_dataset(manifest, s) for s in ("source/train", "target/train", "source/val", "target/val")}


def _pair(bench, i=0):
    return bench["source/train"].samples[i], bench["target/train"].samples[i]


# composite objective -----------------------------------------------------------

@pytest.mark.parametrize("parts,lam,expect", [
    ((1.0, 0.2, 0.3, 0.1), 0.0, 1.0),
    ((1.0, 0.2, 0.3, 0.1), 1.0, 1.6),
    ((2.5, 0.4, 0.0, 0.6), 0.5, 3.0),
])
def test_compose_examples(parts, lam, expect):
    assert compose_total_loss(*parts, lam) == pytest.approx(expect, abs=1e-12)


def test_compose_nan_names_component():
    with pytest.raises(DivergenceError, match="l_msia is NaN"):
        compose_total_loss(torch.tensor(1.0), 0.0, torch.tensor(float("nan")), 0.0, 0.5)


def test_config_validation(tmp_path):
    with pytest.raises(ValidationError):
        TrainConfig(lambda_da=-0.1)
    with pytest.raises(ValidationError):
        TrainConfig(image_alignment="sideways")
    with pytest.raises(ValidationError, match="unknown"):
        TrainConfig.from_dict({"lamda_da": 0.1})
    p = tmp_path / "c.toml"
    p.write_text('steps = 7\n[train]\nlambda_da = 0.2\nmsia = false\n')
    cfg = TrainConfig.from_file(p)
    assert (cfg.steps, cfg.lambda_da, cfg.msia) == (7, 0.2, False)
    j = tmp_path / "c.json"
    j.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_file(j) == cfg


def test_eia_uses_equal_weights():
    w = TrainConfig(image_alignment="eia").scale_weights()
    assert w[0] == w[1] == w[2]
    assert TrainConfig().scale_weights().as_tuple() == (1.0, 0.5, 0.1)


# train_step ------------------------------------------------------------------

def test_toggles_off_touch_only_detector(bench):
    cfg = TrainConfig(**SMALL, image_alignment="none", msia=False, mlcr=False)
    model = build_model(cfg)
    opt = make_optimizer(model, cfg)
    src, tgt = _pair(bench)
    model.train()
    from dayolo.training import compute_losses
    total, b = compute_losses(model, src, tgt, cfg)
    assert b.l_ria == b.l_msia == b.l_mlcr == 0.0
    total.backward()
    assert all(p.grad is None for p in model.adaptation.parameters())
    assert any(p.grad is not None for p in model.detector.parameters())
    opt.zero_grad()


def test_zero_lambda_reports_components(bench):
    cfg = TrainConfig(**SMALL, lambda_da=0.0, msia_conf=0.01)
    b = train_step(*_pair(bench), build_model(cfg), cfg)
    assert b.l_total == b.l_det
    assert b.l_ria > 0
    assert b.l_mlcr > 0


def test_train_step_deterministic_and_pre_update(bench):
    cfg = TrainConfig(**SMALL)
    model = build_model(cfg)
    src, tgt = _pair(bench)
    b1 = train_step(src, tgt, model, cfg)
    b2 = train_step(src, tgt, model, cfg)
    assert b1 == b2
    opt = make_optimizer(model, cfg)
    b3 = train_step(src, tgt, model, cfg, opt)
    assert b3 == b1
    b4 = train_step(src, tgt, model, cfg)
    assert b4 != b1


def test_train_step_uses_split_learning_rates(bench):
    cfg = TrainConfig(**SMALL)
    model = build_model(cfg)
    groups = {g["name"]: g["lr"] for g in make_optimizer(model, cfg).param_groups}
    assert groups == {"backbone": 0.001, "rest": 0.01}


def test_target_annotations_rejected(bench):
    cfg = TrainConfig(**SMALL)
    src, tgt = _pair(bench)
    bad = dataclasses.replace(tgt, annotations=[BoxAnnotation(0, 0.5, 0.5, 0.2, 0.2)])
    with pytest.raises(ValidationError, match="annotations"):
        train_step(src, bad, build_model(cfg), cfg)


# fit ---------------------------------------------------------------------------

def test_steps_zero_checkpoint_equals_init(bench, tmp_path):
    cfg = TrainConfig(**SMALL, steps=0)
    res = fit(cfg, bench["source/train"], bench["target/train"], tmp_path)
    assert res.bundles == []
    assert (tmp_path / "metrics.jsonl").read_text() == ""
    init = build_model(cfg)
    arrays = read_arrays(res.checkpoint, "detector")
    for k, v in init.detector.state_dict().items():
        np.testing.assert_array_equal(arrays[k], v.numpy())


def test_fit_deterministic_logs_and_identity(bench, tmp_path):
    cfg = TrainConfig(**SMALL, steps=6, eval_interval=3, msia_conf=0.05)
    vals = {"target/val": bench["target/val"]}
    fit(cfg, bench["source/train"], bench["target/train"], tmp_path / "a", vals)
    fit(cfg, bench["source/train"], bench["target/train"], tmp_path / "b", vals)
    a = (tmp_path / "a/metrics.jsonl").read_text()
    assert a == (tmp_path / "b/metrics.jsonl").read_text()
    lines = [json.loads(x) for x in a.splitlines()]
    assert sum("l_total" in x for x in lines) == 6
    assert sum("eval" in x for x in lines) == 2
    assert validate_log(tmp_path / "a/metrics.jsonl") == []
    assert (tmp_path / "a/checkpoint.npz").read_bytes() == (tmp_path / "b/checkpoint.npz").read_bytes()


def test_validate_log_flags_violations(tmp_path):
    p = tmp_path / "m.jsonl"
    rows = [{"step": 0, "l_det": 1.0, "l_ria": 0.2, "l_msia": 0.3, "l_mlcr": 0.1, "l_total": 1.6, "lambda_da": 1.0},
            {"step": 1, "l_det": 1.0, "l_ria": 0.2, "l_msia": 0.3, "l_mlcr": 0.1, "l_total": 1.7, "lambda_da": 1.0},
            {"step": 2, "eval": {"x": 0.5}}]
    p.write_text("".join(json.dumps(r) + "\n" for r in rows))
    problems = validate_log(p)
    assert len(problems) == 1 and problems[0].startswith("line 2")


def test_source_only_independent_of_target(bench, tmp_path):
    cfg = TrainConfig(**SMALL, steps=5, image_alignment="none", msia=False, mlcr=False)
    r1 = fit(cfg, bench["source/train"], bench["target/train"], tmp_path / "a")
    r2 = fit(cfg, bench["source/train"], None, tmp_path / "b")
    assert (tmp_path / "a/metrics.jsonl").read_text() == (tmp_path / "b/metrics.jsonl").read_text()
    for p, q in zip(r1.model.detector.parameters(), r2.model.detector.parameters()):
        assert torch.equal(p, q)


def test_fit_errors(bench):
    cfg = TrainConfig(**SMALL, steps=1)
    with pytest.raises(ValidationError):
        fit(cfg, bench["source/train"], None)
    with pytest.raises(ValidationError):
        fit(cfg, bench["target/train"], bench["target/train"])


def test_divergence_guard(bench, tmp_path):
    cfg = TrainConfig(**SMALL, steps=50, lr_rest=1e4, lr_backbone=1e4, grad_clip=None,
                      image_alignment="none", msia=False, mlcr=False)
    with pytest.raises(DivergenceError) as info:
        fit(cfg, bench["source/train"], None, tmp_path)
    assert 1 <= len(info.value.bundles) <= 10
    dumped = json.loads((tmp_path / "divergence.json").read_text())
    assert len(dumped) == len(info.value.bundles)


def test_checkpoint_round_trip(bench, tmp_path):
    cfg = TrainConfig(**SMALL, steps=2)
    res = fit(cfg, bench["source/train"], bench["target/train"], tmp_path)
    det, adapt, header = load_checkpoint(res.checkpoint, with_adaptation=True)
    assert header["step"] == 2 and header["config"]["steps"] == 2
    assert header["sections"] == ["detector", "adaptation"]
    for (k, v), (k2, v2) in zip(res.model.detector.state_dict().items(), det.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    for v, v2 in zip(res.model.adaptation.state_dict().values(), adapt.state_dict().values()):
        assert torch.equal(v, v2)
    other = build_model(dataclasses.replace(cfg, seed=9))
    load_into(other, res.checkpoint)
    x = torch.from_numpy(bench["source/val"].samples[0].pixels[None])
    res.model.eval()
    other.eval()
    assert torch.equal(res.model.detector(x)[1][0], other.detector(x)[1][0])
    again = save_checkpoint(tmp_path / "again.npz", res.model, cfg, 2)
    assert again.read_bytes() == res.checkpoint.read_bytes()


def test_trained_beats_untrained_on_own_training_set(tmp_path):
    root = tmp_path / "d"
    m = generate_synthetic_domain_pair(root, SceneSpec(image_size=64, objects_per_image=(1, 2)),
                                       CorruptionSpec(), {"train_s": 16, "train_t": 1, "val_s": 1, "val_t": 1},
                                       seed=2)
    train = load_dataset(m, "source/train")
    cfg = TrainConfig(**SMALL, steps=300, image_alignment="none", msia=False, mlcr=False)
    untrained = evaluate_detector(build_model(cfg).detector, train, 0.01).mAP
    trained = evaluate_detector(fit(cfg, train).model.detector, train, 0.01).mAP
    assert trained > untrained
