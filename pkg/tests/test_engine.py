from pathlib import Path

import numpy as np
import pytest
import torch

import madclip.engine as engine
from madclip.config import RunConfig
from madclip.data import DatasetManifest, Entry, load_manifest, load_sample, make_synthetic_dataset, write_manifest
from madclip.engine import (
    ABLATIONS,
    Checkpoint,
    MadCLIP,
    apply_ablation,
    cross_evaluate,
    evaluate,
    model_from_checkpoint,
    predict,
    train,
)
from madclip.errors import ConfigurationError, InputError
from madclip.utils import module_checksum


def _quick(**kw):
    cfg = RunConfig(shots=4)
    cfg.train.epochs = kw.pop("epochs", 2)
    for k, v in kw.items():
        setattr(cfg.train, k, v)
    return cfg


def test_backbone_frozen_and_adapters_move(synthetic, toy_backbone):
    before = module_checksum(toy_backbone)
    init = MadCLIP(_quick(), toy_backbone, objective=synthetic.modality).learnable_checksum()
    ck = train(_quick(max_steps=1), synthetic, toy_backbone)
    assert module_checksum(toy_backbone) == before
    assert ck.step == 1 and ck.checksum() != init
    assert not any(name.startswith("backbone") for name in ck.tensors)


def test_zero_weights_leave_parameters_unchanged(synthetic, toy_backbone):
    cfg = _quick(max_steps=2)
    cfg.loss.lambda_dice = cfg.loss.lambda_focal = cfg.loss.lambda_siglip = 0.0
    init = MadCLIP(cfg, toy_backbone, objective=synthetic.modality).learnable_checksum()
    assert train(cfg, synthetic, toy_backbone).checksum() == init


def test_training_loss_decreases(trained):
    hist = trained.history
    assert len(hist) == 60 and trained.step == 60 * 2
    assert hist[-1]["total"] < hist[0]["total"]
    for row in hist:
        assert abs(row["dice"] + row["focal"] + row["siglip"] - row["total"]) < 1e-5


def test_log_file(synthetic, toy_backbone, tmp_path):
    train(_quick(epochs=2), synthetic, toy_backbone, log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,L,L_dice,L_focal,L_siglip" and len(lines) == 3
    assert lines[2].startswith("2,2,")


def test_small_shot_single_batch(synthetic, toy_backbone):
    cfg = RunConfig(shots=2)
    cfg.train.epochs = 3
    assert train(cfg, synthetic, toy_backbone).step == 3


def test_reference_metrics(trained, synthetic, toy_backbone):
    rep = evaluate(trained, synthetic, toy_backbone)
    assert rep.ac_auc >= 0.95 and rep.as_auc >= 0.90
    again = evaluate(trained, synthetic, toy_backbone)
    assert again == rep


def test_cross_equals_evaluate_when_same_dataset(trained, synthetic, toy_backbone):
    same = evaluate(trained, synthetic, toy_backbone)
    cross = cross_evaluate(trained, synthetic, toy_backbone)
    assert (cross.ac_auc, cross.as_auc) == (same.ac_auc, same.as_auc)
    assert cross.protocol == "cross" and cross.source == "synthetic"


def test_cross_rejects_other_modality(trained, synthetic, toy_backbone):
    other = DatasetManifest("x", "retina", synthetic.entries, synthetic.root)
    with pytest.raises(ConfigurationError, match="modality"):
        cross_evaluate(trained, other, toy_backbone)


def test_ac_only_report(trained, synthetic, toy_backbone, tmp_path):
    entries = [Entry(str(Path(synthetic.root) / e.image_path), e.label, "", e.split) for e in synthetic.entries]
    ac = load_manifest(write_manifest(DatasetManifest("aconly", "synthetic", entries), tmp_path / "ac.csv"))
    rep = evaluate(trained, ac, toy_backbone)
    assert rep.as_auc is None and rep.row()["AS_AUC"] == ""
    assert cross_evaluate(trained, ac, toy_backbone).as_auc is None


def test_predict_contract(trained, toy_backbone):
    model = model_from_checkpoint(trained, toy_backbone)
    img = np.random.default_rng(0).random((50, 70, 3), dtype=np.float32)
    a, b = predict(model, img), predict(model, img)
    assert a.map.shape == (50, 70) and torch.equal(a.map, b.map) and a.score == b.score
    assert 0 <= a.score <= 1 and float(a.map.min()) >= 0 and float(a.map.max()) <= 1
    with pytest.raises(InputError):
        predict(model, img[..., 0])
    bad = img.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(InputError):
        predict(model, bad)


def test_blank_normal_image_scores_below_midpoint(trained, synthetic, toy_backbone, tmp_path):
    model = model_from_checkpoint(trained, toy_backbone)
    normal, abnormal = [], []
    for e in synthetic.test:
        (abnormal if e.label else normal).append(predict(model, load_sample(synthetic, e).image).score)
    midpoint = (np.mean(normal) + np.mean(abnormal)) / 2
    # Fresh blob-free backgrounds from a seed the model never saw.
    fresh = make_synthetic_dataset(tmp_path, n_normal=4, n_abnormal=0, seed=99)
    for e in fresh.entries:
        assert predict(model, load_sample(fresh, e).image).score < midpoint


def test_checkpoint_roundtrip(trained, tmp_path, toy_backbone):
    p = trained.save(tmp_path / "ck.safetensors")
    back = Checkpoint.load(p)
    assert back.checksum() == trained.checksum() and back.step == trained.step
    assert back.config == trained.config and back.objective == "synthetic"
    text = back.describe()
    assert "adapter.normal.1.W_shared (64, 64) float32" in text and "config:" in text
    with pytest.raises(ConfigurationError, match="checkpoint not found"):
        Checkpoint.load(tmp_path / "missing.safetensors")
    with pytest.raises(ConfigurationError, match="fingerprint"):
        from madclip.backbone import BackboneSpec, build_toy_backbone

        model_from_checkpoint(back, build_toy_backbone(1, BackboneSpec.toy()))


def test_apply_ablation_toggles_exactly_one():
    base = RunConfig()
    from madclip import config as cfgmod

    flat = cfgmod.to_flat(base)
    changed = {}
    for k in ABLATIONS:
        new = cfgmod.to_flat(apply_ablation(base, k))
        changed[k] = {key for key in flat if flat[key] != new[key]}
    assert changed == {
        "a": {"prompt.mode"},
        "b": {"prompt.objective"},
        "c": {"adapter.mode"},
        "d": {"scoring.use_subtraction"},
        "e": {"loss.mode"},
        "f": {"adapter.mode"},
    }
    assert apply_ablation(base, "b").prompt.objective == "medical image"
    with pytest.raises(ConfigurationError):
        apply_ablation(base, "z")


def test_ablation_f_aliases_heads(synthetic, toy_backbone):
    ck = train(apply_ablation(_quick(max_steps=1), "f"), synthetic, toy_backbone)
    for branch in ("normal", "abnormal"):
        for layer in toy_backbone.spec.tap_layers:
            assert torch.equal(ck.tensors[f"adapter.{branch}.{layer}.W_det"], ck.tensors[f"adapter.{branch}.{layer}.W_seg"])
    model = model_from_checkpoint(ck, toy_backbone)
    assert model.bank.normal[str(layer)].W_det is model.bank.normal[str(layer)].W_seg


def test_ablation_c_shares_branches(synthetic, toy_backbone):
    ck = train(apply_ablation(_quick(max_steps=1), "c"), synthetic, toy_backbone)
    for name, t in ck.tensors.items():
        if name.startswith("adapter.normal."):
            assert torch.equal(t, ck.tensors[name.replace(".normal.", ".abnormal.")])


def test_ablation_d_drops_cross_terms(synthetic, toy_backbone, monkeypatch):
    seen = []
    real = engine.layer_scores

    def spy(*args, **kwargs):
        use_sub = kwargs.get("use_subtraction", args[4] if len(args) > 4 else True)
        seen.append(use_sub)
        return real(*args, **kwargs)

    monkeypatch.setattr(engine, "layer_scores", spy)
    train(apply_ablation(_quick(max_steps=1), "d"), synthetic, toy_backbone)
    assert seen and not any(seen)
    seen.clear()
    train(_quick(max_steps=1), synthetic, toy_backbone)
    assert seen and all(seen)


def test_ablation_e_changes_first_step(synthetic, toy_backbone):
    base = train(_quick(max_steps=1), synthetic, toy_backbone)
    tog = train(apply_ablation(_quick(max_steps=1), "e"), synthetic, toy_backbone)
    assert base.checksum() != tog.checksum()


def test_run_ablation_report(synthetic, toy_backbone):
    rep = engine.run_ablation(_quick(epochs=1), "d", synthetic, toy_backbone)
    assert rep.text().startswith("ablation (d) no opposite-class subtraction: AC ")
    assert rep.delta_ac == rep.toggled.ac_auc - rep.base.ac_auc


def test_insufficient_shots(synthetic, toy_backbone):
    from madclip.errors import DataError

    with pytest.raises(DataError):
        train(RunConfig(shots=17), synthetic, toy_backbone)
