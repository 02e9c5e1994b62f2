import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from madclip.adapters import AdapterLayer, adapt, init_bank
from madclip.backbone import BackboneSpec
from madclip.errors import ConfigurationError


def _features(spec, seed=0, batch=None):
    g = torch.Generator().manual_seed(seed)
    shape = ((batch,) if batch else ()) + (spec.n_patches, spec.vision_dim)
    return {layer: torch.randn(*shape, generator=g) for layer in spec.tap_layers}


def test_hand_matrix_example():
    layer = AdapterLayer(2, 2, torch.Generator().manual_seed(0))
    with torch.no_grad():
        layer.W_shared.copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        layer.W_det.copy_(torch.tensor([[1.0, -1.0], [0.0, 1.0]]))
    out = layer(torch.tensor([[1.0, 2.0]]))
    assert out["shared"].tolist() == [[1.0, 2.0]]
    assert out["det"].tolist() == [[1.0, 1.0]]


def test_zero_features_give_zero_outputs(toy_spec):
    bank = init_bank(toy_spec, 0)
    feats = {k: torch.zeros_like(v) for k, v in _features(toy_spec).items()}
    out = adapt(feats, "normal", bank, normalize=False)
    assert all(float(o[h].abs().sum()) == 0.0 for o in out.values() for h in ("det", "seg"))
    # Normalization leaves all-zero rows at zero instead of dividing by zero.
    out = adapt(feats, "normal", bank)
    assert all(torch.isfinite(o["det"]).all() and float(o["det"].abs().sum()) == 0 for o in out.values())


def test_output_shapes_and_unit_rows(toy_spec):
    bank = init_bank(toy_spec, 0)
    out = adapt(_features(toy_spec, batch=2), "abnormal", bank)
    for o in out.values():
        assert o["det"].shape == (2, toy_spec.n_patches, toy_spec.text_dim)
        n = o["seg"].norm(dim=-1)
        assert torch.all((n - 1).abs() < 1e-5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0))
def test_non_negative_before_normalization(seed, scale):
    spec = BackboneSpec.toy()
    bank = init_bank(spec, seed)
    feats = {k: v * scale for k, v in _features(spec, seed).items()}
    for branch in ("normal", "abnormal"):
        for o in adapt(feats, branch, bank, normalize=False).values():
            assert (o["det"] >= 0).all() and (o["seg"] >= 0).all()


def test_single_head_det_equals_seg(toy_spec):
    bank = init_bank(toy_spec, 3, "single_head")
    for o in adapt(_features(toy_spec), "normal", bank).values():
        assert torch.equal(o["det"], o["seg"])
    for mod in bank.normal.values():
        assert mod.W_det is mod.W_seg


def test_shared_single_branch_equivalence(toy_spec):
    bank = init_bank(toy_spec, 3, "shared_single_branch")
    feats = _features(toy_spec)
    a, b = adapt(feats, "normal", bank), adapt(feats, "abnormal", bank)
    assert all(torch.equal(a[k]["det"], b[k]["det"]) and torch.equal(a[k]["seg"], b[k]["seg"]) for k in a)


def test_init_reproducible_and_branches_differ(toy_spec):
    a, b = init_bank(toy_spec, 7), init_bank(toy_spec, 7)
    for (na, pa), (nb, pb) in zip(a.named_entries().items(), b.named_entries().items()):
        assert na == nb and torch.equal(pa, pb)
    assert not torch.equal(a.normal["1"].W_shared, a.abnormal["1"].W_shared)


def test_shared_mode_halves_parameter_count(toy_spec):
    dual = init_bank(toy_spec, 0, "dual").n_parameters()
    shared = init_bank(toy_spec, 0, "shared_single_branch").n_parameters()
    assert 2 * shared == dual


def test_named_entries_scheme(toy_spec):
    names = set(init_bank(toy_spec, 0).named_entries())
    assert "adapter.normal.1.W_shared" in names and "adapter.abnormal.4.W_seg" in names
    assert len(names) == 2 * 4 * 3


def test_errors(toy_spec):
    bank = init_bank(toy_spec, 0)
    with pytest.raises(ConfigurationError):
        adapt({k: torch.zeros(64, 10) for k in toy_spec.tap_layers}, "normal", bank)
    with pytest.raises(ConfigurationError):
        adapt({1: torch.zeros(64, 64)}, "normal", bank)
    with pytest.raises(ConfigurationError):
        init_bank(toy_spec, 0, "triple")
    with pytest.raises(ConfigurationError):
        init_bank(toy_spec, 0, residual_ratio=0.5)


def test_residual_blend():
    spec = BackboneSpec.toy(vision_dim=32)
    bank = init_bank(spec, 0, residual_ratio=1.0)
    feats = _features(spec)
    out = adapt(feats, "normal", bank)
    k = spec.tap_layers[0]
    np.testing.assert_allclose(out[k]["det"].detach(), torch.nn.functional.normalize(feats[k], dim=-1), atol=1e-6)
