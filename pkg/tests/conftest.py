import json
import os
import string

import pytest
import torch

from madclip.backbone import BackboneSpec, build_toy_backbone
from madclip.data import load_manifest, make_synthetic_dataset

ACCEPTANCE_LINES = []


@pytest.fixture
def toy_spec():
    return BackboneSpec.toy()


@pytest.fixture(scope="session")
def toy_backbone():
    return build_toy_backbone(0, BackboneSpec.toy())


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    make_synthetic_dataset(root, seed=0)
    return load_manifest(root / "manifest.csv")


@pytest.fixture(scope="session")
def tiny_clip_dir(tmp_path_factory):
    """A randomly initialised miniature CLIP checkpoint with a character-level tokenizer."""
    transformers = pytest.importorskip("transformers")
    d = tmp_path_factory.mktemp("tinyclip")
    vocab = {}
    for c in string.ascii_lowercase:
        vocab[c] = len(vocab)
    for c in string.ascii_lowercase:
        vocab[c + "</w>"] = len(vocab)
    for t in ("<|startoftext|>", "<|endoftext|>"):
        vocab[t] = len(vocab)
    (d / "vocab.json").write_text(json.dumps(vocab))
    (d / "merges.txt").write_text("#version: 0.2\n")
    tok = transformers.CLIPTokenizer(str(d / "vocab.json"), str(d / "merges.txt"))
    cfg = transformers.CLIPConfig(
        text_config=dict(
            vocab_size=len(vocab), hidden_size=32, intermediate_size=64, num_hidden_layers=2,
            num_attention_heads=2, max_position_embeddings=77,
            bos_token_id=tok.bos_token_id, eos_token_id=tok.eos_token_id,
        ),
        vision_config=dict(
            hidden_size=48, intermediate_size=96, num_hidden_layers=4, num_attention_heads=2,
            image_size=56, patch_size=14,
        ),
        projection_dim=32,
    )
    torch.manual_seed(0)
    transformers.CLIPModel(cfg).save_pretrained(str(d))
    tok.save_pretrained(str(d))
    return str(d)


@pytest.fixture(scope="session")
def trained(synthetic, toy_backbone):
    """Default toy run (16 shots, 60 epochs, seed 0) on the seed-0 synthetic set."""
    from madclip.config import RunConfig
    from madclip.engine import train

    return train(RunConfig(), synthetic, toy_backbone)


def tiny_clip_spec(path, input_size=60, taps=(2, 4)):
    return BackboneSpec(
        kind="pretrained", weights_path=path, input_size=input_size, tap_layers=taps,
        vision_dim=48, text_dim=32, grid_side=input_size // 14, depth=4, patch_size=14,
        context_length=77,
    )


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
