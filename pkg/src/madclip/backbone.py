"""Frozen image/text encoders with multi-level patch-feature taps.

Two implementations share one interface:

* ``ToyBackbone``: a seeded patchify + per-layer linear/tanh encoder pair that
  runs in milliseconds and keeps the gradient path shape of the real thing.
* ``PretrainedCLIPBackbone``: a Hugging Face CLIP checkpoint loaded from
  ``BackboneSpec.weights_path`` (requires ``transformers``).

Both are frozen on construction: every parameter has ``requires_grad=False``.
"""

from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError
from .utils import module_checksum, seeded_generator

# Per-layer patch features: tap layer -> [G, d] (or [B, G, d] when batched).
FeatureStack = Dict[int, torch.Tensor]

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class BackboneSpec:
    kind: str = "pretrained"
    input_size: int = 240
    tap_layers: Tuple[int, ...] = (6, 12, 18, 24)
    vision_dim: int = 1024
    text_dim: int = 768
    grid_side: int = 17
    depth: int = 24
    patch_size: int = 14
    context_length: int = 77
    tap_post_norm: bool = True
    weights_path: str = ""
    seed: int = 0

    @classmethod
    def toy(cls, **overrides) -> "BackboneSpec":
        base = dict(
            kind="toy",
            input_size=64,
            tap_layers=(1, 2, 3, 4),
            vision_dim=64,
            text_dim=32,
            grid_side=8,
            depth=4,
            patch_size=8,
            context_length=32,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def n_patches(self) -> int:
        return self.grid_side**2

    def validate(self) -> None:
        if self.kind not in ("pretrained", "toy"):
            raise ConfigurationError(f"backbone.kind must be 'pretrained' or 'toy', got {self.kind!r}")
        taps = tuple(self.tap_layers)
        if not taps:
            raise ConfigurationError("backbone.tap_layers is empty")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigurationError(f"backbone.tap_layers must be strictly increasing: {taps}")
        if taps[0] < 1 or taps[-1] > self.depth:
            raise ConfigurationError(f"tap layers {taps} outside encoder depth 1..{self.depth}")
        if self.vision_dim <= 0 or self.text_dim <= 0:
            raise ConfigurationError("feature widths must be positive")
        if self.input_size // self.patch_size != self.grid_side:
            raise ConfigurationError(
                f"grid_side={self.grid_side} inconsistent with input_size={self.input_size} "
                f"and patch_size={self.patch_size} (expected {self.input_size // self.patch_size})"
            )


def _to_batch(images) -> torch.Tensor:
    """Accept [h, w, 3] or [B, h, w, 3] arrays in [0, 1]; return float32 [B, 3, h, w]."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    x = x.to(torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise InputError(f"expected image of shape [h, w, 3] or [B, h, w, 3], got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InputError("image contains non-finite pixels")
    return x.permute(0, 3, 1, 2).contiguous()


class FrozenBackbone(nn.Module):
    """Common surface for the two encoder pairs."""

    spec: BackboneSpec
    token_dim: int

    def freeze(self) -> "FrozenBackbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # Frozen encoders never switch to train mode.
        return super().train(False)

    def fingerprint(self) -> str:
        return module_checksum(self)

    def preprocess(self, images) -> torch.Tensor:
        x = _to_batch(images)
        s = self.spec.input_size
        if x.shape[-2:] != (s, s):
            x = F.interpolate(x, size=(s, s), mode="bilinear", align_corners=False)
        return self.normalize(x)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def encode_image_multilevel(self, images) -> FeatureStack:
        raise NotImplementedError

    def encode_text(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def tokenize(self, text: str) -> torch.Tensor:
        """Frozen word embeddings for ``text`` without start/end sentinels: [n, token_dim]."""
        raise NotImplementedError

    def sentinels(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """Start and end sentinel embeddings, each [1, token_dim]."""
        raise NotImplementedError

    def default_temperature(self) -> float:
        return 1.0 / 0.07

    def manifest_text(self) -> str:
        s = self.spec
        lines = [
            f"encoder = {type(self).__name__}",
            f"kind = {s.kind}",
            f"weights_path = {s.weights_path}",
            f"tap_layers = {','.join(str(t) for t in s.tap_layers)}",
            f"vision_dim = {s.vision_dim}",
            f"text_dim = {s.text_dim}",
            f"grid_side = {s.grid_side}",
            f"input_size = {s.input_size}",
            f"fingerprint = {self.fingerprint()}",
        ]
        return "\n".join(lines) + "\n"

    def _check_text_length(self, seq: torch.Tensor) -> None:
        if seq.shape[-2] > self.spec.context_length:
            raise InputError(
                f"token sequence length {seq.shape[-2]} exceeds context length {self.spec.context_length}"
            )
        if seq.shape[-1] != self.token_dim:
            raise InputError(f"token width {seq.shape[-1]} != encoder token width {self.token_dim}")


class ToyVisionEncoder(nn.Module):
    def __init__(self, spec: BackboneSpec, g: torch.Generator):
        super().__init__()
        p, d = spec.patch_size, spec.vision_dim
        fan_in = 3 * p * p
        self.patch_embed = nn.Parameter(torch.randn(fan_in, d, generator=g) / math.sqrt(fan_in) * 4.0)
        self.patch_bias = nn.Parameter(torch.randn(d, generator=g))
        self.pos = nn.Parameter(torch.randn(spec.n_patches, d, generator=g) * 0.02)
        self.layers = nn.ParameterList(
            [nn.Parameter(torch.randn(d, d, generator=g) / math.sqrt(d)) for _ in range(spec.depth)]
        )
        self.patch_size = p
        self.post_norm = spec.tap_post_norm

    def forward(self, x: torch.Tensor, taps: Sequence[int]) -> FeatureStack:
        p = self.patch_size
        patches = F.unfold(x, kernel_size=p, stride=p).transpose(1, 2)  # [B, G, 3*p*p]
        h = patches @ self.patch_embed + self.patch_bias + self.pos
        out: FeatureStack = {}
        for i, w in enumerate(self.layers, start=1):
            # Subtracting the patch mean is the only token mixing; it stands in for attention's global context.
            h = h - h.mean(dim=-2, keepdim=True)
            h = h + torch.tanh(h @ w)
            if i in taps:
                out[i] = F.layer_norm(h, h.shape[-1:]) if self.post_norm else h
        return out


class ToyTextEncoder(nn.Module):
    def __init__(self, spec: BackboneSpec, g: torch.Generator, vocab_size: int = 512, n_layers: int = 2):
        super().__init__()
        D = spec.text_dim
        self.token_embedding = nn.Parameter(torch.randn(vocab_size, D, generator=g) * 0.5)
        self.pos = nn.Parameter(torch.randn(spec.context_length, D, generator=g) * 0.1)
        self.layers = nn.ParameterList(
            [nn.Parameter(torch.randn(D, D, generator=g) / math.sqrt(D)) for _ in range(n_layers)]
        )
        self.proj = nn.Parameter(torch.randn(D, D, generator=g) / math.sqrt(D))

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        x = seq + self.pos[: seq.shape[-2]]
        for w in self.layers:
            x = x + torch.tanh(x @ w)
        return x.mean(dim=-2) @ self.proj


class ToyBackbone(FrozenBackbone):
    """Seeded desk-scale encoder pair; identity pixel normalization."""

    SOS, EOS = 0, 1

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.token_dim = spec.text_dim
        g = seeded_generator(spec.seed)
        self.vision = ToyVisionEncoder(spec, g)
        self.text = ToyTextEncoder(spec, g)
        self.vocab_size = self.text.token_embedding.shape[0]

    def encode_image_multilevel(self, images) -> FeatureStack:
        x = self.preprocess(images)
        return self.vision(x, self.spec.tap_layers)

    def encode_text(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        self._check_text_length(token_embeddings)
        if not torch.isfinite(token_embeddings).all():
            raise InputError("token embeddings contain non-finite values")
        return F.normalize(self.text(token_embeddings), dim=-1, eps=1e-12)

    def _word_id(self, word: str) -> int:
        return 2 + zlib.crc32(word.encode()) % (self.vocab_size - 2)

    def tokenize(self, text: str) -> torch.Tensor:
        ids = [self._word_id(w) for w in text.lower().split()]
        return self.text.token_embedding[ids].detach().clone()

    def sentinels(self):
        e = self.text.token_embedding
        return e[self.SOS : self.SOS + 1].detach().clone(), e[self.EOS : self.EOS + 1].detach().clone()


class PretrainedCLIPBackbone(FrozenBackbone):
    """CLIP vision/text towers loaded from a local Hugging Face checkpoint directory."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        path = spec.weights_path or os.environ.get("MADCLIP_CACHE", "")
        if not path or not os.path.exists(path):
            raise ConfigurationError(
                f"pretrained backbone weights not found at {path!r}; set backbone.weights_path"
            )
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ConfigurationError("pretrained backbone requires the 'transformers' package") from exc
        try:
            model = CLIPModel.from_pretrained(path, attn_implementation="eager")
            self.tokenizer = CLIPTokenizer.from_pretrained(path)
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"could not load CLIP weights from {path!r}: {exc}") from exc

        vcfg, tcfg = model.config.vision_config, model.config.text_config
        expect = {
            "vision_dim": vcfg.hidden_size,
            "text_dim": model.config.projection_dim,
            "depth": vcfg.num_hidden_layers,
            "patch_size": vcfg.patch_size,
            "context_length": tcfg.max_position_embeddings,
        }
        for key, value in expect.items():
            if getattr(spec, key) != value:
                raise ConfigurationError(f"backbone.{key}={getattr(spec, key)} but checkpoint has {value}")
        spec.validate()
        self.vision_model = model.vision_model
        self.text_model = model.text_model
        self.text_projection = model.text_projection
        self.register_buffer("logit_scale", model.logit_scale.detach().clone())
        self.register_buffer("mean", torch.tensor(CLIP_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(CLIP_STD).view(1, 3, 1, 1))
        self.token_dim = tcfg.hidden_size
        self.freeze()

    def normalize(self, x):
        return (x - self.mean) / self.std

    def default_temperature(self) -> float:
        return float(self.logit_scale.exp())

    def encode_image_multilevel(self, images) -> FeatureStack:
        vm = self.vision_model
        x = self.preprocess(images)
        h = vm.embeddings(x, interpolate_pos_encoding=True)
        h = vm.pre_layrnorm(h)
        out: FeatureStack = {}
        taps = set(self.spec.tap_layers)
        for i, layer in enumerate(vm.encoder.layers, start=1):
            h = layer(h, None)
            if i in taps:
                patches = h[:, 1:, :]
                out[i] = vm.post_layernorm(patches) if self.spec.tap_post_norm else patches
            if i >= self.spec.tap_layers[-1]:
                break
        return out

    def encode_text(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        self._check_text_length(token_embeddings)
        squeeze = token_embeddings.ndim == 2
        seq = token_embeddings.unsqueeze(0) if squeeze else token_embeddings
        tm = self.text_model
        h = tm.embeddings(inputs_embeds=seq)
        L = seq.shape[1]
        causal = torch.full((L, L), float("-inf"), dtype=h.dtype).triu(1).view(1, 1, L, L)
        for layer in tm.encoder.layers:
            h = layer(h, causal)
        h = tm.final_layer_norm(h)
        # Sequences end with the end-of-text sentinel.
        pooled = self.text_projection(h[:, -1, :])
        out = F.normalize(pooled, dim=-1, eps=1e-12)
        return out[0] if squeeze else out

    def tokenize(self, text: str) -> torch.Tensor:
        ids = self.tokenizer(text, add_special_tokens=False)["input_ids"]
        return self.text_model.embeddings.token_embedding.weight[ids].detach().clone()

    def sentinels(self):
        w = self.text_model.embeddings.token_embedding.weight
        sos, eos = self.tokenizer.bos_token_id, self.tokenizer.eos_token_id
        return w[sos : sos + 1].detach().clone(), w[eos : eos + 1].detach().clone()


def build_toy_backbone(seed: int, spec: BackboneSpec) -> ToyBackbone:
    if spec.kind != "toy":
        raise ConfigurationError("build_toy_backbone requires spec.kind == 'toy'")
    spec.validate()
    s = BackboneSpec(**{**spec.__dict__, "seed": seed})
    return ToyBackbone(s).freeze()


def load_backbone(spec: BackboneSpec) -> FrozenBackbone:
    spec.validate()
    if spec.kind == "toy":
        return build_toy_backbone(spec.seed, spec)
    return PretrainedCLIPBackbone(spec)


def encode_image_multilevel(image, backbone: FrozenBackbone) -> FeatureStack:
    """Patch features at every tap layer. Unbatched input gives [G, d] grids."""
    batched = np.ndim(image) == 4
    with torch.no_grad():
        feats = backbone.encode_image_multilevel(image)
    if not batched:
        feats = {k: v[0] for k, v in feats.items()}
    return feats


def encode_text(token_embeddings: torch.Tensor, backbone: FrozenBackbone) -> torch.Tensor:
    return backbone.encode_text(token_embeddings)
