"""Learnable normal/abnormal prompt ensembles and their text anchors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FrozenBackbone
from .errors import ConfigurationError
from .utils import seeded_generator

NORMAL_SYNONYMS = ("flawless", "unblemished", "normal", "healthy", "perfect")
ABNORMAL_SYNONYMS = ("with a flaw", "disease", "abnormal", "damaged", "with a lesion")
GENERIC_OBJECTIVE = "medical image"
HANDCRAFTED_PHRASE = "a photo of a"


def default_synonyms() -> Tuple[List[str], List[str]]:
    return list(NORMAL_SYNONYMS), list(ABNORMAL_SYNONYMS)


@dataclass
class PromptTemplate:
    context_tokens: torch.Tensor
    class_tokens: torch.Tensor
    objective_tokens: torch.Tensor
    polarity: str
    sos: torch.Tensor
    eos: torch.Tensor


def compose(template: PromptTemplate, context_length: int | None = None) -> torch.Tensor:
    """``[SOS] context ∥ class ∥ objective [EOS]`` as a [L, dim] sequence."""
    seq = torch.cat(
        [template.sos, template.context_tokens, template.class_tokens, template.objective_tokens, template.eos],
        dim=0,
    )
    if context_length is not None and seq.shape[0] > context_length:
        raise ConfigurationError(f"prompt length {seq.shape[0]} exceeds text context length {context_length}")
    return seq


class PromptBank(nn.Module):
    """One context sequence per polarity, shared across that polarity's synonyms.

    ``learnable`` mode holds the two contexts as parameters; ``handcrafted`` mode
    replaces them with frozen embeddings of a fixed phrase.
    """

    def __init__(
        self,
        backbone: FrozenBackbone,
        normal_synonyms: Sequence[str] = NORMAL_SYNONYMS,
        abnormal_synonyms: Sequence[str] = ABNORMAL_SYNONYMS,
        objective: str = "brain",
        n_context: int = 8,
        mode: str = "learnable",
        seed: int = 0,
        handcrafted_phrase: str = HANDCRAFTED_PHRASE,
    ):
        super().__init__()
        if mode not in ("learnable", "handcrafted"):
            raise ConfigurationError(f"prompt mode must be 'learnable' or 'handcrafted', got {mode!r}")
        if not normal_synonyms or not abnormal_synonyms:
            raise ConfigurationError("each polarity needs at least one synonym (k >= 1)")
        if len(normal_synonyms) != len(abnormal_synonyms):
            raise ConfigurationError("normal and abnormal synonym lists must have equal size k")
        if set(normal_synonyms) & set(abnormal_synonyms):
            raise ConfigurationError("normal and abnormal synonym lists overlap")
        if n_context < 1:
            raise ConfigurationError("n_context must be >= 1")
        self.mode = mode
        self.normal_synonyms = list(normal_synonyms)
        self.abnormal_synonyms = list(abnormal_synonyms)
        self.objective = objective
        self.context_length = backbone.spec.context_length

        dim = backbone.token_dim
        if mode == "learnable":
            g = seeded_generator(seed)
            self.normal_context = nn.Parameter(torch.randn(n_context, dim, generator=g) * 0.02)
            self.abnormal_context = nn.Parameter(torch.randn(n_context, dim, generator=g) * 0.02)
        else:
            phrase = backbone.tokenize(handcrafted_phrase)
            self.register_buffer("normal_context", phrase.clone())
            self.register_buffer("abnormal_context", phrase.clone())

        sos, eos = backbone.sentinels()
        self.register_buffer("sos", sos)
        self.register_buffer("eos", eos)
        self.register_buffer("objective_tokens", backbone.tokenize(objective))
        for i, w in enumerate(self.normal_synonyms):
            self.register_buffer(f"cls_normal_{i}", backbone.tokenize(w))
        for i, w in enumerate(self.abnormal_synonyms):
            self.register_buffer(f"cls_abnormal_{i}", backbone.tokenize(w))

    @property
    def k(self) -> int:
        return len(self.normal_synonyms)

    def templates(self, polarity: str) -> List[PromptTemplate]:
        if polarity not in ("normal", "abnormal"):
            raise ConfigurationError(f"unknown polarity {polarity!r}")
        ctx = getattr(self, f"{polarity}_context")
        return [
            PromptTemplate(
                context_tokens=ctx,
                class_tokens=getattr(self, f"cls_{polarity}_{i}"),
                objective_tokens=self.objective_tokens,
                polarity=polarity,
                sos=self.sos,
                eos=self.eos,
            )
            for i in range(self.k)
        ]


def _anchor(templates: List[PromptTemplate], backbone: FrozenBackbone, context_length: int) -> torch.Tensor:
    if not templates:
        raise ConfigurationError("cannot build an anchor from zero prompts")
    encoded = torch.stack([backbone.encode_text(compose(t, context_length)) for t in templates])
    return F.normalize(encoded.mean(dim=0), dim=-1, eps=1e-12)


def anchors(bank: PromptBank, backbone: FrozenBackbone) -> Tuple[torch.Tensor, torch.Tensor]:
    """Unit-norm ``(t_n, t_ab)``: mean of each polarity's encoded synonyms, renormalized."""
    t_n = _anchor(bank.templates("normal"), backbone, bank.context_length)
    t_ab = _anchor(bank.templates("abnormal"), backbone, bank.context_length)
    return t_n, t_ab
