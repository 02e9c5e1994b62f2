"""Dual-branch adapter bank on top of the frozen patch features.

Every tapped layer gets a shared projection followed by a detection head and a
segmentation head, all ``ReLU(x @ W)`` stages without bias. One such set
exists for the normal branch and one for the abnormal branch.
"""

from __future__ import annotations

import math
from typing import Dict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneSpec, FeatureStack
from .errors import ConfigurationError
from .utils import seeded_generator

MODES = ("dual", "shared_single_branch", "single_head")
BRANCHES = ("normal", "abnormal")
NORM_EPS = 1e-8


def _kaiming_uniform(fan_in: int, fan_out: int, g: torch.Generator) -> nn.Parameter:
    bound = math.sqrt(6.0 / fan_in)
    return nn.Parameter((torch.rand(fan_in, fan_out, generator=g) * 2 - 1) * bound)


class AdapterLayer(nn.Module):
    def __init__(self, d: int, d_text: int, g: torch.Generator, single_head: bool = False):
        super().__init__()
        self.W_shared = _kaiming_uniform(d, d, g)
        self.W_det = _kaiming_uniform(d, d_text, g)
        if single_head:
            self.W_seg = self.W_det
        else:
            self.W_seg = _kaiming_uniform(d, d_text, g)

    def forward(self, x: torch.Tensor) -> Dict[str, torch.Tensor]:
        if x.shape[-1] != self.W_shared.shape[0]:
            raise ConfigurationError(
                f"feature width {x.shape[-1]} does not match adapter input width {self.W_shared.shape[0]}"
            )
        shared = F.relu(x @ self.W_shared)
        det = F.relu(shared @ self.W_det)
        seg = det if self.W_seg is self.W_det else F.relu(shared @ self.W_seg)
        return {"shared": shared, "det": det, "seg": seg}


class DualAdapterBank(nn.Module):
    """Per-layer adapters for both branches.

    In ``shared_single_branch`` mode ``abnormal`` is the very same ModuleDict as
    ``normal``; in ``single_head`` mode each layer's ``W_seg`` is its ``W_det``.
    """

    def __init__(self, normal: nn.ModuleDict, abnormal: nn.ModuleDict, mode: str, residual_ratio: float = 0.0):
        super().__init__()
        self.normal = normal
        self.abnormal = abnormal
        self.mode = mode
        self.residual_ratio = float(residual_ratio)

    @property
    def layers(self):
        return [int(k) for k in self.normal.keys()]

    def branch(self, name: str) -> nn.ModuleDict:
        if name not in BRANCHES:
            raise ConfigurationError(f"unknown branch {name!r}")
        return self.normal if name == "normal" else self.abnormal

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def named_entries(self) -> Dict[str, torch.Tensor]:
        """Checkpoint names ``adapter.{branch}.{layer}.{W}`` (aliases appear under every name)."""
        out = {}
        for branch in BRANCHES:
            for layer, mod in self.branch(branch).items():
                for w in ("W_shared", "W_det", "W_seg"):
                    out[f"adapter.{branch}.{layer}.{w}"] = getattr(mod, w)
        return out


def init_bank(spec: BackboneSpec, seed: int, mode: str = "dual", residual_ratio: float = 0.0) -> DualAdapterBank:
    if mode not in MODES:
        raise ConfigurationError(f"adapter mode must be one of {MODES}, got {mode!r}")
    if residual_ratio and spec.vision_dim != spec.text_dim:
        raise ConfigurationError("residual_ratio > 0 requires vision_dim == text_dim")
    sub = np.random.SeedSequence(seed).generate_state(2)
    single_head = mode == "single_head"

    def make(sub_seed):
        g = seeded_generator(int(sub_seed))
        return nn.ModuleDict(
            {str(layer): AdapterLayer(spec.vision_dim, spec.text_dim, g, single_head) for layer in spec.tap_layers}
        )

    normal = make(sub[0])
    abnormal = normal if mode == "shared_single_branch" else make(sub[1])
    return DualAdapterBank(normal, abnormal, mode, residual_ratio)


def adapt(features: FeatureStack, branch: str, bank: DualAdapterBank, normalize: bool = True):
    """Run one branch over every tapped layer.

    Returns ``{layer: {"det": [..., G, d_text], "seg": [..., G, d_text]}}``; rows
    are L2-normalized unless ``normalize=False``.
    """
    mods = bank.branch(branch)
    if set(features) != set(bank.layers):
        raise ConfigurationError(f"feature layers {sorted(features)} != adapter layers {sorted(bank.layers)}")
    r = bank.residual_ratio
    out = {}
    for layer in sorted(features):
        x = features[layer]
        heads = mods[str(layer)](x)
        res = {}
        for key in ("det", "seg"):
            h = heads[key]
            if r:
                h = (1 - r) * h + r * x
            res[key] = F.normalize(h, dim=-1, eps=NORM_EPS) if normalize else h
        out[layer] = res
    return out
