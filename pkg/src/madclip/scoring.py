"""Patch scores, anomaly maps and image-level anomaly scores.

Channel 0 of every score stack is the normality score, channel 1 the
abnormality score. Probabilities are the abnormal channel of a 2-way softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F

from .errors import ContractViolation, InputError

UNIT_TOL = 1e-3


@dataclass
class LayerScores:
    s_n: torch.Tensor  # [..., G]
    s_ab: torch.Tensor  # [..., G]
    layer: int = -1

    def stacked(self) -> torch.Tensor:
        """[..., G, 2] logits."""
        return torch.stack([self.s_n, self.s_ab], dim=-1)

    def scaled(self, temperature) -> "LayerScores":
        return LayerScores(self.s_n * temperature, self.s_ab * temperature, self.layer)


@dataclass
class AnomalyOutput:
    map: torch.Tensor  # [h, w]
    score: float


def _check_rows(x: torch.Tensor, name: str) -> None:
    # Rows are unit length, or exactly zero when every ReLU unit was inactive.
    n = x.detach().norm(dim=-1)
    bad = ((n - 1).abs() > UNIT_TOL) & (n > UNIT_TOL)
    if bad.any():
        raise ContractViolation(f"{name} rows must be unit-normalized (max |norm-1| = {(n - 1).abs().max():.3g})")


def layer_scores(
    o_n: torch.Tensor,
    o_ab: torch.Tensor,
    t_n: torch.Tensor,
    t_ab: torch.Tensor,
    use_subtraction: bool = True,
    temperature=1.0,
    layer: int = -1,
    check: bool = True,
) -> LayerScores:
    """Per-patch normality/abnormality scores from the two branches' head outputs."""
    if check:
        _check_rows(o_n, "normal-branch features")
        _check_rows(o_ab, "abnormal-branch features")
        _check_rows(t_n.unsqueeze(0), "t_n")
        _check_rows(t_ab.unsqueeze(0), "t_ab")
    s_n = o_n @ t_n
    s_ab = o_ab @ t_ab
    if use_subtraction:
        s_n = s_n - o_n @ t_ab
        s_ab = s_ab - o_ab @ t_n
    return LayerScores(s_n * temperature, s_ab * temperature, layer)


def _grid(scores: LayerScores, grid_side: int):
    """[..., G] x2 -> [B, 2, gs, gs] (a leading batch of 1 is added when unbatched)."""
    s = scores.stacked()
    lead = s.shape[:-2]
    if s.shape[-2] != grid_side * grid_side:
        raise InputError(f"{s.shape[-2]} patches do not form a {grid_side}x{grid_side} grid")
    s = s.reshape(-1, grid_side, grid_side, 2).permute(0, 3, 1, 2)
    return s, lead


def layer_maps(scores: Sequence[LayerScores], grid_side: int, target: Tuple[int, int]) -> List[torch.Tensor]:
    """Per-layer abnormal-probability maps, each [..., h, w]."""
    if not scores:
        raise InputError("anomaly_map needs at least one layer of scores")
    out = []
    for sc in scores:
        g, lead = _grid(sc, grid_side)
        if tuple(target) != (grid_side, grid_side):
            g = F.interpolate(g, size=tuple(target), mode="bilinear", align_corners=False)
        # Channels-last softmax so the identity-size case is bitwise the per-patch softmax.
        prob = torch.softmax(g.permute(0, 2, 3, 1).contiguous(), dim=-1)[..., 1]
        out.append(prob.reshape(*lead, *target))
    return out


def anomaly_map(scores: Sequence[LayerScores], grid_side: int, target: Tuple[int, int]) -> torch.Tensor:
    return torch.stack(layer_maps(scores, grid_side, target)).mean(dim=0)


def layer_image_scores(scores: Sequence[LayerScores]) -> List[torch.Tensor]:
    """Per-layer mean over patches of the abnormal softmax channel, each [...]."""
    if not scores:
        raise InputError("anomaly_score needs at least one layer of scores")
    return [torch.softmax(sc.stacked(), dim=-1)[..., 1].mean(dim=-1) for sc in scores]


def anomaly_score(scores: Sequence[LayerScores]) -> torch.Tensor:
    return torch.stack(layer_image_scores(scores)).mean(dim=0)


def image_logits(scores: LayerScores) -> torch.Tensor:
    """Mean patch scores per prompt, [..., 2], used as the alignment-loss logits."""
    return scores.stacked().mean(dim=-2)
