"""Model wiring, training loop, checkpoints, evaluation and ablations."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from safetensors import safe_open
from safetensors.torch import load_file
from safetensors.torch import save as save_bytes

from . import config as cfgmod
from .adapters import adapt, init_bank
from .backbone import FrozenBackbone, load_backbone
from .config import RunConfig
from .data import (
    AugmentConfig,
    DatasetManifest,
    FewShotSpec,
    Sample,
    augment,
    balanced_batches,
    few_shot_sample,
    load_sample,
)
from .errors import ConfigurationError, DivergenceError, InputError
from .losses import BatchTargets, composite_loss
from .metrics import auroc, pixel_auroc
from .prompts import GENERIC_OBJECTIVE, HANDCRAFTED_PHRASE, PromptBank, anchors
from .report import EvalReport
from .scoring import AnomalyOutput, LayerScores, image_logits, layer_image_scores, layer_maps, layer_scores
from .utils import tensor_checksum

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "madclip-checkpoint-1"
ABLATIONS = {
    "a": "handcrafted prompts",
    "b": "generic objective word",
    "c": "one shared adapter set for both branches",
    "d": "no opposite-class subtraction",
    "e": "softmax alignment loss",
    "f": "single common head",
}


@dataclass
class LevelOutput:
    layer: int
    det: LayerScores
    seg: LayerScores


class MadCLIP(nn.Module):
    """Frozen backbone + dual adapter bank + prompt bank + learnable scalars."""

    def __init__(self, config: RunConfig, backbone: Optional[FrozenBackbone] = None, objective: str = ""):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = backbone if backbone is not None else load_backbone(config.backbone)
        spec = self.backbone.spec
        seeds = np.random.SeedSequence(config.seed).generate_state(2)
        self.bank = init_bank(spec, int(seeds[0]), config.adapter.mode, config.adapter.residual_ratio)
        p = config.prompt
        self.objective = objective or p.objective or GENERIC_OBJECTIVE
        self.prompts = PromptBank(
            self.backbone,
            p.normal_synonyms,
            p.abnormal_synonyms,
            objective=self.objective,
            n_context=p.n_context,
            mode=p.mode,
            seed=int(seeds[1]),
            handcrafted_phrase=p.handcrafted_phrase or HANDCRAFTED_PHRASE,
        )
        temp = config.scoring.temperature_init or self.backbone.default_temperature()
        self.log_temperature = nn.Parameter(torch.tensor(math.log(temp)))
        self.siglip_log_t = nn.Parameter(torch.tensor(math.log(config.loss.siglip_t_init)))
        self.siglip_b = nn.Parameter(torch.tensor(float(config.loss.siglip_b_init)))

    # -- parameters ---------------------------------------------------------

    def learnable_parameters(self) -> List[nn.Parameter]:
        seen, out = set(), []
        for mod in (self.bank, self.prompts):
            for prm in mod.parameters():
                if id(prm) not in seen:
                    seen.add(id(prm))
                    out.append(prm)
        out += [self.log_temperature, self.siglip_log_t, self.siglip_b]
        return out

    def named_state(self) -> Dict[str, torch.Tensor]:
        out = dict(self.bank.named_entries())
        out["prompt.normal.context"] = self.prompts.normal_context
        out["prompt.abnormal.context"] = self.prompts.abnormal_context
        out["scoring.log_temperature"] = self.log_temperature
        out["loss.siglip_log_t"] = self.siglip_log_t
        out["loss.siglip_b"] = self.siglip_b
        return out

    def load_named_state(self, tensors: Dict[str, torch.Tensor]) -> None:
        state = self.named_state()
        missing = set(state) - set(tensors)
        if missing:
            raise ConfigurationError(f"checkpoint is missing entries: {sorted(missing)[:5]}")
        with torch.no_grad():
            for name, dst in state.items():
                src = tensors[name]
                if src.shape != dst.shape:
                    raise ConfigurationError(f"{name}: checkpoint shape {tuple(src.shape)} != model {tuple(dst.shape)}")
                dst.copy_(src)

    def learnable_checksum(self) -> str:
        return tensor_checksum(self.named_state().items())

    # -- forward ------------------------------------------------------------

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def forward_levels(self, images) -> List[LevelOutput]:
        with torch.no_grad():
            feats = self.backbone.encode_image_multilevel(images)
        t_n, t_ab = anchors(self.prompts, self.backbone)
        out_n = adapt(feats, "normal", self.bank)
        out_ab = adapt(feats, "abnormal", self.bank)
        sub = self.config.scoring.use_subtraction
        levels = []
        for layer in sorted(feats):
            det = layer_scores(out_n[layer]["det"], out_ab[layer]["det"], t_n, t_ab, sub, layer=layer)
            seg = layer_scores(out_n[layer]["seg"], out_ab[layer]["seg"], t_n, t_ab, sub, layer=layer)
            levels.append(LevelOutput(layer, det, seg))
        return levels

    def compute_loss(self, images: np.ndarray, targets: BatchTargets):
        levels = self.forward_levels(images)
        temp = self.temperature
        target = tuple(images.shape[1:3])
        gs = self.backbone.spec.grid_side
        maps = layer_maps([lv.seg.scaled(temp) for lv in levels], gs, target)
        logits = [image_logits(lv.det) for lv in levels]
        return composite_loss(
            maps, logits, targets, self.config.loss, t=self.siglip_log_t.exp(), b=self.siglip_b
        )

    @torch.no_grad()
    def predict_batch(self, images: np.ndarray):
        """(maps [B, h, w], scores [B]) for a batch of [B, h, w, 3] images."""
        levels = self.forward_levels(images)
        temp = self.temperature
        gs = self.backbone.spec.grid_side
        maps = layer_maps([lv.seg.scaled(temp) for lv in levels], gs, tuple(images.shape[1:3]))
        scores = layer_image_scores([lv.det.scaled(temp) for lv in levels])
        return torch.stack(maps).mean(0), torch.stack(scores).mean(0)


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    tensors: Dict[str, torch.Tensor]
    config: RunConfig
    step: int
    backbone_fingerprint: str
    objective: str
    dataset: str = ""
    modality: str = ""
    history: List[dict] = field(default_factory=list)

    @classmethod
    def from_model(cls, model: MadCLIP, step: int, dataset: str = "", modality: str = "", history=None):
        tensors = {k: v.detach().clone().contiguous() for k, v in model.named_state().items()}
        return cls(
            tensors,
            model.config.copy(),
            step,
            model.backbone.fingerprint(),
            model.objective,
            dataset,
            modality,
            list(history or []),
        )

    def checksum(self) -> str:
        return tensor_checksum(self.tensors.items())

    def metadata(self) -> Dict[str, str]:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": cfgmod.dumps(self.config),
            "step": str(self.step),
            "backbone_fingerprint": self.backbone_fingerprint,
            "objective": self.objective,
            "dataset": self.dataset,
            "modality": self.modality,
            "adapter_mode": self.config.adapter.mode,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(_canonical_safetensors(save_bytes(self.tensors, metadata=self.metadata())))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"checkpoint not found: {path}")
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"{path} is not a checkpoint of format {CHECKPOINT_FORMAT}")
        return cls(
            tensors=load_file(str(path)),
            config=cfgmod.loads(meta["config"], f"{path}:config"),
            step=int(meta["step"]),
            backbone_fingerprint=meta["backbone_fingerprint"],
            objective=meta.get("objective", ""),
            dataset=meta.get("dataset", ""),
            modality=meta.get("modality", ""),
        )

    def describe(self) -> str:
        lines = [f"{k}: {v}" for k, v in self.metadata().items() if k != "config"]
        lines.append(f"checksum: {self.checksum()}")
        lines.append("tensors:")
        for name in sorted(self.tensors):
            t = self.tensors[name]
            lines.append(f"  {name} {tuple(t.shape)} {str(t.dtype).replace('torch.', '')}")
        lines.append("config:")
        lines += ["  " + line for line in cfgmod.dumps(self.config).splitlines()]
        return "\n".join(lines) + "\n"


def _canonical_safetensors(blob: bytes) -> bytes:
    """Re-emit the JSON header with sorted keys; safetensors writes metadata in hash order."""
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + n])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + blob[8 + n :]


def model_from_checkpoint(ckpt: Checkpoint, backbone: Optional[FrozenBackbone] = None) -> MadCLIP:
    model = MadCLIP(ckpt.config.copy(), backbone, objective=ckpt.objective)
    fp = model.backbone.fingerprint()
    if fp != ckpt.backbone_fingerprint:
        raise ConfigurationError("checkpoint was trained against a different backbone (fingerprint mismatch)")
    model.load_named_state(ckpt.tensors)
    return model


# -- training ------------------------------------------------------------------


def _fit_size(sample: Sample, size: int) -> Sample:
    """Resize image (bilinear) and mask (nearest) to a square ``size``."""
    h, w = sample.image.shape[:2]
    if (h, w) == (size, size):
        return sample
    img = torch.from_numpy(sample.image).permute(2, 0, 1)[None]
    img = torch.nn.functional.interpolate(img, size=(size, size), mode="bilinear", align_corners=False)
    mask = sample.mask
    if mask is not None:
        m = torch.from_numpy(mask)[None, None]
        mask = torch.nn.functional.interpolate(m, size=(size, size), mode="nearest")[0, 0].numpy()
    return Sample(img[0].permute(1, 2, 0).clamp(0, 1).numpy(), sample.label, mask, sample.path)


def _batch_targets(samples: Sequence[Sample]) -> BatchTargets:
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    has = torch.tensor([s.mask is not None for s in samples])
    if not has.any():
        return BatchTargets(labels)
    h, w = samples[0].image.shape[:2]
    masks = torch.stack(
        [torch.tensor(np.array(s.mask)) if s.mask is not None else torch.zeros(h, w) for s in samples]
    ).float()
    return BatchTargets(labels, masks, has)


def _check_partition(model: MadCLIP, params: Sequence[nn.Parameter]) -> None:
    frozen = {id(p) for p in model.backbone.parameters()}
    if frozen & {id(p) for p in params}:
        raise ConfigurationError("optimizer parameter set intersects the frozen backbone")


def train(
    config: RunConfig,
    manifest: DatasetManifest,
    backbone: Optional[FrozenBackbone] = None,
    log_path=None,
) -> Checkpoint:
    config = config.copy().validate()
    torch.set_num_threads(max(1, config.threads))
    model = MadCLIP(config, backbone, objective=config.prompt.objective or manifest.modality)
    params = model.learnable_parameters()
    _check_partition(model, params)
    params = [p for p in params if p.requires_grad]
    o = config.optim
    opt = torch.optim.Adam(params, lr=o.lr, betas=(o.beta1, o.beta2), eps=o.eps)

    size = model.backbone.spec.input_size
    selection = few_shot_sample(manifest, FewShotSpec(config.shots, config.seed))
    samples = [_fit_size(load_sample(manifest, e), size) for e in selection]
    labels = [s.label for s in samples]
    tc = config.train
    aug = AugmentConfig(tc.augment, tc.flip_p, (tc.crop_scale_min, tc.crop_scale_max))
    rng = np.random.default_rng(config.seed)

    history: List[dict] = []
    step = 0
    log_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_fh = log_path.open("w")
        log_fh.write("epoch,step,L,L_dice,L_focal,L_siglip\n")
    try:
        for epoch in range(1, tc.epochs + 1):
            sums = {"total": 0.0, "dice": 0.0, "focal": 0.0, "siglip": 0.0}
            n_batches = 0
            for batch in balanced_batches(range(len(samples)), labels, tc.batch_size, rng):
                batch_samples = [augment(samples[i], [config.seed, epoch, i], aug) for i in batch]
                images = np.stack([s.image for s in batch_samples])
                loss, br = model.compute_loss(images, _batch_targets(batch_samples))
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step + 1}: {br}")
                opt.zero_grad(set_to_none=False)
                loss.backward()
                opt.step()
                step += 1
                n_batches += 1
                for k in sums:
                    sums[k] += br[k]
                if tc.max_steps and step >= tc.max_steps:
                    break
            row = {"epoch": epoch, "step": step, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
            history.append(row)
            if log_fh:
                log_fh.write(
                    f"{epoch},{step},{row['total']:.6f},{row['dice']:.6f},{row['focal']:.6f},{row['siglip']:.6f}\n"
                )
            log.info("epoch %d step %d loss %.4f", epoch, step, row["total"])
            if tc.max_steps and step >= tc.max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    return Checkpoint.from_model(model, step, manifest.name, manifest.modality, history)


# -- inference / evaluation ------------------------------------------------------


def _as_model(checkpoint, backbone=None) -> MadCLIP:
    if isinstance(checkpoint, MadCLIP):
        return checkpoint
    return model_from_checkpoint(checkpoint, backbone)


def predict(checkpoint, image, backbone: Optional[FrozenBackbone] = None) -> AnomalyOutput:
    """Anomaly map at the image's own resolution and the image-level score."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise InputError(f"expected an [h, w, 3] image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise InputError("image contains non-finite pixels")
    model = _as_model(checkpoint, backbone)
    maps, scores = model.predict_batch(img[None])
    return AnomalyOutput(maps[0], float(scores[0]))


def collect_predictions(model: MadCLIP, manifest: DatasetManifest, split: str = "test"):
    scores, labels, maps, masks = [], [], [], []
    for e in manifest.split(split):
        s = load_sample(manifest, e)
        out = predict(model, s.image)
        scores.append(out.score)
        labels.append(s.label)
        if s.mask is not None:
            maps.append(out.map.numpy())
            masks.append(s.mask)
    return np.array(scores), np.array(labels), maps, masks


def evaluate(
    checkpoint,
    manifest: DatasetManifest,
    backbone: Optional[FrozenBackbone] = None,
    protocol: str = "same",
) -> EvalReport:
    model = _as_model(checkpoint, backbone)
    torch.set_num_threads(max(1, model.config.threads))
    scores, labels, maps, masks = collect_predictions(model, manifest)
    ac = auroc(scores, labels)
    as_ = None
    if manifest.segmentation_capable() and maps:
        as_ = pixel_auroc(maps, masks)
    source = checkpoint.dataset if isinstance(checkpoint, Checkpoint) else ""
    return EvalReport(manifest.name, model.config.shots, model.config.seed, ac, as_, protocol, source)


def cross_evaluate(checkpoint: Checkpoint, target: DatasetManifest, backbone=None) -> EvalReport:
    if checkpoint.modality and target.modality != checkpoint.modality:
        raise ConfigurationError(
            f"target modality {target.modality!r} differs from training modality {checkpoint.modality!r}"
        )
    return evaluate(checkpoint, target, backbone, protocol="cross")


# -- ablations -----------------------------------------------------------------


def apply_ablation(config: RunConfig, which: str, generic_objective: str = GENERIC_OBJECTIVE) -> RunConfig:
    if which not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {which!r}; choose from {sorted(ABLATIONS)}")
    cfg = config.copy()
    if which == "a":
        cfg.prompt.mode = "handcrafted"
    elif which == "b":
        cfg.prompt.objective = generic_objective
    elif which == "c":
        cfg.adapter.mode = "shared_single_branch"
    elif which == "d":
        cfg.scoring.use_subtraction = False
    elif which == "e":
        cfg.loss.mode = "clip_softmax"
    elif which == "f":
        cfg.adapter.mode = "single_head"
    return cfg


@dataclass
class AblationReport:
    which: str
    base: EvalReport
    toggled: EvalReport
    base_checkpoint: Checkpoint
    toggled_checkpoint: Checkpoint

    @property
    def delta_ac(self) -> float:
        return self.toggled.ac_auc - self.base.ac_auc

    @property
    def delta_as(self) -> Optional[float]:
        if self.base.as_auc is None or self.toggled.as_auc is None:
            return None
        return self.toggled.as_auc - self.base.as_auc

    def text(self) -> str:
        d_as = "-" if self.delta_as is None else f"{100 * self.delta_as:+.2f}"
        return (
            f"ablation ({self.which}) {ABLATIONS[self.which]}: "
            f"AC {100 * self.base.ac_auc:.2f} -> {100 * self.toggled.ac_auc:.2f} ({100 * self.delta_ac:+.2f}); "
            f"AS delta {d_as}\n"
        )


def run_ablation(config: RunConfig, which: str, manifest: DatasetManifest, backbone=None) -> AblationReport:
    toggled_cfg = apply_ablation(config, which)
    base_ck = train(config, manifest, backbone)
    tog_ck = train(toggled_cfg, manifest, backbone)
    return AblationReport(
        which, evaluate(base_ck, manifest, backbone), evaluate(tog_ck, manifest, backbone), base_ck, tog_ck
    )
