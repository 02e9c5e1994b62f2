"""Run configuration and its flat ``dotted.key = value`` text form."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Tuple

from .backbone import BackboneSpec
from .errors import ConfigurationError
from .losses import LossWeights
from .prompts import ABNORMAL_SYNONYMS, HANDCRAFTED_PHRASE, NORMAL_SYNONYMS


@dataclass
class AdapterConfig:
    mode: str = "dual"
    residual_ratio: float = 0.0


@dataclass
class PromptConfig:
    mode: str = "learnable"
    n_context: int = 8
    normal_synonyms: Tuple[str, ...] = NORMAL_SYNONYMS
    abnormal_synonyms: Tuple[str, ...] = ABNORMAL_SYNONYMS
    # Empty means: use the dataset manifest's modality word.
    objective: str = ""
    handcrafted_phrase: str = HANDCRAFTED_PHRASE


@dataclass
class ScoringConfig:
    use_subtraction: bool = True
    # 0 means: use the backbone's default (logit scale, or 1/0.07 for the toy encoder).
    temperature_init: float = 0.0


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 60
    max_steps: int = 0
    augment: bool = True
    flip_p: float = 0.5
    crop_scale_min: float = 0.9
    crop_scale_max: float = 1.0


@dataclass
class DataConfig:
    manifest: str = ""


@dataclass
class RunConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec.toy)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    shots: int = 16
    seed: int = 0
    threads: int = 1

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.loss.validate()
        if self.shots < 1:
            raise ConfigurationError("shots must be >= 1")
        if self.train.batch_size < 2:
            raise ConfigurationError("train.batch_size must be >= 2")
        if self.optim.name.lower() != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.optim.name!r}")
        return self

    def copy(self) -> "RunConfig":
        return from_flat(to_flat(self))


def reference_config(weights_path: str = "") -> RunConfig:
    """ViT-L/14 at 240 px with taps 6/12/18/24."""
    return RunConfig(backbone=BackboneSpec(kind="pretrained", weights_path=weights_path))


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, tp, key: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin in (tuple, Tuple):
            inner = typing.get_args(tp)[0]
            if not text:
                return ()
            return tuple(_parse(part, inner, key) for part in text.split(","))
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {text!r} as {tp}") from None
    raise ConfigurationError(f"config key {key!r}: unsupported type {tp}")


def to_flat(cfg: RunConfig) -> Dict[str, str]:
    out: Dict[str, str] = {}

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(v):
                walk(v, key + ".")
            else:
                out[key] = _format(v)

    walk(cfg, "")
    return out


def apply_overrides(cfg: RunConfig, pairs: Iterable[Tuple[str, str]]) -> RunConfig:
    for key, text in pairs:
        parts = key.strip().split(".")
        obj = cfg
        for p in parts[:-1]:
            if not dataclasses.is_dataclass(obj) or p not in {f.name for f in dataclasses.fields(obj)}:
                raise ConfigurationError(f"unknown config key {key!r}")
            obj = getattr(obj, p)
        name = parts[-1]
        if not dataclasses.is_dataclass(obj):
            raise ConfigurationError(f"unknown config key {key!r}")
        hints = _hints(type(obj))
        if name not in hints or dataclasses.is_dataclass(getattr(obj, name)):
            raise ConfigurationError(f"unknown config key {key!r}")
        setattr(obj, name, _parse(text, hints[name], key))
    return cfg


def from_flat(flat: Dict[str, str], base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    return apply_overrides(cfg, flat.items())


def parse_lines(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_override(text: str) -> Tuple[str, str]:
    if "=" not in text:
        raise ConfigurationError(f"override must be key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


def loads(text: str, source: str = "<config>") -> RunConfig:
    return from_flat(parse_lines(text, source))


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return loads(path.read_text(), str(path))
