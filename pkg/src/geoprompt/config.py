"""Training configuration: presets, ``key=value`` files with dotted nesting, overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .dataset import SynthConfig
from .encoders import ENCODER_KINDS, DepthEncoderConfig, EncoderConfig
from .errors import ConfigError


@dataclass
class Ablation:
    bfu: bool = True
    dpe: bool = True
    cl: bool = True
    sga: bool = True


@dataclass
class Backbones:
    rgb: str = "residual"
    depth: str = "attention"


# rows of the key-design and backbone ablation tables
DESIGN_GRID = {
    "M.1": Ablation(False, False, False, False),
    "M.2": Ablation(True, False, False, False),
    "M.3": Ablation(True, True, False, False),
    "M.4": Ablation(True, False, False, True),
    "M.5": Ablation(True, True, True, False),
    "M.6": Ablation(False, True, True, True),
    "Ours": Ablation(True, True, True, True),
}
BACKBONE_GRID = {
    "Dual CNN": Backbones("residual", "residual"),
    "Dual SAM": Backbones("attention", "attention"),
    "SAM+CNN": Backbones("attention", "residual"),
    "CNN+SAM": Backbones("residual", "attention"),
}


@dataclass
class TrainConfig:
    scale: str = "toy"
    resolution: int = 256
    common_width: int = 256
    depth_encoder: DepthEncoderConfig = field(default_factory=DepthEncoderConfig)
    pretrained_depth_weights: str = ""
    se_reduction: int = 8
    epochs: int = 60
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 3e-5
    lr_floor: float = 1e-6
    tau: float = 0.07
    lambdas: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)
    backbones: Backbones = field(default_factory=Backbones)
    attention_mode: str = "sigmoid"
    similarity: str = "cosine"
    ref_threshold: float = -1.0  # < 0: coverage-weighted pooling
    dataset: str = "synthetic"
    synth: SynthConfig = field(default_factory=SynthConfig)
    val_frac: float = 0.2
    augment: bool = True
    max_steps: int = 0  # 0: no cap
    eval_every: int = 1  # epochs between validation passes
    threshold: float = 0.5
    out_dir: str = "runs/default"
    threads: int = 0  # 0: leave torch default

    @classmethod
    def preset(cls, scale: str = "toy") -> "TrainConfig":
        if scale == "toy":
            return cls()
        if scale == "paper":
            return cls(scale="paper", resolution=1024, depth_encoder=DepthEncoderConfig(12, 768, 16, 12),
                       se_reduction=16, synth=SynthConfig(resolution=1024, curve_thickness_px=24))
        raise ConfigError(f"unknown scale {scale!r}")

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > self.lr_floor > 0:
            raise ConfigError(f"need lr > lr_floor > 0, got lr={self.lr} lr_floor={self.lr_floor}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if len(self.lambdas) != 3:
            raise ConfigError("lambdas needs three values (seg, cl, ana)")
        if self.ablation.cl and not self.ablation.dpe:
            raise ConfigError("the contrastive loss needs the prompt module (ablation.dpe)")
        for k in (self.backbones.rgb, self.backbones.depth):
            if k not in ENCODER_KINDS:
                raise ConfigError(f"unknown backbone {k!r}")
        if self.attention_mode not in ("sigmoid", "softmax"):
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.similarity not in ("cosine", "dot"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.common_width % self.se_reduction or self.common_width < self.se_reduction:
            raise ConfigError("common_width must be a multiple of se_reduction")
        if self.common_width % 8:
            raise ConfigError("common_width must be a multiple of 8")
        self.encoder_config().validate()
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            scale=self.scale, resolution=self.resolution, common_width=self.common_width,
            depth_encoder=self.depth_encoder,
            pretrained_depth_weights=self.pretrained_depth_weights or None, seed=self.seed,
        )

    def architecture(self) -> dict:
        return {
            "resolution": self.resolution,
            "common_width": self.common_width,
            "depth_encoder": dataclasses.asdict(self.depth_encoder),
            "se_reduction": self.se_reduction,
            "ablation": dataclasses.asdict(self.ablation),
            "backbones": dataclasses.asdict(self.backbones),
            "attention_mode": self.attention_mode,
        }

    def architecture_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls.preset(d.get("scale", "toy"))
        for key, value in _flatten(d).items():
            set_value(cfg, key, value)
        return cfg


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(value, tp, key: str):
    try:
        if tp is bool:
            return value if isinstance(value, bool) else _parse_bool(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is tuple:
            if isinstance(value, str):
                value = [v for v in value.replace("(", "").replace(")", "").split(",") if v.strip()]
            return tuple(float(v) for v in value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from None


def set_value(cfg, key: str, value) -> None:
    """Set a dotted ``key`` on a (nested) dataclass config, coercing from text."""
    head, _, rest = key.partition(".")
    names = {f.name: f for f in fields(cfg)}
    if head not in names:
        raise ConfigError(f"unknown config key {key!r}")
    hints = typing.get_type_hints(type(cfg))
    current = getattr(cfg, head)
    if rest:
        if not is_dataclass(current):
            raise ConfigError(f"{head!r} has no sub-keys (got {key!r})")
        if getattr(type(current), "__dataclass_params__").frozen:
            _set_frozen(current, rest, value, cfg, head)
        else:
            set_value(current, rest, value)
        return
    tp = hints[head]
    tp = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}.get(getattr(tp, "__name__", ""), tp)
    if tp not in (int, float, bool, str, tuple):
        tp = str
    setattr(cfg, head, _coerce(value, tp, key))


def _set_frozen(current, rest: str, value, parent, attr: str) -> None:
    names = {f.name for f in fields(current)}
    if rest not in names:
        raise ConfigError(f"unknown config key {attr}.{rest}")
    tp = typing.get_type_hints(type(current))[rest]
    try:
        setattr(parent, attr, replace(current, **{rest: _coerce(value, tp, f"{attr}.{rest}")}))
    except ConfigError:
        raise
    except Exception as exc:  # frozen dataclasses validate in __post_init__
        raise ConfigError(f"{attr}.{rest}={value!r}: {exc}") from None


def parse_kv_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys may be dotted."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """Preset for the chosen scale, then the file, then ``overrides`` (last wins)."""
    values: dict = {}
    if path:
        try:
            values.update(parse_kv_text(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
    values.update(overrides or {})
    cfg = TrainConfig.preset(values.pop("scale", "toy"))
    for k, v in values.items():
        set_value(cfg, k, v)
    return cfg.validate()


def dump_kv(cfg) -> str:
    lines = []
    for k, v in _flatten(dataclasses.asdict(cfg)).items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
