"""
Gated DiT Configuration Classes
Model, flow, data and evaluation knobs plus the key-value run-file parser.
"""

import os
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from .data import TaskKind
from .errors import ConfigError
from .gates import GateSpec


class TrainMode(Enum):
    PRETRAIN = "pretrain"     # unconditional, everything trainable
    FINETUNE = "finetune"     # base checkpoint frozen, LoRA + gates trainable
    SCRATCH = "scratch"       # condition-aware, everything trainable


@dataclass
class ModelConfig:
    """Backbone geometry"""

    # Image / patch grid
    image_size: int = 32                 # square canvas in pixels
    channels: int = 3
    patch_size: int = 4                  # 32/4 -> 8x8 = 64 latent tokens

    # Transformer
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    d_ffn: int = 256
    normalized_linear_attention: bool = True

    # Conditioning
    n_classes: int = 6                   # +1 reserved null class for guidance
    d_text: int = 256                    # class-token width (cross-attention K/V input)
    t_embed_dim: int = 256               # sinusoidal width
    t_hidden: int = 256                  # time perceptron hidden width
    time_scale: float = 1000.0           # t in [0,1] scaled before the sinusoid
    share_condition_pos: bool = True     # condition tokens reuse latent positions

    # Adaptation
    lora_rank: int = 16
    lora_scale: Optional[float] = None   # None -> 1/rank
    gate_spec: GateSpec = field(default_factory=GateSpec)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_latent_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def null_class(self) -> int:
        return self.n_classes

    @property
    def effective_lora_scale(self) -> float:
        if self.lora_scale is not None:
            return float(self.lora_scale)
        return 1.0 / self.lora_rank if self.lora_rank > 0 else 0.0

    def validate(self) -> List[str]:
        problems = []
        for name in ("image_size", "channels", "patch_size", "d_model", "n_blocks",
                     "n_heads", "d_ffn", "n_classes", "d_text", "t_embed_dim", "t_hidden"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.patch_size >= 1 and self.image_size % self.patch_size:
            problems.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            problems.append(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.t_embed_dim % 2:
            problems.append("t_embed_dim must be even")
        if self.lora_rank < 0:
            problems.append("lora_rank must be >= 0")
        return problems


@dataclass
class FlowConfig:
    """Rectified-flow training and sampling"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01           # decoupled (AdamW)
    cond_dropout: float = 0.1            # prob. of training a sample unconditionally
    sample_steps: int = 16
    guidance_scale: float = 1.0

    def validate(self) -> List[str]:
        problems = []
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            problems.append("beta1/beta2 must lie in [0, 1)")
        if not 0 <= self.cond_dropout <= 1:
            problems.append("cond_dropout must lie in [0, 1]")
        if self.sample_steps < 1:
            problems.append("sample_steps must be >= 1")
        return problems


@dataclass
class DataConfig:
    task: TaskKind = TaskKind.EDGE
    batch_size: int = 8

    def validate(self) -> List[str]:
        return ["batch_size must be >= 1"] if self.batch_size < 1 else []


@dataclass
class EvalConfig:
    """Periodic evaluation and convergence statistics"""
    eval_interval: int = 250             # also the checkpoint interval
    eval_samples: int = 4
    ema_alpha: float = 0.05              # loss smoothing for steps-to-threshold
    threshold_factor: float = 1.05       # tau = factor x reference final loss
    edge_tolerance: int = 1              # dilation radius in edge F1

    def validate(self) -> List[str]:
        problems = []
        if self.eval_interval < 1:
            problems.append("eval_interval must be >= 1")
        if self.eval_samples < 1:
            problems.append("eval_samples must be >= 1")
        if not 0 < self.ema_alpha <= 1:
            problems.append("ema_alpha must lie in (0, 1]")
        return problems


def default_output_dir() -> str:
    return os.environ.get("GATED_DIT_OUTPUT_DIR", "runs")


@dataclass
class RunConfig:
    """Everything one training / comparison run needs"""
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    steps: int = 2000
    seed: int = 0
    output_dir: str = field(default_factory=default_output_dir)
    mode: TrainMode = TrainMode.SCRATCH
    base_checkpoint: Optional[str] = None   # finetune only
    jobs: int = 1                           # parallel runs in compare/ablate

    def validate(self) -> List[str]:
        problems = (self.model.validate() + self.flow.validate()
                    + self.data.validate() + self.eval.validate())
        if self.steps < 0:
            problems.append("steps must be >= 0")
        if self.jobs < 1:
            problems.append("jobs must be >= 1")
        if self.mode is TrainMode.FINETUNE and not self.base_checkpoint:
            problems.append("finetune mode needs base_checkpoint")
        return problems

    def with_gate(self, spec: GateSpec) -> "RunConfig":
        return replace(self, model=replace(self.model, gate_spec=spec))


DEFAULT_MODEL_CONFIG = ModelConfig()
DEFAULT_FLOW_CONFIG = FlowConfig()
DEFAULT_DATA_CONFIG = DataConfig()
DEFAULT_EVAL_CONFIG = EvalConfig()


# ==================== FLAT KEY REGISTRY ====================

def _to_bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _to_optional_float(text: str) -> Optional[float]:
    value = str(text).strip()
    return None if value.lower() in ("", "none", "null") else float(value)


def _to_optional_str(text: str) -> Optional[str]:
    value = str(text).strip()
    return None if value.lower() in ("", "none", "null") else value


def _to_enum(enum_cls) -> Callable[[str], Enum]:
    def parse(text: str):
        try:
            return enum_cls(str(text).strip().lower())
        except ValueError:
            choices = ", ".join(m.value for m in enum_cls)
            raise ValueError(f"expected one of {choices}, got '{text}'")
    return parse


_SECTIONS = {"model": ModelConfig, "flow": FlowConfig, "data": DataConfig, "eval": EvalConfig}
_SPECIAL_PARSERS = {
    "lora_scale": _to_optional_float,
    "task": _to_enum(TaskKind),
    "mode": _to_enum(TrainMode),
    "base_checkpoint": _to_optional_str,
}
_TYPE_PARSERS = {int: int, float: float, bool: _to_bool, str: str}
_GATE_KEYS = ("gate_enabled", "gate_granularity", "gate_position", "gate_score_source", "gate_interaction")
_RUN_KEYS = ("steps", "seed", "output_dir", "mode", "base_checkpoint", "jobs")


def _field_type(cls, name: str):
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    for f in fields(cls):
        if f.name == name:
            return f.type if isinstance(f.type, type) else hints.get(str(f.type), str)
    return str


def config_keys() -> Dict[str, Tuple[Optional[str], Callable[[str], Any]]]:
    """flat key -> (section or None for top level, parser)"""
    registry: Dict[str, Tuple[Optional[str], Callable[[str], Any]]] = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if f.name == "gate_spec":
                continue
            parser = _SPECIAL_PARSERS.get(f.name) or _TYPE_PARSERS.get(_field_type(cls, f.name), str)
            registry[f.name] = (section, parser)
    for key in _RUN_KEYS:
        parser = _SPECIAL_PARSERS.get(key) or _TYPE_PARSERS.get(_field_type(RunConfig, key), str)
        registry[key] = (None, parser)
    for key in _GATE_KEYS:
        registry[key] = ("gate", str)
    return registry


def from_flat_dict(values: Mapping[str, Any], base: Optional[RunConfig] = None,
                   lines: Optional[Mapping[str, Optional[int]]] = None,
                   source: str = "<config>") -> RunConfig:
    """Apply flat key/values on top of base, collecting every error before raising"""
    base = base or RunConfig()
    registry = config_keys()
    lines = lines or {}
    errors: List[Tuple[Optional[int], str]] = []
    section_updates: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
    run_updates: Dict[str, Any] = {}
    gate_updates = base.model.gate_spec.to_dict()

    for key, raw in values.items():
        line_no = lines.get(key)
        if key not in registry:
            errors.append((line_no, f"unknown key '{key}'"))
            continue
        section, parser = registry[key]
        try:
            value = parser(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as e:
            errors.append((line_no, f"bad value for '{key}': {e}"))
            continue
        if section == "gate":
            gate_updates[key] = value
        elif section is None:
            run_updates[key] = value
        else:
            section_updates[section][key] = value

    gate_spec = base.model.gate_spec
    try:
        gate_spec = GateSpec.from_dict(gate_updates)
    except ValueError as e:
        gate_line = next((lines.get(k) for k in _GATE_KEYS if k in values), None)
        errors.append((gate_line, str(e)))

    if errors:
        raise ConfigError(errors, source=source)

    cfg = replace(
        base,
        model=replace(base.model, gate_spec=gate_spec, **section_updates["model"]),
        flow=replace(base.flow, **section_updates["flow"]),
        data=replace(base.data, **section_updates["data"]),
        eval=replace(base.eval, **section_updates["eval"]),
        **run_updates,
    )
    problems = cfg.validate()
    if problems:
        raise ConfigError([(None, p) for p in problems], source=source)
    return cfg


def to_flat_dict(cfg: RunConfig) -> Dict[str, Any]:
    """Inverse of from_flat_dict; enums become their string values"""
    flat: Dict[str, Any] = {}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            if f.name == "gate_spec":
                continue
            value = getattr(obj, f.name)
            flat[f.name] = value.value if isinstance(value, Enum) else value
    flat.update(cfg.model.gate_spec.to_dict())
    for key in _RUN_KEYS:
        value = getattr(cfg, key)
        flat[key] = value.value if isinstance(value, Enum) else value
    return flat


def parse_config_text(text: str, source: str = "<config>") -> Tuple[Dict[str, str], Dict[str, int]]:
    """'key = value' lines with '#' comments -> (values, line numbers)"""
    values: Dict[str, str] = {}
    lines: Dict[str, int] = {}
    errors: List[Tuple[Optional[int], str]] = []
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append((line_no, f"expected 'key = value', got '{raw_line.strip()}'"))
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            errors.append((line_no, "missing key"))
            continue
        if key in values:
            errors.append((line_no, f"duplicate key '{key}' (first set on line {lines[key]})"))
            continue
        values[key] = value
        lines[key] = line_no
    if errors:
        raise ConfigError(errors, source=source)
    return values, lines


def load_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                    base: Optional[RunConfig] = None) -> RunConfig:
    """
    Build a RunConfig from an optional key-value file plus CLI overrides.

    File errors and unknown keys are all reported together with line numbers.
    Overrides win over file values.
    """
    values: Dict[str, Any] = {}
    lines: Dict[str, Optional[int]] = {}
    source = path or "<flags>"
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError([(None, f"cannot read config: {e}")], source=path)
        except UnicodeDecodeError as e:
            raise ConfigError([(None, f"config is not UTF-8: {e}")], source=path)
        values, lines = parse_config_text(text, source=path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = value
        lines[key] = None
    return from_flat_dict(values, base=base, lines=lines, source=source)
