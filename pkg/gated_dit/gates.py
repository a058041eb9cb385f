#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Condition Gates
Gated modulation and fusion of latent and image-condition hidden states.

Ablation axes:
- gating on/off (off = attention-only baseline)
- interaction: joint self-attention over [X; C_I] or separate streams
- position: after self-attention / cross-attention / FFN
- granularity: token-wise, element-wise, or direct addition
- score source: block input (pre) or the hidden state itself (post)
"""
import itertools
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, FusionAlignmentError
from .numerics import Tensor, add, matmul, mul, parameter, sigmoid

logger = logging.getLogger(__name__)


class Granularity(Enum):
    TOKEN_WISE = "token_wise"
    ELEMENT_WISE = "element_wise"
    DIRECT_ADD = "direct_add"


class GatePosition(Enum):
    AFTER_SELF_ATTENTION = "after_self_attention"
    AFTER_CROSS_ATTENTION = "after_cross_attention"
    AFTER_FFN = "after_ffn"


class ScoreSource(Enum):
    PRE_ATTENTION = "pre_attention"
    POST_ATTENTION = "post_attention"


def _parse_enum(enum_cls, value):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(str(value).strip().lower())
    except ValueError:
        choices = ", ".join(m.value for m in enum_cls)
        raise ValueError(f"invalid {enum_cls.__name__} '{value}' (choose from {choices})")


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"invalid boolean '{value}'")


@dataclass(frozen=True)
class GateSpec:
    """One cell of the gating ablation space"""
    granularity: Granularity = Granularity.TOKEN_WISE
    position: GatePosition = GatePosition.AFTER_SELF_ATTENTION
    score_source: ScoreSource = ScoreSource.PRE_ATTENTION
    interaction: bool = True
    enabled: bool = True            # False = attention-only, no fusion step

    def __post_init__(self):
        object.__setattr__(self, "granularity", _parse_enum(Granularity, self.granularity))
        object.__setattr__(self, "position", _parse_enum(GatePosition, self.position))
        object.__setattr__(self, "score_source", _parse_enum(ScoreSource, self.score_source))
        object.__setattr__(self, "interaction", _parse_bool(self.interaction))
        object.__setattr__(self, "enabled", _parse_bool(self.enabled))

    @property
    def uses_gate_params(self) -> bool:
        return self.enabled and self.granularity is not Granularity.DIRECT_ADD

    @property
    def label(self) -> str:
        for name, spec in NAMED_VARIANTS.items():
            if spec == self:
                return name
        if not self.enabled:
            return f"nogate-{'int' if self.interaction else 'sep'}"
        return "-".join([
            self.granularity.value, self.position.value, self.score_source.value,
            "int" if self.interaction else "sep",
        ])

    def to_dict(self) -> Dict[str, object]:
        return {
            "gate_enabled": self.enabled,
            "gate_granularity": self.granularity.value,
            "gate_position": self.position.value,
            "gate_score_source": self.score_source.value,
            "gate_interaction": self.interaction,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "GateSpec":
        default = cls()
        return cls(
            granularity=data.get("gate_granularity", default.granularity),
            position=data.get("gate_position", default.position),
            score_source=data.get("gate_score_source", default.score_source),
            interaction=data.get("gate_interaction", default.interaction),
            enabled=data.get("gate_enabled", default.enabled),
        )

    @classmethod
    def ablation_variants(cls) -> List["GateSpec"]:
        """The six ablation rows, in report order"""
        return list(NAMED_VARIANTS.values())


DEFAULT_GATE_SPEC = GateSpec()

NAMED_VARIANTS: Dict[str, GateSpec] = {
    "w/o gating": GateSpec(enabled=False),
    "w/o interaction": GateSpec(interaction=False),
    "After-FFN": GateSpec(position=GatePosition.AFTER_FFN),
    "Elementwise": GateSpec(granularity=Granularity.ELEMENT_WISE),
    "Input features": GateSpec(score_source=ScoreSource.POST_ATTENTION),
    "Ours": DEFAULT_GATE_SPEC,
}

# Single-axis sweeps; several axes combine as a cartesian grid
AXES: Dict[str, Dict[str, object]] = {
    "gating": {"field": "enabled", "values": [True, False]},
    "interaction": {"field": "interaction", "values": [True, False]},
    "position": {"field": "position", "values": list(GatePosition)},
    "granularity": {"field": "granularity", "values": list(Granularity)},
    "score_source": {"field": "score_source", "values": list(ScoreSource)},
}


def resolve_variant(name: str) -> GateSpec:
    """Look up a named variant ('Ours', 'w/o gating', ...) or the 'no-gate' alias"""
    key = name.strip()
    aliases = {"default": "Ours", "ours": "Ours", "no-gate": "w/o gating", "nogate": "w/o gating"}
    key = aliases.get(key.lower(), key)
    for variant_name, spec in NAMED_VARIANTS.items():
        if variant_name.lower() == key.lower():
            return spec
    raise ConfigError([(None, f"unknown gate variant '{name}' "
                              f"(known: {', '.join(NAMED_VARIANTS)})")], source="variants")


def expand_axes(axes: Sequence[str], base: GateSpec = DEFAULT_GATE_SPEC) -> List[GateSpec]:
    """Cartesian product over the named axes, other fields taken from base"""
    if not axes:
        raise ConfigError([(None, "no ablation axes")], source="axes")
    unknown = [a for a in axes if a not in AXES]
    if unknown:
        raise ConfigError([(None, f"unknown ablation axis '{a}' (known: {', '.join(AXES)})")
                           for a in unknown], source="axes")
    fields = [AXES[a]["field"] for a in axes]
    specs = []
    for combo in itertools.product(*(AXES[a]["values"] for a in axes)):
        spec = replace(base, **dict(zip(fields, combo)))
        if spec not in specs:
            specs.append(spec)
    return specs


# ==================== PARAMETERS ====================

@dataclass
class GateParams:
    """W_g1 gates the latent stream, W_g2 the condition stream"""
    w_g1: Tensor
    w_g2: Tensor

    @staticmethod
    def shape_for(d_model: int, granularity: Granularity):
        granularity = _parse_enum(Granularity, granularity)
        if granularity is Granularity.TOKEN_WISE:
            return (d_model, 1)
        if granularity is Granularity.ELEMENT_WISE:
            return (d_model, d_model)
        return None

    @classmethod
    def zeros(cls, d_model: int, granularity: Granularity, prefix: str = "") -> Optional["GateParams"]:
        shape = cls.shape_for(d_model, granularity)
        if shape is None:
            return None
        return cls(w_g1=parameter(np.zeros(shape), name=prefix + "w_g1"),
                   w_g2=parameter(np.zeros(shape), name=prefix + "w_g2"))


def gate_param_count(d_model: int, n_blocks: int, granularity: Granularity) -> int:
    shape = GateParams.shape_for(d_model, granularity)
    if shape is None:
        return 0
    return 2 * shape[0] * shape[1] * n_blocks


# ==================== GATE OPERATIONS ====================

def gate_scores(score_input: Tensor, w_g: Tensor) -> Tensor:
    """sigma(score_input W_g): [n x 1] token-wise or [n x d] element-wise"""
    if score_input.ndim != 2 or w_g.ndim != 2 or score_input.shape[1] != w_g.shape[0]:
        raise DimensionError("gate_scores", score_input.shape, w_g.shape)
    return sigmoid(matmul(score_input, w_g))


def gate_modulate(h: Tensor, score_input: Tensor, w_g: Tensor) -> Tensor:
    if h.ndim != 2 or score_input.ndim != 2 or h.shape[0] != score_input.shape[0]:
        raise DimensionError("gate_modulate", h.shape, score_input.shape,
                             detail="token counts must match")
    scores = gate_scores(score_input, w_g)
    if scores.shape[1] not in (1, h.shape[1]):
        raise DimensionError("gate_modulate", h.shape, scores.shape, detail="gate width")
    return mul(scores, h)


def gate_fuse(h_x: Tensor, h_ci: Tensor, x_in: Tensor, c_in: Tensor,
              params: Optional[GateParams], spec: GateSpec) -> Tensor:
    """h_X <- gate(h_X) + gate(h_CI), or h_X + h_CI for direct_add"""
    if h_x.shape[0] != h_ci.shape[0]:
        raise FusionAlignmentError(h_x.shape[0], h_ci.shape[0])
    if spec.granularity is Granularity.DIRECT_ADD:
        return add(h_x, h_ci)
    if params is None:
        raise DimensionError("gate_fuse", h_x.shape, detail=f"{spec.granularity.value} needs gate parameters")
    return add(gate_modulate(h_x, x_in, params.w_g1), gate_modulate(h_ci, c_in, params.w_g2))
