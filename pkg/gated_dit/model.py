#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Backbone
Diffusion transformer over patch tokens with gated image-condition fusion.

Block layout (pre-norm, time-modulated):
1. linear self-attention over [X; C_I] (joint) or per stream
2. cross-attention of both streams against the class token C_T
3. two-layer FFN
Gated fusion of C_I into X runs after the configured sub-layer.

The patch embedding is shared between noisy latents and condition images.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .attention import AttentionParams, cross_attention, self_attention
from .config import ModelConfig, TrainMode
from .errors import ClassIdError, ConfigError, DimensionError, NonFiniteActivationError
from .gates import GateParams, GatePosition, GateSpec, ScoreSource, gate_fuse, gate_param_count
from .numerics import (
    Tensor, add, add_row, add_scalar, concat_rows, constant, gather_flat, gather_rows,
    gelu, layer_norm, matmul, mul, no_tape, parameter, scale, slice_cols, slice_rows,
    tile_rows,
)

logger = logging.getLogger(__name__)

ROLES = ("latent", "image_condition", "text")
LORA_TARGETS = ("self_attn.w_q", "self_attn.w_k", "self_attn.w_v", "self_attn.w_o",
                "cross_attn.w_q", "cross_attn.w_k", "cross_attn.w_v", "cross_attn.w_o",
                "ffn.w1", "ffn.w2")


# ==================== TOKEN SEQUENCES ====================

@dataclass(frozen=True)
class Segment:
    role: str
    start: int
    stop: int

    @property
    def length(self) -> int:
        return self.stop - self.start


@dataclass
class TokenSeq:
    """[n x d] activations with disjoint, ordered role spans covering every row"""
    values: Tensor
    segments: Tuple[Segment, ...]

    def __post_init__(self):
        n = self.values.shape[0]
        cursor = 0
        for seg in self.segments:
            if seg.role not in ROLES:
                raise ValueError(f"unknown token role '{seg.role}'")
            if seg.start != cursor or seg.stop <= seg.start:
                raise DimensionError("TokenSeq", self.values.shape,
                                     detail=f"segment {seg} breaks ordering at row {cursor}")
            cursor = seg.stop
        if cursor != n:
            raise DimensionError("TokenSeq", self.values.shape, detail=f"segments cover {cursor} of {n} rows")

    @classmethod
    def single(cls, values: Tensor, role: str) -> "TokenSeq":
        return cls(values, (Segment(role, 0, values.shape[0]),))

    @classmethod
    def concat(cls, parts: Sequence["TokenSeq"]) -> "TokenSeq":
        segments = []
        offset = 0
        for part in parts:
            for seg in part.segments:
                segments.append(Segment(seg.role, seg.start + offset, seg.stop + offset))
            offset += part.values.shape[0]
        return cls(concat_rows([p.values for p in parts]), tuple(segments))

    def roles(self) -> List[str]:
        return [s.role for s in self.segments]

    def segment(self, role: str) -> Tensor:
        for seg in self.segments:
            if seg.role == role:
                if seg.start == 0 and seg.stop == self.values.shape[0]:
                    return self.values
                return slice_rows(self.values, seg.start, seg.stop)
        raise KeyError(role)

    def with_values(self, values: Tensor) -> "TokenSeq":
        return TokenSeq(values, self.segments)


# ==================== LORA ====================

@dataclass
class LoRAPair:
    a: Tensor            # [d_in x r]
    b: Tensor            # [r x d_out]
    scale: float

    @property
    def rank(self) -> int:
        return self.a.shape[1]


def lora_apply(w: Tensor, pair: Optional[LoRAPair]) -> Tensor:
    """W + scale * A B"""
    if pair is None:
        return w
    if (pair.a.ndim != 2 or pair.b.ndim != 2 or pair.a.shape[1] != pair.b.shape[0]
            or (pair.a.shape[0], pair.b.shape[1]) != w.shape):
        raise DimensionError("lora_apply", w.shape, pair.a.shape, pair.b.shape)
    return add(w, scale(matmul(pair.a, pair.b), pair.scale))


# ==================== PARAMETERS ====================

@dataclass
class ModelParams(Mapping):
    """Named tensors plus the trainable subset"""
    tensors: Dict[str, Tensor]
    trainable: Set[str] = field(default_factory=set)
    lora_scale: float = 0.0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def lora_pair(self, name: str) -> Optional[LoRAPair]:
        a = self.tensors.get(f"{name}.lora_a")
        if a is None:
            return None
        return LoRAPair(a, self.tensors[f"{name}.lora_b"], self.lora_scale)

    def weight(self, name: str) -> Tensor:
        """Effective weight, LoRA delta included when attached"""
        return lora_apply(self.tensors[name], self.lora_pair(name))

    @property
    def has_lora(self) -> bool:
        return any(is_lora_name(n) for n in self.tensors)

    def names(self, kind: str) -> List[str]:
        test = {"gate": is_gate_name, "lora": is_lora_name,
                "backbone": lambda n: not is_gate_name(n) and not is_lora_name(n)}[kind]
        return [n for n in self.tensors if test(n)]

    def set_mode(self, mode: TrainMode) -> "ModelParams":
        mode = TrainMode(mode)
        if mode is TrainMode.FINETUNE:
            self.trainable = set(self.names("gate") + self.names("lora"))
        else:
            self.trainable = set(self.names("backbone") + self.names("gate"))
        for name, t in self.tensors.items():
            t.requires_grad = name in self.trainable
        return self

    def copy(self) -> "ModelParams":
        tensors = {}
        for name, t in self.tensors.items():
            tensors[name] = Tensor(t.data, requires_grad=t.requires_grad, name=name)
        return ModelParams(tensors, set(self.trainable), self.lora_scale)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], lora_scale: float = 0.0) -> "ModelParams":
        return cls({name: parameter(arr, name=name) for name, arr in arrays.items()},
                   lora_scale=lora_scale)


def is_gate_name(name: str) -> bool:
    return ".gate." in name


def is_lora_name(name: str) -> bool:
    return name.endswith(".lora_a") or name.endswith(".lora_b")


def count_params(params: Mapping[str, Tensor], trainable_only: bool = False) -> int:
    names = params.trainable if (trainable_only and isinstance(params, ModelParams)) else params.keys()
    return int(sum(params[n].size for n in names))


def param_breakdown(params: ModelParams) -> Dict[str, int]:
    return {kind: int(sum(params[n].size for n in params.names(kind)))
            for kind in ("backbone", "lora", "gate")}


def _normal(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return parameter(rng.standard_normal(shape) * std, name=name)


def _zeros(shape, name: str) -> Tensor:
    return parameter(np.zeros(shape), name=name)


def _ones(shape, name: str) -> Tensor:
    return parameter(np.ones(shape), name=name)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """
    Random backbone plus zero gates.

    Gates are created last and consume no randomness, so every GateSpec
    draws an identical backbone from the same generator state.
    """
    problems = cfg.validate()
    if problems:
        raise ConfigError([(None, p) for p in problems], source="ModelConfig")
    d, p = cfg.d_model, {}

    def put(t: Tensor):
        p[t.name] = t

    put(_normal(rng, (cfg.patch_dim, d), 1.0 / np.sqrt(cfg.patch_dim), "patch_embed.weight"))
    put(_zeros((1, d), "patch_embed.bias"))
    put(_normal(rng, (cfg.n_latent_tokens, d), 0.02, "pos_embed"))
    if not cfg.share_condition_pos:
        put(_normal(rng, (cfg.n_latent_tokens, d), 0.02, "cond_pos_embed"))
    put(_normal(rng, (cfg.n_classes + 1, cfg.d_text), 1.0, "class_embed"))
    put(_normal(rng, (cfg.t_embed_dim, cfg.t_hidden), 1.0 / np.sqrt(cfg.t_embed_dim), "time.w1"))
    put(_zeros((1, cfg.t_hidden), "time.b1"))
    put(_normal(rng, (cfg.t_hidden, d), 1.0 / np.sqrt(cfg.t_hidden), "time.w2"))
    put(_zeros((1, d), "time.b2"))

    for i in range(cfg.n_blocks):
        pre = f"blocks.{i}."
        for k in (1, 2, 3):
            put(_ones((d,), f"{pre}norm{k}.gain"))
            put(_zeros((d,), f"{pre}norm{k}.bias"))
        for attn, kv_in in (("self_attn", d), ("cross_attn", cfg.d_text)):
            ap = AttentionParams.init(rng, d, cfg.n_heads, d_kv_in=kv_in, prefix=f"{pre}{attn}.")
            for w in (ap.w_q, ap.w_k, ap.w_v, ap.w_o):
                put(w)
        put(_normal(rng, (d, cfg.d_ffn), 1.0 / np.sqrt(d), f"{pre}ffn.w1"))
        put(_zeros((1, cfg.d_ffn), f"{pre}ffn.b1"))
        put(_normal(rng, (cfg.d_ffn, d), 1.0 / np.sqrt(cfg.d_ffn), f"{pre}ffn.w2"))
        put(_zeros((1, d), f"{pre}ffn.b2"))
        put(_zeros((d, 6 * d), f"{pre}modulation.weight"))
        put(_zeros((1, 6 * d), f"{pre}modulation.bias"))

    put(_ones((d,), "final_norm.gain"))
    put(_zeros((d,), "final_norm.bias"))
    put(_zeros((d, 2 * d), "final_mod.weight"))
    put(_zeros((1, 2 * d), "final_mod.bias"))
    put(_zeros((d, cfg.patch_dim), "unembed.weight"))
    put(_zeros((1, cfg.patch_dim), "unembed.bias"))

    params = ModelParams(p, lora_scale=cfg.effective_lora_scale)
    ensure_gates(params, cfg)
    params.set_mode(TrainMode.SCRATCH)
    return params


def ensure_gates(params: ModelParams, cfg: ModelConfig) -> ModelParams:
    """Add (or re-zero) the gate pair of every block for cfg.gate_spec"""
    spec = cfg.gate_spec
    for name in params.names("gate"):
        del params.tensors[name]
    if not spec.uses_gate_params:
        return params
    for i in range(cfg.n_blocks):
        gp = GateParams.zeros(cfg.d_model, spec.granularity, prefix=f"blocks.{i}.gate.")
        params.tensors[gp.w_g1.name] = gp.w_g1
        params.tensors[gp.w_g2.name] = gp.w_g2
    return params


def lora_target_names(params: Mapping[str, Tensor]) -> List[str]:
    return [n for n in params if any(n.endswith(t) for t in LORA_TARGETS) and not is_lora_name(n)]


def attach_lora(params: ModelParams, cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """A ~ N(0, 1/d_in), B = 0 on every attention and FFN projection"""
    out = params.copy()
    out.lora_scale = cfg.effective_lora_scale
    if cfg.lora_rank <= 0:
        return out
    for name in lora_target_names(params):
        d_in, d_out = params[name].shape
        out.tensors[f"{name}.lora_a"] = _normal(rng, (d_in, cfg.lora_rank), 1.0 / np.sqrt(d_in), f"{name}.lora_a")
        out.tensors[f"{name}.lora_b"] = _zeros((cfg.lora_rank, d_out), f"{name}.lora_b")
    return out


def merge_lora(params: ModelParams) -> ModelParams:
    """Fold every pair into its base weight; the result holds no LoRA tensors"""
    merged = {}
    with no_tape():
        for name, t in params.tensors.items():
            if is_lora_name(name):
                continue
            merged[name] = parameter(params.weight(name).data, name=name)
    out = ModelParams(merged, lora_scale=params.lora_scale)
    out.trainable = {n for n in params.trainable if n in merged}
    return out


# ==================== PATCHES ====================

@lru_cache(maxsize=16)
def _patch_index(channels: int, image_size: int, patch_size: int) -> Tuple[np.ndarray, np.ndarray]:
    g = image_size // patch_size
    flat = np.arange(channels * image_size * image_size).reshape(channels, g, patch_size, g, patch_size)
    forward = flat.transpose(1, 3, 0, 2, 4).reshape(g * g, channels * patch_size * patch_size)
    inverse = np.empty(forward.size, dtype=np.int64)
    inverse[forward.reshape(-1)] = np.arange(forward.size)
    forward.setflags(write=False)
    inverse.setflags(write=False)
    return forward, inverse.reshape(channels, image_size, image_size)


def _as_image_tensor(image) -> Tensor:
    return image if isinstance(image, Tensor) else constant(image)


def image_to_patches(image, cfg: ModelConfig) -> Tensor:
    """[c x H x W] -> [n x p*p*c], row-major over the patch grid"""
    image = _as_image_tensor(image)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if image.shape != expected:
        raise DimensionError("patchify", image.shape, expected)
    forward, _ = _patch_index(cfg.channels, cfg.image_size, cfg.patch_size)
    return gather_flat(image, forward)


def patches_to_image(patches: Tensor, cfg: ModelConfig) -> Tensor:
    if patches.shape != (cfg.n_latent_tokens, cfg.patch_dim):
        raise DimensionError("unpatchify", patches.shape, (cfg.n_latent_tokens, cfg.patch_dim))
    _, inverse = _patch_index(cfg.channels, cfg.image_size, cfg.patch_size)
    return gather_flat(patches, inverse)


def patchify(image, cfg: ModelConfig, params: ModelParams, role: str = "latent") -> TokenSeq:
    tokens = add_row(matmul(image_to_patches(image, cfg), params["patch_embed.weight"]),
                     params["patch_embed.bias"])
    pos_name = "pos_embed"
    if role == "image_condition" and "cond_pos_embed" in params:
        pos_name = "cond_pos_embed"
    return TokenSeq.single(add(tokens, params[pos_name]), role)


def unpatchify(tokens: Tensor, cfg: ModelConfig, params: ModelParams) -> Tensor:
    if tokens.ndim != 2 or tokens.shape[0] != cfg.n_latent_tokens:
        raise DimensionError("unpatchify", tokens.shape, (cfg.n_latent_tokens, cfg.d_model))
    patches = add_row(matmul(tokens, params["unembed.weight"]), params["unembed.bias"])
    return patches_to_image(patches, cfg)


# ==================== CONDITIONING ====================

def sinusoidal_embedding(t: float, dim: int, time_scale: float = 1000.0) -> np.ndarray:
    """[1 x dim], sin/cos interleaved: t=0 -> [0, 1, 0, 1, ...]"""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = float(t) * time_scale * freqs
    emb = np.empty((1, 2 * half))
    emb[0, 0::2] = np.sin(args)
    emb[0, 1::2] = np.cos(args)
    return emb


def time_embedding(t: float, cfg: ModelConfig, params: ModelParams) -> Tensor:
    s = constant(sinusoidal_embedding(t, cfg.t_embed_dim, cfg.time_scale))
    h = gelu(add_row(matmul(s, params["time.w1"]), params["time.b1"]))
    return add_row(matmul(h, params["time.w2"]), params["time.b2"])


def embed_condition_tokens(cond_image, class_id: int, t: float, cfg: ModelConfig,
                           params: ModelParams) -> Tuple[Optional[TokenSeq], TokenSeq, Tensor]:
    """(C_I or None, C_T, t_vec); class_id == n_classes is the null class"""
    if not 0 <= int(class_id) <= cfg.n_classes:
        raise ClassIdError(f"class id {class_id} outside [0, {cfg.n_classes}] (null = {cfg.null_class})")
    ci = patchify(cond_image, cfg, params, role="image_condition") if cond_image is not None else None
    ct = TokenSeq.single(gather_rows(params["class_embed"], [int(class_id)]), "text")
    return ci, ct, time_embedding(t, cfg, params)


# ==================== BLOCK ====================

@dataclass
class BlockParams:
    norms: List[Tuple[Tensor, Tensor]]          # (gain, bias) x 3
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    mod_w: Tensor
    mod_b: Tensor
    gate: Optional[GateParams] = None


def block_params(params: ModelParams, i: int, cfg: ModelConfig) -> BlockParams:
    pre = f"blocks.{i}."
    n_heads, d_head = cfg.n_heads, cfg.d_model // cfg.n_heads

    def attn(prefix: str) -> AttentionParams:
        return AttentionParams(
            w_q=params.weight(prefix + "w_q"), w_k=params.weight(prefix + "w_k"),
            w_v=params.weight(prefix + "w_v"), w_o=params.weight(prefix + "w_o"),
            n_heads=n_heads, d_head=d_head,
        )

    gate = None
    if f"{pre}gate.w_g1" in params:
        gate = GateParams(params[f"{pre}gate.w_g1"], params[f"{pre}gate.w_g2"])
    return BlockParams(
        norms=[(params[f"{pre}norm{k}.gain"], params[f"{pre}norm{k}.bias"]) for k in (1, 2, 3)],
        self_attn=attn(pre + "self_attn."),
        cross_attn=attn(pre + "cross_attn."),
        ffn_w1=params.weight(pre + "ffn.w1"), ffn_b1=params[pre + "ffn.b1"],
        ffn_w2=params.weight(pre + "ffn.w2"), ffn_b2=params[pre + "ffn.b2"],
        mod_w=params[pre + "modulation.weight"], mod_b=params[pre + "modulation.bias"],
        gate=gate,
    )


def modulate(h: Tensor, shift: Tensor, scale_row: Tensor) -> Tensor:
    """h * (1 + scale) + shift, rows broadcast over tokens"""
    n = h.shape[0]
    return add(mul(h, tile_rows(add_scalar(scale_row, 1.0), n)), tile_rows(shift, n))


def _ffn(h: Tensor, bp: BlockParams) -> Tensor:
    hidden = gelu(add_row(matmul(h, bp.ffn_w1), bp.ffn_b1))
    return add_row(matmul(hidden, bp.ffn_w2), bp.ffn_b2)


def block_forward(x: TokenSeq, ci: Optional[TokenSeq], ct: TokenSeq, t_vec: Tensor,
                  bp: BlockParams, spec: GateSpec,
                  normalized: bool = True) -> Tuple[TokenSeq, Optional[TokenSeq]]:
    d = x.values.shape[1]
    mod = add_row(matmul(gelu(t_vec), bp.mod_w), bp.mod_b)
    shifts_scales = [slice_cols(mod, k * d, (k + 1) * d) for k in range(6)]

    def norm_mod(h: Tensor, k: int) -> Tensor:
        gain, bias = bp.norms[k]
        return modulate(layer_norm(h, gain, bias), shifts_scales[2 * k], shifts_scales[2 * k + 1])

    fusing = spec.enabled and ci is not None
    x_in = x.values
    c_in = ci.values if ci is not None else None
    hx, hc = x.values, c_in

    def fuse_at(position: GatePosition, hx: Tensor, hc: Optional[Tensor]) -> Tensor:
        if not fusing or spec.position is not position:
            return hx
        if spec.score_source is ScoreSource.PRE_ATTENTION:
            return gate_fuse(hx, hc, x_in, c_in, bp.gate, spec)
        return gate_fuse(hx, hc, hx, hc, bp.gate, spec)

    # self-attention
    nx = norm_mod(hx, 0)
    if hc is not None and spec.interaction:
        joint = TokenSeq.concat([TokenSeq.single(nx, "latent"),
                                 TokenSeq.single(norm_mod(hc, 0), "image_condition")])
        attended = joint.with_values(self_attention(joint.values, bp.self_attn, normalized))
        ax, ac = attended.segment("latent"), attended.segment("image_condition")
    else:
        ax = self_attention(nx, bp.self_attn, normalized)
        ac = self_attention(norm_mod(hc, 0), bp.self_attn, normalized) if hc is not None else None
    hx = add(hx, ax)
    hc = add(hc, ac) if hc is not None else None
    hx = fuse_at(GatePosition.AFTER_SELF_ATTENTION, hx, hc)

    # cross-attention to the class token
    text = ct.values
    hx = add(hx, cross_attention(norm_mod(hx, 1), text, bp.cross_attn))
    if hc is not None:
        hc = add(hc, cross_attention(norm_mod(hc, 1), text, bp.cross_attn))
    hx = fuse_at(GatePosition.AFTER_CROSS_ATTENTION, hx, hc)

    # feed-forward
    hx = add(hx, _ffn(norm_mod(hx, 2), bp))
    if hc is not None:
        hc = add(hc, _ffn(norm_mod(hc, 2), bp))
    hx = fuse_at(GatePosition.AFTER_FFN, hx, hc)

    return x.with_values(hx), (ci.with_values(hc) if ci is not None else None)


# ==================== FULL MODEL ====================

def model_forward(x_t, t: float, cond_image, class_id: int, params: ModelParams,
                  cfg: ModelConfig) -> Tensor:
    """Velocity [c x H x W] for noisy image x_t at time t"""
    x_t = _as_image_tensor(x_t)
    if not x_t.is_finite():
        raise NonFiniteActivationError(-1, stream="input")
    x = patchify(x_t, cfg, params, role="latent")
    ci, ct, t_vec = embed_condition_tokens(cond_image, class_id, t, cfg, params)
    spec = cfg.gate_spec
    for i in range(cfg.n_blocks):
        x, ci = block_forward(x, ci, ct, t_vec, block_params(params, i, cfg), spec,
                              normalized=cfg.normalized_linear_attention)
        if not x.values.is_finite():
            raise NonFiniteActivationError(i, stream="latent")
        if ci is not None and not ci.values.is_finite():
            raise NonFiniteActivationError(i, stream="image_condition")

    d = cfg.d_model
    mod = add_row(matmul(gelu(t_vec), params["final_mod.weight"]), params["final_mod.bias"])
    h = layer_norm(x.values, params["final_norm.gain"], params["final_norm.bias"])
    h = modulate(h, slice_cols(mod, 0, d), slice_cols(mod, d, 2 * d))
    return unpatchify(h, cfg, params)


@dataclass
class ConditionInput:
    image: Optional[np.ndarray]
    class_id: int


class VelocityModel:
    """Inference wrapper: numpy in, numpy out, nothing recorded"""

    def __init__(self, params: ModelParams, cfg: ModelConfig):
        self.params = params
        self.cfg = cfg

    def __call__(self, x: np.ndarray, t: float, cond: Optional[ConditionInput]) -> np.ndarray:
        if cond is None:
            cond = ConditionInput(None, self.cfg.null_class)
        with no_tape():
            return model_forward(x, t, cond.image, cond.class_id, self.params, self.cfg).data


def overhead_counts(cfg: ModelConfig) -> Dict[str, int]:
    """Backbone / LoRA / gate parameter counts at cfg (LoRA counted as if attached)"""
    params = init_params(cfg, np.random.default_rng(0))
    counts = param_breakdown(params)
    counts["gate"] = gate_param_count(cfg.d_model, cfg.n_blocks, cfg.gate_spec.granularity) \
        if cfg.gate_spec.uses_gate_params else 0
    if cfg.lora_rank > 0:
        counts["lora"] = sum(cfg.lora_rank * (params[n].shape[0] + params[n].shape[1])
                             for n in lora_target_names(params))
    return counts
