#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Attention Kernels
Multi-head attention over token matrices.

Kernels:
1. softmax_attention: quadratic reference, scaled by 1/sqrt(d)
2. linear_attention: ReLU feature map, phi(K)^T V summarized first (O(n d^2))
3. cross_attention: latent queries against short text-token sequences
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import DimensionError
from .numerics import (
    Tensor, add_scalar, concat_cols, constant, matmul, mul, parameter,
    reciprocal, relu, scale, slice_cols, softmax_rows, transpose,
)

logger = logging.getLogger(__name__)

LINEAR_EPS = 1e-6


@dataclass
class AttentionParams:
    """Q/K/V/O projections of one attention layer"""
    w_q: Tensor        # [d_model x h*d_head]
    w_k: Tensor        # [d_kv_in x h*d_head]
    w_v: Tensor        # [d_kv_in x h*d_head]
    w_o: Tensor        # [h*d_head x d_model]
    n_heads: int = 4
    d_head: int = 16

    def __post_init__(self):
        inner = self.n_heads * self.d_head
        if self.n_heads < 1 or self.d_head < 1:
            raise DimensionError("AttentionParams", (self.n_heads, self.d_head),
                                 detail="n_heads and d_head must be positive")
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w.ndim != 2 or w.shape[1] != inner:
                raise DimensionError(f"AttentionParams.{name}", w.shape, (None, inner))
        if self.w_k.shape != self.w_v.shape:
            raise DimensionError("AttentionParams", self.w_k.shape, self.w_v.shape,
                                 detail="key and value projections must match")
        if self.w_o.ndim != 2 or self.w_o.shape[0] != inner or self.w_o.shape[1] != self.w_q.shape[0]:
            raise DimensionError("AttentionParams.w_o", self.w_o.shape, (inner, self.w_q.shape[0]))

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_kv_in(self) -> int:
        return self.w_k.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_heads: int,
             d_kv_in: Optional[int] = None, prefix: str = "") -> "AttentionParams":
        """Normal init with std 1/sqrt(fan_in) for every projection"""
        if d_model % n_heads:
            raise DimensionError("AttentionParams.init", (d_model,), (n_heads,),
                                 detail="d_model must be divisible by n_heads")
        d_head = d_model // n_heads
        d_kv_in = d_kv_in or d_model
        inner = n_heads * d_head

        def normal(rows, cols, name):
            return parameter(rng.standard_normal((rows, cols)) / np.sqrt(rows), name=prefix + name)

        return cls(
            w_q=normal(d_model, inner, "w_q"),
            w_k=normal(d_kv_in, inner, "w_k"),
            w_v=normal(d_kv_in, inner, "w_v"),
            w_o=normal(inner, d_model, "w_o"),
            n_heads=n_heads,
            d_head=d_head,
        )


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> List[Tensor]:
    if n_heads == 1:
        return [x]
    return [slice_cols(x, h * d_head, (h + 1) * d_head) for h in range(n_heads)]


def project_qkv(x: Tensor, p: AttentionParams,
                kv_source: Optional[Tensor] = None) -> Tuple[List[Tensor], List[Tensor], List[Tensor]]:
    """Q = X W_Q, K = S W_K, V = S W_V split into per-head [n x d_head] blocks"""
    source = x if kv_source is None else kv_source
    if x.ndim != 2 or x.shape[1] != p.d_model:
        raise DimensionError("project_qkv", x.shape, p.w_q.shape, detail="query width")
    if source.ndim != 2 or source.shape[1] != p.d_kv_in:
        raise DimensionError("project_qkv", source.shape, p.w_k.shape, detail="key/value width")
    q = matmul(x, p.w_q)
    k = matmul(source, p.w_k)
    v = matmul(source, p.w_v)
    return (_split_heads(q, p.n_heads, p.d_head),
            _split_heads(k, p.n_heads, p.d_head),
            _split_heads(v, p.n_heads, p.d_head))


def _check_qkv(op: str, q: Tensor, k: Tensor, v: Tensor):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(op, q.shape, k.shape, v.shape, detail="expects matrices")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(op, q.shape, k.shape, v.shape)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V"""
    _check_qkv("softmax_attention", q, k, v)
    logits = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(q.shape[1]))
    return matmul(softmax_rows(logits), v)


def linear_attention(q: Tensor, k: Tensor, v: Tensor, normalized: bool = True,
                     eps: float = LINEAR_EPS) -> Tensor:
    """
    phi(Q) (phi(K)^T V) with phi = ReLU.

    The [d x d_v] summary phi(K)^T V is formed first; no [n x n] matrix exists.
    When normalized, token i is divided by phi(q_i) . (phi(K)^T 1) + eps.
    """
    _check_qkv("linear_attention", q, k, v)
    phi_q = relu(q)
    phi_k_t = transpose(relu(k))
    out = matmul(phi_q, matmul(phi_k_t, v))
    if not normalized:
        return out
    k_sum = matmul(phi_k_t, constant(np.ones((k.shape[0], 1))))   # [d x 1]
    denom = add_scalar(matmul(phi_q, k_sum), eps)                   # [n x 1]
    return mul(out, reciprocal(denom))


def multi_head(heads_q: List[Tensor], heads_k: List[Tensor], heads_v: List[Tensor],
               kernel, **kwargs) -> Tensor:
    outs = [kernel(q, k, v, **kwargs) for q, k, v in zip(heads_q, heads_k, heads_v)]
    return outs[0] if len(outs) == 1 else concat_cols(outs)


def self_attention(x: Tensor, p: AttentionParams, normalized: bool = True) -> Tensor:
    """Bidirectional linear self-attention over every row of x, output-projected"""
    qs, ks, vs = project_qkv(x, p)
    return matmul(multi_head(qs, ks, vs, linear_attention, normalized=normalized), p.w_o)


def cross_attention(x: Tensor, text: Tensor, p: AttentionParams) -> Tensor:
    """Softmax attention of x against text tokens; the caller adds the residual"""
    if text.ndim != 2 or text.shape[0] == 0:
        raise DimensionError("cross_attention", x.shape, text.shape, detail="empty text sequence")
    qs, ks, vs = project_qkv(x, p, kv_source=text)
    return matmul(multi_head(qs, ks, vs, softmax_attention), p.w_o)


def brute_force_linear_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """sum_j phi(q_i)^T phi(k_j) v_j by explicit double loop (test and bench oracle)"""
    phi_q = np.maximum(q, 0.0)
    phi_k = np.maximum(k, 0.0)
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        for j in range(k.shape[0]):
            out[i] += float(phi_q[i] @ phi_k[j]) * v[j]
    return out
