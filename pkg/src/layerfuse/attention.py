"""Scaled dot-product attention and multi-head attention.

Masks are boolean arrays shaped [n_queries, n_keys]; True marks an attendable
key. Masking is additive: blocked scores get -1e9 before the softmax, which
underflows to an exact probability of 0.0 in float64 after max subtraction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, concat, softmax

__all__ = [
    "AttentionParams",
    "MaskError",
    "MASK_BIAS",
    "make_causal_mask",
    "make_padding_mask",
    "scaled_dot_attention",
    "multi_head_attention",
]

MASK_BIAS = -1e9


class MaskError(ValueError):
    """A query row is left with no attendable key."""


def make_causal_mask(n: int) -> np.ndarray:
    """Lower-triangular mask: position t may attend keys 0..t."""
    if n < 1:
        raise MaskError(f"causal mask needs n >= 1, got {n}")
    return np.tril(np.ones((n, n), dtype=bool))


def make_padding_mask(n_queries: int, key_lengths_valid: int, n_keys: int) -> np.ndarray:
    """All queries attend the first ``key_lengths_valid`` of ``n_keys`` keys."""
    if not 0 < key_lengths_valid <= n_keys:
        raise MaskError(
            f"valid key count must be in [1, {n_keys}], got {key_lengths_valid}"
        )
    mask = np.zeros((n_queries, n_keys), dtype=bool)
    mask[:, :key_lengths_valid] = True
    return mask


def _mask_bias(mask: np.ndarray, shape: tuple) -> np.ndarray:
    if mask.shape != shape:
        raise ShapeError(f"mask shape {mask.shape} does not match scores {shape}")
    if not mask.any(axis=1).all():
        raise MaskError("a query row has every key masked out")
    return np.where(mask, 0.0, MASK_BIAS)


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v for row-major [n, d] operands.

    Returns (output, probs); probs rows are stochastic over attendable keys
    and exactly zero on masked ones.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("scaled_dot_attention expects 2D q, k, v")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q/k width mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k/v length mismatch: {k.shape} vs {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[1])
    scores = q.matmul(k.T) * scale
    if mask is not None:
        scores = scores + Tensor(_mask_bias(np.asarray(mask, dtype=bool), scores.shape))
    probs = softmax(scores, axis=-1)
    return probs.matmul(v), probs


@dataclass
class AttentionParams:
    """Per-head projection matrices plus the shared output projection.

    w_q[i], w_k[i] are [d, d_k]; w_v[i] is [d, d_v]; w_o is [h*d_v, d].
    No bias terms anywhere.
    """

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor

    @property
    def n_heads(self) -> int:
        return len(self.w_q)

    @property
    def d_k(self) -> int:
        return self.w_q[0].shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i in range(self.n_heads):
            out[f"{prefix}.h{i}.w_q"] = self.w_q[i]
            out[f"{prefix}.h{i}.w_k"] = self.w_k[i]
            out[f"{prefix}.h{i}.w_v"] = self.w_v[i]
        out[f"{prefix}.w_o"] = self.w_o
        return out

    @classmethod
    def create(
        cls, rng: np.random.Generator, d_model: int, n_heads: int,
        d_k: int | None = None, d_v: int | None = None,
    ) -> "AttentionParams":
        if d_k is None or d_v is None:
            if d_model % n_heads != 0:
                raise ShapeError(
                    f"d_model {d_model} not divisible by n_heads {n_heads}"
                )
            d_k = d_k if d_k is not None else d_model // n_heads
            d_v = d_v if d_v is not None else d_model // n_heads
        w_q = [_xavier(rng, d_model, d_k) for _ in range(n_heads)]
        w_k = [_xavier(rng, d_model, d_k) for _ in range(n_heads)]
        w_v = [_xavier(rng, d_model, d_v) for _ in range(n_heads)]
        w_o = _xavier(rng, n_heads * d_v, d_model)
        return cls(w_q, w_k, w_v, w_o)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                  requires_grad=True)


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    params: AttentionParams,
    mask: np.ndarray | None = None,
    return_probs: bool = False,
):
    """Concatenate per-head scaled dot attention and project back to d_model.

    Head outputs are concatenated in head order before the w_o projection.
    With return_probs=True also returns the per-head probability matrices.
    """
    heads = []
    probs_per_head = []
    for i in range(params.n_heads):
        out, probs = scaled_dot_attention(
            query.matmul(params.w_q[i]),
            key.matmul(params.w_k[i]),
            value.matmul(params.w_v[i]),
            mask,
        )
        heads.append(out)
        probs_per_head.append(probs)
    merged = concat(heads, axis=1) if len(heads) > 1 else heads[0]
    out = merged.matmul(params.w_o)
    if return_probs:
        return out, probs_per_head
    return out
