"""Multi-head attention with an arbitrary (possibly short) query sequence.

The query length ``Lq`` and key length ``Lk`` are independent: a fixed-size
query attending over a long key/value sequence yields an output of the
query's size regardless of ``Lk``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .functional import dropout, linear
from .tensor import ShapeError, Tensor

__all__ = ["AttentionSpec", "MASK_FILL", "attention_weights", "init_attention_params", "multi_head_attention"]

# Added to masked logits before the softmax; exp() of it underflows to exactly 0.
MASK_FILL = -1e9

PROJECTIONS = ("wq", "wk", "wv", "wo")


@dataclass(frozen=True)
class AttentionSpec:
    """Head count, softmax temperature dimension and attention-weight dropout.

    ``scale_dim=None`` scales logits by ``1/sqrt(C/h)`` (per-head width);
    pass the full channel count to scale by ``1/sqrt(C)`` instead.
    """

    num_heads: int = 4
    scale_dim: int | None = None
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.num_heads < 1:
            raise ValueError(f"num_heads must be positive, got {self.num_heads}")
        if self.scale_dim is not None and self.scale_dim <= 0:
            raise ValueError(f"scale_dim must be positive, got {self.scale_dim}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def head_dim(self, channels: int) -> int:
        if channels % self.num_heads:
            raise ShapeError(f"channel count {channels} not divisible by num_heads={self.num_heads}")
        return channels // self.num_heads

    def scale(self, channels: int) -> float:
        d = self.scale_dim if self.scale_dim is not None else self.head_dim(channels)
        return 1.0 / math.sqrt(d)


def init_attention_params(channels: int, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    """Xavier-uniform projections, zero biases. Weights are stored (in, out)."""
    bound = math.sqrt(6.0 / (2 * channels))
    params = {}
    for name in PROJECTIONS:
        params[name] = rng.uniform(-bound, bound, size=(channels, channels)).astype(dtype)
        params["b" + name[1]] = np.zeros(channels, dtype=dtype)
    return params


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, channels = x.shape
    return x.reshape(*lead, length, heads, channels // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, length, heads * dh)


def attention_weights(qh: Tensor, kh: Tensor, scale: float, key_mask: np.ndarray | None = None) -> Tensor:
    """``softmax(q k^T * scale)`` over the key axis; masked keys get weight 0.

    ``key_mask`` is True at padded positions and broadcasts against
    (..., Lq, Lk) once a query axis is inserted.
    """
    logits = (qh @ kh.swapaxes(-1, -2)) * scale
    if key_mask is not None:
        logits = logits + np.where(key_mask, MASK_FILL, 0.0).astype(logits.dtype)[..., None, :]
    return logits.softmax(axis=-1)


def _check_mask(key_mask, k: Tensor) -> np.ndarray | None:
    if key_mask is None:
        return None
    key_mask = np.asarray(key_mask, dtype=bool)
    if key_mask.shape[-1] != k.shape[-2]:
        raise ShapeError(f"key mask length {key_mask.shape[-1]} != key length {k.shape[-2]}")
    if key_mask.ndim == 2:
        # (B, Lk) -> (B, 1, Lk) so it broadcasts across heads
        key_mask = key_mask[:, None, :]
    return key_mask


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: Mapping[str, Tensor],
    spec: AttentionSpec,
    key_mask: np.ndarray | None = None,
    *,
    rng: np.random.Generator | None = None,
    training: bool = False,
    return_weights: bool = False,
):
    """Attend ``q`` (..., Lq, C) over ``k``/``v`` (..., Lk, C).

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``.  Output has shape
    (..., Lq, C).  With ``return_weights`` the per-head attention weights
    (..., h, Lq, Lk) are returned as a second value.
    """
    channels = q.shape[-1]
    if k.shape[-1] != channels or v.shape[-1] != channels:
        raise ShapeError(f"channel mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    spec.head_dim(channels)
    mask = _check_mask(key_mask, k)

    qh = _split_heads(linear(q, params["wq"], params["bq"]), spec.num_heads)
    kh = _split_heads(linear(k, params["wk"], params["bk"]), spec.num_heads)
    vh = _split_heads(linear(v, params["wv"], params["bv"]), spec.num_heads)
    weights = attention_weights(qh, kh, spec.scale(channels), mask)
    attn = dropout(weights, spec.dropout_p, rng, training)
    out = linear(_merge_heads(attn @ vh), params["wo"], params["bo"])
    if return_weights:
        return out, weights
    return out
