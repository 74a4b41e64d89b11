"""Layer-level operations built from :class:`Tensor` primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = [
    "BatchNormState",
    "batchnorm1d",
    "conv1d",
    "dropout",
    "layer_norm",
    "linear",
    "matmul",
    "softmax",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    return x.softmax(axis=axis)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    out = x @ weight
    return out if bias is None else out + bias


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1) -> Tensor:
    """Kernel-1 convolution over ``x`` of shape (..., Cin, L).

    ``weight`` has shape (Cout, Cin // groups); each output position is an
    independent (grouped) linear map of the input channels at that position.
    """
    cin = x.shape[-2]
    cout, per_group = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"channels {cin}->{cout} not divisible by groups={groups}")
    if per_group != cin // groups:
        raise ShapeError(f"weight {weight.shape} does not match Cin={cin} with groups={groups}")
    length = x.shape[-1]
    lead = x.shape[:-2]
    if groups == 1:
        out = weight @ x
    else:
        xg = x.reshape(*lead, groups, cin // groups, length)
        wg = weight.reshape(groups, cout // groups, per_group)
        out = (wg @ xg).reshape(*lead, cout, length)
    if bias is not None:
        out = out + bias.reshape(cout, 1)
    return out


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    num_batches_tracked: int = 0
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int, dtype=np.float64) -> BatchNormState:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    @property
    def ready(self) -> bool:
        return self.num_batches_tracked > 0


class BatchNormNotReady(RuntimeError):
    pass


def batchnorm1d(
    x: Tensor,
    state: BatchNormState,
    mode: str,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
    mask: np.ndarray | None = None,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization of ``x`` shaped (C, L) or (B, C, L).

    ``mask`` (same shape without the channel axis) marks valid positions;
    padded positions neither contribute to statistics nor get special output.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    channels = x.shape[-2]
    bshape = (channels, 1)
    if mode == "eval":
        if not state.ready:
            raise BatchNormNotReady("batch norm evaluated before any training statistics exist")
        scale = 1.0 / np.sqrt(state.running_var + state.eps)
        y = (x - state.running_mean.reshape(bshape).astype(x.dtype)) * scale.reshape(bshape).astype(x.dtype)
    else:
        axes = tuple(i for i in range(x.ndim) if i != x.ndim - 2)
        if mask is None:
            m = np.ones(x.shape[:-2] + (1, x.shape[-1]), dtype=x.dtype)
        else:
            m = np.asarray(mask, dtype=x.dtype)
            m = np.expand_dims(m, -2)
        count = float(np.broadcast_to(m, x.shape).sum() / channels)
        if count < 1:
            raise ShapeError("batch norm needs at least one valid position")
        mean = (x * m).sum(axis=axes, keepdims=True) * (1.0 / count)
        centered = x - mean
        var = ((centered * m) ** 2).sum(axis=axes, keepdims=True) * (1.0 / count)
        y = centered / (var + state.eps).sqrt()
        if update_stats:
            mom = state.momentum
            batch_var = var.data.reshape(channels)
            if count > 1:
                batch_var = batch_var * (count / (count - 1))
            state.running_mean = (1 - mom) * state.running_mean + mom * mean.data.reshape(channels)
            state.running_var = (1 - mom) * state.running_var + mom * batch_var
            state.num_batches_tracked += 1
    if weight is not None:
        y = y * weight.reshape(bshape)
    if bias is not None:
        y = y + bias.reshape(bshape)
    return y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gamma + beta


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not training or p <= 0.0 or rng is None:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep
