"""ACA-Net: a TDNN front block, one asymmetric cross-attention sub-block and a
multi-layer aggregation (MLA) stack of latent self-attention sub-blocks.

Shapes follow the (channels, length) convention for convolutions and the
(length, channels) convention inside attention.  The latent is C x E; inside
the sub-blocks it travels as E tokens of width C, batched as (B, E, C).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from .frontend import FeatureMatrix, sinusoidal_pos_encoding
from .numerics import (
    AttentionSpec,
    BatchNormState,
    ShapeError,
    Tensor,
    batchnorm1d,
    concat,
    conv1d,
    dropout,
    layer_norm,
    linear,
    multi_head_attention,
    no_grad,
)
from .seeding import derive_rng

__all__ = [
    "ABLATIONS",
    "AcaNet",
    "DESK_MODEL_CONFIG",
    "LatentInitSpec",
    "ModelConfig",
    "aca_sub_block",
    "build_ablation",
    "count_params",
    "embed",
    "init_latent",
    "latent_sub_block",
    "mla_block",
    "param_breakdown",
    "param_shapes",
    "sample_truncated_normal",
    "tdnn_block",
]

ABLATIONS = ("no_mla", "no_latent_blocks", "no_posenc", "weight_sharing")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 256
    embedding_size: int = 512
    ffn_size: int = 1024
    n_latent_blocks: int = 3
    num_heads: int = 4
    dropout_p: float = 0.2
    n_filters: int = 80
    weight_sharing: bool = False
    use_posenc: bool = True
    use_mla_concat: bool = True
    # "depthwise": groups=C, output channel c mixes channel c of every latent layer.
    # "full": dense jC -> C map.
    mla_conv: str = "depthwise"
    # None scales attention logits by 1/sqrt(C/h); set to C for 1/sqrt(C).
    attention_scale_dim: int | None = None

    def __post_init__(self):
        if self.channels < 1 or self.channels % self.num_heads:
            raise ValueError(f"channels={self.channels} must be positive and divisible by num_heads={self.num_heads}")
        if self.channels % 2 and self.use_posenc:
            raise ValueError("positional encoding needs an even channel count")
        if self.embedding_size < 1:
            raise ValueError(f"embedding_size must be >= 1, got {self.embedding_size}")
        if self.n_latent_blocks < 0:
            raise ValueError(f"n_latent_blocks must be >= 0, got {self.n_latent_blocks}")
        if self.n_latent_blocks == 0 and self.use_mla_concat:
            raise ValueError("MLA concatenation needs at least one latent sub-block")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.mla_conv not in ("depthwise", "full"):
            raise ValueError(f"mla_conv must be 'depthwise' or 'full', got {self.mla_conv!r}")
        if self.ffn_size < 1 or self.n_filters < 1:
            raise ValueError("ffn_size and n_filters must be positive")

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    @property
    def attention(self) -> AttentionSpec:
        return AttentionSpec(num_heads=self.num_heads, scale_dim=self.attention_scale_dim)

    @property
    def mla_inputs(self) -> int:
        """Number of latent layers feeding the MLA convolution."""
        return self.n_latent_blocks if self.use_mla_concat else 1


# Toy dimensions for CPU-sized experiments on the synthetic corpus.
DESK_MODEL_CONFIG = ModelConfig(channels=64, embedding_size=64, ffn_size=256, n_latent_blocks=2, num_heads=4)


@dataclass(frozen=True)
class LatentInitSpec:
    mean: float = 0.0
    std: float = 0.02
    lower: float = -2.0
    upper: float = 2.0

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("truncation bounds must satisfy lower < upper")
        if self.std <= 0:
            raise ValueError("std must be positive")


def build_ablation(cfg: ModelConfig, variant: str) -> ModelConfig:
    """Config for one of the ablation variants (see ``ABLATIONS``)."""
    if variant == "no_mla":
        return cfg.replace(use_mla_concat=False)
    if variant == "no_latent_blocks":
        return cfg.replace(n_latent_blocks=0, use_mla_concat=False)
    if variant == "no_posenc":
        return cfg.replace(use_posenc=False)
    if variant == "weight_sharing":
        return cfg.replace(weight_sharing=True)
    raise ValueError(f"unknown ablation variant {variant!r}; choose from {', '.join(ABLATIONS)}")


# -- parameters ---------------------------------------------------------------------


def _sub_block_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, f = cfg.channels, cfg.ffn_size
    shapes = {}
    for w in ("wq", "wk", "wv", "wo"):
        shapes[f"{prefix}.attn.{w}"] = (c, c)
        shapes[f"{prefix}.attn.b{w[1]}"] = (c,)
    shapes[f"{prefix}.ffn1.weight"] = (c, f)
    shapes[f"{prefix}.ffn1.bias"] = (f,)
    shapes[f"{prefix}.ffn2.weight"] = (f, c)
    shapes[f"{prefix}.ffn2.bias"] = (c,)
    for n in ("norm1", "norm2"):
        shapes[f"{prefix}.{n}.weight"] = (c,)
        shapes[f"{prefix}.{n}.bias"] = (c,)
    return shapes


def param_shapes(cfg: ModelConfig) -> tuple[dict[str, tuple[int, ...]], dict[str, str]]:
    """Shapes of every named parameter, plus ``alias -> canonical`` names for shared weights."""
    c, e = cfg.channels, cfg.embedding_size
    shapes: dict[str, tuple[int, ...]] = {
        "tdnn.conv.weight": (c, cfg.n_filters),
        "tdnn.conv.bias": (c,),
        "tdnn.bn.weight": (c,),
        "tdnn.bn.bias": (c,),
        "aca_block.latent": (c, e),
    }
    shapes.update(_sub_block_shapes("aca_block", cfg))
    aliases: dict[str, str] = {}
    for i in range(cfg.n_latent_blocks):
        block = _sub_block_shapes(f"latent_block.{i}", cfg)
        shapes.update(block)
        if cfg.weight_sharing and i > 0:
            for name in block:
                aliases[name] = name.replace(f"latent_block.{i}.", "latent_block.0.", 1)
    j = cfg.mla_inputs
    if cfg.mla_conv == "depthwise":
        shapes["mla.conv.weight"] = (c, j)
    else:
        shapes["mla.conv.weight"] = (c, j * c)
    shapes["mla.conv.bias"] = (c,)
    shapes["mla.bn.weight"] = (c,)
    shapes["mla.bn.bias"] = (c,)
    shapes["head.final_conv.weight"] = (1, c)
    shapes["head.final_conv.bias"] = (1,)
    return shapes, aliases


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Scalar parameter count per layer (name without the last component); shared layers count once."""
    shapes, aliases = param_shapes(cfg)
    out: dict[str, int] = {}
    for name, shape in shapes.items():
        if name in aliases:
            continue
        layer = name.rsplit(".", 1)[0]
        out[layer] = out.get(layer, 0) + int(np.prod(shape))
    return out


def count_params(cfg: ModelConfig) -> int:
    return sum(param_breakdown(cfg).values())


def sample_truncated_normal(rng: np.random.Generator, shape, spec: LatentInitSpec = LatentInitSpec()) -> np.ndarray:
    """Rejection sampling from N(mean, std^2) restricted to [lower, upper]."""
    out = rng.normal(spec.mean, spec.std, size=shape)
    bad = (out < spec.lower) | (out > spec.upper)
    while bad.any():
        out[bad] = rng.normal(spec.mean, spec.std, size=int(bad.sum()))
        bad = (out < spec.lower) | (out > spec.upper)
    return out


def init_latent(cfg: ModelConfig, spec: LatentInitSpec = LatentInitSpec(), seed: int = 0) -> np.ndarray:
    """Initial C x E latent drawn from the truncated normal."""
    return sample_truncated_normal(derive_rng(seed, "latent"), (cfg.channels, cfg.embedding_size), spec)


def _init_param(name: str, shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator) -> np.ndarray:
    shape = shapes[name]
    layer, leaf = name.rsplit(".", 1)
    if ".norm" in name or ".bn." in name:
        return np.ones(shape) if leaf == "weight" else np.zeros(shape)
    if ".attn." in name:
        if leaf.startswith("w"):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-bound, bound, size=shape)
        return np.zeros(shape)
    # linear layers store (in, out); kernel-1 convs store (out, in)
    w = shapes[layer + ".weight"]
    fan_in = w[0] if ".ffn" in layer else w[1]
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- blocks -----------------------------------------------------------------------


def _view(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def tdnn_block(
    feats: Tensor,
    params: Mapping[str, Tensor],
    bn_state: BatchNormState,
    mode: str = "eval",
    mask: np.ndarray | None = None,
    update_stats: bool = True,
) -> Tensor:
    """Kernel-1 conv (C0 -> C), ReLU, batch norm.  ``feats`` is (C0, T) or (B, C0, T)."""
    w = params["tdnn.conv.weight"]
    if feats.shape[-2] != w.shape[1]:
        raise ShapeError(f"features have {feats.shape[-2]} filters, model expects {w.shape[1]}")
    x = conv1d(feats, w, params["tdnn.conv.bias"]).relu()
    valid = None if mask is None else ~np.asarray(mask, dtype=bool)
    return batchnorm1d(
        x, bn_state, mode, params["tdnn.bn.weight"], params["tdnn.bn.bias"], mask=valid, update_stats=update_stats
    )


def _sub_block(
    x: Tensor,
    kv: Tensor | None,
    p: Mapping[str, Tensor],
    cfg: ModelConfig,
    mask: np.ndarray | None,
    training: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    # pre-norm: x + drop(MHA(LN(x), kv)); then + drop(FFN(LN(.)))
    h = layer_norm(x, p["norm1.weight"], p["norm1.bias"])
    src = h if kv is None else kv
    attn = multi_head_attention(h, src, src, _view(p, "attn"), cfg.attention, key_mask=mask)
    x = x + dropout(attn, cfg.dropout_p, rng, training)
    h = layer_norm(x, p["norm2.weight"], p["norm2.bias"])
    f = linear(linear(h, p["ffn1.weight"], p["ffn1.bias"]).relu(), p["ffn2.weight"], p["ffn2.bias"])
    return x + dropout(f, cfg.dropout_p, rng, training)


def aca_sub_block(
    latent: Tensor,
    feats: Tensor,
    posenc: np.ndarray | None,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    mask: np.ndarray | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    prefix: str = "aca_block",
) -> Tensor:
    """Cross-attend the latent (C, E) over features (C, T) or (B, C, T).

    Returns the latent as tokens: (E, C), or (B, E, C) for batched features.
    ``posenc`` (C, T) is added to the features before they become keys/values.
    """
    if latent.shape[0] != cfg.channels or feats.shape[-2] != cfg.channels:
        raise ShapeError(f"latent {latent.shape} / features {feats.shape} do not have {cfg.channels} channels")
    kv = feats.swapaxes(-1, -2)
    if posenc is not None:
        kv = kv + posenc.T.astype(kv.dtype)
    return _sub_block(latent.T, kv, _view(params, prefix), cfg, mask, mode == "train", rng)


def latent_sub_block(
    latent: Tensor,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    prefix: str = "latent_block.0",
) -> Tensor:
    """Self-attention over latent tokens (..., E, C); shape preserved."""
    if latent.shape[-1] != cfg.channels:
        raise ShapeError(f"latent tokens {latent.shape} do not have {cfg.channels} channels")
    return _sub_block(latent, None, _view(params, prefix), cfg, None, mode == "train", rng)


def mla_block(
    latent0: Tensor,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    bn_state: BatchNormState,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    update_stats: bool = True,
    return_concat: bool = False,
):
    """Refine the ACA latent tokens (..., E, C) through the latent sub-blocks and aggregate.

    Returns the aggregated latent in (..., C, E) layout after the MLA
    convolution and batch norm.
    """
    if cfg.use_mla_concat and cfg.n_latent_blocks < 1:
        raise ValueError("MLA concatenation needs at least one latent sub-block")
    layers = []
    x = latent0
    for i in range(cfg.n_latent_blocks):
        x = latent_sub_block(x, params, cfg, mode, rng, prefix=f"latent_block.{i}")
        layers.append(x)
    if not layers:
        layers = [latent0]
    if not cfg.use_mla_concat:
        layers = layers[-1:]
    c = cfg.channels
    if cfg.mla_conv == "depthwise":
        # channel-major interleave: position c*j + k holds channel c of layer k
        stacked = concat([t.reshape(*t.shape, 1) for t in layers], axis=-1)
        cat = stacked.reshape(*stacked.shape[:-2], c * len(layers))
        groups = c
    else:
        cat = concat(layers, axis=-1)
        groups = 1
    cat = cat.swapaxes(-1, -2)  # (..., jC, E)
    out = conv1d(cat, params["mla.conv.weight"], params["mla.conv.bias"], groups=groups)
    out = batchnorm1d(out, bn_state, mode, params["mla.bn.weight"], params["mla.bn.bias"], update_stats=update_stats)
    if return_concat:
        return out, cat
    return out


@lru_cache(maxsize=32)
def _posenc(T: int, C: int, dtype_name: str) -> np.ndarray:
    pe = sinusoidal_pos_encoding(T, C, dtype=np.dtype(dtype_name))
    pe.setflags(write=False)
    return pe


class AcaNet:
    """Parameters, batch-norm state and forward pass of one ACA-Net."""

    BN_LAYERS = ("tdnn.bn", "mla.bn")

    def __init__(
        self,
        cfg: ModelConfig = ModelConfig(),
        seed: int = 0,
        dtype=np.float32,
        latent_init: LatentInitSpec = LatentInitSpec(),
    ):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        shapes, aliases = param_shapes(cfg)
        self.aliases = aliases
        rng = derive_rng(seed, "params")
        params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            if name in aliases:
                continue
            if name == "aca_block.latent":
                value = init_latent(cfg, latent_init, seed)
            else:
                value = _init_param(name, shapes, rng)
            params[name] = Tensor(value.astype(self.dtype), requires_grad=True, name=name)
        for name, canonical in aliases.items():
            params[name] = params[canonical]
        self.params = {name: params[name] for name in shapes}
        self.bn = {name: BatchNormState.create(cfg.channels, self.dtype) for name in self.BN_LAYERS}

    # -- parameter access ---------------------------------------------------------

    def unique_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.aliases}

    def num_params(self) -> int:
        return sum(t.size for t in self.unique_params().values())

    def zero_grad(self) -> None:
        for t in self.unique_params().values():
            t.zero_grad()

    def astype(self, dtype) -> AcaNet:
        """Copy of the network with parameters and statistics cast to ``dtype``."""
        other = object.__new__(AcaNet)
        other.cfg, other.dtype, other.aliases = self.cfg, np.dtype(dtype), dict(self.aliases)
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.unique_params().items()}
        for name, canonical in self.aliases.items():
            params[name] = params[canonical]
        other.params = {k: params[k] for k in self.params}
        other.bn = {
            k: dataclasses.replace(s, running_mean=s.running_mean.astype(dtype), running_var=s.running_var.astype(dtype))
            for k, s in self.bn.items()
        }
        return other

    # -- forward ------------------------------------------------------------------

    def forward(
        self,
        feats,
        mask: np.ndarray | None = None,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        update_stats: bool = True,
        final_relu: bool = True,
    ) -> Tensor:
        """Embeddings (B, E) for features (B, C0, T); (E,) for a single (C0, T) matrix.

        ``mask`` (B, T) is True at padded frames. ``final_relu=False`` returns the head
        output before its activation.
        """
        cfg = self.cfg
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=self.dtype))
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
            if mask is not None:
                mask = np.asarray(mask, dtype=bool).reshape(1, -1)
        p = self.params
        h = tdnn_block(x, p, self.bn["tdnn.bn"], mode, mask=mask, update_stats=update_stats)
        pe = _posenc(h.shape[-1], cfg.channels, self.dtype.name) if cfg.use_posenc else None
        lat = aca_sub_block(p["aca_block.latent"], h, pe, p, cfg, mask=mask, mode=mode, rng=rng)
        agg = mla_block(lat, p, cfg, self.bn["mla.bn"], mode, rng, update_stats=update_stats)
        out = conv1d(agg, p["head.final_conv.weight"], p["head.final_conv.bias"])
        if final_relu:
            out = out.relu()
        out = out.reshape(out.shape[0], cfg.embedding_size)
        return out.reshape(cfg.embedding_size) if single else out

    __call__ = forward

    def embed(self, feats: FeatureMatrix | np.ndarray) -> np.ndarray:
        """Eval-mode embedding of one utterance, length E."""
        values = feats.values if isinstance(feats, FeatureMatrix) else feats
        with no_grad():
            return self.forward(values, mode="eval").data.copy()

    def embed_batch(self, items: list[np.ndarray], batch_size: int = 32) -> np.ndarray:
        """Eval-mode embeddings of variable-length (C0, T) matrices, padded and masked per batch."""
        out = []
        with no_grad():
            for start in range(0, len(items), batch_size):
                chunk = items[start : start + batch_size]
                t_max = max(m.shape[1] for m in chunk)
                x = np.zeros((len(chunk), self.cfg.n_filters, t_max), dtype=self.dtype)
                mask = np.ones((len(chunk), t_max), dtype=bool)
                for i, m in enumerate(chunk):
                    x[i, :, : m.shape[1]] = m
                    mask[i, : m.shape[1]] = False
                out.append(self.forward(x, mask=mask if mask.any() else None, mode="eval").data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.cfg.embedding_size), dtype=self.dtype)


def embed(feats: FeatureMatrix | np.ndarray, net: AcaNet) -> np.ndarray:
    """Length-E embedding of one feature matrix (eval mode)."""
    return net.embed(feats)
