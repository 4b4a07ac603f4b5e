"""Transformer building blocks over :mod:`psnet.autodiff` tensors.

Per-head projections W^Q_i, W^K_i, W^V_i (each C x d) are stored side by side
as one C x (h*d) matrix; head ``i`` owns columns ``i*d:(i+1)*d``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=np.float64, gain: float = 1.0) -> Tensor:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses and lists, yielding (dotted name, tensor) in a fixed order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


# ---------------------------------------------------------------------------
# layer norm


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps > 0:
            raise ContractError("layer norm eps must be positive")


def init_layer_norm(width: int, dtype=np.float64) -> LayerNormParams:
    return LayerNormParams(ones((width,), dtype), zeros((width,), dtype))


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize each row to zero mean and unit (population) variance, then scale and shift."""
    width = p.gamma.shape[0]
    if x.shape[-1] != width:
        raise DimensionError(f"layer_norm: input width {x.shape[-1]} != params width {width}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(p.eps))
    xhat = xc * inv
    gamma = p.gamma.data
    y = xhat * gamma + p.beta.data

    def grad(g):
        dxhat = g * gamma
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return ad.make_op(y, (x, p.gamma, p.beta), grad, "layer_norm")


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        if self.wq.shape[1] % self.heads:
            raise ContractError(f"projection width {self.wq.shape[1]} not divisible by {self.heads} heads")
        if self.wo.shape[0] != self.wq.shape[1]:
            raise DimensionError(f"output projection {self.wo.shape} does not take {self.wq.shape[1]} inputs")

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.heads

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    def head_projections(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cols = slice(i * self.head_dim, (i + 1) * self.head_dim)
        return self.wq.data[:, cols], self.wk.data[:, cols], self.wv.data[:, cols]


def init_attention(rng: np.random.Generator, width: int, heads: int, dtype=np.float64) -> AttentionParams:
    if width % heads:
        raise ContractError(f"width {width} not divisible by {heads} heads")
    d = width // heads
    # each per-head block is C x d, so fan_out is d
    return AttentionParams(
        wq=glorot(rng, width, d, (width, width), dtype),
        wk=glorot(rng, width, d, (width, width), dtype),
        wv=glorot(rng, width, d, (width, width), dtype),
        wo=glorot(rng, width, width, dtype=dtype),
        heads=heads,
    )


def _canonical_order(k: np.ndarray, v: np.ndarray, same: bool) -> np.ndarray:
    """Row order of the key/value memory that does not depend on its given order."""
    first = k[:, 0]
    if np.unique(first).size == first.size:
        return np.argsort(first, kind="stable")
    rows = k if same else np.concatenate([k, v], axis=1)
    return np.lexsort(rows.T[::-1])


def attention_weights(q: Tensor, k: Tensor, p: AttentionParams, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-head attention distributions, shape h x Nq x Nk, in the given key order."""
    _, weights = _attend(q, k, k, p, mask)
    return weights.data


def _attend(q: Tensor, k: Tensor, v: Tensor, p: AttentionParams, mask):
    nq, nk = q.shape[0], k.shape[0]
    h, d = p.heads, p.head_dim
    qh = ad.transpose(ad.reshape(ad.matmul(q, p.wq), (nq, h, d)), (1, 0, 2))
    kt = ad.transpose(ad.reshape(ad.matmul(k, p.wk), (nk, h, d)), (1, 2, 0))
    vh = ad.transpose(ad.reshape(ad.matmul(v, p.wv), (nk, h, d)), (1, 0, 2))
    scores = ad.scale(ad.matmul(qh, kt), 1.0 / np.sqrt(d))
    weights = ad.softmax_rows(scores, mask)
    heads = ad.matmul(weights, vh)
    merged = ad.reshape(ad.transpose(heads, (1, 0, 2)), (nq, h * d))
    return ad.matmul(merged, p.wo), weights


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, p: AttentionParams, mask: np.ndarray | None = None
) -> Tensor:
    """Scaled dot-product attention with ``p.heads`` heads.

    ``mask`` is an Nq x Nk boolean array, True where attention is allowed.
    Without a mask the key/value rows are first put into a canonical order so
    the result is bitwise independent of memory order.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention operands must be 2-D")
    if q.shape[1] != p.width or k.shape[1] != p.width or v.shape[1] != p.width:
        raise DimensionError(f"attention: widths {q.shape[1]}, {k.shape[1]}, {v.shape[1]} != {p.width}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention: {k.shape[0]} keys but {v.shape[0]} values")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[0], k.shape[0]):
            raise DimensionError(f"mask shape {mask.shape} != {(q.shape[0], k.shape[0])}")
        if not mask.any(axis=1).all():
            raise ContractError("attention mask leaves a query row with no allowed key")
    else:
        same = k is v
        order = _canonical_order(k.data, v.data, same)
        k = ad.take_rows(k, order)
        v = k if same else ad.take_rows(v, order)
    out, _ = _attend(q, k, v, p, mask)
    return out


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "gelu"


def init_mlp(rng: np.random.Generator, width: int, hidden: int, activation: str = "gelu", dtype=np.float64) -> MlpParams:
    return MlpParams(
        glorot(rng, width, hidden, dtype=dtype),
        zeros((hidden,), dtype),
        glorot(rng, hidden, width, dtype=dtype),
        zeros((width,), dtype),
        activation,
    )


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = ad.matmul(x, w)
    return y if b is None else ad.add_bias(y, b)


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    hidden = ad.elementwise(p.activation, linear(x, p.w1, p.b1))
    return linear(hidden, p.w2, p.b2)


# ---------------------------------------------------------------------------
# Transformer layers (post-norm)


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ln1: LayerNormParams
    mlp: MlpParams
    ln2: LayerNormParams


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    ln1: LayerNormParams
    cross_attn: AttentionParams
    ln2: LayerNormParams
    mlp: MlpParams
    ln3: LayerNormParams


def init_encoder_layer(rng, width: int, heads: int, ffn_mult: int = 4, dtype=np.float64) -> EncoderLayerParams:
    return EncoderLayerParams(
        init_attention(rng, width, heads, dtype),
        init_layer_norm(width, dtype),
        init_mlp(rng, width, ffn_mult * width, "gelu", dtype),
        init_layer_norm(width, dtype),
    )


def init_decoder_layer(rng, width: int, heads: int, ffn_mult: int = 4, dtype=np.float64) -> DecoderLayerParams:
    return DecoderLayerParams(
        init_attention(rng, width, heads, dtype),
        init_layer_norm(width, dtype),
        init_attention(rng, width, heads, dtype),
        init_layer_norm(width, dtype),
        init_mlp(rng, width, ffn_mult * width, "gelu", dtype),
        init_layer_norm(width, dtype),
    )


def encoding_layer_forward(x: Tensor, p: EncoderLayerParams) -> Tensor:
    x = layer_norm(ad.add(x, multi_head_attention(x, x, x, p.attn)), p.ln1)
    return layer_norm(ad.add(x, mlp_forward(x, p.mlp)), p.ln2)


def decoding_layer_forward(t: Tensor, memory: Tensor, p: DecoderLayerParams) -> Tensor:
    """Causal self-attention, cross-attention to ``memory``, then MLP."""
    if memory.shape[1] != t.shape[1]:
        raise DimensionError(f"decoder: memory width {memory.shape[1]} != token width {t.shape[1]}")
    t = layer_norm(ad.add(t, multi_head_attention(t, t, t, p.self_attn, causal_mask(t.shape[0]))), p.ln1)
    t = layer_norm(ad.add(t, multi_head_attention(t, memory, memory, p.cross_attn)), p.ln2)
    return layer_norm(ad.add(t, mlp_forward(t, p.mlp)), p.ln3)
