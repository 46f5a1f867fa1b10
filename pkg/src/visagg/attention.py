"""Cross-frame temporal attention, global-context channel attention and their fusion.

Both branches return only their correction term; :func:`dual_attention` adds
them to the input feature map, so zeroed output transforms give the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .tensor import (
    ContractError,
    OpParams,
    Tensor,
    broadcast_to,
    conv1x1,
    matmul,
    relu,
    reshape,
    softmax_axis,
    stack,
    transpose,
)


@dataclass
class AttentionParams:
    key_proj_current: OpParams
    key_proj_support: OpParams
    value_proj_support: OpParams
    output_transform: OpParams
    channel_attn_proj: OpParams
    channel_transform_1: OpParams
    channel_transform_2: OpParams

    @classmethod
    def init(cls, channels: int, reduction: int = 4, seed: int = 0) -> "AttentionParams":
        """Fan-in uniform projections; both output transforms start at zero."""
        if channels % 4 or channels % reduction:
            raise ContractError(f"C={channels} must be divisible by 4 and by r={reduction}")
        rng = np.random.default_rng(seed)
        d = channels // 4
        return cls(
            key_proj_current=OpParams.init(channels, d, rng),
            key_proj_support=OpParams.init(channels, d, rng),
            value_proj_support=OpParams.init(channels, d, rng),
            output_transform=OpParams.init(d, channels, zero=True),
            channel_attn_proj=OpParams.init(channels, 1, rng),
            channel_transform_1=OpParams.init(channels, channels // reduction, rng),
            channel_transform_2=OpParams.init(channels // reduction, channels, zero=True),
        )

    @property
    def channels(self) -> int:
        return self.key_proj_current.in_channels

    def parameters(self) -> list[Tensor]:
        return [p for f in fields(self) for p in getattr(self, f.name).parameters()]


@dataclass
class SupportEmbedding:
    keys: Tensor    # [T, C/4, H, W]
    values: Tensor  # [T, C/4, H, W]

    @property
    def num_positions(self) -> int:
        T, _, H, W = self.keys.shape
        return T * H * W


def embed_current(f_c: Tensor, params: AttentionParams) -> Tensor:
    _check_channels(f_c, params)
    return relu(conv1x1(f_c, params.key_proj_current))


def embed_support(frames: Sequence[Tensor], params: AttentionParams) -> SupportEmbedding:
    if len(frames) == 0:
        raise ContractError("embed_support needs at least one support frame")
    shape = frames[0].shape
    for f in frames:
        if f.shape != shape:
            raise ContractError(f"support frames disagree in shape: {f.shape} vs {shape}")
        _check_channels(f, params)
    keys = stack([relu(conv1x1(f, params.key_proj_support)) for f in frames])
    values = stack([relu(conv1x1(f, params.value_proj_support)) for f in frames])
    return SupportEmbedding(keys, values)


def _flatten_support(t: Tensor) -> Tensor:
    # [T, d, H, W] -> [d, T*H*W], position order (t, y, x)
    T, d, H, W = t.shape
    return reshape(transpose(t, (1, 0, 2, 3)), (d, T * H * W))


def attention_weights(f_c: Tensor, support: SupportEmbedding, params: AttentionParams) -> Tensor:
    """Column-softmaxed similarity matrix ``[N_p, h*w]``; each column sums to 1."""
    if support.num_positions == 0:
        raise ContractError("temporal attention over zero support positions")
    q = embed_current(f_c, params)
    d = q.shape[0]
    q = reshape(q, (d, -1))
    k = _flatten_support(support.keys)
    sim = matmul(transpose(k, (1, 0)), q)
    return softmax_axis(sim, axis=0)


def temporal_attention(f_c: Tensor, support: SupportEmbedding, params: AttentionParams) -> Tensor:
    """Aggregate support values at every current position; returns the branch output only.

    The current map may be smaller than the support maps (object-level use);
    only channel counts have to agree.
    """
    attn = attention_weights(f_c, support, params)
    v = _flatten_support(support.values)
    agg = matmul(v, attn)
    agg = reshape(agg, (agg.shape[0],) + f_c.shape[1:])
    return conv1x1(relu(agg), params.output_transform)


def channel_attention(f_c: Tensor, params: AttentionParams) -> Tensor:
    """Global-context block: one softmaxed spatial map pools every channel."""
    _check_channels(f_c, params)
    C = f_c.shape[0]
    n = int(np.prod(f_c.shape[1:]))
    if n == 0:
        raise ContractError("channel attention over an empty spatial grid")
    logits = reshape(conv1x1(f_c, params.channel_attn_proj), (n,))
    a = softmax_axis(logits, axis=0)
    z = matmul(reshape(f_c, (C, n)), a)
    t = conv1x1(relu(conv1x1(z, params.channel_transform_1)), params.channel_transform_2)
    return broadcast_to(reshape(t, (C,) + (1,) * (f_c.ndim - 1)), f_c.shape)


def dual_attention(f_c: Tensor, supports: Sequence[Tensor] | SupportEmbedding,
                   params: AttentionParams) -> Tensor:
    emb = supports if isinstance(supports, SupportEmbedding) else embed_support(supports, params)
    return temporal_attention(f_c, emb, params) + channel_attention(f_c, params) + f_c


def object_dual_attention(proposals: Tensor, supports: Sequence[Tensor] | SupportEmbedding,
                          params: AttentionParams) -> Tensor:
    """Dual attention on each ``[C,h,w]`` proposal volume of ``proposals[P,C,h,w]``.

    Support keys and values are embedded once at full resolution and shared.
    """
    if proposals.ndim != 4:
        raise ContractError(f"proposals must be [P,C,h,w], got {proposals.shape}")
    if proposals.shape[1] != params.channels:
        raise ContractError(
            f"proposal channels {proposals.shape[1]} != support channels {params.channels}")
    if proposals.shape[0] == 0:
        return Tensor(np.zeros(proposals.shape))
    emb = supports if isinstance(supports, SupportEmbedding) else embed_support(supports, params)
    return stack([dual_attention(proposals[p], emb, params) for p in range(proposals.shape[0])])


def _check_channels(f: Tensor, params: AttentionParams) -> None:
    if f.shape[0] != params.channels:
        raise ContractError(f"feature map has C={f.shape[0]}, attention expects C={params.channels}")
