"""Spatial, temporal and channel (mode) attention over decomposed features.

All feature tensors use the layout ``[batch, nodes, channels, time]``.  The
channel attention learns a non-negative shrinkage threshold that zeroes
small entries of the mode-to-mode score matrix before normalization, which
lets the network mute modes dominated by noise.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError
from .numerics import ops
from .numerics.tensor import Tensor

__all__ = [
    "SpatialAttentionParams",
    "TemporalAttentionParams",
    "ChannelAttentionParams",
    "AttentionParams",
    "AttentionOutput",
    "spatial_attention",
    "temporal_attention",
    "apply_temporal_attention",
    "channel_attention",
    "apply_channel_attention",
    "attention_3d",
    "write_channel_matrix_csv",
]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class _Params:
    def parameters(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class SpatialAttentionParams(_Params):
    node_mix: Tensor           # [N, N]
    bias: Tensor               # [N, N]
    time_proj: Tensor          # [T_w]
    channel_time_proj: Tensor  # [d, T_w]
    channel_proj: Tensor       # [d]

    @classmethod
    def init(cls, num_nodes: int, channels: int, window: int, rng: np.random.Generator):
        return cls(
            node_mix=_uniform(rng, (num_nodes, num_nodes), num_nodes),
            bias=_zeros((num_nodes, num_nodes)),
            time_proj=_uniform(rng, (window,), window),
            channel_time_proj=_uniform(rng, (channels, window), channels),
            channel_proj=_uniform(rng, (channels,), channels),
        )


@dataclass
class TemporalAttentionParams(_Params):
    time_mix: Tensor           # [T_w, T_w]
    bias: Tensor               # [T_w, T_w]
    node_proj: Tensor          # [N]
    node_channel_proj: Tensor  # [N, d]
    channel_proj: Tensor       # [d]

    @classmethod
    def init(cls, num_nodes: int, channels: int, window: int, rng: np.random.Generator):
        return cls(
            time_mix=_uniform(rng, (window, window), window),
            bias=_zeros((window, window)),
            node_proj=_uniform(rng, (num_nodes,), num_nodes),
            node_channel_proj=_uniform(rng, (num_nodes, channels), num_nodes),
            channel_proj=_uniform(rng, (channels,), channels),
        )


# softplus(-6) ~ 2.5e-3: the threshold starts effectively off
_THRESHOLD_RAW_INIT = -6.0


@dataclass
class ChannelAttentionParams(_Params):
    channel_mix: Tensor     # [d, d]
    bias: Tensor            # [d, d]
    time_proj: Tensor       # [T_w]
    node_time_proj: Tensor  # [N, T_w]
    node_proj: Tensor       # [N]
    threshold_raw: Tensor   # scalar; threshold = softplus(threshold_raw)

    @classmethod
    def init(cls, num_nodes: int, channels: int, window: int, rng: np.random.Generator):
        return cls(
            channel_mix=_uniform(rng, (channels, channels), channels),
            bias=_zeros((channels, channels)),
            time_proj=_uniform(rng, (window,), window),
            node_time_proj=_uniform(rng, (num_nodes, window), num_nodes),
            node_proj=_uniform(rng, (num_nodes,), num_nodes),
            threshold_raw=Tensor(np.array(_THRESHOLD_RAW_INIT), requires_grad=True),
        )

    def threshold(self) -> Tensor:
        return ops.softplus(self.threshold_raw)

    @staticmethod
    def raw_for(threshold: float) -> float:
        """Unconstrained value whose softplus equals ``threshold`` (> 0)."""
        return float(threshold + np.log(-np.expm1(-threshold)))


@dataclass
class AttentionParams:
    spatial: SpatialAttentionParams
    temporal: TemporalAttentionParams
    channel: ChannelAttentionParams

    @classmethod
    def init(cls, num_nodes: int, channels: int, window: int, rng: np.random.Generator):
        return cls(
            SpatialAttentionParams.init(num_nodes, channels, window, rng),
            TemporalAttentionParams.init(num_nodes, channels, window, rng),
            ChannelAttentionParams.init(num_nodes, channels, window, rng),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for group in ("spatial", "temporal", "channel"):
            for name, t in getattr(self, group).parameters().items():
                out[f"{group}.{name}"] = t
        return out


class AttentionOutput(NamedTuple):
    z_new: Tensor   # [B, N, d, T_w] channel-attended features plus residual
    s_norm: Tensor  # [B, N, N]
    e_norm: Tensor  # [B, T_w, T_w]
    c_th: Tensor    # [B, d, d]
    c_norm: Tensor  # [B, d, d]


def _check_features(z: Tensor, n: int, d: int, t: int, what: str) -> None:
    if z.ndim != 4 or z.shape[1:] != (n, d, t):
        raise InvalidInputError(f"{what}: expected features [B, {n}, {d}, {t}], got {z.shape}")


def spatial_attention(z: Tensor, p: SpatialAttentionParams) -> Tensor:
    """Row-normalized node-to-node attention, ``[B, N, N]``."""
    n = p.node_mix.shape[0]
    d, t = p.channel_time_proj.shape
    _check_features(z, n, d, t, "spatial_attention")
    lhs = ops.einsum("bnct,t->bnc", z, p.time_proj)
    lhs = ops.einsum("bnc,ct->bnt", lhs, p.channel_time_proj)
    rhs = ops.einsum("c,bnct->bnt", p.channel_proj, z)
    product = ops.einsum("bit,bjt->bij", lhs, rhs)
    scores = ops.einsum("ij,bjk->bik", p.node_mix, ops.sigmoid(ops.add(product, p.bias)))
    return ops.softmax(scores, axis=-1)


def temporal_attention(z: Tensor, p: TemporalAttentionParams) -> Tensor:
    """Row-normalized time-to-time attention, ``[B, T_w, T_w]``."""
    n, d = p.node_channel_proj.shape
    t = p.time_mix.shape[0]
    _check_features(z, n, d, t, "temporal_attention")
    lhs = ops.einsum("bnct,n->btc", z, p.node_proj)
    lhs = ops.einsum("btc,nc->btn", lhs, p.node_channel_proj)
    rhs = ops.einsum("c,bnct->bnt", p.channel_proj, z)
    product = ops.einsum("btn,bns->bts", lhs, rhs)
    scores = ops.einsum("ts,bsr->btr", p.time_mix, ops.sigmoid(ops.add(product, p.bias)))
    return ops.softmax(scores, axis=-1)


def apply_temporal_attention(z: Tensor, e_norm: Tensor) -> Tensor:
    """``out[..., t] = sum_s z[..., s] * E'[t, s]`` per sample."""
    if z.ndim != 4 or e_norm.ndim != 3 or e_norm.shape != (z.shape[0], z.shape[3], z.shape[3]):
        raise InvalidInputError(
            f"temporal attention {e_norm.shape} does not match features {z.shape}")
    return ops.einsum("bncs,bts->bnct", z, e_norm)


def channel_attention(z: Tensor, p: ChannelAttentionParams,
                      threshold: Tensor | float | None = None) -> tuple[Tensor, Tensor]:
    """Thresholded mode-to-mode scores and their row softmax, both ``[B, d, d]``.

    ``threshold`` overrides the learned shrinkage level when given.
    """
    n, t = p.node_time_proj.shape
    d = p.channel_mix.shape[0]
    _check_features(z, n, d, t, "channel_attention")
    lhs = ops.einsum("bnct,t->bcn", z, p.time_proj)
    lhs = ops.einsum("bcn,nt->bct", lhs, p.node_time_proj)
    rhs = ops.einsum("n,bnct->btc", p.node_proj, z)
    product = ops.einsum("bct,btk->bck", lhs, rhs)
    scores = ops.einsum("ck,bkl->bcl", p.channel_mix, ops.sigmoid(ops.add(product, p.bias)))
    phi = p.threshold() if threshold is None else threshold
    c_th = ops.soft_threshold(scores, phi)
    return c_th, ops.softmax(c_th, axis=-1)


def apply_channel_attention(z: Tensor, c_norm: Tensor) -> Tensor:
    """Mix the channel axis by ``C'`` and add the input back: ``z C' + z``."""
    if z.ndim != 4 or c_norm.ndim != 3 or c_norm.shape != (z.shape[0], z.shape[2], z.shape[2]):
        raise InvalidInputError(
            f"channel attention {c_norm.shape} does not match features {z.shape}")
    return ops.add(ops.einsum("bnkt,bkj->bnjt", z, c_norm), z)


def attention_3d(z: Tensor, p: AttentionParams) -> AttentionOutput:
    """Temporal and channel attention from the same input; the temporally
    re-weighted features drive spatial attention, and the channel-attended
    features (plus residual) are what the graph convolution consumes."""
    e_norm = temporal_attention(z, p.temporal)
    c_th, c_norm = channel_attention(z, p.channel)
    s_norm = spatial_attention(apply_temporal_attention(z, e_norm), p.spatial)
    return AttentionOutput(apply_channel_attention(z, c_norm), s_norm, e_norm, c_th, c_norm)


def write_channel_matrix_csv(matrix, path) -> None:
    """Write a ``[d, d]`` channel matrix with ``mode_i`` headers."""
    m = np.asarray(matrix.data if isinstance(matrix, Tensor) else matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got {m.shape}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [f"mode_{j}" for j in range(m.shape[1])])
        for i, row in enumerate(m):
            w.writerow([f"mode_{i}"] + [repr(float(v)) for v in row])
