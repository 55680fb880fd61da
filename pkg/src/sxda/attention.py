"""Blocked window attention, dilated cross-frame attention, fusion, and RCAB.

Feature maps are channel-last (..., H, W, C); any leading axes are batch.
Blocked features carry shape (..., b*b, n_blocks, C): axis -3 indexes the
token within a block (row-major over the b x b window), axis -2 the block
(row-major over the (H/b) x (W/b) grid).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor


@dataclass
class BlockedFeatures:
    """Block-rearranged feature map, standard or dilated."""

    data: Tensor
    block: int
    source_hw: tuple
    kind: str = "standard"  # "standard" | "dilated"
    dilation: int = 1

    @property
    def n_blocks(self):
        return self.data.shape[-2]

    @property
    def channels(self):
        return self.data.shape[-1]


@dataclass
class AttentionParams:
    """Shared per-stage projections: per-head query/key/value plus output.

    Each per-head matrix is (C, C/L); the output projection is (C, C). One
    value per stage, shared across every block and all three frame streams.
    """

    q: list
    k: list
    v: list
    out: Tensor

    def __post_init__(self):
        c = self.out.shape[0]
        heads = len(self.q)
        if not (len(self.k) == len(self.v) == heads):
            raise ConfigurationError("query/key/value head counts differ")
        if c % heads != 0:
            raise ConfigurationError(f"head count {heads} does not divide channels {c}")

    @property
    def heads(self):
        return len(self.q)

    @property
    def channels(self):
        return self.out.shape[0]


@dataclass
class FusionParams:
    """One 3x3 conv (C channels -> 1 logit) with bias per fused map source."""

    weights: list  # (3,3,C,1) tensors
    biases: list  # (1,) tensors

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ConfigurationError("fusion weight/bias counts differ")

    @property
    def count(self):
        return len(self.weights)


@dataclass
class RcabParams:
    """Residual channel attention block parameters.

    conv1/conv2 are 3x3 same convs; reduce/expand are the 1x1 gate convs
    stored as (C, C/r) and (C/r, C) matrices.
    """

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    reduce_w: Tensor
    reduce_b: Tensor
    expand_w: Tensor
    expand_b: Tensor


# ---------------------------------------------------------------------------
# blocking


def block(f, b):
    """Partition a (..., H, W, C) map into non-overlapping b x b blocks.

    Block j walks the (H/b, W/b) grid row-major; within a block the b*b
    tokens are the row-major flattening of the window.
    """
    h, w = f.shape[-3], f.shape[-2]
    return BlockedFeatures(T.space_to_blocks(f, b), b, (h, w))


def unblock(bf):
    """Inverse of :func:`block`; rejects dilated blockings."""
    if bf.kind != "standard":
        raise ContractError("dilated blockings cannot be unblocked")
    return T.blocks_to_space(bf.data, bf.block, bf.source_hw)


_DILATED_CACHE = {}


def dilated_sample_coords(h, w, b, d):
    """Padded-plane sample coordinates of every dilated block.

    Returns (rows, cols) of shape (b*b, n_blocks), before reflection. Block j
    at grid cell (r, c) draws from a d*b x d*b window whose top-left sits at
    (r*b - (d-1)*b/2, c*b - (d-1)*b/2), sampled at stride d.
    """
    if h % b or w % b:
        raise DimensionError(f"block size {b} must divide spatial extents {h}x{w}")
    if d < 1:
        raise ConfigurationError(f"dilation must be >= 1, got {d}")
    if d % 2 == 0 and b % 2 != 0:
        raise ConfigurationError(f"even dilation {d} requires an even block size, got {b}")
    off = (d - 1) * b // 2
    gr = np.arange(h // b) * b - off
    gc = np.arange(w // b) * b - off
    du = np.arange(b) * d
    # token (u, v) row-major within the block; block (r, c) row-major
    rows = (gr[:, None] + du[None, :])  # (H/b, b)
    cols = (gc[:, None] + du[None, :])  # (W/b, b)
    rows = np.broadcast_to(rows[:, None, :, None], (h // b, w // b, b, b))
    cols = np.broadcast_to(cols[None, :, None, :], (h // b, w // b, b, b))
    rows = rows.reshape(-1, b * b).T  # (b*b, n_blocks)
    cols = cols.reshape(-1, b * b).T
    return rows, cols


def _dilated_indices(h, w, b, d):
    key = (h, w, b, d)
    hit = _DILATED_CACHE.get(key)
    if hit is None:
        rows, cols = dilated_sample_coords(h, w, b, d)
        rows = T.reflect_index(rows, h).astype(np.intp)
        cols = T.reflect_index(cols, w).astype(np.intp)
        flat = (rows.reshape(-1) * w + cols.reshape(-1)).astype(np.intp)
        hit = (rows, cols, flat)
        _DILATED_CACHE[key] = hit
    return hit


def dilated_block(f, b, d):
    """Blocked rearrangement sampling each block from a dilated window.

    Every standard block gets one dilated counterpart of the same b x b token
    count, drawn at stride d from a d*b x d*b window centred on it; window
    coordinates outside the map reflect back inside (edge-repeating mirror).
    """
    h, w = f.shape[-3], f.shape[-2]
    rows, cols, flat = _dilated_indices(h, w, b, d)
    data = T.gather_hw(f, rows, cols, scatter_index=flat)
    return BlockedFeatures(data, b, (h, w), kind="dilated" if d > 1 else "standard", dilation=d)


# ---------------------------------------------------------------------------
# attention


def _heads_matrix(parts):
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)


def cross_attention(bf_q, bf_kv, p, weights_out=None):
    """Blocked multi-head attention with queries and keys/values from
    possibly different frames; identical inputs collapse to self-attention
    because the projections are shared."""
    if bf_q.kind != "standard":
        raise ContractError("queries must come from a standard blocking")
    if bf_q.block != bf_kv.block or bf_q.data.shape[-3:] != bf_kv.data.shape[-3:]:
        raise DimensionError(
            f"block geometry mismatch: {bf_q.data.shape} (b={bf_q.block}) vs "
            f"{bf_kv.data.shape} (b={bf_kv.block})"
        )
    c = bf_q.channels
    heads = p.heads
    if c % heads != 0:
        raise ConfigurationError(f"head count {heads} does not divide channels {c}")
    if p.channels != c:
        raise DimensionError(f"projection channels {p.channels} do not match features {c}")

    o = T.multihead_attention(
        bf_q.data,
        bf_kv.data,
        _heads_matrix(p.q),
        _heads_matrix(p.k),
        _heads_matrix(p.v),
        p.out,
        heads,
        weights_out=weights_out,
    )
    return BlockedFeatures(o, bf_q.block, bf_q.source_hw, "standard")


def mhsa(bf, p, weights_out=None):
    """Blocked multi-head self-attention (queries, keys and values all from
    the same blocked features)."""
    if bf.kind != "standard":
        raise ContractError("self-attention requires a standard blocking")
    return cross_attention(bf, bf, p, weights_out=weights_out)


def dilated_cross_attention(f_q, f_nb, b, d, p):
    """Cross-attention between standard blocks of the query map and the
    dilated blocking of the neighbour map; output follows query geometry."""
    if f_q.shape != f_nb.shape:
        raise DimensionError(f"feature map shapes differ: {f_q.shape} vs {f_nb.shape}")
    return unblock(cross_attention(block(f_q, b), dilated_block(f_nb, b, d), p))


# ---------------------------------------------------------------------------
# fusion


def fuse_stacked(stacked, fp):
    """Adaptive convex combination of attention maps stacked on axis 0.

    stacked: (N, ..., H, W, C). Each map produces a single-channel logit map
    through its own 3x3 conv; a per-location softmax across maps yields
    mixing weights shared by all channels.
    """
    n = stacked.shape[0]
    if n != fp.count:
        raise ConfigurationError(f"fusion expects {fp.count} maps, got {n}")
    if n == 1:
        return T.take0(stacked, 0)
    rank = len(stacked.shape)
    kernels = T.stack0(fp.weights)  # (N, 3, 3, C, 1)
    biases = T.concat(fp.biases, axis=0)  # (N,)
    logits = T.conv2d_grouped(stacked, kernels, padding="reflect")  # (N, ..., H, W, 1)
    logits = T.add(logits, T.reshape(biases, (n,) + (1,) * (rank - 1)))
    # softmax across the map axis: rotate it to the end and back
    weights = T.permute_axes(logits, tuple(range(1, rank)) + (0,))
    weights = T.softmax_rows(weights)
    weights = T.permute_axes(weights, (rank - 1,) + tuple(range(rank - 1)))
    return T.reduce_sum(T.mul(stacked, weights), axes=0)


def fuse(maps, fp):
    """Adaptive convex combination of a list of same-shape attention maps."""
    maps = list(maps)
    n = len(maps)
    if n != fp.count:
        raise ConfigurationError(f"fusion expects {fp.count} maps, got {n}")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ConfigurationError(f"fused maps must share a shape: {m.shape} vs {shape}")
    if n == 1:
        return maps[0]
    return fuse_stacked(T.stack0(maps), fp)


# ---------------------------------------------------------------------------
# residual channel attention block


def rcab(f, rp):
    """conv-relu-conv branch gated by a learned per-channel scale, plus the
    identity shortcut."""
    y = T.add_channel_bias(T.conv2d(f, rp.conv1_w, padding="reflect"), rp.conv1_b)
    y = T.relu(y)
    y = T.add_channel_bias(T.conv2d(y, rp.conv2_w, padding="reflect"), rp.conv2_b)

    lead = y.shape[:-3]
    c = y.shape[-1]
    g = T.reshape(T.reduce_mean(y, axes=(-3, -2)), lead + (1, c))
    g = T.relu(T.add_channel_bias(T.matmul(g, rp.reduce_w), rp.reduce_b))
    g = T.sigmoid(T.add_channel_bias(T.matmul(g, rp.expand_w), rp.expand_b))
    gate = T.reshape(g, lead + (1, 1, c))
    return T.add(f, T.mul(y, gate))
