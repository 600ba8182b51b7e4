"""Sparse window multi-head attention, global attention and global context pooling."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ResourceError, StructuralError
from .voxel import SparseVolume, all_pairs, window_edges, window_offsets


def init_linear(layer: nn.Linear, generator: torch.Generator | None = None) -> nn.Linear:
    nn.init.xavier_uniform_(layer.weight, generator=generator)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def linear(c_in: int, c_out: int, generator=None, bias: bool = True) -> nn.Linear:
    return init_linear(nn.Linear(c_in, c_out, bias=bias), generator)


class AttentionBlockParams(nn.Module):
    """Projections, relative position embedding, norms and feed-forward of one block.

    The position embedding is a single 3 -> C map shared by all heads and added
    to both keys and values.  The key projection has no bias.
    """

    def __init__(self, channels: int, heads: int = 4, ffn_mult: int = 2, generator=None):
        super().__init__()
        if channels % heads:
            raise StructuralError(f"model_dim {channels} not divisible by {heads} heads")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.w_q = linear(channels, channels, generator)
        # a key bias shifts all of a query's scores equally, so softmax cancels it
        self.w_k = linear(channels, channels, generator, bias=False)
        self.w_v = linear(channels, channels, generator)
        self.w_p = linear(3, channels, generator)
        self.w_o = linear(channels, channels, generator)
        self.norm1 = nn.LayerNorm(channels)
        self.norm2 = nn.LayerNorm(channels)
        self.ffn1 = linear(channels, ffn_mult * channels, generator)
        self.ffn2 = linear(ffn_mult * channels, channels, generator)


class GlobalContextParams(nn.Module):
    scales = (1, 2, 3)

    def __init__(self, channels: int, generator=None):
        super().__init__()
        self.channels = channels
        self.scale_maps = nn.ModuleList(linear(channels, channels, generator) for _ in self.scales)
        self.fuse = linear(len(self.scales) * channels, channels, generator)


def segment_softmax(scores: torch.Tensor, segments: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of ``scores`` (E, H) within groups of rows sharing a segment id."""
    idx = segments.unsqueeze(1).expand_as(scores)
    peak = scores.new_full((num_segments, scores.shape[1]), -math.inf)
    peak = peak.scatter_reduce(0, idx, scores.detach(), reduce="amax", include_self=True)
    # accumulate in f64: a long f32 scatter-add drifts past 1e-6 on big segments
    e = torch.exp(scores - peak[segments]).double()
    total = e.new_zeros((num_segments, scores.shape[1])).index_add(0, segments, e)
    return (e / total[segments]).to(scores.dtype)


def multihead_attention(
    feats: torch.Tensor,
    coords: torch.Tensor,
    centers: torch.Tensor,
    neighbors: torch.Tensor,
    params: AttentionBlockParams,
    return_weights: bool = False,
    offset_table: torch.Tensor | None = None,
    offset_ids: torch.Tensor | None = None,
):
    """Attention over an explicit (center, neighbor) pair list.

    For every pair the score is <Q_i, K_j + P_ij> / sqrt(head_dim) with
    P_ij = W_p(v_j - v_i); output_i = W_o(sum_j softmax_j * (V_j + P_ij)).
    When pairs come from a fixed window, ``offset_table``/``offset_ids`` let
    W_p run once per distinct offset instead of once per pair.
    """
    n, c = feats.shape
    h, d = params.heads, params.head_dim
    q = params.w_q(feats)
    k = params.w_k(feats)
    v = params.w_v(feats)
    if offset_table is not None:
        p = params.w_p(offset_table.to(feats.dtype))[offset_ids]
    else:
        p = params.w_p((coords[neighbors] - coords[centers]).to(feats.dtype))
    qe = q[centers].view(-1, h, d)
    ke = (k[neighbors] + p).view(-1, h, d)
    scores = (qe * ke).sum(-1) / math.sqrt(d)
    weights = segment_softmax(scores, centers, n)
    ve = (v[neighbors] + p).view(-1, h, d)
    out = feats.new_zeros((n, h, d)).index_add(0, centers, weights.unsqueeze(-1) * ve)
    out = params.w_o(out.reshape(n, c))
    if return_weights:
        return out, weights
    return out


def padded_window_attention(feats: torch.Tensor, table: torch.Tensor, params: AttentionBlockParams, offsets: torch.Tensor):
    """Same attention as :func:`multihead_attention` over a (N, K) neighbor table.

    ``table[i, s]`` is the row of the neighbor at ``offsets[s]`` or -1.  The
    position terms are applied per offset, so no per-pair embedding is formed.
    Returns the output and (N, K, H) weights (zero at absent neighbors).
    """
    n, c = feats.shape
    h, d = params.heads, params.head_dim
    kk = table.shape[1]
    valid = table >= 0
    rows = torch.where(valid, table, torch.full_like(table, n))
    q = params.w_q(feats).view(n, h, d)
    pad = feats.new_zeros((1, c))
    k = torch.cat([params.w_k(feats), pad])[rows].view(n, kk, h, d)
    v = torch.cat([params.w_v(feats), pad])[rows].view(n, kk, h, d)
    p = params.w_p(offsets.to(feats.dtype)).view(kk, h, d)
    scores = ((k + p) * q.unsqueeze(1)).sum(-1) / math.sqrt(d)
    scores = scores.masked_fill(~valid.unsqueeze(-1), -math.inf)
    w = torch.softmax(scores, dim=1)
    out = (w.unsqueeze(-1) * (v + p)).sum(1)
    return params.w_o(out.reshape(n, c)), w


# padded tables are used when at least this fraction of window cells is active
PADDED_FILL = 0.25


def attention_block(
    feats, coords, centers, neighbors, params: AttentionBlockParams, return_weights=False, offset_table=None, offset_ids=None, table=None
):
    """Pre-norm residual attention followed by a pre-norm residual feed-forward."""
    if table is not None:
        att, w = padded_window_attention(params.norm1(feats), table, params, offset_table)
        weights = w[centers, offset_ids]
    else:
        att = multihead_attention(
            params.norm1(feats), coords, centers, neighbors, params, return_weights, offset_table, offset_ids
        )
        if return_weights:
            att, weights = att
    x = feats + att
    x = x + params.ffn2(F.gelu(params.ffn1(params.norm2(x))))
    if return_weights:
        return x, weights
    return x


def _check_channels(vol: SparseVolume, channels: int) -> None:
    if vol.channels != channels:
        raise StructuralError(f"volume has {vol.channels} channels, attention expects {channels}")


def sparse_window_attention(vol: SparseVolume, params: AttentionBlockParams, n: int, return_weights: bool = False):
    """Attention block over the active voxels inside each voxel's n^3 window."""
    _check_channels(vol, params.channels)
    if len(vol) == 0:
        return (vol, None) if return_weights else vol
    centers, neighbors, slots, table = window_edges(vol, n, with_table=True)
    if len(centers) < PADDED_FILL * table.numel():
        table = None
    res = attention_block(
        vol.feats, vol.coords, centers, neighbors, params, return_weights, window_offsets(n), slots, table
    )
    if return_weights:
        x, w = res
        return vol.with_feats(x), (centers, neighbors, w)
    return vol.with_feats(res)


def global_attention(vol: SparseVolume, params: AttentionBlockParams, cap: int = 4096, return_weights: bool = False):
    """Attention block between every pair of active voxels."""
    _check_channels(vol, params.channels)
    if len(vol) > cap:
        raise ResourceError(f"global attention over {len(vol)} voxels exceeds cap {cap}")
    if len(vol) == 0:
        return (vol, None) if return_weights else vol
    centers, neighbors = all_pairs(len(vol))
    res = attention_block(vol.feats, vol.coords, centers, neighbors, params, return_weights)
    if return_weights:
        x, w = res
        return vol.with_feats(x), (centers, neighbors, w)
    return vol.with_feats(res)


def pool_cells(vol: SparseVolume, scale: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean feature per cell of an s x s x s partition of dims, and each voxel's cell id.

    Empty cells pool to zero.
    """
    dims = torch.tensor(vol.dims, dtype=torch.long)
    cell3 = torch.div(vol.coords * scale, dims, rounding_mode="floor")
    cell = (cell3[:, 0] * scale + cell3[:, 1]) * scale + cell3[:, 2]
    sums = vol.feats.new_zeros((scale**3, vol.channels)).index_add(0, cell, vol.feats)
    counts = torch.zeros(scale**3, dtype=vol.feats.dtype).index_add_(
        0, cell, torch.ones(len(vol), dtype=vol.feats.dtype)
    )
    return sums / counts.clamp(min=1).unsqueeze(1), cell


def global_context(vol: SparseVolume, params: GlobalContextParams) -> SparseVolume:
    """Residual add of multi-scale (1, 2, 3) average-pooled context codes."""
    _check_channels(vol, params.channels)
    if len(vol) == 0:
        return vol
    codes = []
    for scale, layer in zip(params.scales, params.scale_maps):
        pooled, cell = pool_cells(vol, scale)
        codes.append(layer(pooled)[cell])
    return vol.with_feats(vol.feats + params.fuse(torch.cat(codes, dim=1)))


def pair_count(vol: SparseVolume, n: int) -> tuple[int, int]:
    """(sparse, dense) attention pair counts for window size n.

    sparse = sum over active voxels of active voxels in their window, via a
    summed-volume table over the occupancy grid; dense = (NX * NY * NZ) ** 2.
    """
    nx, ny, nz = vol.dims
    dense = (nx * ny * nz) ** 2
    if len(vol) == 0:
        return 0, dense
    occ = np.zeros(vol.dims, dtype=np.int64)
    c = vol.coords.numpy()
    occ[c[:, 0], c[:, 1], c[:, 2]] = 1
    table = np.zeros((nx + 1, ny + 1, nz + 1), dtype=np.int64)
    table[1:, 1:, 1:] = occ.cumsum(0).cumsum(1).cumsum(2)
    lo_off = -(n // 2)
    lo = np.clip(c + lo_off, 0, np.array(vol.dims))
    hi = np.clip(c + lo_off + n, 0, np.array(vol.dims))
    x0, y0, z0 = lo.T
    x1, y1, z1 = hi.T
    box = (
        table[x1, y1, z1]
        - table[x0, y1, z1]
        - table[x1, y0, z1]
        - table[x1, y1, z0]
        + table[x0, y0, z1]
        + table[x0, y1, z0]
        + table[x1, y0, z0]
        - table[x0, y0, z0]
    )
    return int(box.sum()), dense
