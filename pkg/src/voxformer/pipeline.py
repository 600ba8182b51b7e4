"""Coarse-to-fine SDF transformer: per-level down/up attention flows and output heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .attention import (
    AttentionBlockParams,
    GlobalContextParams,
    global_attention,
    global_context,
    linear,
    sparse_window_attention,
)
from .config import LevelConfig, PipelineConfig
from .errors import DegenerateSceneError, StructuralError
from .fusion import (
    CameraView,
    FusedVolume,
    ToyFeatureExtractor,
    VolumeGrid,
    WeightNet,
    back_project,
    cached_back_project,
    fuse,
    scene_grids,
)
from .supervision import densify_tsdf
from .voxel import (
    OccupancyVolume,
    SampleMap,
    SparseVolume,
    child_slot,
    dilate,
    downsample,
    kernel3_conv,
    sparsify,
    upsample,
)


def kernel_param(taps: int, c_in: int, c_out: int, generator=None) -> nn.Parameter:
    bound = math.sqrt(6.0 / (taps * (c_in + c_out)))
    w = torch.empty(taps, c_in, c_out)
    w.uniform_(-bound, bound, generator=generator)
    return nn.Parameter(w)


class DilateAttentionParams(nn.Module):
    def __init__(self, c_in: int, c_out: int, heads: int = 4, generator=None):
        super().__init__()
        self.dilation_weight = kernel_param(27, c_in, c_in, generator)
        self.dilation_bias = nn.Parameter(torch.zeros(c_in))
        self.attn = AttentionBlockParams(c_in, heads, generator=generator)
        self.join = linear(2 * c_in, c_out, generator)


class UpsampleParams(nn.Module):
    """Per-child-slot linear maps inverting one stride-2 downsampling."""

    def __init__(self, c_in: int, c_out: int, generator=None):
        super().__init__()
        self.weight = kernel_param(8, c_in, c_out, generator)
        self.bias = nn.Parameter(torch.zeros(c_out))


class HeadParams(nn.Module):
    def __init__(self, channels: int, generator=None):
        super().__init__()
        self.weight = kernel_param(27, channels, 1, generator)
        self.bias = nn.Parameter(torch.zeros(1))


def dilate_attention(vol: SparseVolume, params: DilateAttentionParams, n: int) -> SparseVolume:
    """Dilate, fill new voxels from their active 27-neighborhood, attend, then join.

    Output features are join(pre-attention ++ attended) on the dilated set.
    """
    if len(vol) == 0:
        return vol.like(vol.coords, vol.feats.new_zeros((0, params.join.out_features)), _sorted=True)
    grown = dilate(vol)
    new = vol.lookup(grown.coords) < 0
    new_rows = new.nonzero().flatten()
    fill = kernel3_conv(vol, params.dilation_weight, params.dilation_bias, grown.coords[new_rows])
    pre = grown.feats.index_copy(0, new_rows, fill)
    pre_vol = grown.with_feats(pre)
    attended = sparse_window_attention(pre_vol, params.attn, n)
    return grown.with_feats(params.join(torch.cat([pre, attended.feats], dim=1)))


class LevelTransformer(nn.Module):
    """Parameters of one level's top-down-bottom-up network plus its output head."""

    def __init__(self, cfg: LevelConfig, in_channels: int, generator=None):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        h = cfg.heads
        self.input = linear(in_channels, ch[0], generator)
        self.down_dilate = nn.ModuleList(DilateAttentionParams(ch[k], ch[k + 1], h, generator) for k in range(cfg.depth))
        self.down_blocks = nn.ModuleList(
            nn.ModuleList(AttentionBlockParams(ch[k + 1], h, generator=generator) for _ in range(2))
            for k in range(cfg.depth)
        )
        self.bottom_attn = AttentionBlockParams(ch[-1], h, generator=generator)
        self.bottom_context = GlobalContextParams(ch[-1], generator)
        self.up_maps = nn.ModuleList(UpsampleParams(ch[k + 1], ch[k], generator) for k in range(cfg.depth))
        self.up_blocks = nn.ModuleList(AttentionBlockParams(ch[k], h, generator=generator) for k in range(cfg.depth))
        self.post = DilateAttentionParams(ch[0], ch[0], h, generator)
        self.head = HeadParams(ch[0], generator)


def down_flow(vol: SparseVolume, net: LevelTransformer, depth: int | None = None):
    """Per depth: downsample, dilate-attention, two window attention blocks.

    Returns the bottom volume, the volume entering each depth (skips) and the
    sample map of each downsampling.
    """
    n = net.cfg.window
    depth = net.cfg.depth if depth is None else depth
    skips: list[SparseVolume] = []
    maps: list[SampleMap] = []
    x = vol
    for k in range(depth):
        skips.append(x)
        x, smap = downsample(x)
        maps.append(smap)
        x = dilate_attention(x, net.down_dilate[k], n)
        for block in net.down_blocks[k]:
            x = sparse_window_attention(x, block, n)
    return x, skips, maps


def bottom_block(vol: SparseVolume, attn: AttentionBlockParams, context: GlobalContextParams, cap: int = 4096):
    return global_context(global_attention(vol, attn, cap), context)


def learned_upsample(vol: SparseVolume, smap: SampleMap, params: UpsampleParams) -> SparseVolume:
    """Upsample through ``smap`` with a separate linear map per child slot."""
    up = upsample(vol, smap)
    slot = child_slot(smap)
    out = up.feats.new_zeros((len(up), params.weight.shape[2]))
    for s in range(8):
        rows = (slot == s).nonzero().flatten()
        if len(rows):
            out = out.index_copy(0, rows, up.feats[rows] @ params.weight[s])
    return up.with_feats(out + params.bias)


def up_flow(bottom: SparseVolume, skips, maps, net: LevelTransformer) -> SparseVolume:
    """Reverse the down flow: learned upsample, add the skip volume, one attention block."""
    n = net.cfg.window
    x = bottom
    for k in reversed(range(len(maps))):
        x = learned_upsample(x, maps[k], net.up_maps[k])
        skip = skips[k]
        if x.dims != skip.dims or not torch.equal(x.coords, skip.coords):
            raise StructuralError(f"upsampled coordinates do not match the skip volume at depth {k}")
        x = sparse_window_attention(x.with_feats(x.feats + skip.feats), net.up_blocks[k], n)
    return x


def level_forward(vol: SparseVolume, net: LevelTransformer, cap: int = 4096) -> SparseVolume:
    """down flow -> bottom global block -> up flow -> post dilate-attention."""
    bottom, skips, maps = down_flow(vol, net)
    bottom = bottom_block(bottom, net.bottom_attn, net.bottom_context, cap)
    x = up_flow(bottom, skips, maps, net)
    return dilate_attention(x, net.post, net.cfg.window)


def occupancy_head(vol: SparseVolume, params: HeadParams) -> OccupancyVolume:
    logits = kernel3_conv(vol, params.weight, params.bias)
    return OccupancyVolume(vol.coords, torch.sigmoid(logits), vol.dims, vol.level, vol.voxel_size, _sorted=True)


def tsdf_head(vol: SparseVolume, params: HeadParams) -> SparseVolume:
    """Sparse TSDF prediction in (-1, 1); densify with ``supervision.densify_tsdf``."""
    return vol.with_feats(torch.tanh(kernel3_conv(vol, params.weight, params.bias)))


@dataclass
class ForwardOutput:
    occupancy: dict = field(default_factory=dict)  # level -> OccupancyVolume (levels 2, 1)
    tsdf: SparseVolume | None = None
    fused: dict = field(default_factory=dict)  # level -> FusedVolume
    inputs: dict = field(default_factory=dict)  # level -> sparsified input volume


class Reconstructor(nn.Module):
    """Fusion weight nets and SDF transformers for the coarse, medium and fine levels."""

    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        c2d = cfg.feature_channels
        self.weight_nets = nn.ModuleDict({str(lv.level): WeightNet(c2d, gen) for lv in cfg.levels})
        self.levels = nn.ModuleDict({str(lv.level): LevelTransformer(lv, 2 * c2d, gen) for lv in cfg.levels})
        self.extractor = ToyFeatureExtractor(c2d, gen) if cfg.use_extractor else None

    def fuse_level(self, views: list[CameraView], grid: VolumeGrid, maps=None) -> FusedVolume:
        projections = []
        for i, view in enumerate(views):
            if maps is None:
                projections.append(cached_back_project(view, grid))
            else:
                projections.append(back_project(view, grid, fmap=maps[i][grid.level]))
        return fuse(projections, self.weight_nets[str(grid.level)])

    def forward(self, views: list[CameraView], grids: dict[int, VolumeGrid], occupancy_hint: dict | None = None):
        """Run all three levels.

        ``occupancy_hint`` maps level -> OccupancyVolume; during training it is
        the ground truth, merged by max into the prediction before sparsifying
        the next level so that the finer levels see every true surface voxel.
        """
        if not views:
            raise DegenerateSceneError(2, "no views")
        maps = [self.extractor(v.image) for v in views] if self.extractor is not None else None
        out = ForwardOutput()
        prev_occ = None
        for level in (2, 1, 0):
            net = self.levels[str(level)]
            fused = self.fuse_level(views, grids[level], maps)
            out.fused[level] = fused
            vol = fused.volume
            if prev_occ is not None:
                vol = sparsify(vol, prev_occ, self.cfg.occupancy_threshold)
            if len(vol) == 0:
                raise DegenerateSceneError(level)
            out.inputs[level] = vol
            x = vol.with_feats(net.input(vol.feats))
            x = level_forward(x, net, self.cfg.global_cap)
            if level == 0:
                out.tsdf = tsdf_head(x, net.head)
                break
            occ = occupancy_head(x, net.head)
            out.occupancy[level] = occ
            prev_occ = occ
            if occupancy_hint is not None and level in occupancy_hint:
                prev_occ = merge_occupancy(occ, occupancy_hint[level])
        return out


def merge_occupancy(pred: OccupancyVolume, hint: SparseVolume) -> OccupancyVolume:
    """Elementwise max over the union of both active sets (no gradient)."""
    coords = torch.cat([pred.coords, hint.coords])
    vals = torch.cat([pred.feats.detach()[:, 0], hint.feats.detach()[:, 0].to(pred.feats.dtype)])
    dims = pred.dims
    keys = (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]
    ukeys, inv = torch.unique(keys, return_inverse=True)
    best = torch.zeros(len(ukeys), dtype=vals.dtype).scatter_reduce(0, inv, vals, reduce="amax", include_self=True)
    ucoords = torch.stack([ukeys // (dims[1] * dims[2]), (ukeys // dims[2]) % dims[1], ukeys % dims[2]], dim=1)
    return OccupancyVolume(ucoords, best.unsqueeze(1), dims, pred.level, pred.voxel_size, _sorted=True)


def full_forward(model: Reconstructor, views: list[CameraView], bounds, occupancy_hint: dict | None = None):
    """Coarse-to-fine reconstruction inside ``bounds`` = (min corner, max corner).

    Returns (O2, O1, S0) with S0 densified so inactive voxels read +1.
    """
    grids = scene_grids(*bounds)
    out = model(views, grids, occupancy_hint)
    return out.occupancy[2], out.occupancy[1], densify_tsdf(out.tsdf, grids[0].sample_origin)
