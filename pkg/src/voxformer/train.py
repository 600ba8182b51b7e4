"""Single-scene overfitting and end-to-end reconstruction."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import PipelineConfig
from .grad import Adam, backward
from .mesh import TriangleMesh, marching_cubes
from .pipeline import ForwardOutput, Reconstructor
from .scene import SceneData
from .supervision import (
    MetricsReport,
    TsdfVolume,
    densify_tsdf,
    mesh_metrics,
    occupancy_gt,
    occupancy_loss,
    projection_weight_loss,
    total_loss,
    tsdf_loss,
)

log = logging.getLogger(__name__)


def scene_losses(out: ForwardOutput, data: SceneData, cfg: PipelineConfig, gt_occ: dict) -> tuple[torch.Tensor, dict]:
    tsdf = out.tsdf
    l_tsdf = tsdf_loss(tsdf.feats[:, 0], data.gt_tsdf.at(tsdf.coords), cfg.tsdf_eps, cfg.tsdf_loss_mode)
    l_occ = [occupancy_loss(out.occupancy[l], gt_occ[l]) for l in (2, 1)]
    views = {v.view_id: v for v in data.views}
    l_w = []
    for level, fused in out.fused.items():
        delta = 3.0 * data.grids[level].voxel_size
        terms = [
            projection_weight_loss(fused.logits[i], fused.uv[i], fused.depth[i], views[vid].depth, delta)
            for i, vid in enumerate(fused.view_ids)
        ]
        l_w.append(torch.stack(terms).mean())
    loss = total_loss(l_tsdf, l_occ, l_w, cfg.loss_weights)
    parts = {"tsdf": l_tsdf.item(), "occ2": l_occ[0].item(), "occ1": l_occ[1].item(), "weights": sum(t.item() for t in l_w)}
    return loss, parts


@dataclass
class TrainResult:
    model: Reconstructor
    losses: list = field(default_factory=list)
    parts: list = field(default_factory=list)
    seconds: float = 0.0


def train_tiny(data: SceneData, cfg: PipelineConfig, steps: int | None = None, log_every: int = 100) -> TrainResult:
    """Overfit the whole pipeline on one scene with Adam."""
    torch.manual_seed(cfg.seed)
    model = Reconstructor(cfg)
    params = dict(model.named_parameters())
    opt = Adam(params, lr=cfg.lr)
    gt_occ = {l: occupancy_gt(data.gt_tsdf, l) for l in (0, 1, 2)}
    hint = {l: gt_occ[l] for l in (2, 1)} if cfg.teacher_forcing else None
    steps = cfg.steps if steps is None else steps
    result = TrainResult(model)
    start = time.perf_counter()
    for step in range(steps):
        out = model(data.views, data.grids, occupancy_hint=hint)
        loss, parts = scene_losses(out, data, cfg, gt_occ)
        opt.step(backward(loss, params))
        result.losses.append(loss.item())
        result.parts.append(parts)
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("step %d loss %.5f %s", step, loss.item(), {k: round(v, 4) for k, v in parts.items()})
    result.seconds = time.perf_counter() - start
    return result


def windowed_trend(losses, window: int = 100) -> list[float]:
    """Mean loss per consecutive window; a healthy run is mostly decreasing."""
    arr = np.asarray(losses, dtype=np.float64)
    n = len(arr) // window
    return [float(arr[i * window : (i + 1) * window].mean()) for i in range(n)]


@dataclass
class Reconstruction:
    tsdf: TsdfVolume
    mesh: TriangleMesh
    metrics: MetricsReport | None
    timings: dict


def reconstruct(model: Reconstructor, data: SceneData, samples: int = 10_000, seed: int = 0, tau: float = 0.05):
    """Forward pass without supervision hints, marching cubes over active voxels, metrics."""
    timings = {}
    t0 = time.perf_counter()
    with torch.no_grad():
        out = model(data.views, data.grids)
    timings["forward_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    tsdf = densify_tsdf(out.tsdf, data.grids[0].sample_origin)
    mesh = marching_cubes(tsdf, 0.0, mask=tsdf.mask)
    timings["marching_cubes_s"] = time.perf_counter() - t0
    metrics = None
    if len(mesh.faces) and data.gt_mesh is not None and len(data.gt_mesh.faces):
        t0 = time.perf_counter()
        metrics = mesh_metrics(mesh, data.gt_mesh, tau=tau, samples=samples, seed=seed)
        timings["metrics_s"] = time.perf_counter() - t0
    return Reconstruction(tsdf, mesh, metrics, timings)
