"""Ground truth generation, training losses and evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import PreconditionError, StructuralError
from .voxel import OccupancyVolume, SparseVolume

TRUNCATION_VOXELS = 3.0
BCE_CLAMP = 1e-6


@dataclass
class TsdfVolume:
    """Dense TSDF grid normalized by the truncation distance.

    ``origin`` is the world position of voxel (0, 0, 0).  ``free`` marks voxels
    beyond the truncation band; ``mask`` marks voxels with a defined value.
    """

    values: np.ndarray
    voxel_size: float
    origin: np.ndarray
    free: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.values.size and (np.abs(self.values) > 1).any():
            raise StructuralError("TSDF values must lie in [-1, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def truncation(self) -> float:
        return TRUNCATION_VOXELS * self.voxel_size

    @classmethod
    def from_sdf(cls, sdf: np.ndarray, voxel_size: float, origin) -> "TsdfVolume":
        trunc = TRUNCATION_VOXELS * voxel_size
        free = np.abs(sdf) >= trunc
        return cls(np.clip(sdf / trunc, -1.0, 1.0), voxel_size, origin, free=free)

    def at(self, coords: torch.Tensor) -> torch.Tensor:
        c = coords.numpy()
        return torch.from_numpy(self.values[c[:, 0], c[:, 1], c[:, 2]])


def densify_tsdf(sparse: SparseVolume, origin) -> TsdfVolume:
    """Scatter a one-channel sparse TSDF into a dense grid; inactive voxels read +1."""
    values = np.ones(sparse.dims)
    mask = np.zeros(sparse.dims, dtype=bool)
    c = sparse.coords.numpy()
    values[c[:, 0], c[:, 1], c[:, 2]] = sparse.feats.detach().double().numpy()[:, 0]
    mask[c[:, 0], c[:, 1], c[:, 2]] = True
    return TsdfVolume(values, sparse.voxel_size, origin, mask=mask)


def occupancy_gt(tsdf: TsdfVolume, level: int = 0) -> OccupancyVolume:
    """Occupied where |TSDF| <= 1 and not flagged as free space, max-pooled 2^level times."""
    occ = (np.abs(tsdf.values) <= 1.0).astype(np.float64)
    if tsdf.free is not None:
        occ[tsdf.free] = 0.0
    for _ in range(level):
        pad = [(0, d % 2) for d in occ.shape]
        occ = np.pad(occ, pad)
        x, y, z = occ.shape
        occ = occ.reshape(x // 2, 2, y // 2, 2, z // 2, 2).max(axis=(1, 3, 5))
    feats = torch.from_numpy(occ.reshape(-1, 1)).to(torch.get_default_dtype())
    vol = SparseVolume.dense(occ.shape, feats, level=level, voxel_size=tsdf.voxel_size * 2**level)
    return OccupancyVolume(vol.coords, vol.feats, vol.dims, level, vol.voxel_size, _sorted=True)


def tsdf_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-4, mode: str = "log") -> torch.Tensor:
    """Mean log-L1 TSDF loss.

    ``log``: |log(|s| + eps) - log(|g| + eps)| plus |s - g| where the signs
    disagree.  ``log1p``: |sign(s) log(1 + |s|) - sign(g) log(1 + |g|)|.
    """
    if pred.shape != gt.shape:
        raise StructuralError("prediction and ground truth shapes differ")
    if pred.numel() == 0:
        return pred.sum()
    gt = gt.to(pred.dtype)
    if mode == "log":
        mag = (torch.log(pred.abs() + eps) - torch.log(gt.abs() + eps)).abs()
        flip = ((pred < 0) != (gt < 0)).to(pred.dtype)
        return (mag + flip * (pred - gt).abs()).mean()
    if mode == "log1p":
        return (torch.sign(pred) * torch.log1p(pred.abs()) - torch.sign(gt) * torch.log1p(gt.abs())).abs().mean()
    raise ValueError(f"unknown tsdf loss mode {mode!r}")


def bce(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = prob.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    target = target.to(p.dtype)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def occupancy_loss(pred: SparseVolume, gt: SparseVolume) -> torch.Tensor:
    """Two-sided BCE over the predicted voxels; voxels absent from gt count as empty."""
    if pred.level != gt.level:
        raise StructuralError("occupancy levels differ")
    rows = gt.lookup(pred.coords)
    target = torch.zeros(len(pred), dtype=pred.feats.dtype)
    hit = rows >= 0
    target[hit] = gt.feats.detach()[rows[hit], 0].to(pred.feats.dtype)
    return bce(pred.feats[:, 0], target)


def projection_targets(depth_map: torch.Tensor, uv: torch.Tensor, z: torch.Tensor, delta: float):
    """(target, valid) for voxels projected to ``uv`` at camera depth ``z``.

    target = 1 where |z - depth(u, v)| < delta at the nearest pixel; valid
    where the voxel lies in front of the camera, inside the image and the
    depth map has a finite positive reading.
    """
    h, w = depth_map.shape
    u = torch.round(uv[:, 0].detach()).long()
    v = torch.round(uv[:, 1].detach()).long()
    valid = (z.detach() > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    d = torch.zeros_like(z.detach())
    d[valid] = depth_map.to(z.dtype)[v[valid], u[valid]]
    valid &= torch.isfinite(d) & (d > 0)
    target = ((z.detach() - d).abs() < delta) & valid
    return target.to(z.dtype), valid


def projection_weight_loss(logits: torch.Tensor, uv: torch.Tensor, z: torch.Tensor, depth_map, delta: float):
    """BCE between sigmoid(view weight logits) and the projective near-surface target."""
    if depth_map is None:
        raise PreconditionError("projection weight loss needs a depth map")
    target, valid = projection_targets(torch.as_tensor(depth_map), uv, z, delta)
    if not bool(valid.any()):
        return logits.sum() * 0.0
    return bce(torch.sigmoid(logits[valid]), target[valid])


def total_loss(tsdf_term, occupancy_terms, weight_terms, weights: dict | None = None) -> torch.Tensor:
    w = {"tsdf": 1.0, "occupancy": 1.0, "weights": 1.0, **(weights or {})}
    loss = w["tsdf"] * tsdf_term
    for t in occupancy_terms:
        loss = loss + w["occupancy"] * t
    for t in weight_terms:
        loss = loss + w["weights"] * t
    return loss


# metrics -------------------------------------------------------------------


@dataclass
class MetricsReport:
    acc: float | None = None
    comp: float | None = None
    chamfer: float | None = None
    prec: float | None = None
    recall: float | None = None
    fscore: float | None = None
    abs_rel: float | None = None
    abs_diff: float | None = None
    sq_rel: float | None = None
    rmse: float | None = None
    delta: list = field(default_factory=list)
    threshold: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != []}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = " ".join(f"{x:.6f}" for x in v)
            elif isinstance(v, float):
                v = f"{v:.6f}"
            lines.append(f"{k}: {v}")
        return "\n".join(lines) + "\n"


def point_metrics(pred_pts: np.ndarray, gt_pts: np.ndarray, tau: float = 0.05) -> MetricsReport:
    d_pred = cKDTree(gt_pts).query(pred_pts)[0]
    d_gt = cKDTree(pred_pts).query(gt_pts)[0]
    acc = float(d_pred.mean())
    comp = float(d_gt.mean())
    prec = float((d_pred < tau).mean())
    recall = float((d_gt < tau).mean())
    fscore = 2 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0
    return MetricsReport(acc, comp, (acc + comp) / 2, prec, recall, fscore, threshold=tau)


def mesh_metrics(pred, gt, tau: float = 0.05, samples: int = 10_000, seed: int = 0) -> MetricsReport:
    """Acc/Comp/Chamfer/Prec/Recall/F-score on area-uniform surface samples."""
    from .mesh import sample_points

    if len(pred.faces) == 0 or len(gt.faces) == 0:
        raise PreconditionError("mesh metrics need two non-empty meshes")
    return point_metrics(sample_points(pred, samples, seed), sample_points(gt, samples, seed), tau)


def depth_metrics(pred, gt) -> MetricsReport:
    """2D depth errors over pixels where both maps hold a finite positive depth."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.isfinite(pred) & np.isfinite(gt) & (pred > 0) & (gt > 0)
    if not valid.any():
        raise PreconditionError("no mutually valid pixels")
    d, g = pred[valid], gt[valid]
    diff = np.abs(d - g)
    ratio = np.maximum(d / g, g / d)
    return MetricsReport(
        abs_rel=float(np.mean(diff / g)),
        abs_diff=float(np.mean(diff)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(math.sqrt(np.mean(diff**2))),
        delta=[float(np.mean(ratio < 1.25**i)) for i in (1, 2, 3)],
    )
