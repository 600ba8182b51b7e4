"""Camera views, back-projection of 2D features into voxel grids and multi-view fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import linear
from .errors import DegenerateSceneError, PreconditionError, StructuralError
from .voxel import SparseVolume

# feature map stride of levels 0, 1, 2 relative to the input image
LEVEL_STRIDES = (4, 8, 16)


@dataclass
class VolumeGrid:
    """Regular voxel grid of one level; voxel ``c`` samples ``origin + (c + 0.5) * voxel_size``."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    level: int

    def positions(self, coords: torch.Tensor) -> torch.Tensor:
        origin = torch.as_tensor(np.asarray(self.origin), dtype=torch.get_default_dtype())
        return origin + (coords.to(origin.dtype) + 0.5) * self.voxel_size

    @property
    def sample_origin(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64) + 0.5 * self.voxel_size

    def all_coords(self) -> torch.Tensor:
        return SparseVolume.dense(self.dims).coords


def scene_grids(bounds_min, bounds_max, coarse_voxel: float = 0.16) -> dict[int, VolumeGrid]:
    """Grids for levels 2, 1, 0 covering the bounds, padded by up to one coarse voxel."""
    lo = np.asarray(bounds_min, dtype=np.float64)
    extent = np.asarray(bounds_max, dtype=np.float64) - lo
    if bool((extent < coarse_voxel).any()):
        raise DegenerateSceneError(2, f"scene extent {extent.tolist()} smaller than one coarse voxel")
    coarse = tuple(int(math.floor(e / coarse_voxel + 1e-6)) + 1 for e in extent)
    grids = {}
    for level in (2, 1, 0):
        scale = 2 ** (2 - level)
        grids[level] = VolumeGrid(lo, coarse_voxel / scale, tuple(d * scale for d in coarse), level)
    return grids


@dataclass
class CameraView:
    """One posed image: per-level feature maps (H_l, W_l, C), intrinsics, world->camera pose."""

    features: list
    intrinsics: torch.Tensor
    pose: torch.Tensor
    image_size: tuple[int, int]
    depth: torch.Tensor | None = None
    image: torch.Tensor | None = None
    view_id: int = 0
    # back-projections of the stored feature maps, keyed by grid; see cached_back_project
    _projections: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        dt = torch.get_default_dtype()
        self.intrinsics = torch.as_tensor(self.intrinsics, dtype=dt)
        self.pose = torch.as_tensor(self.pose, dtype=dt)
        k = self.intrinsics
        if k.shape != (3, 3) or abs(float(k[1, 0])) + abs(float(k[2, 0])) + abs(float(k[2, 1])) > 0:
            raise PreconditionError("intrinsics must be a 3x3 upper-triangular matrix")
        if float(k[0, 0]) <= 0 or float(k[1, 1]) <= 0:
            raise PreconditionError("focal lengths must be positive")
        rot = self.pose[:3, :3].double()
        if self.pose.shape != (4, 4) or not torch.allclose(rot @ rot.T, torch.eye(3, dtype=torch.float64), atol=1e-5):
            raise PreconditionError("pose rotation block is not orthonormal")
        if abs(float(torch.det(rot)) - 1.0) > 1e-5:
            raise PreconditionError("pose rotation must have determinant +1")
        self.features = [None if f is None else torch.as_tensor(f, dtype=dt) for f in self.features]
        if self.depth is not None:
            self.depth = torch.as_tensor(self.depth, dtype=dt)
        if self.image is not None:
            self.image = torch.as_tensor(self.image, dtype=dt)

    @property
    def center(self) -> np.ndarray:
        p = self.pose.double().numpy()
        return -p[:3, :3].T @ p[:3, 3]


@dataclass
class BackProjection:
    volume: SparseVolume
    seen: torch.Tensor
    depth: torch.Tensor
    uv: torch.Tensor
    view_id: int = 0


def project(view: CameraView, points: torch.Tensor):
    """World points -> (full-resolution pixel uv, camera depth z)."""
    pose = view.pose.to(points.dtype)
    cam = points @ pose[:3, :3].T + pose[:3, 3]
    z = cam[:, 2]
    pix = cam @ view.intrinsics.to(points.dtype).T
    safe = torch.where(z.abs() > 1e-12, z, torch.ones_like(z))
    return pix[:, :2] / safe.unsqueeze(1), z


def bilinear_sample(fmap: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample (H, W, C) at continuous pixel coords, clamped to the valid rectangle."""
    h, w, _ = fmap.shape
    x = x.clamp(0, w - 1)
    y = y.clamp(0, h - 1)
    x0 = x.detach().floor().long().clamp(max=w - 1)
    y0 = y.detach().floor().long().clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (x - x0.to(x.dtype)).unsqueeze(1)
    fy = (y - y0.to(y.dtype)).unsqueeze(1)
    top = fmap[y0, x0] * (1 - fx) + fmap[y0, x1] * fx
    bottom = fmap[y1, x0] * (1 - fx) + fmap[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def back_project(view: CameraView, grid: VolumeGrid, coords: torch.Tensor | None = None, fmap=None) -> BackProjection:
    """Lift the level's feature map onto voxel centers.

    Voxels behind the camera or projecting outside the image are unseen and
    carry zero features.
    """
    coords = grid.all_coords() if coords is None else coords
    fmap = view.features[grid.level] if fmap is None else fmap
    pts = grid.positions(coords)
    uv, z = project(view, pts)
    h_img, w_img = view.image_size
    seen = (
        (z > 0)
        & (uv[:, 0] >= -0.5)
        & (uv[:, 0] <= w_img - 0.5)
        & (uv[:, 1] >= -0.5)
        & (uv[:, 1] <= h_img - 0.5)
    )
    stride = w_img / fmap.shape[1]
    xs = (uv[:, 0] + 0.5) / stride - 0.5
    ys = (uv[:, 1] + 0.5) / (h_img / fmap.shape[0]) - 0.5
    feats = bilinear_sample(fmap, xs, ys) * seen.unsqueeze(1).to(fmap.dtype)
    vol = SparseVolume(coords, feats, grid.dims, grid.level, grid.voxel_size, _sorted=True)
    return BackProjection(vol, seen, z, uv, view.view_id)


def cached_back_project(view: CameraView, grid: VolumeGrid) -> BackProjection:
    """:func:`back_project` of the view's own feature map over the whole grid, memoized.

    The stored maps and pose are treated as immutable once projected.
    """
    key = (tuple(np.asarray(grid.origin, dtype=np.float64).tolist()), grid.voxel_size, grid.dims, grid.level,
           torch.get_default_dtype())
    if key not in view._projections:
        view._projections[key] = back_project(view, grid)
    return view._projections[key]


class WeightNet(nn.Module):
    """Two-layer perceptron scoring one view's (feature, variance) pair per voxel."""

    def __init__(self, channels: int, generator=None):
        super().__init__()
        self.fc1 = linear(2 * channels, channels, generator)
        self.fc2 = linear(channels, 1, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x))).squeeze(-1)


@dataclass
class FusedVolume:
    """Fused features (weighted mean ++ mean variance) on voxels seen by >= 1 view.

    ``logits``, ``seen``, ``depth`` and ``uv`` are per (view, voxel) in
    ``view_ids`` order and restricted to the fused voxels.
    """

    volume: SparseVolume
    hits: torch.Tensor
    logits: torch.Tensor
    seen: torch.Tensor
    depth: torch.Tensor
    uv: torch.Tensor
    view_ids: list = field(default_factory=list)


def fuse(projections: list[BackProjection], weight_net: nn.Module) -> FusedVolume:
    """Variance-weighted fusion over views.

    mean = average over seeing views; var_i = (V_i - mean)^2; logits_i =
    weight_net(V_i ++ var_i); fused = (1/N) sum_i V_i * softmax_views(logits)_i
    where N counts the views seeing the voxel; output = fused ++ (1/N) sum_i var_i.
    """
    if not projections:
        raise PreconditionError("fuse needs at least one view")
    ref = projections[0].volume
    for p in projections[1:]:
        if p.volume.dims != ref.dims or not torch.equal(p.volume.coords, ref.coords):
            raise StructuralError("back-projected volumes are on different grids")
    projections = sorted(projections, key=lambda p: p.view_id)
    seen_all = torch.stack([p.seen for p in projections])
    keep = seen_all.any(dim=0)
    seen = seen_all[:, keep]
    feats = torch.stack([p.volume.feats[keep] for p in projections])
    mask = seen.unsqueeze(-1).to(feats.dtype)
    hits = seen.sum(0)
    count = hits.to(feats.dtype).unsqueeze(-1)
    mean = (feats * mask).sum(0) / count
    var = (feats - mean) ** 2 * mask
    logits = weight_net(torch.cat([feats, var], dim=-1))
    w = torch.softmax(logits.masked_fill(~seen, -math.inf), dim=0).unsqueeze(-1)
    fused = (feats * w * mask).sum(0) / count
    var_mean = var.sum(0) / count
    vol = ref.like(ref.coords[keep], torch.cat([fused, var_mean], dim=1), _sorted=True)
    depth = torch.stack([p.depth[keep] for p in projections])
    uv = torch.stack([p.uv[keep] for p in projections])
    return FusedVolume(vol, hits, logits, seen, depth, uv, [p.view_id for p in projections])


class ToyFeatureExtractor(nn.Module):
    """Strided convolutions producing maps at 1/4, 1/8 and 1/16 of the image size."""

    def __init__(self, channels: int = 8, generator=None):
        super().__init__()
        self.conv0 = nn.Conv2d(3, channels, 4, stride=4)
        self.conv1 = nn.Conv2d(channels, channels, 2, stride=2)
        self.conv2 = nn.Conv2d(channels, channels, 2, stride=2)
        for conv in (self.conv0, self.conv1, self.conv2):
            nn.init.xavier_uniform_(conv.weight, generator=generator)
            nn.init.zeros_(conv.bias)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        h, w = image.shape[:2]
        if h % 16 or w % 16:
            raise PreconditionError(f"image size {h}x{w} is not divisible by 16")
        x = image.permute(2, 0, 1).unsqueeze(0)
        maps = []
        for conv in (self.conv0, self.conv1, self.conv2):
            x = F.gelu(conv(x))
            maps.append(x[0].permute(1, 2, 0))
        return maps


def rotation_angle_deg(ra: np.ndarray, rb: np.ndarray) -> float:
    c = (np.trace(ra @ rb.T) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def select_views(poses, limit: int, seed: int = 0, min_translation: float = 0.1, min_rotation_deg: float = 15.0):
    """Greedy keyframe gate against the last kept frame, then seeded random subsampling.

    ``poses`` are 4x4 world->camera matrices.  A frame is kept only when both
    its camera-center translation and its rotation angle exceed the gates.
    """
    poses = [np.asarray(p, dtype=np.float64) for p in poses]
    if not poses:
        raise PreconditionError("empty trajectory")
    centers = [-p[:3, :3].T @ p[:3, 3] for p in poses]
    kept = [0]
    for i in range(1, len(poses)):
        last = kept[-1]
        moved = np.linalg.norm(centers[i] - centers[last]) > min_translation
        turned = rotation_angle_deg(poses[i][:3, :3], poses[last][:3, :3]) > min_rotation_deg
        if moved and turned:
            kept.append(i)
    if len(kept) > limit:
        rng = np.random.default_rng(seed)
        kept = sorted(int(i) for i in rng.choice(kept, size=limit, replace=False))
    return kept
