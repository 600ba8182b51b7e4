"""Analytic synthetic scenes: SDF primitives, orbit cameras, rendered views and ground truth."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .fusion import LEVEL_STRIDES, CameraView, VolumeGrid, scene_grids
from .mesh import TriangleMesh, load_ply, marching_cubes, write_ply
from .supervision import TsdfVolume
from .tensorio import load_tensors, save_tensors

DEPTH_BAND = 0.25  # meters per period of the depth-band feature channels


def _sphere(p, prim):
    return np.linalg.norm(p - np.asarray(prim["center"]), axis=-1) - prim["radius"]


def _box(p, prim):
    q = np.abs(p - np.asarray(prim["center"])) - np.asarray(prim["half_size"])
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    return outside + np.minimum(q.max(axis=-1), 0.0)


def _plane(p, prim):
    n = np.asarray(prim["normal"], dtype=np.float64)
    return p @ (n / np.linalg.norm(n)) - prim["offset"]


_PRIMITIVES = {"sphere": _sphere, "box": _box, "plane": _plane}


@dataclass
class SyntheticScene:
    primitives: list = field(default_factory=list)
    bounds_min: list = field(default_factory=lambda: [-0.4, -0.4, 0.0])
    bounds_max: list = field(default_factory=lambda: [0.4, 0.4, 0.8])
    num_views: int = 8
    orbit_radius: float = 1.3
    orbit_height: float = 1.0
    target: list = field(default_factory=lambda: [0.0, 0.0, 0.3])
    image_size: list = field(default_factory=lambda: [192, 192])
    fov_deg: float = 70.0
    feature_channels: int = 8
    seed: int = 0

    def sdf(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        d = np.full(points.shape[:-1], np.inf)
        for prim in self.primitives:
            s = _PRIMITIVES[prim["kind"]](points, prim)
            d = np.maximum(d, -s) if prim.get("op", "union") == "subtract" else np.minimum(d, s)
        return d

    def intrinsics(self) -> np.ndarray:
        h, w = self.image_size
        f = 0.5 * w / math.tan(math.radians(self.fov_deg) / 2)
        return np.array([[f, 0.0, (w - 1) / 2], [0.0, f, (h - 1) / 2], [0.0, 0.0, 1.0]])

    def poses(self) -> list[np.ndarray]:
        """World->camera matrices on a circular orbit looking at ``target`` (z up)."""
        target = np.asarray(self.target, dtype=np.float64)
        out = []
        for i in range(self.num_views):
            a = 2 * math.pi * i / self.num_views
            center = target + np.array([self.orbit_radius * math.cos(a), self.orbit_radius * math.sin(a), 0.0])
            center[2] = self.orbit_height
            out.append(look_at(center, target))
        return out

    def color(self, points: np.ndarray) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        freq = rng.normal(0.0, 6.0, size=(3, 3))
        phase = rng.uniform(0, 2 * math.pi, size=3)
        return 0.5 + 0.5 * np.sin(points @ freq.T + phase)

    def normals(self, points: np.ndarray, h: float = 1e-4) -> np.ndarray:
        grad = np.stack(
            [self.sdf(points + h * e) - self.sdf(points - h * e) for e in np.eye(3)], axis=-1
        )
        return grad / np.maximum(np.linalg.norm(grad, axis=-1, keepdims=True), 1e-12)


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    pose = np.eye(4)
    pose[:3, :3] = rot
    pose[:3, 3] = -rot @ center
    return pose


def default_scene(seed: int = 0) -> SyntheticScene:
    """Floor plane, sphere and box inside a 0.8 m cube."""
    return SyntheticScene(
        primitives=[
            {"kind": "plane", "normal": [0.0, 0.0, 1.0], "offset": 0.12},
            {"kind": "sphere", "center": [-0.13, 0.1, 0.33], "radius": 0.17},
            {"kind": "box", "center": [0.16, -0.12, 0.26], "half_size": [0.11, 0.09, 0.14]},
        ],
        seed=seed,
    )


def raycast(scene: SyntheticScene, pose: np.ndarray, K: np.ndarray, height: int, width: int, max_dist=8.0, iters=160):
    """Sphere-trace one ray per pixel center; returns (depth, hit points, hit mask)."""
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    pix = np.stack([u, v, np.ones_like(u)], axis=-1).reshape(-1, 3)
    dirs_cam = pix @ np.linalg.inv(K).T
    rot, t = pose[:3, :3], pose[:3, 3]
    origin = -rot.T @ t
    dirs = dirs_cam @ rot
    norms = np.linalg.norm(dirs, axis=1)
    dirs /= norms[:, None]
    dist = np.zeros(len(dirs))
    active = np.ones(len(dirs), dtype=bool)
    hit = np.zeros(len(dirs), dtype=bool)
    for _ in range(iters):
        if not active.any():
            break
        idx = active.nonzero()[0]
        d = scene.sdf(origin + dist[idx, None] * dirs[idx])
        done = d < 1e-5
        hit[idx[done]] = True
        dist[idx] += np.where(done, 0.0, d)
        escaped = dist[idx] > max_dist
        active[idx[done | escaped]] = False
    points = origin + dist[:, None] * dirs
    depth = np.where(hit, dist / norms, 0.0)  # camera z of the hit
    return depth.reshape(height, width), points.reshape(height, width, 3), hit.reshape(height, width)


def feature_map(scene: SyntheticScene, points: np.ndarray, depth: np.ndarray, hit: np.ndarray) -> np.ndarray:
    """normal(3) ++ depth bands(2) ++ procedural color(3), zero where the ray misses."""
    p, band = points[hit], 2 * math.pi * depth[hit] / DEPTH_BAND
    feats = np.concatenate([scene.normals(p), np.cos(band)[:, None], np.sin(band)[:, None], scene.color(p)], axis=-1)
    c = scene.feature_channels
    out = np.zeros(hit.shape + (max(c, feats.shape[-1]),))
    out[hit] = feats
    return out[..., :c]


def scaled_intrinsics(K: np.ndarray, stride: int) -> np.ndarray:
    out = K.copy()
    out[0, 0] /= stride
    out[1, 1] /= stride
    out[0, 2] = (K[0, 2] + 0.5) / stride - 0.5
    out[1, 2] = (K[1, 2] + 0.5) / stride - 0.5
    return out


def render_view(scene: SyntheticScene, pose: np.ndarray, view_id: int = 0) -> CameraView:
    h, w = scene.image_size
    K = scene.intrinsics()
    depth, points, hit = raycast(scene, pose, K, h, w)
    image = np.zeros((h, w, 3))
    shade = 0.3 + 0.7 * np.clip(-(scene.normals(points[hit]) @ pose[2, :3]), 0.0, 1.0)
    image[hit] = scene.color(points[hit]) * shade[:, None]
    maps = []
    for stride in LEVEL_STRIDES:
        d, p, m = raycast(scene, pose, scaled_intrinsics(K, stride), h // stride, w // stride)
        maps.append(torch.from_numpy(feature_map(scene, p, d, m)))
    return CameraView(
        maps, torch.from_numpy(K), torch.from_numpy(pose), (h, w),
        depth=torch.from_numpy(depth), image=torch.from_numpy(image), view_id=view_id,
    )


@dataclass
class SceneData:
    scene: SyntheticScene
    grids: dict
    gt_tsdf: TsdfVolume
    views: list
    gt_mesh: TriangleMesh


def gt_tsdf(scene: SyntheticScene, grid: VolumeGrid) -> TsdfVolume:
    coords = grid.all_coords().numpy()
    pts = np.asarray(grid.origin) + (coords + 0.5) * grid.voxel_size
    sdf = scene.sdf(pts).reshape(grid.dims)
    return TsdfVolume.from_sdf(sdf, grid.voxel_size, grid.sample_origin)


def gt_mesh(scene: SyntheticScene, grid: VolumeGrid, resolution: float = 0.01) -> TriangleMesh:
    """Analytic surface meshed finely over the region spanned by the grid's sample points."""
    lo = grid.sample_origin
    hi = lo + (np.asarray(grid.dims) - 1) * grid.voxel_size
    n = np.maximum(2, np.round((hi - lo) / resolution).astype(int) + 1)
    axes = [np.linspace(lo[i], hi[i], n[i]) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    sdf = scene.sdf(pts)
    step = (hi - lo) / (n - 1)
    verts_faces = TsdfVolume(np.clip(sdf, -1, 1), 1.0, np.zeros(3))
    mesh = marching_cubes(verts_faces)
    return TriangleMesh(lo + mesh.vertices * step, mesh.faces)


def gen_scene(scene: SyntheticScene | None = None) -> SceneData:
    scene = default_scene() if scene is None else scene
    grids = scene_grids(scene.bounds_min, scene.bounds_max)
    views = [render_view(scene, pose, i) for i, pose in enumerate(scene.poses())]
    return SceneData(scene, grids, gt_tsdf(scene, grids[0]), views, gt_mesh(scene, grids[0]))


def save_scene(data: SceneData, path) -> Path:
    root = Path(path)
    (root / "poses").mkdir(parents=True, exist_ok=True)
    (root / "views").mkdir(exist_ok=True)
    (root / "scene.yaml").write_text(yaml.safe_dump(asdict(data.scene), sort_keys=False))
    np.savetxt(root / "intrinsics.txt", data.views[0].intrinsics.double().numpy(), fmt="%.10f")
    for v in data.views:
        np.savetxt(root / "poses" / f"{v.view_id:03d}.txt", v.pose.double().numpy(), fmt="%.12f")
        tensors = {"image": v.image, "depth": v.depth}
        tensors.update({f"features{l}": f for l, f in enumerate(v.features)})
        save_tensors(tensors, root / "views" / f"{v.view_id:03d}.vfck")
    save_tensors({"values": data.gt_tsdf.values, "free": data.gt_tsdf.free.astype(np.float32)}, root / "gt_tsdf.vfck")
    write_ply(data.gt_mesh, root / "gt_mesh.ply")
    return root


def load_views(root) -> list[CameraView]:
    root = Path(root)
    meta = yaml.safe_load((root / "scene.yaml").read_text())
    K = np.loadtxt(root / "intrinsics.txt")
    views = []
    for pose_file in sorted((root / "poses").glob("*.txt")):
        vid = int(pose_file.stem)
        t = load_tensors(root / "views" / f"{vid:03d}.vfck")
        dt = torch.get_default_dtype()
        feats = [t[f"features{l}"].to(dt) for l in range(3)]
        views.append(
            CameraView(
                feats, K, np.loadtxt(pose_file), tuple(meta["image_size"]),
                depth=t["depth"].to(dt), image=t["image"].to(dt), view_id=vid,
            )
        )
    return views


def load_scene(path) -> SceneData:
    root = Path(path)
    scene = SyntheticScene(**yaml.safe_load((root / "scene.yaml").read_text()))
    grids = scene_grids(scene.bounds_min, scene.bounds_max)
    t = load_tensors(root / "gt_tsdf.vfck")
    tsdf = TsdfVolume(
        t["values"].double().numpy().clip(-1, 1), grids[0].voxel_size, grids[0].sample_origin,
        free=t["free"].numpy() > 0.5,
    )
    return SceneData(scene, grids, tsdf, load_views(root), load_ply(root / "gt_mesh.ply"))
