"""Oracle and invariant suites behind ``voxformer verify``."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from . import oracles
from .attention import (
    AttentionBlockParams,
    GlobalContextParams,
    global_attention,
    global_context,
    pair_count,
    sparse_window_attention,
)
from .config import LevelConfig
from .fusion import BackProjection, WeightNet, fuse, select_views
from .grad import Adam, backward, finite_diff_check
from .mesh import TriangleMesh, export_ply, marching_cubes, read_ply
from .pipeline import (
    DilateAttentionParams,
    HeadParams,
    LevelTransformer,
    dilate_attention,
    down_flow,
    occupancy_head,
    tsdf_head,
    up_flow,
)
from .supervision import (
    TsdfVolume,
    bce,
    depth_metrics,
    mesh_metrics,
    point_metrics,
    tsdf_loss,
)
from .voxel import OccupancyVolume, SparseVolume, dilate, downsample, sparsify, window_edges


@dataclass
class SuiteResult:
    module: str
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


@dataclass
class VerifyReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed, "results": [asdict(r) for r in self.results]}, indent=2)

    def to_text(self) -> str:
        lines = [
            f"{'PASS' if r.passed else 'FAIL'}  {r.module:<12} {r.name:<34} {r.seconds:6.2f}s  {r.detail}"
            for r in self.results
        ]
        lines.append(f"{sum(r.passed for r in self.results)}/{len(self.results)} suites passed")
        return "\n".join(lines) + "\n"


SUITES: list[tuple[str, str, Callable]] = []


def suite(module: str, name: str):
    def register(fn):
        SUITES.append((module, name, fn))
        return fn

    return register


def _tol(f64: float, f32: float) -> float:
    return f64 if torch.get_default_dtype() == torch.float64 else f32


def random_volume(rng: np.random.Generator, dims, count: int, channels: int) -> SparseVolume:
    cells = int(np.prod(dims))
    keys = rng.choice(cells, size=min(count, cells), replace=False)
    coords = np.stack(np.unravel_index(keys, dims), axis=1)
    feats = rng.normal(size=(len(keys), channels))
    return SparseVolume(torch.from_numpy(coords), torch.from_numpy(feats).to(torch.get_default_dtype()), dims)


def _coord_set(vol: SparseVolume) -> set:
    return {tuple(c) for c in vol.coords.tolist()}


# voxel-core ------------------------------------------------------------------


@suite("voxel-core", "dilate vs brute force")
def _dilate(rng):
    for _ in range(20):
        dims = tuple(rng.integers(1, 10, size=3))
        vol = random_volume(rng, dims, int(rng.integers(1, 30)), 2)
        if _coord_set(dilate(vol)) != oracles.dilate_oracle(vol.coords.numpy(), dims):
            return False, f"mismatch at dims {dims}"
    return True, "20 volumes"


@suite("voxel-core", "downsample vs group-by")
def _downsample(rng):
    worst = 0.0
    for _ in range(20):
        dims = tuple(rng.integers(2, 12, size=3))
        vol = random_volume(rng, dims, int(rng.integers(1, 60)), 3)
        down, _ = downsample(vol)
        ref = oracles.downsample_oracle(vol.coords.numpy(), vol.feats)
        if _coord_set(down) != set(ref):
            return False, "parent set differs"
        for c, f in zip(down.coords.tolist(), down.feats.detach().numpy()):
            worst = max(worst, float(np.abs(f - ref[tuple(c)]).max()))
    return worst <= _tol(1e-12, 1e-6), f"max diff {worst:.2e}"


@suite("voxel-core", "window neighbors vs brute force")
def _window(rng):
    for _ in range(20):
        dims = tuple(rng.integers(2, 10, size=3))
        n = int(rng.integers(1, 6))
        vol = random_volume(rng, dims, int(rng.integers(1, 80)), 1)
        centers, neighbors, _ = window_edges(vol, n)
        got = [[] for _ in range(len(vol))]
        for c, j in zip(centers.tolist(), neighbors.tolist()):
            got[c].append(j)
        if got != oracles.window_members(vol.coords.numpy(), n):
            return False, f"window {n} differs"
    return True, "20 volumes"


@suite("voxel-core", "sparsify threshold gate")
def _sparsify(rng):
    for _ in range(1000):
        dims = tuple(rng.integers(2, 8, size=3))
        vol = random_volume(rng, dims, int(rng.integers(1, 20)), 1)
        pdims = tuple((d + 1) // 2 for d in dims)
        occ = random_volume(rng, pdims, int(rng.integers(0, 10)), 1)
        values = rng.choice([0.0, 0.25, 0.4999999, 0.5, 0.5000001, 0.75, 1.0], size=len(occ))
        occ = OccupancyVolume(occ.coords, torch.from_numpy(values).reshape(-1, 1), pdims, level=1)
        ref = oracles.sparsify_oracle(vol.coords.numpy(), {tuple(c): v for c, v in zip(occ.coords.tolist(), values)})
        if _coord_set(sparsify(vol, occ, 0.5)) != ref:
            return False, "kept set differs"
    return True, "1000 cases"


@suite("voxel-core", "down/up active-set round trip")
def _round_trip(rng):
    gen = torch.Generator().manual_seed(int(rng.integers(1 << 30)))
    for trial in range(10):
        depth = 1 + trial % 3
        net = LevelTransformer(LevelConfig(0, 0.04, [4] * (depth + 1), window=3, heads=2), 4, gen)
        dims = tuple(rng.integers(2, 16, size=3))
        vol = random_volume(rng, dims, int(rng.integers(1, 120)), 4)
        with torch.no_grad():
            bottom, skips, maps = down_flow(vol, net)
            out = up_flow(bottom, skips, maps, net)
        if not torch.equal(out.coords, vol.coords):
            return False, f"active set changed at depth {depth}"
    return True, "10 volumes"


# attention -------------------------------------------------------------------


@suite("attention", "window attention vs per-voxel loop")
def _attention_oracle(rng):
    gen = torch.Generator().manual_seed(int(rng.integers(1 << 30)))
    worst = 0.0
    for n in (2, 3, 4):
        params = AttentionBlockParams(8, 2, generator=gen)
        vol = random_volume(rng, (6, 6, 6), 60, 8)
        with torch.no_grad():
            out = sparse_window_attention(vol, params, n).feats.numpy()
        ref = oracles.attention_block_oracle(vol.feats, vol.coords.numpy(), params, oracles.window_members(vol.coords.numpy(), n))
        worst = max(worst, float(np.abs(out - ref).max()))
    return worst <= _tol(1e-10, 1e-5), f"max diff {worst:.2e}"


def _exact_sums(n: int, centers, w):
    """Per-center sums accumulated in f64 so the check measures the weights, not the adder."""
    return torch.zeros(n, w.shape[1], dtype=torch.float64).index_add(0, centers, w.double())


@suite("attention", "softmax weights sum to one")
def _weights(rng):
    gen = torch.Generator().manual_seed(int(rng.integers(1 << 30)))
    params = AttentionBlockParams(8, 2, generator=gen)
    vol = random_volume(rng, (10, 10, 10), 300, 8)
    worst = 0.0
    with torch.no_grad():
        for n in (3, 5):
            _, (centers, _, w) = sparse_window_attention(vol, params, n, return_weights=True)
            sums = _exact_sums(len(vol), centers, w)
            worst = max(worst, float((sums - 1).abs().max()))
        _, (centers, _, w) = global_attention(vol, params, return_weights=True)
        sums = _exact_sums(len(vol), centers, w)
        worst = max(worst, float((sums - 1).abs().max()))
    return worst <= 1e-6, f"max |sum - 1| {worst:.2e}"


@suite("attention", "translation invariance")
def _translation(rng):
    gen = torch.Generator().manual_seed(int(rng.integers(1 << 30)))
    params = AttentionBlockParams(8, 2, generator=gen)
    for _ in range(10):
        vol = random_volume(rng, (8, 8, 8), 80, 8)
        shift = rng.integers(0, 8, size=3)
        moved = SparseVolume(vol.coords + torch.from_numpy(shift), vol.feats, (16, 16, 16))
        with torch.no_grad():
            a = sparse_window_attention(vol, params, 3).feats
            b = sparse_window_attention(moved, params, 3).feats
        if not torch.equal(a, b):
            return False, f"shift {shift.tolist()} changed the output"
    return True, "10 shifts"


@suite("attention", "pair count recount")
def _pairs(rng):
    for _ in range(10):
        dims = tuple(rng.integers(2, 12, size=3))
        n = int(rng.integers(1, 7))
        vol = random_volume(rng, dims, int(rng.integers(0, 120)), 1)
        sparse, dense = pair_count(vol, n)
        if sparse != oracles.pair_count_oracle(vol.coords.numpy(), n) or dense != int(np.prod(dims)) ** 2:
            return False, f"count differs for window {n}"
    return True, "10 volumes"


# pipeline ----------------------------------------------------------------------


@suite("pipeline", "head output ranges")
def _heads(rng):
    gen = torch.Generator().manual_seed(int(rng.integers(1 << 30)))
    vol = random_volume(rng, (8, 8, 8), 100, 4)
    head = HeadParams(4, gen)
    with torch.no_grad():
        occ = occupancy_head(vol, head).feats
        tsdf = tsdf_head(vol, head).feats
    ok = bool((occ > 0).all() and (occ < 1).all() and (tsdf > -1).all() and (tsdf < 1).all())
    return ok, f"occ [{occ.min():.3g}, {occ.max():.3g}] tsdf [{tsdf.min():.3g}, {tsdf.max():.3g}]"


@suite("pipeline", "dilate-attention grows by one ring")
def _grow(rng):
    gen = torch.Generator().manual_seed(int(rng.integers(1 << 30)))
    params = DilateAttentionParams(4, 6, 2, gen)
    vol = random_volume(rng, (9, 9, 9), 40, 4)
    with torch.no_grad():
        out = dilate_attention(vol, params, 3)
    ok = _coord_set(out) == oracles.dilate_oracle(vol.coords.numpy(), vol.dims) and out.channels == 6
    return ok, f"{len(vol)} -> {len(out)} voxels"


# fusion ----------------------------------------------------------------------------


@suite("fusion", "fusion vs per-voxel loop")
def _fusion(rng):
    gen = torch.Generator().manual_seed(int(rng.integers(1 << 30)))
    net = WeightNet(4, gen)
    dims = (4, 4, 4)
    coords = torch.from_numpy(np.argwhere(np.ones(dims, dtype=bool)))
    projs, feats, seen = [], [], []
    for vid in rng.permutation(5):
        f = rng.normal(size=(len(coords), 4))
        s = rng.random(len(coords)) < 0.6
        f = f * s[:, None]
        vol = SparseVolume(coords, torch.from_numpy(f).to(torch.get_default_dtype()), dims)
        zeros = torch.zeros(len(coords))
        projs.append(BackProjection(vol, torch.from_numpy(s), zeros, torch.zeros(len(coords), 2), int(vid)))
    for p in sorted(projs, key=lambda p: p.view_id):
        feats.append(p.volume.feats.numpy())
        seen.append(p.seen.numpy())
    with torch.no_grad():
        fused = fuse(projs, net)
    rows, ref = oracles.fuse_oracle(feats, seen, net)
    if not np.array_equal(fused.volume.coords.numpy(), coords.numpy()[rows]):
        return False, "fused voxel set differs"
    diff = float(np.abs(fused.volume.feats.numpy() - ref).max())
    return diff <= _tol(1e-10, 1e-5), f"max diff {diff:.2e}"


def random_trajectory(rng, count: int) -> list[np.ndarray]:
    from scipy.spatial.transform import Rotation

    poses = []
    for _ in range(count):
        pose = np.eye(4)
        pose[:3, :3] = Rotation.from_rotvec(rng.normal(size=3) * rng.uniform(0, 0.6)).as_matrix()
        pose[:3, 3] = rng.normal(size=3) * rng.uniform(0, 0.2)
        poses.append(pose)
    return poses


@suite("fusion", "view selection gates")
def _views(rng):
    for _ in range(1000):
        poses = random_trajectory(rng, int(rng.integers(1, 12)))
        if select_views(poses, limit=len(poses)) != oracles.select_views_oracle(poses):
            return False, "kept frames differ"
    return True, "1000 trajectories"


# supervision -----------------------------------------------------------------------


@suite("supervision", "losses vs scalar loops")
def _losses(rng):
    s = rng.uniform(-1, 1, size=200)
    g = rng.uniform(-1, 1, size=200)
    p = rng.uniform(0, 1, size=200)
    t = (rng.random(200) < 0.5).astype(float)
    e1 = abs(float(tsdf_loss(torch.from_numpy(s), torch.from_numpy(g))) - oracles.tsdf_loss_oracle(s, g))
    e2 = abs(float(bce(torch.from_numpy(p), torch.from_numpy(t))) - oracles.bce_oracle(p, t))
    worst = max(e1, e2)
    return worst <= 1e-12, f"max diff {worst:.2e}"


@suite("supervision", "metrics vs all-pairs search")
def _metrics(rng):
    a = rng.normal(size=(400, 3)) * 0.1
    b = a + rng.normal(size=(400, 3)) * 0.03
    got = point_metrics(a, b, 0.05).to_dict()
    ref = oracles.point_metrics_oracle(a, b, 0.05)
    worst = max(abs(got[k] - ref[k]) for k in ref)
    d1 = rng.uniform(0.5, 4, size=(20, 20))
    d2 = d1 * rng.uniform(0.7, 1.3, size=d1.shape)
    dm = depth_metrics(d1, d2)
    dref = oracles.depth_metrics_oracle(d1, d2)
    worst = max(worst, abs(dm.abs_rel - dref["abs_rel"]), abs(dm.rmse - dref["rmse"]), abs(dm.delta[0] - dref["delta1"]))
    return worst <= 1e-12, f"max diff {worst:.2e}"


@suite("supervision", "metric self-consistency")
def _self_metrics(rng):
    tsdf, origin = oracles.sphere_tsdf(0.3, 20, 0.04)
    mesh = marching_cubes(TsdfVolume(tsdf, 0.04, origin))
    m = mesh_metrics(mesh, mesh, samples=2000)
    depth = rng.uniform(0.5, 4, size=(16, 16))
    d = depth_metrics(depth, depth)
    ok = (m.acc, m.comp, m.prec, m.recall, m.fscore) == (0.0, 0.0, 1.0, 1.0, 1.0)
    ok &= (d.abs_rel, d.abs_diff, d.sq_rel, d.rmse) == (0.0, 0.0, 0.0, 0.0) and d.delta == [1.0, 1.0, 1.0]
    return ok, "identical inputs"


# mesh -------------------------------------------------------------------------------


@suite("mesh", "sphere iso-surface accuracy")
def _sphere(rng):
    tsdf, origin = oracles.sphere_tsdf(0.5, 32, 0.04)
    mesh = marching_cubes(TsdfVolume(tsdf, 0.04, origin))
    err = float(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5).mean())
    return err < 0.02, f"mean radial error {err:.4f} m"


@suite("mesh", "PLY round trip")
def _ply(rng):
    verts = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
    faces = np.array([rng.choice(50, size=3, replace=False) for _ in range(80)])
    back = read_ply(export_ply(TriangleMesh(verts, faces)))
    ok = np.array_equal(back.vertices, verts) and np.array_equal(back.faces, faces)
    return ok, f"{len(verts)} vertices, {len(faces)} faces"


# grad ---------------------------------------------------------------------------------


@suite("grad", "finite differences of blocks")
def _grad(rng):
    # finite differences are only meaningful in f64
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        return _grad_f64(rng)
    finally:
        torch.set_default_dtype(prev)


def _grad_f64(rng):
    gen = torch.Generator().manual_seed(int(rng.integers(1 << 30)))
    vol = random_volume(rng, (5, 5, 5), 30, 4)
    attn = AttentionBlockParams(4, 2, generator=gen)
    ctx = GlobalContextParams(4, gen)
    dil = DilateAttentionParams(4, 4, 2, gen)
    w = torch.from_numpy(rng.normal(size=(len(vol) + 200, 4)))
    params = dict(attn.named_parameters(prefix="attn"))
    params.update(ctx.named_parameters(prefix="ctx"))
    params.update(dil.named_parameters(prefix="dil"))

    def loss():
        x = sparse_window_attention(vol, attn, 3)
        x = global_context(global_attention(x, attn), ctx)
        x = dilate_attention(x, dil, 3)
        return (x.feats * w[: len(x)]).sum()

    report = finite_diff_check(loss, params, samples=16)
    return report.max_rel_error <= 1e-4, f"max rel error {report.max_rel_error:.2e}"


@suite("grad", "Adam on a quadratic bowl")
def _adam(rng):
    x = torch.tensor(rng.normal(size=4) * 2, requires_grad=True)
    opt = Adam({"x": x}, lr=0.05)
    for _ in range(2000):
        opt.step(backward((x**2).sum(), {"x": x}))
    f = float((x.detach() ** 2).sum())
    return f < 1e-6, f"f = {f:.2e}"


def run_verify(seed: int = 0, modules: list[str] | None = None) -> VerifyReport:
    """Run every registered suite with its own seeded generator."""
    report = VerifyReport()
    for i, (module, name, fn) in enumerate(SUITES):
        if modules and module not in modules:
            continue
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        try:
            passed, detail = fn(rng)
        except Exception as exc:  # a crashing suite is a failed suite
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        report.results.append(SuiteResult(module, name, bool(passed), detail, time.perf_counter() - start))
    return report
