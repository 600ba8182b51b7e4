import math

import numpy as np
import pytest
import torch

from voxformer import oracles
from voxformer.errors import DegenerateSceneError, PreconditionError, StructuralError
from voxformer.fusion import (
    BackProjection,
    CameraView,
    ToyFeatureExtractor,
    VolumeGrid,
    WeightNet,
    back_project,
    bilinear_sample,
    fuse,
    project,
    rotation_angle_deg,
    scene_grids,
    select_views,
)
from voxformer.scene import look_at
from voxformer.verify import random_trajectory
from voxformer.voxel import SparseVolume

K = np.array([[50.0, 0.0, 31.5], [0.0, 50.0, 31.5], [0.0, 0.0, 1.0]])


def ramp_view(pose=None, channels=2, view_id=0):
    """Feature map whose channels are the (x, y) pixel coordinates of the 1/4 map."""
    h, w = 16, 16
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    fmap = np.stack([xs, ys], axis=-1)[..., :channels]
    pose = np.eye(4) if pose is None else pose
    return CameraView([fmap, fmap[::2, ::2], fmap[::4, ::4]], K, pose, (64, 64), view_id=view_id)


class TestCameraView:
    def test_rejects_non_orthonormal_pose(self):
        pose = np.eye(4)
        pose[0, 0] = 2.0
        with pytest.raises(PreconditionError):
            CameraView([np.zeros((4, 4, 1))] * 3, K, pose, (16, 16))

    def test_rejects_reflection(self):
        pose = np.diag([1.0, 1.0, -1.0, 1.0])
        with pytest.raises(PreconditionError):
            CameraView([np.zeros((4, 4, 1))] * 3, K, pose, (16, 16))

    def test_rejects_bad_intrinsics(self):
        bad = K.copy()
        bad[1, 0] = 3.0
        with pytest.raises(PreconditionError):
            CameraView([np.zeros((4, 4, 1))] * 3, bad, np.eye(4), (16, 16))

    def test_center(self):
        pose = look_at([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        view = CameraView([np.zeros((4, 4, 1))] * 3, K, pose, (16, 16))
        np.testing.assert_allclose(view.center, [1.0, 2.0, 3.0], atol=1e-5)


class TestProjection:
    def test_principal_point(self, f64):
        view = ramp_view()
        uv, z = project(view, torch.tensor([[0.0, 0.0, 2.0]]))
        np.testing.assert_allclose(uv[0].numpy(), [31.5, 31.5])
        assert float(z[0]) == 2.0

    def test_bilinear_exact_on_linear_ramp(self, f64):
        ys, xs = np.meshgrid(np.arange(5.0), np.arange(7.0), indexing="ij")
        fmap = torch.from_numpy(np.stack([3 * xs - ys, xs + 2 * ys], axis=-1))
        x = torch.tensor([0.25, 3.5, 5.9])
        y = torch.tensor([1.75, 0.0, 3.3])
        out = bilinear_sample(fmap, x, y).numpy()
        np.testing.assert_allclose(out[:, 0], 3 * x.numpy() - y.numpy(), atol=1e-12)
        np.testing.assert_allclose(out[:, 1], x.numpy() + 2 * y.numpy(), atol=1e-12)

    def test_bilinear_clamps_to_border(self, f64):
        fmap = torch.arange(4.0).reshape(2, 2, 1)
        out = bilinear_sample(fmap, torch.tensor([-3.0, 9.0]), torch.tensor([-1.0, 9.0]))
        assert out[:, 0].tolist() == [0.0, 3.0]

    def test_back_project_matches_pixel_loop(self, f64):
        view = ramp_view()
        grid = VolumeGrid(np.array([-0.2, -0.2, 1.0]), 0.04, (10, 10, 10), 0)
        bp = back_project(view, grid)
        pts = grid.positions(bp.volume.coords).numpy()
        for i in range(0, len(pts), 37):
            p = K @ pts[i]
            u, v = p[0] / p[2], p[1] / p[2]
            inside = -0.5 <= u <= 63.5 and -0.5 <= v <= 63.5
            assert bool(bp.seen[i]) == inside
            if inside:
                fx = min(max((u + 0.5) / 4 - 0.5, 0), 15)
                fy = min(max((v + 0.5) / 4 - 0.5, 0), 15)
                np.testing.assert_allclose(bp.volume.feats[i].numpy(), [fx, fy], atol=1e-9)
            else:
                assert (bp.volume.feats[i] == 0).all()

    def test_behind_camera_unseen(self, f64):
        view = ramp_view()
        grid = VolumeGrid(np.array([-0.1, -0.1, -1.0]), 0.04, (5, 5, 5), 0)
        bp = back_project(view, grid)
        assert not bp.seen.any()
        assert (bp.volume.feats == 0).all()

    def test_level_stride(self, f64):
        view = ramp_view()
        grid = VolumeGrid(np.array([-0.02, -0.02, 1.98]), 0.04, (1, 1, 1), 2)
        bp = back_project(view, grid)
        # sample point projects to the principal point 31.5, i.e. 1/16 map coordinate 1.5
        np.testing.assert_allclose(bp.volume.feats[0].numpy(), [6.0, 6.0], atol=1e-9)


class TestFuse:
    def _projections(self, rng, views=4, channels=3, dims=(3, 3, 3)):
        coords = torch.from_numpy(np.argwhere(np.ones(dims, dtype=bool)))
        out = []
        for vid in range(views):
            seen = rng.random(len(coords)) < 0.7
            feats = rng.normal(size=(len(coords), channels)) * seen[:, None]
            vol = SparseVolume(coords, torch.from_numpy(feats), dims)
            out.append(BackProjection(vol, torch.from_numpy(seen), torch.ones(len(coords)), torch.zeros(len(coords), 2), vid))
        return out

    def test_matches_per_voxel_loop(self, rng, gen, f64):
        projs = self._projections(rng)
        net = WeightNet(3, gen)
        fused = fuse(projs, net)
        rows, ref = oracles.fuse_oracle([p.volume.feats for p in projs], [p.seen.numpy() for p in projs], net)
        assert fused.volume.coords.tolist() == projs[0].volume.coords[rows].tolist()
        np.testing.assert_allclose(fused.volume.feats.detach().numpy(), ref, atol=1e-12)
        assert fused.volume.channels == 6

    def test_view_order_irrelevant(self, rng, gen, f64):
        projs = self._projections(rng)
        net = WeightNet(3, gen)
        a = fuse(projs, net).volume.feats
        b = fuse(projs[::-1], net).volume.feats
        assert torch.equal(a, b)

    def test_unseen_voxels_dropped(self, rng, gen, f64):
        projs = self._projections(rng, views=2)
        for p in projs:
            p.seen[0] = False
        fused = fuse(projs, WeightNet(3, gen))
        assert (0, 0, 0) not in fused.volume

    def test_identical_views_have_zero_variance(self, rng, gen, f64):
        one = self._projections(rng, views=1)[0]
        one.seen[:] = True
        copies = [BackProjection(one.volume, one.seen, one.depth, one.uv, i) for i in range(3)]
        fused = fuse(copies, WeightNet(3, gen)).volume.feats
        # equal logits give weights 1/3 each, then the 1/N factor
        torch.testing.assert_close(fused[:, :3], one.volume.feats / 3)
        assert float(fused[:, 3:].detach().abs().max()) < 1e-28

    def test_grid_mismatch(self, rng, gen):
        a = self._projections(rng, views=1)[0]
        b = self._projections(rng, views=1, dims=(2, 2, 2))[0]
        with pytest.raises(StructuralError):
            fuse([a, b], WeightNet(3, gen))

    def test_needs_a_view(self, gen):
        with pytest.raises(PreconditionError):
            fuse([], WeightNet(3, gen))


class TestSceneGrids:
    def test_dims_double_per_level(self):
        grids = scene_grids([0, 0, 0], [0.8, 0.48, 0.32])
        assert grids[2].dims == (6, 4, 3)
        assert grids[1].dims == (12, 8, 6)
        assert grids[0].dims == (24, 16, 12)
        assert [grids[l].voxel_size for l in (0, 1, 2)] == pytest.approx([0.04, 0.08, 0.16])

    def test_levels_share_origin(self):
        grids = scene_grids([-1, -1, 0], [1, 1, 1])
        for l in (0, 1):
            np.testing.assert_array_equal(grids[l].origin, grids[2].origin)

    def test_smaller_than_coarse_voxel(self):
        with pytest.raises(DegenerateSceneError) as err:
            scene_grids([0, 0, 0], [0.1, 1, 1])
        assert err.value.level == 2


class TestSelectViews:
    def test_oracle_agreement(self, rng):
        for _ in range(300):
            poses = random_trajectory(rng, int(rng.integers(1, 15)))
            assert select_views(poses, len(poses)) == oracles.select_views_oracle(poses)

    def test_both_gates_required(self):
        base = np.eye(4)
        moved = np.eye(4)
        moved[:3, 3] = [-0.5, 0, 0]
        turned = look_at([0, 0, 0], [1, 0, 1])
        both = look_at([0.5, 0, 0], [1.5, 0, 1])
        assert select_views([base, moved, turned, both], 10) == [0, 3]

    @pytest.mark.parametrize("dist,angle,kept", [(0.09, 20.0, False), (0.11, 20.0, True), (0.11, 14.0, False), (0.11, 16.0, True)])
    def test_gate_sides(self, dist, angle, kept):
        a = np.eye(4)
        b = np.eye(4)
        c, s = math.cos(math.radians(angle)), math.sin(math.radians(angle))
        b[:3, :3] = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
        b[:3, 3] = -b[:3, :3] @ np.array([dist, 0.0, 0.0])
        assert select_views([a, b], 5) == ([0, 1] if kept else [0])

    def test_subsample_is_seeded(self):
        poses = [look_at([math.cos(t), math.sin(t), 0.0], [0, 0, 0]) for t in np.linspace(0, 6, 30)]
        kept = select_views(poses, 30)
        a = select_views(poses, 5, seed=3)
        assert a == select_views(poses, 5, seed=3)
        assert len(a) == 5 and set(a) <= set(kept) and a == sorted(a)

    def test_rotation_angle(self):
        r = look_at([0, 0, 0], [1, 0, 0])[:3, :3]
        assert rotation_angle_deg(r, r) == pytest.approx(0.0, abs=1e-6)

    def test_empty(self):
        with pytest.raises(PreconditionError):
            select_views([], 3)


class TestExtractor:
    def test_strides(self, gen):
        ext = ToyFeatureExtractor(5, gen)
        maps = ext(torch.rand(64, 48, 3))
        assert [tuple(m.shape) for m in maps] == [(16, 12, 5), (8, 6, 5), (4, 3, 5)]

    def test_size_must_divide(self, gen):
        with pytest.raises(PreconditionError):
            ToyFeatureExtractor(4, gen)(torch.rand(40, 48, 3))
