import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from voxformer import oracles
from voxformer.errors import PreconditionError, StructuralError
from voxformer.mesh import marching_cubes
from voxformer.supervision import (
    MetricsReport,
    TsdfVolume,
    bce,
    densify_tsdf,
    depth_metrics,
    mesh_metrics,
    occupancy_gt,
    occupancy_loss,
    point_metrics,
    projection_targets,
    projection_weight_loss,
    total_loss,
    tsdf_loss,
)
from voxformer.voxel import OccupancyVolume, SparseVolume


def sphere_mesh(r=0.3, dims=20, voxel=0.04):
    values, origin = oracles.sphere_tsdf(r, dims, voxel)
    return marching_cubes(TsdfVolume(values, voxel, origin))


class TestTsdfVolume:
    def test_truncation_and_free_flag(self):
        sdf = np.array([-0.2, -0.12, -0.05, 0.0, 0.05, 0.119, 0.12, 1.0]).reshape(2, 2, 2)
        t = TsdfVolume.from_sdf(sdf, 0.04, np.zeros(3))
        assert t.truncation == pytest.approx(0.12)
        np.testing.assert_allclose(t.values.ravel(), np.clip(sdf.ravel() / 0.12, -1, 1))
        assert t.free.ravel().tolist() == [True, True, False, False, False, False, True, True]

    def test_values_bounded(self):
        with pytest.raises(StructuralError):
            TsdfVolume(np.full((2, 2, 2), 1.5), 0.04, np.zeros(3))

    def test_densify_fills_inactive_with_one(self):
        sparse = SparseVolume(torch.tensor([[0, 0, 0], [1, 1, 1]]), torch.tensor([[-0.5], [0.25]]), (2, 2, 2))
        dense = densify_tsdf(sparse, np.zeros(3))
        assert dense.values[0, 0, 0] == -0.5 and dense.values[1, 1, 1] == 0.25
        assert dense.values.sum() == pytest.approx(-0.25 + 6)
        assert dense.mask.sum() == 2


class TestOccupancyGt:
    def test_level0_band(self):
        sdf = np.linspace(-0.3, 0.3, 8).reshape(2, 2, 2)
        t = TsdfVolume.from_sdf(sdf, 0.04, np.zeros(3))
        occ = occupancy_gt(t, 0)
        expect = (np.abs(sdf) < 0.12).ravel()
        assert occ.values.numpy().astype(bool).tolist() == expect.tolist()

    def test_max_pooled_levels(self, rng):
        sdf = rng.uniform(-0.3, 0.3, size=(7, 6, 5))
        t = TsdfVolume.from_sdf(sdf, 0.04, np.zeros(3))
        fine = (np.abs(sdf) < 0.12)
        for level in (1, 2):
            occ = occupancy_gt(t, level)
            step = 2**level
            assert occ.dims == tuple(math.ceil(d / step) for d in sdf.shape)
            for c, v in zip(occ.coords.tolist(), occ.values.tolist()):
                block = fine[c[0] * step:(c[0] + 1) * step, c[1] * step:(c[1] + 1) * step, c[2] * step:(c[2] + 1) * step]
                assert v == float(block.any())
            assert occ.voxel_size == pytest.approx(0.04 * step)


class TestLosses:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=40))
    def test_tsdf_loss_oracle(self, pairs):
        s = np.array([p[0] for p in pairs])
        g = np.array([p[1] for p in pairs])
        got = float(tsdf_loss(torch.from_numpy(s), torch.from_numpy(g)))
        assert got == pytest.approx(oracles.tsdf_loss_oracle(s, g), rel=1e-12, abs=1e-12)

    def test_tsdf_loss_zero_at_match(self):
        x = torch.tensor([-0.7, 0.0, 0.3], dtype=torch.float64)
        assert float(tsdf_loss(x, x)) == 0.0

    def test_sign_flip_penalised(self):
        same = float(tsdf_loss(torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64)))
        flip = float(tsdf_loss(torch.tensor([-0.5], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64)))
        assert same == 0.0 and flip == pytest.approx(1.0)

    def test_log1p_mode(self):
        s = torch.tensor([0.5, -0.2], dtype=torch.float64)
        g = torch.tensor([0.1, 0.3], dtype=torch.float64)
        ref = np.mean([abs(math.log1p(0.5) - math.log1p(0.1)), abs(-math.log1p(0.2) - math.log1p(0.3))])
        assert float(tsdf_loss(s, g, mode="log1p")) == pytest.approx(ref)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            tsdf_loss(torch.zeros(2), torch.zeros(2), mode="l2")

    def test_shape_mismatch(self):
        with pytest.raises(StructuralError):
            tsdf_loss(torch.zeros(2), torch.zeros(3))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.sampled_from([0.0, 1.0])), min_size=1, max_size=40))
    def test_bce_oracle(self, pairs):
        p = np.array([a for a, _ in pairs])
        t = np.array([b for _, b in pairs])
        got = float(bce(torch.from_numpy(p), torch.from_numpy(t)))
        assert got == pytest.approx(oracles.bce_oracle(p, t), rel=1e-12, abs=1e-12)

    def test_occupancy_loss_missing_gt_is_empty(self):
        pred = OccupancyVolume(torch.tensor([[0, 0, 0], [1, 0, 0]]), torch.tensor([[0.9], [0.2]], dtype=torch.float64), (2, 1, 1))
        gt = OccupancyVolume(torch.tensor([[0, 0, 0]]), torch.tensor([[1.0]], dtype=torch.float64), (2, 1, 1))
        ref = -(math.log(0.9) + math.log(0.8)) / 2
        assert float(occupancy_loss(pred, gt)) == pytest.approx(ref)

    def test_occupancy_loss_level_mismatch(self):
        a = OccupancyVolume(torch.tensor([[0, 0, 0]]), torch.tensor([[0.5]]), (1, 1, 1), level=1)
        b = OccupancyVolume(torch.tensor([[0, 0, 0]]), torch.tensor([[0.5]]), (1, 1, 1), level=2)
        with pytest.raises(StructuralError):
            occupancy_loss(a, b)

    def test_projection_targets(self):
        depth = torch.full((4, 4), 2.0, dtype=torch.float64)
        depth[0, 0] = 0.0
        uv = torch.tensor([[1.2, 1.4], [2.0, 2.0], [0.1, 0.2], [9.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
        z = torch.tensor([2.05, 2.5, 2.0, 2.0, -2.0], dtype=torch.float64)
        target, valid = projection_targets(depth, uv, z, 0.12)
        assert valid.tolist() == [True, True, False, False, False]
        assert target.tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]

    def test_projection_weight_loss(self):
        depth = torch.full((4, 4), 2.0, dtype=torch.float64)
        uv = torch.tensor([[1.0, 1.0], [2.0, 2.0]], dtype=torch.float64)
        z = torch.tensor([2.0, 3.0], dtype=torch.float64)
        logits = torch.tensor([0.3, -0.4], dtype=torch.float64)
        ref = oracles.bce_oracle(1 / (1 + np.exp(-logits.numpy())), [1.0, 0.0])
        assert float(projection_weight_loss(logits, uv, z, depth, 0.12)) == pytest.approx(ref)

    def test_projection_weight_loss_needs_depth(self):
        with pytest.raises(PreconditionError):
            projection_weight_loss(torch.zeros(1), torch.zeros(1, 2), torch.ones(1), None, 0.1)

    def test_total_loss_weights(self):
        t = torch.tensor(1.0)
        assert float(total_loss(t, [t, t], [t])) == 4.0
        assert float(total_loss(t, [t], [t], {"tsdf": 2.0, "weights": 0.5})) == 3.5


class TestMeshMetrics:
    def test_self_consistency_exact(self):
        mesh = sphere_mesh()
        m = mesh_metrics(mesh, mesh, samples=3000)
        assert (m.acc, m.comp, m.chamfer) == (0.0, 0.0, 0.0)
        assert (m.prec, m.recall, m.fscore) == (1.0, 1.0, 1.0)

    def test_point_metrics_oracle(self, rng):
        a = rng.normal(size=(300, 3)) * 0.2
        b = rng.normal(size=(250, 3)) * 0.2
        got = point_metrics(a, b, 0.05)
        ref = oracles.point_metrics_oracle(a, b, 0.05)
        for k, v in ref.items():
            assert getattr(got, k) == pytest.approx(v, abs=1e-12)

    def test_threshold_is_strict(self):
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[0.05, 0.0, 0.0]])
        m = point_metrics(a, b, 0.05)
        assert m.prec == 0.0 and m.fscore == 0.0

    def test_shifted_sphere(self):
        a = sphere_mesh()
        b = sphere_mesh()
        b.vertices = b.vertices + np.array([0.02, 0.0, 0.0])
        m = mesh_metrics(a, b, tau=0.05, samples=3000)
        assert 0.0 < m.acc <= 0.02 + 1e-9
        assert m.fscore == 1.0

    def test_empty_mesh(self):
        from voxformer.mesh import TriangleMesh

        with pytest.raises(PreconditionError):
            mesh_metrics(TriangleMesh.empty(), sphere_mesh())

    def test_report_serialisation(self):
        m = MetricsReport(acc=0.1, comp=0.2, fscore=0.5, threshold=0.05)
        assert '"acc": 0.1' in m.to_json()
        assert "fscore: 0.500000" in m.to_text()


class TestDepthMetrics:
    def test_identical(self, rng):
        d = rng.uniform(0.5, 5, size=(10, 12))
        m = depth_metrics(d, d)
        assert (m.abs_rel, m.abs_diff, m.sq_rel, m.rmse) == (0.0, 0.0, 0.0, 0.0)
        assert m.delta == [1.0, 1.0, 1.0]

    def test_oracle(self, rng):
        gt = rng.uniform(0.5, 5, size=(10, 12))
        pred = gt * rng.uniform(0.6, 1.5, size=gt.shape)
        pred[0, :3] = 0.0
        m = depth_metrics(pred, gt)
        ref = oracles.depth_metrics_oracle(pred, gt)
        assert m.abs_rel == pytest.approx(ref["abs_rel"])
        assert m.abs_diff == pytest.approx(ref["abs_diff"])
        assert m.sq_rel == pytest.approx(ref["sq_rel"])
        assert m.rmse == pytest.approx(ref["rmse"])
        assert m.delta == pytest.approx([ref["delta1"], ref["delta2"], ref["delta3"]])

    def test_hand_example(self):
        m = depth_metrics(np.array([1.9, 1.0]), np.array([1.0, 1.0]))
        assert m.abs_rel == pytest.approx(0.45) and m.abs_diff == pytest.approx(0.45)
        assert m.sq_rel == pytest.approx(0.405)
        assert m.rmse == pytest.approx(math.sqrt(0.405))
        assert m.delta == [0.5, 0.5, 1.0]

    def test_no_valid_pixels(self):
        with pytest.raises(PreconditionError):
            depth_metrics(np.zeros(4), np.ones(4))
