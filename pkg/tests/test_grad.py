import numpy as np
import pytest
import torch

from conftest import make_volume
from voxformer.attention import AttentionBlockParams, GlobalContextParams, global_attention, global_context, sparse_window_attention
from voxformer.config import set_deterministic
from voxformer.fusion import BackProjection, ToyFeatureExtractor, WeightNet, fuse
from voxformer.grad import Adam, adam_step, backward, finite_diff_check, rel_error, sgd_step
from voxformer.pipeline import DilateAttentionParams, HeadParams, Reconstructor, dilate_attention, occupancy_head, tsdf_head
from voxformer.supervision import bce, occupancy_gt, projection_weight_loss, tsdf_loss
from voxformer.train import scene_losses
from voxformer.voxel import OccupancyVolume, SparseVolume

TOL = 1e-4


def projection(w, vol):
    return (vol.feats * w[: len(vol), : vol.channels]).sum()


class TestBackward:
    def test_identity(self, f64):
        x = torch.tensor(3.0, requires_grad=True)
        assert float(backward(x, {"x": x})["x"]) == 1.0

    def test_tanh_at_zero(self, f64):
        x = torch.tensor(0.0, requires_grad=True)
        assert float(backward(torch.tanh(x), {"x": x})["x"]) == 1.0

    def test_non_scalar(self):
        x = torch.ones(2, requires_grad=True)
        with pytest.raises(ValueError):
            backward(x * 2, {"x": x})

    def test_unused_parameter_gets_zero(self):
        x = torch.ones(2, requires_grad=True)
        y = torch.ones(3, requires_grad=True)
        g = backward((x * 2).sum(), {"x": x, "y": y})
        assert torch.equal(g["y"], torch.zeros(3))

    def test_linearity(self, rng, f64):
        x = torch.from_numpy(rng.normal(size=5)).requires_grad_()
        f = lambda: torch.sin(x).sum()
        g = lambda: (x**3).sum()
        both = backward(f() + g(), {"x": x})["x"]
        torch.testing.assert_close(both, backward(f(), {"x": x})["x"] + backward(g(), {"x": x})["x"])


class TestFiniteDiff:
    def test_rel_error_floor(self):
        assert rel_error(0.0, 0.0) == 0.0
        assert rel_error(1e-9, 0.0) == pytest.approx(0.1)
        assert rel_error(2.0, 1.0) == 0.5

    def test_quadratic(self, rng, f64):
        a = torch.from_numpy(rng.normal(size=(4, 4)))
        x = torch.from_numpy(rng.normal(size=4)).requires_grad_()
        report = finite_diff_check(lambda: x @ a @ x, {"x": x})
        assert report.passed and report.max_rel_error < 1e-8

    def test_softmax_jacobian(self, rng, f64):
        x = torch.from_numpy(rng.normal(size=6)).requires_grad_()
        c = torch.from_numpy(rng.normal(size=6))
        g = backward((torch.softmax(x, 0) * c).sum(), {"x": x})["x"].numpy()
        s = torch.softmax(x, 0).detach().numpy()
        jac = np.diag(s) - np.outer(s, s)
        np.testing.assert_allclose(g, jac @ c.numpy(), atol=1e-14)
        assert finite_diff_check(lambda: (torch.softmax(x, 0) * c).sum(), {"x": x}).passed

    def test_detects_wrong_gradient(self, f64):
        x = torch.tensor([0.7], requires_grad=True)

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, t):
                return t**2

            @staticmethod
            def backward(ctx, g):
                return g * 3.0

        report = finite_diff_check(lambda: Wrong.apply(x).sum(), {"x": x})
        assert not report.passed

    def test_samples_large_tensors(self, f64):
        x = torch.zeros(500, requires_grad=True, dtype=torch.float64)
        report = finite_diff_check(lambda: (x**2).sum(), {"x": x}, samples=64)
        assert report.params[0].checked == 64
        assert '"passed": true' in report.to_json()

    def test_params_restored(self, rng, f64):
        x = torch.from_numpy(rng.normal(size=10)).requires_grad_()
        before = x.detach().clone()
        finite_diff_check(lambda: (x**3).sum(), {"x": x})
        assert torch.equal(x.detach(), before)


class TestBlockGradients:
    def _check(self, loss, module, **kw):
        report = finite_diff_check(loss, dict(module.named_parameters()), **kw)
        assert report.max_rel_error <= TOL, [(p.name, p.max_rel_error) for p in report.params if p.max_rel_error > TOL]

    def test_window_attention(self, rng, gen, f64):
        params = AttentionBlockParams(4, 2, generator=gen)
        vol = make_volume(rng, (5, 5, 5), 40, 4)
        w = torch.from_numpy(rng.normal(size=(40, 4)))
        self._check(lambda: projection(w, sparse_window_attention(vol, params, 3)), params)

    def test_window_attention_input_features(self, rng, gen, f64):
        params = AttentionBlockParams(4, 2, generator=gen)
        vol = make_volume(rng, (4, 4, 4), 20, 4)
        feats = vol.feats.clone().requires_grad_()
        w = torch.from_numpy(rng.normal(size=(20, 4)))
        report = finite_diff_check(lambda: projection(w, sparse_window_attention(vol.with_feats(feats), params, 2)), {"f": feats})
        assert report.passed

    def test_global_attention(self, rng, gen, f64):
        params = AttentionBlockParams(4, 2, generator=gen)
        vol = make_volume(rng, (4, 4, 4), 25, 4)
        w = torch.from_numpy(rng.normal(size=(25, 4)))
        self._check(lambda: projection(w, global_attention(vol, params)), params)

    def test_global_context(self, rng, gen, f64):
        params = GlobalContextParams(4, gen)
        vol = make_volume(rng, (6, 5, 4), 40, 4)
        w = torch.from_numpy(rng.normal(size=(40, 4)))
        self._check(lambda: projection(w, global_context(vol, params)), params)

    def test_dilate_attention(self, rng, gen, f64):
        params = DilateAttentionParams(4, 4, 2, gen)
        vol = make_volume(rng, (5, 5, 5), 12, 4)
        w = torch.from_numpy(rng.normal(size=(125, 4)))
        self._check(lambda: projection(w, dilate_attention(vol, params, 3)), params)

    def test_heads(self, rng, gen, f64):
        head = HeadParams(4, gen)
        vol = make_volume(rng, (5, 5, 5), 40, 4)
        w = torch.from_numpy(rng.normal(size=(40, 1)))
        self._check(lambda: projection(w, occupancy_head(vol, head)) + projection(w, tsdf_head(vol, head)), head)

    def test_weight_net_fusion(self, rng, gen, f64):
        net = WeightNet(3, gen)
        coords = torch.from_numpy(np.argwhere(np.ones((3, 3, 3), dtype=bool)))
        projs = []
        for vid in range(3):
            seen = torch.from_numpy(rng.random(27) < 0.7)
            vol = SparseVolume(coords, torch.from_numpy(rng.normal(size=(27, 3))), (3, 3, 3))
            projs.append(BackProjection(vol, seen, torch.ones(27), torch.zeros(27, 2), vid))
        w = torch.from_numpy(rng.normal(size=(27, 6)))
        self._check(lambda: projection(w, fuse(projs, net).volume), net)

    def test_toy_extractor(self, rng, gen, f64):
        ext = ToyFeatureExtractor(2, gen).double()
        image = torch.from_numpy(rng.random((32, 32, 3)))
        w = [torch.from_numpy(rng.normal(size=m)) for m in ((8, 8, 2), (4, 4, 2), (2, 2, 2))]
        self._check(lambda: sum((m * c).sum() for m, c in zip(ext(image), w)), ext, samples=16)

    def test_losses(self, rng, f64):
        s = torch.from_numpy(rng.uniform(-0.9, 0.9, size=30)).requires_grad_()
        g = torch.from_numpy(rng.uniform(-1, 1, size=30))
        # keep predictions away from the sign-flip kink at zero
        s.data[s.data.abs() < 0.05] = 0.3
        assert finite_diff_check(lambda: tsdf_loss(s, g), {"s": s}).passed
        assert finite_diff_check(lambda: tsdf_loss(s, g, mode="log1p"), {"s": s}).passed
        p = torch.from_numpy(rng.uniform(0.05, 0.95, size=30)).requires_grad_()
        t = torch.from_numpy((rng.random(30) < 0.5).astype(float))
        assert finite_diff_check(lambda: bce(p, t), {"p": p}).passed
        logits = torch.from_numpy(rng.normal(size=10)).requires_grad_()
        uv = torch.from_numpy(rng.uniform(0, 7, size=(10, 2)))
        z = torch.from_numpy(rng.uniform(1, 3, size=10))
        depth = torch.from_numpy(rng.uniform(1, 3, size=(8, 8)))
        assert finite_diff_check(lambda: projection_weight_loss(logits, uv, z, depth, 0.3), {"l": logits}).passed


class TestOptimizers:
    def test_sgd(self):
        x = torch.tensor([1.0, -2.0])
        sgd_step({"x": x}, {"x": torch.tensor([1.0, 1.0])}, lr=0.5)
        assert x.tolist() == [0.5, -2.5]

    def test_adam_zero_gradient_keeps_params(self):
        x = torch.tensor([1.0, 2.0])
        adam_step({"x": x}, {"x": torch.zeros(2)})
        assert x.tolist() == [1.0, 2.0]

    def test_adam_first_step_size(self):
        x = torch.tensor([1.0], dtype=torch.float64)
        adam_step({"x": x}, {"x": torch.tensor([2.0], dtype=torch.float64)}, lr=0.1)
        # bias-corrected first step moves by lr * g / |g|
        assert float(x) == pytest.approx(0.9, abs=1e-7)

    def test_adam_decreases_square(self):
        x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
        adam_step({"x": x}, backward((x**2).sum(), {"x": x}), lr=1e-4)
        assert float((x.detach() ** 2).sum()) < 1.0

    def test_sgd_converges_on_bowl_in_100_steps(self, rng, f64):
        a = torch.from_numpy(np.diag([1.0, 4.0, 0.5]))
        x = torch.from_numpy(rng.normal(size=3) * 3).requires_grad_()
        for _ in range(100):
            sgd_step({"x": x}, backward(x @ a @ x, {"x": x}), lr=0.1)
        assert float(x.detach() @ a @ x.detach()) < 1e-6

    def test_adam_converges_on_bowl(self, rng, f64):
        a = torch.from_numpy(np.diag([1.0, 4.0, 0.5]))
        x = torch.from_numpy(rng.normal(size=3)).requires_grad_()
        opt = Adam({"x": x}, lr=0.1)
        f = lambda: float(x.detach() @ a @ x.detach())
        start = f()
        for _ in range(100):
            opt.step(backward(x @ a @ x, {"x": x}))
        # a fixed step size leaves an oscillation of order lr; the decay removes it
        assert f() < 1e-2 * start
        for _ in range(1900):
            opt.step(backward(x @ a @ x, {"x": x}))
        assert f() < 1e-6

    def test_default_hyperparameters(self):
        opt = Adam({"x": torch.zeros(1)})
        assert (opt.lr, opt.beta1, opt.beta2) == (1e-4, 0.9, 0.999)


class TestDeterminism:
    def test_repeat_backward_bit_identical(self, rng, gen):
        params = AttentionBlockParams(8, 2, generator=gen)
        vol = make_volume(rng, (8, 8, 8), 150, 8, torch.float32)
        threads = torch.get_num_threads()
        set_deterministic(True)
        try:
            loss = lambda: sparse_window_attention(vol, params, 3).feats.square().sum()
            named = dict(params.named_parameters())
            a, b = backward(loss(), named), backward(loss(), named)
        finally:
            set_deterministic(False)
            torch.set_num_threads(threads)
        assert all(torch.equal(a[k], b[k]) for k in a)


@pytest.mark.slow
class TestEndToEnd:
    def test_micro_scene_finite_differences(self, f64):
        from test_pipeline import micro_config, micro_scene

        # 192 px views, so the coarse and medium maps see the sphere and voxel features differ
        data = micro_scene(image_size=192)
        cfg = micro_config()
        model = Reconstructor(cfg).double()
        gen = torch.Generator().manual_seed(5)
        with torch.no_grad():
            # zero-initialized biases put LayerNorm at its zero-variance point on newly dilated voxels
            for name, p in model.named_parameters():
                if name.endswith("bias"):
                    p.copy_(0.5 * torch.randn(p.shape, generator=gen))
            # predicted occupancy stays far below 0.5, so the hints alone pick the active sets
            for level in ("2", "1"):
                model.levels[level].head.bias.fill_(-8.0)
        coarse = data.grids[2].all_coords()
        medium = torch.tensor([[2, 2, 1], [2, 3, 1], [3, 2, 1]])
        hint = {
            2: OccupancyVolume(coarse, torch.ones(len(coarse), 1), data.grids[2].dims, level=2, voxel_size=0.16),
            1: OccupancyVolume(medium, torch.ones(3, 1), data.grids[1].dims, level=1, voxel_size=0.08),
        }
        gt_occ = {l: occupancy_gt(data.gt_tsdf, l) for l in (0, 1, 2)}
        forward = lambda: model(data.views, data.grids, occupancy_hint=hint)
        out = forward()
        assert len(out.tsdf) <= 200
        assert max(float(o.feats.max()) for o in out.occupancy.values()) < 0.1
        loss = lambda: scene_losses(forward(), data, cfg, gt_occ)[0]
        report = finite_diff_check(loss, dict(model.named_parameters()), samples=4)
        worst = sorted(((p.max_rel_error, p.name) for p in report.params), reverse=True)[:3]
        assert report.max_rel_error <= TOL, worst
