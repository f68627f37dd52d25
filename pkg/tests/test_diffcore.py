import numpy as np
import pytest
import torch

from traitnerf import diffcore
from traitnerf.diffcore import ParameterSet, as_tensor, grad_check
from traitnerf.errors import NonFiniteError, RankError, ShapeError


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestForwardOps:
    def test_uniform_softmax(self):
        assert np.allclose(diffcore.softmax(as_tensor([0.0, 0.0, 0.0])).numpy(), [1 / 3] * 3, atol=1e-15)

    def test_softmax_large_logits_stable(self):
        out = diffcore.softmax(as_tensor([1000.0, 1000.0]))
        assert np.allclose(out.numpy(), [0.5, 0.5])

    def test_exp_at_zero(self):
        x = as_tensor(0.0, requires_grad=True)
        y = torch.exp(x)
        diffcore.backward(y)
        assert y.item() == 1.0 and x.grad.item() == 1.0

    def test_matmul_matches_triple_loop(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
        assert np.max(np.abs(diffcore.matmul(as_tensor(a), as_tensor(b)).numpy() - naive_matmul(a, b))) < 1e-15

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            diffcore.matmul(as_tensor(np.ones((2, 3))), as_tensor(np.ones((2, 2))))

    def test_recorded_forward_equals_plain(self, rng):
        w = rng.standard_normal((4, 3))
        x = rng.standard_normal(3)
        plain = np.exp(w @ x - np.max(w @ x))
        plain = plain / plain.sum()
        recorded = diffcore.softmax(diffcore.matmul(as_tensor(w, requires_grad=True), as_tensor(x)), dim=0)
        assert np.allclose(recorded.detach().numpy(), plain, atol=1e-16, rtol=0)


class TestBackward:
    def test_square(self):
        x = as_tensor(3.0, requires_grad=True)
        diffcore.backward(x * x)
        assert x.grad.item() == 6.0

    def test_product(self):
        x, y = as_tensor(2.0, requires_grad=True), as_tensor(5.0, requires_grad=True)
        diffcore.backward(x * y)
        assert (x.grad.item(), y.grad.item()) == (5.0, 2.0)

    def test_non_scalar_rejected(self):
        x = as_tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(RankError):
            diffcore.backward(x * 2)

    def test_unused_parameter_gets_zero_gradient(self):
        ps = ParameterSet({"a": torch.ones(2, dtype=torch.float64), "b": torch.ones(3, dtype=torch.float64)})
        diffcore.backward((ps["a"] ** 2).sum())
        grads = ps.gradients()
        assert np.array_equal(grads["b"], np.zeros(3))
        assert np.array_equal(grads["a"], [2.0, 2.0])


class TestGradCheck:
    def test_linear_function_exact(self, rng):
        ps = ParameterSet({"w": torch.tensor(rng.standard_normal(5))})
        c = as_tensor(rng.standard_normal(5))
        for step in (1e-2, 1e-5, 1.0):
            assert grad_check(lambda: (ps["w"] * c).sum(), ps, step=step) < 1e-10

    def test_softmax_composite(self, rng):
        ps = ParameterSet({"W": torch.tensor(rng.standard_normal((4, 3)))})
        x = as_tensor(rng.standard_normal(3))
        v = as_tensor(rng.standard_normal(4))
        assert grad_check(lambda: (diffcore.softmax(ps["W"] @ x, dim=0) * v).sum(), ps) < 1e-6

    def test_scale_shift_objective(self, rng):
        D = as_tensor(rng.uniform(1, 3, 50))
        D_pse = as_tensor(rng.uniform(5, 7, 50))
        ps = ParameterSet({"s": torch.tensor(0.7, dtype=torch.float64), "t": torch.tensor(1.2, dtype=torch.float64)})
        assert grad_check(lambda: ((ps["s"] * D + ps["t"] - D_pse) ** 2).sum(), ps) < 1e-6

    def test_detects_wrong_gradient(self):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x * x

            @staticmethod
            def backward(ctx, g):
                return g * 0.0

        ps = ParameterSet({"x": torch.tensor([1.5], dtype=torch.float64)})
        assert grad_check(lambda: Wrong.apply(ps["x"]).sum(), ps) == pytest.approx(1.0)  # |0 - 3| / 3

    def test_non_finite_reports_parameter(self):
        ps = ParameterSet({"x": torch.tensor([0.0], dtype=torch.float64),
                           "y": torch.tensor([1.0], dtype=torch.float64)})
        with pytest.raises(NonFiniteError, match="x"):
            grad_check(lambda: torch.log(ps["x"] ** 2 + 1e-6 * ps["y"]).sum() + torch.sqrt(ps["x"]).sum(), ps,
                       step=1e-3)

    def test_max_coords_subset(self, rng):
        ps = ParameterSet({"w": torch.tensor(rng.standard_normal(100))})
        assert grad_check(lambda: (ps["w"] ** 3).sum(), ps, max_coords=5) < 1e-6


class TestGathers:
    def test_bilinear_matches_manual(self, rng):
        img = rng.standard_normal((4, 5, 2))
        uv = np.array([[1.25, 2.5], [0.0, 0.0], [4.0, 3.0], [5.1, 1.0], [-0.1, 1.0]])
        out, valid = diffcore.bilinear_gather(as_tensor(img), uv)
        u, v = 1.25, 2.5
        manual = (img[2, 1] * 0.75 * 0.5 + img[2, 2] * 0.25 * 0.5 + img[3, 1] * 0.75 * 0.5 + img[3, 2] * 0.25 * 0.5)
        assert np.allclose(out[0].numpy(), manual, atol=1e-15)
        assert np.allclose(out[1].numpy(), img[0, 0])
        assert np.allclose(out[2].numpy(), img[3, 4])
        assert valid.tolist() == [True, True, True, False, False]
        assert np.array_equal(out[3].numpy(), [0.0, 0.0])

    def test_trilinear_matches_manual(self, rng):
        vol = rng.standard_normal((3, 4, 5, 2))
        coords = np.array([[1.5, 0.25, 3.75]])  # (u, v, k)
        out, valid = diffcore.trilinear_gather(as_tensor(vol), coords)
        expected = np.zeros(2)
        for dv, wv in ((0, 0.75), (1, 0.25)):
            for du, wu in ((0, 0.5), (1, 0.5)):
                for dk, wk in ((0, 0.25), (1, 0.75)):
                    expected += wv * wu * wk * vol[0 + dv, 1 + du, 3 + dk]
        assert np.allclose(out[0].numpy(), expected, atol=1e-15)
        assert valid.all()

    def test_trilinear_clamps_out_of_range(self, rng):
        vol = rng.standard_normal((3, 4, 5, 1))
        out, valid = diffcore.trilinear_gather(as_tensor(vol), np.array([[10.0, 1.0, 2.0], [np.nan, 0, 0]]))
        assert not valid.any()
        assert np.allclose(out[0].numpy(), vol[1, 3, 2])

    def test_gather_gradient(self, rng):
        ps = ParameterSet({"img": torch.tensor(rng.standard_normal((4, 5, 3)))})
        uv = rng.uniform([0, 0], [4, 3], (20, 2))
        c = as_tensor(rng.standard_normal((20, 3)))
        assert grad_check(lambda: (diffcore.bilinear_gather(ps["img"], uv)[0] * c).sum(), ps) < 1e-8

    def test_sparse_matrix_equals_gather(self, rng):
        table = as_tensor(rng.standard_normal((20, 3)))
        uv = rng.uniform(-1, 5, (30, 2))
        index, weight, _ = diffcore.bilinear_plan(uv, 4, 5)
        dense = diffcore.gather(table, index, weight)
        sparse = torch.sparse.mm(diffcore.gather_matrix(index, weight, 20), table)
        assert np.allclose(dense.numpy(), sparse.numpy(), atol=1e-14)


class TestParameterSet:
    def test_duplicate_names_rejected(self):
        ps = ParameterSet({"a": torch.zeros(1)})
        with pytest.raises(KeyError):
            ps.add("a", torch.zeros(1))

    def test_snapshot_restore_bit_exact(self, rng):
        ps = ParameterSet({"a": torch.tensor(rng.standard_normal((3, 2))), "b": torch.tensor(rng.standard_normal(4))})
        snap = ps.snapshot()
        with torch.no_grad():
            ps["a"].add_(1.0)
        ps.restore(snap)
        assert all(np.array_equal(ps.snapshot()[k], snap[k]) for k in snap)

    def test_iteration_order_is_insertion_order(self):
        ps = ParameterSet([("z", torch.zeros(1)), ("a", torch.zeros(1)), ("m", torch.zeros(1))])
        assert ps.names() == ["z", "a", "m"]


class TestCheckpoint:
    def test_round_trip_with_optimizer(self, tmp_path, rng):
        ps = ParameterSet({"w": torch.tensor(rng.standard_normal((3, 3))), "b": torch.tensor(rng.standard_normal(3))})
        opt = diffcore.make_optimizer(ps)
        for _ in range(3):
            opt.zero_grad()
            diffcore.backward((ps["w"].sum(dim=0) * ps["b"]).sum() ** 2)
            opt.step()
        path = tmp_path / "ck.npz"
        diffcore.save_checkpoint(path, ps, opt, {"step": 3})

        ps2 = ParameterSet({"w": torch.zeros((3, 3), dtype=torch.float64), "b": torch.zeros(3, dtype=torch.float64)})
        opt2 = diffcore.make_optimizer(ps2)
        meta = diffcore.load_checkpoint(path, ps2, opt2)
        assert meta == {"step": 3}
        for name in ("w", "b"):
            assert np.array_equal(ps.snapshot()[name], ps2.snapshot()[name])
        # one more identical step on both keeps them identical
        for p, o in ((ps, opt), (ps2, opt2)):
            o.zero_grad()
            diffcore.backward((p["w"].sum(dim=0) * p["b"]).sum() ** 2)
            o.step()
        for name in ("w", "b"):
            assert np.array_equal(ps.snapshot()[name], ps2.snapshot()[name])

    def test_missing_parameter(self, tmp_path):
        ps = ParameterSet({"w": torch.zeros(2, dtype=torch.float64)})
        diffcore.save_checkpoint(tmp_path / "c.npz", ps)
        other = ParameterSet({"v": torch.zeros(2, dtype=torch.float64)})
        with pytest.raises(KeyError, match="v"):
            diffcore.load_checkpoint(tmp_path / "c.npz", other)

    def test_lr_override_groups(self):
        ps = ParameterSet({"align_scale": torch.zeros(1, dtype=torch.float64),
                           "net.w": torch.zeros(1, dtype=torch.float64)})
        opt = diffcore.make_optimizer(ps, lr=1e-3, lr_overrides={"align_": 1e-1})
        assert sorted(g["lr"] for g in opt.param_groups) == [1e-3, 1e-1]
