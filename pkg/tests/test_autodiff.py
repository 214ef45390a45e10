"""Tensor core: op semantics, backward accumulation, Adam, checkpoints."""

import math

import numpy as np
import pytest

from coroflow import autodiff as ad
from coroflow.checkpoint import load_checkpoint, save_checkpoint
from coroflow.errors import ContractError, DimensionError, ValidationError
from coroflow.gradcheck import check_gradients, numeric_gradient, relative_error


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()


def tensor(rng, *shape, scale=1.0):
    return ad.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


class TestForwardSemantics:
    def test_matmul_identity(self):
        """Identity times identity is identity."""
        eye = ad.Tensor(np.eye(4))
        out = ad.matmul(eye, eye)
        np.testing.assert_array_equal(out.data, np.eye(4))

    def test_matmul_shape_mismatch_names_axis(self):
        with pytest.raises(DimensionError, match="inner axes"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))

    def test_relu_on_negatives(self):
        out = ad.relu(ad.Tensor([-1.0, -0.5, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0, 2.0])

    def test_cross_entropy_uniform_two_class(self):
        """Uniform two-class logits cost ln 2 per position."""
        logits = ad.Tensor(np.zeros((3, 2, 4)))
        labels = np.zeros((3, 4), dtype=np.int64)
        loss = ad.softmax_cross_entropy(logits, labels)
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-12)

    def test_cross_entropy_label_shape_checked(self):
        with pytest.raises(DimensionError):
            ad.softmax_cross_entropy(ad.Tensor(np.zeros((2, 3))), np.zeros((4,), dtype=int))

    def test_conv3d_one_kernel_is_identity(self):
        """A single all-ones 1x1x1 kernel with zero bias reproduces the input."""
        rng = np.random.default_rng(0)
        x = ad.Tensor(rng.standard_normal((1, 1, 3, 3, 3)))
        k = ad.Tensor(np.ones((1, 1, 1, 1, 1)))
        b = ad.Tensor(np.zeros(1))
        out = ad.conv3d(x, k, b, stride=1, pad=0)
        np.testing.assert_allclose(out.data, x.data, rtol=0, atol=0)

    def test_conv3d_even_kernel_rejected(self):
        x = ad.Tensor(np.zeros((1, 1, 4, 4, 4)))
        with pytest.raises(DimensionError, match="odd"):
            ad.conv3d(x, ad.Tensor(np.zeros((1, 1, 2, 2, 2))))

    def test_conv3d_undersized_axis_named(self):
        x = ad.Tensor(np.zeros((1, 1, 1, 5, 5)))
        with pytest.raises(DimensionError, match="depth"):
            ad.conv3d(x, ad.Tensor(np.zeros((1, 1, 3, 3, 3))), pad=0)

    def test_maxpool_blocks(self):
        x = np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2)
        out = ad.maxpool3d(ad.Tensor(x))
        assert out.data.shape == (1, 1, 1, 1, 1)
        assert out.item() == 7.0

    def test_maxpool_odd_axis_rejected(self):
        with pytest.raises(DimensionError, match="even"):
            ad.maxpool3d(ad.Tensor(np.zeros((1, 1, 3, 4, 4))))

    def test_upsample_then_pool_identity_on_constants(self):
        x = ad.Tensor(np.full((1, 2, 2, 2, 2), 3.5))
        out = ad.maxpool3d(ad.upsample3d_nearest(x))
        np.testing.assert_array_equal(out.data, x.data)

    def test_trilinear_sample_at_grid_nodes(self):
        """Sampling exactly at voxel centres returns the stored values."""
        rng = np.random.default_rng(1)
        grid = ad.Tensor(rng.standard_normal((3, 4, 5, 6)))
        coords = np.array([[0, 0, 0], [3, 4, 5], [1, 2, 3]], dtype=np.float64)
        out = ad.trilinear_sample(grid, coords)
        for row, (i, j, k) in zip(out.data, coords.astype(int)):
            np.testing.assert_allclose(row, grid.data[:, i, j, k], atol=1e-12)

    def test_trilinear_sample_midpoint(self):
        grid = ad.Tensor(np.arange(2.0).reshape(1, 2, 1, 1))
        out = ad.trilinear_sample(grid, np.array([[0.5, 0.0, 0.0]]))
        assert out.data[0, 0] == pytest.approx(0.5)

    def test_ops_are_pure(self):
        """Repeating an op on identical inputs gives bit-identical output."""
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 6))
        k = rng.standard_normal((6, 3))
        a = ad.matmul(ad.Tensor(x), ad.Tensor(k)).data
        b = ad.matmul(ad.Tensor(x), ad.Tensor(k)).data
        assert np.array_equal(a, b)


class TestBackward:
    def test_product_rule_with_fanout(self):
        """d/dx of x*x at 3 is 6: gradients from both uses accumulate."""
        x = ad.Tensor(3.0, requires_grad=True)
        y = ad.mul(x, x)
        ad.backward(y)
        assert x.grad == pytest.approx(6.0)

    def test_fanout_sum(self):
        """x used twice in a sum accumulates gradient 2."""
        x = ad.Tensor(1.5, requires_grad=True)
        ad.backward(ad.add(x, x))
        assert x.grad == pytest.approx(2.0)

    def test_unreached_parameter_keeps_no_gradient(self):
        """A parameter with no path to the loss is left untouched."""
        x = ad.Tensor(2.0, requires_grad=True)
        other = ad.Tensor(5.0, requires_grad=True)
        _ = ad.mul(other, other)  # recorded but not part of the loss
        loss = ad.mul(x, x)
        ad.backward(loss)
        assert other.grad is None

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            ad.backward(ad.Tensor(np.zeros(3), requires_grad=True))

    def test_no_grad_suppresses_recording(self):
        x = ad.Tensor(1.0, requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert not y.requires_grad
        assert len(ad.tape()) == 0

    def test_nan_detection(self):
        t = ad.Tensor([1.0, np.nan])
        assert t.has_bad_values()
        assert not ad.Tensor([1.0, 2.0]).has_bad_values()


class TestSegmentMean:
    def test_groups_average_their_rows(self):
        rows = ad.Tensor(np.array([[2.0, 0.0], [4.0, 6.0], [1.0, 1.0]]))
        out = ad.segment_mean(rows, [1, 1, 0], 2)
        assert np.allclose(out.data, [[1.0, 1.0], [3.0, 3.0]])

    def test_empty_segment_is_zero(self):
        rows = ad.Tensor(np.ones((2, 3)))
        out = ad.segment_mean(rows, [0, 2], 4)
        assert np.array_equal(out.data[1], np.zeros(3))
        assert np.array_equal(out.data[3], np.zeros(3))

    def test_gradient_splits_evenly(self):
        rows = ad.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        out = ad.segment_mean(rows, [0, 0, 1], 2)
        ad.backward(out.sum())
        assert np.allclose(rows.grad, [[0.5, 0.5], [0.5, 0.5], [1.0, 1.0]])

    def test_bad_ids_rejected(self):
        rows = ad.Tensor(np.ones((2, 2)))
        with pytest.raises(DimensionError):
            ad.segment_mean(rows, [0, 5], 3)
        with pytest.raises(DimensionError):
            ad.segment_mean(rows, [0], 3)


def _shape_cases(rng):
    """Random small operand builders for every differentiable primitive."""
    n = int(rng.integers(2, 5))
    m = int(rng.integers(2, 5))
    k = int(rng.integers(2, 5))
    vol = (1, int(rng.integers(1, 3)), 4, 4, 4)
    return {
        "add": ([(n, m), (n, m)], lambda a, b: ad.add(a, b).sum()),
        "add_broadcast": ([(n, m), (m,)], lambda a, b: ad.add(a, b).sum()),
        "sub": ([(n, m), (n, m)], lambda a, b: ad.sub(a, b).sum()),
        "mul": ([(n, m), (n, m)], lambda a, b: ad.mul(a, b).sum()),
        "div": ([(n, m), (n, m)], lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0)).sum()),
        "neg": ([(n, m)], lambda a: ad.neg(a).sum()),
        "relu": ([(n, m)], lambda a: ad.relu(a).sum()),
        "sigmoid": ([(n, m)], lambda a: ad.sigmoid(a).sum()),
        "square": ([(n,)], lambda a: ad.square(a).sum()),
        "matmul": ([(n, k), (k, m)], lambda a, b: ad.matmul(a, b).sum()),
        "concat": ([(n, m), (k, m)], lambda a, b: ad.square(ad.concat([a, b], axis=0)).sum()),
        "reshape": ([(n, m)], lambda a: ad.square(a.reshape(m * n)).sum()),
        "index_select": ([(5, m)], lambda a: ad.index_select(a, [0, 2, 2, 4]).sum()),
        "segment_mean": ([(5, m)],
                         lambda a: ad.square(ad.segment_mean(a, [0, 2, 1, 2, 0], 4)).sum()),
        "max": ([(n, m)], lambda a: a.max(axis=1).sum()),
        "mean": ([(n, m)], lambda a: a.mean()),
        "softmax": ([(n, m)], lambda a: ad.square(ad.softmax(a, axis=1)).sum()),
        "maxpool3d": ([vol], lambda a: ad.square(ad.maxpool3d(a)).sum()),
        "upsample3d_nearest": ([vol], lambda a: ad.square(ad.upsample3d_nearest(a)).sum()),
    }


class TestGradientsMatchFiniteDifferences:
    @pytest.mark.parametrize("seed", range(20))
    def test_primitive_sweep(self, seed):
        """Every primitive's analytic gradient matches central differences."""
        rng = np.random.default_rng(seed)
        for name, (shapes, build) in _shape_cases(rng).items():
            tensors = [tensor(rng, *s) for s in shapes]
            try:
                check_gradients(build, tensors)
            except AssertionError as exc:
                raise AssertionError(f"{name}: {exc}") from exc

    @pytest.mark.parametrize("seed", range(5))
    def test_cross_entropy_gradient(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 3, size=(2, 4))
        logits = tensor(rng, 2, 3, 4)
        check_gradients(lambda t: ad.softmax_cross_entropy(t, labels), [logits])

    @pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
    def test_conv3d_gradient(self, stride, pad):
        rng = np.random.default_rng(7)
        x = tensor(rng, 2, 2, 5, 5, 5)
        k = tensor(rng, 3, 2, 3, 3, 3, scale=0.5)
        b = tensor(rng, 3)
        check_gradients(
            lambda xx, kk, bb: ad.square(ad.conv3d(xx, kk, bb, stride=stride, pad=pad)).sum(),
            [x, k, b])

    def test_trilinear_gradient_wrt_grid(self):
        rng = np.random.default_rng(11)
        grid = tensor(rng, 2, 3, 4, 3)
        coords = rng.uniform(0.0, 2.0, size=(6, 3))
        check_gradients(lambda g: ad.square(ad.trilinear_sample(g, coords)).sum(), [grid])

    def test_two_layer_mlp_all_parameters(self):
        """Composite graph: every parameter gradient matches finite differences."""
        rng = np.random.default_rng(3)
        x = ad.Tensor(rng.standard_normal((4, 5)))
        w1 = tensor(rng, 5, 6)
        b1 = tensor(rng, 6)
        w2 = tensor(rng, 6, 2)
        b2 = tensor(rng, 2)

        def build(w1, b1, w2, b2):
            h = ad.relu(ad.add(ad.matmul(x, w1), b1))
            return ad.square(ad.add(ad.matmul(h, w2), b2)).sum()

        check_gradients(build, [w1, b1, w2, b2])

    def test_core_op_set_lists_primitives(self):
        ops = ad.core_op_set()
        assert {"matmul", "conv3d", "softmax_cross_entropy", "trilinear_sample"} <= set(ops)
        assert all(callable(f) for f in ops.values())


class TestAdam:
    def test_first_step_size_is_lr(self):
        """With gradient 1 the first bias-corrected step is almost exactly lr."""
        p = np.array([0.0])
        state = ad.adam_step([p], [np.array([1.0])], {}, lr=1e-3)
        assert p[0] == pytest.approx(-1e-3, rel=1e-6)
        assert state["t"] == 1

    def test_descends_quadratic(self):
        """200 steps on f(x) = x^2 strictly reduce the loss."""
        x = ad.Tensor(np.array([3.0]), requires_grad=True)
        opt = ad.Adam({"x": x}, lr=0.05)
        losses = []
        for _ in range(200):
            ad.clear_tape()
            opt.zero_grad()
            loss = ad.square(x).sum()
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        assert losses[-1] < 1e-3
        assert losses[-1] < losses[0]

    def test_deterministic_across_runs(self):
        def run():
            x = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
            opt = ad.Adam({"x": x}, lr=1e-2)
            for _ in range(50):
                ad.clear_tape()
                opt.zero_grad()
                ad.backward(ad.square(x).sum())
                opt.step()
            return x.data.copy()

        assert np.array_equal(run(), run())


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        arrays = {
            "net.w": rng.standard_normal((3, 4)),
            "net.b": rng.standard_normal(4).astype(np.float32),
        }
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, arrays, meta={"iteration": 17})
        loaded, meta = load_checkpoint(path)
        assert meta["iteration"] == 17
        assert set(loaded) == set(arrays)
        for name in arrays:
            assert loaded[name].dtype == arrays[name].dtype
            assert np.array_equal(loaded[name], arrays[name])

    def test_identical_contents_identical_bytes(self, tmp_path):
        arrays = {"a": np.arange(6.0).reshape(2, 3)}
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(p1, arrays)
        save_checkpoint(p2, dict(arrays))
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"\x08\x00\x00\x00\x00\x00\x00\x00" + b'{"x":1}!')
        with pytest.raises((ValidationError, ValueError)):
            load_checkpoint(path)

    def test_rejects_integer_arrays(self, tmp_path):
        with pytest.raises(ValidationError):
            save_checkpoint(tmp_path / "x.bin", {"a": np.arange(3)})


class TestGradcheckHarness:
    def test_numeric_gradient_of_quadratic(self):
        x = np.array([1.0, 2.0, 3.0])
        g = numeric_gradient(lambda: float(np.sum(x ** 2)), x)
        np.testing.assert_allclose(g, 2 * x, rtol=1e-7)

    def test_relative_error_ignores_unprobed_entries(self):
        a = np.array([1.0, 50.0])
        n = np.array([1.0, np.nan])
        assert relative_error(a, n) == 0.0
