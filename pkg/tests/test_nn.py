import numpy as np
import pytest

from frustumseg import nn
from frustumseg.errors import DataError, FormatError, NumericError
from frustumseg.geometry import FrustumIndex, project
from frustumseg.nn import Tensor, grad_check
from frustumseg.scan_io import SensorConfig, synth_scene

RNG = np.random.default_rng(20240811)


def frozen_head(shape):
    """Scalar head with fixed random weights (constant across calls)."""
    w = Tensor(RNG.normal(size=shape))
    return lambda t: nn.sum_all(nn.mul(t, w))


def small_index():
    cfg = SensorConfig(3, 6, 3.0, -25.0)
    cloud = synth_scene(5, 10, cfg)
    return cloud, project(cloud, cfg)


class TestDense:
    def test_identity_weights(self):
        x = Tensor(RNG.normal(size=(4, 3)))
        out = nn.dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_gradcheck(self):
        x = nn.parameter(RNG.normal(size=(3, 4)), "x")
        w = nn.parameter(RNG.normal(size=(4, 5)), "w")
        b = nn.parameter(RNG.normal(size=(5,)), "b")
        head = frozen_head((3, 5))
        rep = grad_check(lambda: head(nn.dense(x, w, b)), {"x": x, "w": w, "b": b},
                         eps=1e-5)
        assert rep.max_rel_err <= 1e-6

    def test_empty_batch(self):
        x = Tensor(np.zeros((0, 4)))
        w = nn.parameter(RNG.normal(size=(4, 5)), "w")
        b = nn.parameter(RNG.normal(size=(5,)), "b")
        out = nn.dense(x, w, b)
        assert out.data.shape == (0, 5)
        nn.sum_all(out).backward()
        np.testing.assert_array_equal(w.grad, np.zeros_like(w.data))
        np.testing.assert_array_equal(b.grad, np.zeros_like(b.data))

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            nn.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))),
                     Tensor(np.zeros(5)))


class TestConv3x3:
    def test_delta_kernel_identity(self):
        x = Tensor(RNG.normal(size=(2, 5, 6)))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = 1.0
        w[1, 1, 1, 1] = 1.0
        out = nn.conv3x3(x, Tensor(w), Tensor(np.zeros(2)), stride=1)
        np.testing.assert_allclose(out.data, x.data)

    def test_ones_kernel_counts_neighbors(self):
        x = Tensor(np.ones((1, 5, 5)))
        out = nn.conv3x3(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.data.shape == (1, 5, 5)
        np.testing.assert_array_equal(out.data[0, 1:4, 1:4], np.full((3, 3), 9.0))
        assert out.data[0, 0, 0] == 4.0  # corner sees a 2x2 patch

    def test_output_dims_ceil(self):
        x = Tensor(RNG.normal(size=(1, 5, 7)))
        w = Tensor(RNG.normal(size=(2, 1, 3, 3)))
        out = nn.conv3x3(x, w, Tensor(np.zeros(2)), stride=2)
        assert out.data.shape == (2, 3, 4)

    def test_gradcheck_stride2(self):
        x = nn.parameter(RNG.normal(size=(2, 4, 4)), "x")
        w = nn.parameter(RNG.normal(size=(3, 2, 3, 3)), "w")
        b = nn.parameter(RNG.normal(size=(3,)), "b")
        head = frozen_head((3, 2, 2))
        rep = grad_check(lambda: head(nn.conv3x3(x, w, b, stride=2)),
                         {"x": x, "w": w, "b": b}, eps=1e-5)
        assert rep.max_rel_err <= 1e-6

    def test_bad_stride(self):
        with pytest.raises(DataError):
            nn.conv3x3(Tensor(np.zeros((1, 4, 4))),
                       Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)),
                       stride=3)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        out = nn.sigmoid(Tensor(np.zeros((2, 2))))
        np.testing.assert_array_equal(out.data, np.full((2, 2), 0.5))

    def test_sigmoid_saturation_is_finite(self):
        out = nn.sigmoid(Tensor(np.array([-1e4, 1e4])))
        np.testing.assert_allclose(out.data, [0.0, 1.0])

    def test_relu_masks_nonpositive(self):
        x = nn.parameter(np.array([[-2.0, 0.0, 3.0]]), "x")
        out = nn.relu(x)
        nn.sum_all(out).backward()
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 3.0]])
        np.testing.assert_array_equal(x.grad, [[0.0, 0.0, 1.0]])

    def test_sigmoid_gradcheck(self):
        x = nn.parameter(RNG.normal(size=(4, 3)), "x")
        head = frozen_head((4, 3))
        rep = grad_check(lambda: head(nn.sigmoid(x)), {"x": x}, eps=1e-5)
        assert rep.max_rel_err <= 1e-7

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(RNG.normal(size=(5, 4)) * 10)
        out = nn.softmax_rows(x)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5))


class TestScatterGather:
    def test_elementwise_max(self):
        index = FrustumIndex(u=np.array([0, 0]), v=np.array([0, 0]),
                             height=1, width=4, members={(0, 0): [0, 1]})
        feats = Tensor(np.array([[1.0, 5.0], [3.0, 2.0]]))
        grid, winners = nn.scatter_max(feats, index)
        np.testing.assert_array_equal(grid.data[:, 0, 0], [3.0, 5.0])
        np.testing.assert_array_equal(winners[:, 0, 0], [1, 0])

    def test_singleton_identity(self):
        cloud, idx = small_index()
        feats = Tensor(RNG.normal(size=(10, 3)))
        grid, winners = nn.scatter_max(feats, idx)
        for (pv, pu), pts in idx.members.items():
            if len(pts) == 1:
                np.testing.assert_array_equal(grid.data[:, pv, pu],
                                              feats.data[pts[0]])

    def test_tie_goes_to_smallest_index(self):
        index = FrustumIndex(u=np.array([0, 0]), v=np.array([0, 0]),
                             height=1, width=4, members={(0, 0): [0, 1]})
        feats = Tensor(np.array([[7.0], [7.0]]))
        _, winners = nn.scatter_max(feats, index)
        assert winners[0, 0, 0] == 0

    def test_backward_routes_to_winners(self):
        index = FrustumIndex(u=np.array([0, 0]), v=np.array([0, 0]),
                             height=1, width=4, members={(0, 0): [0, 1]})
        feats = nn.parameter(np.array([[1.0, 5.0], [3.0, 2.0]]), "f")
        grid, _ = nn.scatter_max(feats, index)
        nn.sum_all(grid).backward()
        np.testing.assert_array_equal(feats.grad, [[0.0, 1.0], [1.0, 0.0]])

    def test_scatter_gradcheck(self):
        cloud, idx = small_index()
        feats = nn.parameter(RNG.normal(size=(10, 4)), "f")
        head = frozen_head((4, 3, 6))
        rep = grad_check(lambda: head(nn.scatter_max(feats, idx)[0]),
                         {"f": feats}, eps=1e-5)
        assert rep.max_rel_err <= 1e-6

    def test_count_mismatch(self):
        _, idx = small_index()
        with pytest.raises(DataError):
            nn.scatter_max(Tensor(np.zeros((7, 2))), idx)

    def test_gather_copies_rows(self):
        _, idx = small_index()
        grid = Tensor(RNG.normal(size=(3, 3, 6)))
        out = nn.gather(grid, idx)
        for i in range(10):
            np.testing.assert_array_equal(out.data[i],
                                          grid.data[:, idx.v[i], idx.u[i]])

    def test_copixel_rows_identical(self):
        _, idx = small_index()
        grid = Tensor(RNG.normal(size=(2, 3, 6)))
        out = nn.gather(grid, idx)
        for pts in idx.members.values():
            for i in pts[1:]:
                np.testing.assert_array_equal(out.data[i], out.data[pts[0]])

    def test_gather_scatter_identity_on_singletons(self):
        cloud, idx = small_index()
        feats = Tensor(RNG.normal(size=(10, 3)))
        grid, _ = nn.scatter_max(feats, idx)
        back = nn.gather(grid, idx)
        for pts in idx.members.values():
            if len(pts) == 1:
                np.testing.assert_array_equal(back.data[pts[0]],
                                              feats.data[pts[0]])

    def test_gathered_value_is_max_over_comembers(self):
        cloud, idx = small_index()
        feats = Tensor(RNG.normal(size=(10, 3)))
        back = nn.gather(nn.scatter_max(feats, idx)[0], idx)
        for pts in idx.members.values():
            expected = feats.data[pts].max(axis=0)
            for i in pts:
                np.testing.assert_array_equal(back.data[i], expected)

    def test_gather_backward_sums_member_grads(self):
        _, idx = small_index()
        grid = nn.parameter(RNG.normal(size=(2, 3, 6)), "g")
        out = nn.gather(grid, idx)
        upstream = RNG.normal(size=(10, 2))
        nn.sum_all(nn.mul(out, Tensor(upstream))).backward()
        for (pv, pu), pts in idx.members.items():
            np.testing.assert_allclose(grid.grad[:, pv, pu],
                                       upstream[pts].sum(axis=0))

    def test_gradient_conservation(self):
        _, idx = small_index()
        grid = nn.parameter(RNG.normal(size=(2, 3, 6)), "g")
        out = nn.gather(grid, idx)
        nn.sum_all(out).backward()
        # scatter-add conserves the total gradient mass
        assert grid.grad.sum() == pytest.approx(out.data.size)

    def test_gather_gradcheck(self):
        _, idx = small_index()
        grid = nn.parameter(RNG.normal(size=(3, 3, 6)), "g")
        head = frozen_head((10, 3))
        rep = grad_check(lambda: head(nn.gather(grid, idx)), {"g": grid}, eps=1e-5)
        assert rep.max_rel_err <= 1e-6


class TestUpsample:
    def test_same_size_identity(self):
        x = Tensor(RNG.normal(size=(2, 3, 4)))
        out = nn.upsample_bilinear(x, 3, 4)
        np.testing.assert_allclose(out.data, x.data)

    def test_constant_preserved(self):
        x = Tensor(np.full((1, 2, 2), 3.25))
        out = nn.upsample_bilinear(x, 5, 7)
        np.testing.assert_allclose(out.data, np.full((1, 5, 7), 3.25))

    def test_gradcheck(self):
        x = nn.parameter(RNG.normal(size=(1, 2, 2)), "x")
        head = frozen_head((1, 4, 4))
        rep = grad_check(lambda: head(nn.upsample_bilinear(x, 4, 4)),
                         {"x": x}, eps=1e-5)
        assert rep.max_rel_err <= 1e-6

    def test_downscale_rejected(self):
        with pytest.raises(DataError):
            nn.upsample_bilinear(Tensor(np.zeros((1, 4, 4))), 2, 4)


class TestGradCheckHarness:
    def test_dense_relu_sum(self):
        x = nn.parameter(RNG.normal(size=(4, 3)), "x")
        w = nn.parameter(RNG.normal(size=(3, 3)), "w")
        b = nn.parameter(RNG.normal(size=(3,)) + 0.5, "b")
        rep = grad_check(lambda: nn.sum_all(nn.relu(nn.dense(x, w, b))),
                         {"x": x, "w": w, "b": b}, eps=1e-5)
        assert rep.max_rel_err < 1e-5

    def test_frozen_parameter_skipped(self):
        x = nn.parameter(RNG.normal(size=(2, 2)), "x")
        frozen = Tensor(RNG.normal(size=(2, 2)))
        rep = grad_check(lambda: nn.sum_all(nn.mul(x, frozen)),
                         {"x": x, "frozen": frozen})
        assert rep.skipped == ["frozen"]
        assert "frozen" not in rep.per_tensor

    def test_planted_bug_detected(self):
        # a backward off by 2x must be flagged: |a-f|/max(|a|,|f|) = 0.5
        def doubled_sum(t):
            def backward():
                t.accumulate(np.full_like(t.data, 2.0 * float(out.grad)))
            out = nn._node(np.float64(t.data.sum()), (t,), backward)
            return out

        x = nn.parameter(RNG.normal(size=(3, 2)), "x")
        rep = grad_check(lambda: doubled_sum(x), {"x": x}, tolerance=1e-4)
        assert not rep.passed
        assert rep.max_rel_err == pytest.approx(0.5, abs=1e-6)

    def test_nonfinite_loss_rejected(self):
        x = nn.parameter(np.array([np.inf]), "x")
        with pytest.raises(NumericError):
            grad_check(lambda: nn.sum_all(x), {"x": x})


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = {
            "layer.weight": nn.parameter(RNG.normal(size=(3, 4)), "layer.weight"),
            "layer.bias": nn.parameter(RNG.normal(size=(4,)), "layer.bias"),
            "scalarish": nn.parameter(RNG.normal(size=()), "scalarish"),
        }
        path = tmp_path / "ck.bin"
        nn.save_checkpoint(params, path)
        assert path.read_bytes()[:4] == b"FRNK"
        state = nn.load_checkpoint(path)
        assert set(state) == set(params)
        for name in params:
            np.testing.assert_array_equal(state[name], params[name].data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "ck.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            nn.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        params = {"w": nn.parameter(RNG.normal(size=(4, 4)), "w")}
        path = tmp_path / "ck.bin"
        nn.save_checkpoint(params, path)
        (tmp_path / "cut.bin").write_bytes(path.read_bytes()[:-9])
        with pytest.raises(FormatError):
            nn.load_checkpoint(tmp_path / "cut.bin")


def test_every_kernel_gradcheck_randomized():
    # nn-core invariant: all kernels within 1e-4 at eps 1e-5 (f64 throughout)
    cloud, idx = small_index()
    for trial in range(3):
        rng = np.random.default_rng(100 + trial)
        checks = []
        x = nn.parameter(rng.normal(size=(rng.integers(2, 6), 4)), "x")
        w = nn.parameter(rng.normal(size=(4, 3)), "w")
        b = nn.parameter(rng.normal(size=(3,)), "b")
        hd = Tensor(rng.normal(size=(x.data.shape[0], 3)))
        checks.append((lambda: nn.sum_all(nn.mul(nn.dense(x, w, b), hd)),
                       {"x": x, "w": w, "b": b}))
        xc = nn.parameter(rng.normal(size=(2, 5, 6)), "xc")
        wc = nn.parameter(rng.normal(size=(2, 2, 3, 3)), "wc")
        bc = nn.parameter(rng.normal(size=(2,)), "bc")
        hc = Tensor(rng.normal(size=(2, 3, 3)))
        checks.append((lambda: nn.sum_all(nn.mul(nn.conv3x3(xc, wc, bc, 2), hc)),
                       {"xc": xc, "wc": wc, "bc": bc}))
        pf = nn.parameter(rng.normal(size=(10, 3)), "pf")
        hs = Tensor(rng.normal(size=(3, 3, 6)))
        checks.append((lambda: nn.sum_all(nn.mul(nn.scatter_max(pf, idx)[0], hs)),
                       {"pf": pf}))
        for fn, tensors in checks:
            rep = grad_check(fn, tensors, eps=1e-5, tolerance=1e-4)
            assert rep.passed, rep.per_tensor
