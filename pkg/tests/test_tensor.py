import numpy as np
import pytest

from speechmotion import tensor as T
from speechmotion.errors import NumericalError


def rng():
    return T.make_rng(1234)


class TestForward:
    def test_matmul_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.allclose(T.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_matmul_1x1(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        assert out.data.shape == (1, 1)
        assert out.data[0, 0] == pytest.approx(11.0)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_layer_norm_constant_input(self):
        x = T.Tensor(np.full((3, 5), 2.7))
        out = T.layer_norm(x, T.Tensor(np.ones(5)), T.Tensor(np.zeros(5)), eps=1e-5)
        assert np.allclose(out.data, 0.0)

    def test_layer_norm_two_point(self):
        out = T.layer_norm(T.Tensor([[1.0, 3.0]]), T.Tensor(np.ones(2)),
                           T.Tensor(np.zeros(2)), eps=0.0)
        assert np.allclose(out.data, [[-1.0, 1.0]])

    def test_layer_norm_statistics(self):
        x = T.Tensor(rng().standard_normal((16, 32)), dtype=np.float64)
        out = T.layer_norm(x, T.Tensor(np.ones(32), dtype=np.float64),
                           T.Tensor(np.zeros(32), dtype=np.float64), eps=1e-5).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4

    def test_softmax_uniform(self):
        out = T.softmax(T.Tensor([3.3, 3.3, 3.3, 3.3]))
        assert np.allclose(out.data, 0.25)

    def test_silu_zero(self):
        assert T.silu(T.Tensor([0.0])).data[0] == 0.0

    def test_concat_preserves_frames(self):
        a = T.Tensor(np.zeros((7, 3)))
        b = T.Tensor(np.zeros((7, 2)))
        assert T.concat_channels([a, b]).data.shape == (7, 5)
        with pytest.raises(ValueError):
            T.concat_channels([a, T.Tensor(np.zeros((6, 2)))])

    def test_slice_frames_contiguous(self):
        x = T.Tensor(np.arange(24, dtype=np.float32).reshape(6, 4))
        out = T.slice_frames(x, 2, 5)
        assert np.array_equal(out.data, x.data[2:5])
        assert out.data.flags["C_CONTIGUOUS"]

    def test_forward_deterministic(self):
        x = rng().standard_normal((5, 5))
        a = T.silu(T.Tensor(x)).data
        b = T.silu(T.Tensor(x)).data
        assert np.array_equal(a, b)


def _fd_case(name, fn, shapes, seed=0):
    g = T.make_rng(seed)
    arrays = [g.standard_normal(s) for s in shapes]
    err = T.gradient_check(fn, arrays)
    assert err < 1e-4, f"{name}: rel err {err:.2e}"


class TestGradients:
    """Every differentiable op against a central finite-difference oracle."""

    def test_matmul(self):
        _fd_case("matmul", lambda a, b: T.mean(T.matmul(a, b)), [(4, 5), (5, 3)])

    def test_matmul_batched(self):
        _fd_case("matmul3", lambda a, b: T.mean(T.matmul(a, b)), [(2, 4, 5), (5, 3)])
        _fd_case("matmul4", lambda a, b: T.mean(T.matmul(a, b)), [(2, 3, 4, 5), (2, 3, 5, 6)])

    def test_add_mul_sub(self):
        _fd_case("add", lambda a, b: T.mean(T.mul(T.add(a, b), a)), [(3, 4), (3, 4)])
        _fd_case("sub", lambda a, b: T.mse(T.sub(a, b), T.mul(a, b)), [(3, 4), (3, 4)])
        _fd_case("bcast", lambda a, b: T.mean(T.mul(a, b)), [(3, 4), (4,)])

    def test_mse(self):
        _fd_case("mse", T.mse, [(3, 3), (3, 3)])

    def test_layer_norm(self):
        _fd_case("layer_norm",
                 lambda x, g, b: T.mean(T.mul(T.layer_norm(x, g, b, 1e-5), x)),
                 [(6, 8), (8,), (8,)])

    def test_adain(self):
        _fd_case("adain",
                 lambda x, s, b: T.mean(T.mul(T.adain(x, s, b, 1e-5), x)),
                 [(2, 6, 4), (2, 1, 4), (2, 1, 4)])

    def test_silu(self):
        _fd_case("silu", lambda x: T.mean(T.silu(x)), [(5, 5)])

    def test_softmax(self):
        _fd_case("softmax", lambda x: T.mean(T.mul(T.softmax(x, -1), x)), [(4, 6)])
        _fd_case("softmax_seq", lambda x: T.mean(T.mul(T.softmax(x, -2), x)), [(4, 6)])

    def test_huber(self):
        _fd_case("huber", lambda a, b: T.huber(a, b, 0.7), [(4, 4), (4, 4)])

    def test_slices_and_concat(self):
        _fd_case("slice_frames",
                 lambda x: T.mse(T.slice_frames(x, 1, 4), T.slice_frames(x, 0, 3)), [(5, 3)])
        _fd_case("slice_channels",
                 lambda x: T.mean(T.mul(T.slice_channels(x, 1, 3), T.slice_channels(x, 2, 4))),
                 [(4, 5)])
        _fd_case("concat",
                 lambda a, b: T.mean(T.mul(T.concat_channels([a, b]),
                                           T.concat_channels([b, a]))),
                 [(4, 3), (4, 3)])

    def test_reshape_transpose(self):
        _fd_case("reshape", lambda x: T.mean(T.mul(T.reshape(x, (2, 6)),
                                                   T.reshape(x, (2, 6)))), [(3, 4)])
        _fd_case("transpose", lambda x: T.mean(T.matmul(x, T.transpose_last2(x))), [(3, 4)])

    def test_mean_frames_repeat_unfold(self):
        _fd_case("mean_frames", lambda x: T.mean(T.mul(T.mean_frames(x),
                                                       T.mean_frames(x))), [(2, 5, 3)])
        _fd_case("repeat", lambda x: T.mean(T.mul(T.repeat_frames(x, 2),
                                                  T.repeat_frames(x, 2))), [(4, 3)])
        _fd_case("unfold", lambda x: T.mean(T.mul(T.unfold_frames(x, 4, 2, 1),
                                                  T.unfold_frames(x, 4, 2, 1))), [(9, 3)])

    def test_embedding(self):
        ids = np.array([0, 2, 2, 1])
        _fd_case("embedding",
                 lambda t: T.mean(T.mul(T.embedding(t, ids), T.embedding(t, ids))),
                 [(3, 4)])

    def test_composite_chain_matches_fused_closure(self):
        # chain rule associativity: a 3-op graph vs one hand-derived closure
        g = T.make_rng(7)
        a = g.standard_normal((4, 5))
        b = g.standard_normal((5, 3))

        at = T.Tensor(a, requires_grad=True, dtype=np.float64)
        bt = T.Tensor(b, requires_grad=True, dtype=np.float64)
        out = T.mean(T.silu(T.matmul(at, bt)))
        T.backward(out)

        # fused: d/dA mean(silu(AB)) = (silu'(AB) / size) B^T
        z = a @ b
        s = 1.0 / (1.0 + np.exp(-z))
        dz = s * (1.0 + z * (1.0 - s)) / z.size
        assert np.allclose(at.grad, dz @ b.T, rtol=1e-10, atol=1e-12)
        assert np.allclose(bt.grad, a.T @ dz, rtol=1e-10, atol=1e-12)


class TestGraph:
    def test_topo_order_parents_first(self):
        a = T.Tensor(np.ones((2, 2)), requires_grad=True)
        b = T.silu(a)
        c = T.mul(b, b)
        d = T.mean(T.add(c, b))
        order = T.topo_order(d)
        assert len(order) == len({id(n) for n in order})
        pos = {id(n): i for i, n in enumerate(order)}
        for n in order:
            for p in n._parents:
                assert pos[id(p)] < pos[id(n)]

    def test_backward_accumulates_once_through_shared_node(self):
        # b is used twice; d/da of mean(b*b + b) with a scalar
        a = T.Tensor(np.array([0.5]), requires_grad=True, dtype=np.float64)
        b = T.silu(a)
        out = T.mean(T.add(T.mul(b, b), b))
        T.backward(out)
        s = 1.0 / (1.0 + np.exp(-0.5))
        ds = s * (1.0 + 0.5 * (1.0 - s))
        expect = (2.0 * 0.5 * s + 1.0) * ds
        assert np.allclose(a.grad, expect, rtol=1e-12)

    def test_no_grad_suppresses_graph(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            out = T.silu(a)
        assert out._bwd is None and not out.requires_grad

    def test_detach_cuts_graph(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        out = T.mean(T.detach(T.silu(a)))
        T.backward(out)
        assert a.grad is None


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": T.Tensor(np.array([1.0, -2.0]))}
        st = T.AdamState(p)
        for _ in range(3):
            T.adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, st, lr=0.1)
        assert np.allclose(p["w"].data, [1.0, -2.0])
        assert np.allclose(st.m["w"], 0.0) and np.allclose(st.v["w"], 0.0)

    def test_first_step_magnitude(self):
        # bias correction makes the first step ~= lr for unit gradient
        p = {"w": T.Tensor(np.array([3.0]))}
        st = T.AdamState(p)
        T.adam_step(p, {"w": np.ones(1, dtype=np.float32)}, st, lr=0.1)
        assert p["w"].data[0] == pytest.approx(3.0 - 0.1, abs=1e-6)

    def test_deterministic_runs(self):
        def run():
            g = T.make_rng(42)
            p = {"w": T.Tensor(g.standard_normal(8))}
            st = T.AdamState(p)
            for _ in range(25):
                T.adam_step(p, {"w": g.standard_normal(8).astype(np.float32)}, st, lr=1e-2)
            return p["w"].data.copy()

        assert np.array_equal(run(), run())

    def test_nan_gradient_raises(self):
        p = {"w": T.Tensor(np.zeros(2))}
        st = T.AdamState(p)
        bad = np.array([np.nan, 0.0], dtype=np.float32)
        with pytest.raises(NumericalError):
            T.adam_step(p, {"w": bad}, st, lr=0.1)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        g = T.make_rng(3)
        tensors = {
            "shared.audio.w": g.standard_normal((4, 6)).astype(np.float32),
            "expr.head.b": g.standard_normal(5).astype(np.float32),
            "norm.mean": g.standard_normal(12).astype(np.float32),
        }
        path = tmp_path / "model.ckpt"
        T.save_checkpoint(path, tensors)
        first = path.read_bytes()
        loaded = T.load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert np.array_equal(loaded[k], tensors[k])
        T.save_checkpoint(path, loaded)
        assert path.read_bytes() == first

    def test_bad_magic_rejected(self, tmp_path):
        from speechmotion.errors import DataError

        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(DataError):
            T.load_checkpoint(path)
