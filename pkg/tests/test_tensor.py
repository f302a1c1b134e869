import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from letlab import tensor as T
from letlab.errors import NonFiniteError, ShapeError
from letlab.tensor import Tape, Tensor


def param(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


class TestPrimitiveForward:
    def test_rms_norm_constant_row_is_ones(self):
        x = Tensor([[3.0, 3.0, 3.0, 3.0]])
        gain = Tensor(np.ones(4))
        out = T.primitive_forward("rms_norm", [x, gain])
        # off by the 1e-6 epsilon inside the rms only
        np.testing.assert_allclose(out.data, np.ones((1, 4)), rtol=1e-5)

    def test_row_softmax_symmetry(self):
        out = T.primitive_forward("row_softmax", [Tensor([0.0, 0.0])])
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_matmul_identity_rows(self):
        m = np.zeros((2, 3))
        m[0, 0] = 1.0
        m[1, 1] = 1.0
        out = T.primitive_forward("matmul", [Tensor(m), Tensor([1.0, 2.0, 3.0])])
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    def test_matmul_shape_error_names_primitive_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_non_finite_output_identifies_primitive(self):
        with pytest.raises(NonFiniteError, match="log"):
            T.log(Tensor([0.0]))

    def test_unknown_primitive_rejected(self):
        with pytest.raises(ShapeError, match="unknown primitive"):
            T.primitive_forward("conv2d", [Tensor([1.0])])

    def test_concat_roundtrip(self):
        a, b = Tensor(np.ones((2, 2))), Tensor(np.zeros((2, 1)))
        out = T.primitive_forward("concat", [a, b], axis=1)
        assert out.shape == (2, 3)

    def test_gelu_silu_relu_values(self):
        x = Tensor([0.0])
        assert T.relu(x).data[0] == 0.0
        assert T.gelu(x).data[0] == 0.0
        assert T.silu(x).data[0] == 0.0
        # silu(1) = 1 * sigmoid(1)
        np.testing.assert_allclose(T.silu(Tensor([1.0])).data[0],
                                   1.0 / (1.0 + np.exp(-1.0)), rtol=1e-12)


class TestBackward:
    def test_square_gradient(self):
        with Tape():
            x = param(3.0)
            grads = T.backward(T.mul(x, x))
        assert grads[x] == pytest.approx(6.0)

    def test_softmax_cross_entropy_gradient_is_probs_minus_onehot(self):
        rng = np.random.default_rng(0)
        logits_val = rng.standard_normal((4, 5))
        target = rng.integers(0, 5, size=4)
        with Tape():
            logits = param(logits_val)
            logp = T.log_softmax(logits)
            loss = T.scale(T.tsum(T.take_along_last(logp, target)), -1.0)
            grads = T.backward(loss)
        z = logits_val - logits_val.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        onehot = np.eye(5)[target]
        np.testing.assert_allclose(grads[logits], probs - onehot, atol=1e-12)

    def test_matmul_chain_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        a = param(rng.standard_normal((4, 4)))
        b = param(rng.standard_normal((4, 4)))
        c = param(rng.standard_normal((4, 4)))

        def f(ps):
            return T.tsum(T.mul(T.matmul(T.matmul(ps[0], ps[1]), ps[2]),
                                T.matmul(ps[0], ps[2])))

        assert T.grad_check(f, [a, b, c], fd_step=1e-5) < 1e-6

    def test_non_scalar_loss_rejected(self):
        with Tape():
            x = param([1.0, 2.0])
            y = T.mul(x, x)
            with pytest.raises(ShapeError, match="scalar"):
                T.backward(y)

    def test_detached_loss_rejected(self):
        x = param(2.0)  # never recorded on any tape
        with pytest.raises(NonFiniteError, match="tape"):
            T.backward(x)

    def test_unreachable_leaf_gets_zero_gradient(self):
        with Tape():
            x = param([1.0, 2.0])
            y = param([3.0, 4.0])
            loss = T.tsum(T.mul(x, x))
            _ = T.mul(y, y)  # on the tape but not feeding the loss
            grads = T.backward(loss)
        np.testing.assert_array_equal(grads[y], np.zeros(2))

    def test_same_tape_backward_twice_is_bitwise_identical(self):
        rng = np.random.default_rng(1)
        with Tape():
            x = param(rng.standard_normal((3, 3)))
            loss = T.tsum(T.mul(T.row_softmax(x), x))
            g1 = T.backward(loss)
            g2 = T.backward(loss)
        assert np.array_equal(g1[x], g2[x])

    def test_backward_linearity_disjoint_graphs_exact(self):
        rng = np.random.default_rng(2)
        xv, yv = rng.standard_normal(4), rng.standard_normal(4)
        with Tape():
            x, y = param(xv), param(yv)
            la = T.tsum(T.mul(x, x))
            lb = T.tsum(T.silu(y))
            combined = T.backward(T.add(la, lb))
        with Tape():
            x2, y2 = param(xv), param(yv)
            ga = T.backward(T.tsum(T.mul(x2, x2)))
        with Tape():
            x3, y3 = param(xv), param(yv)
            lb2 = T.tsum(T.silu(y3))
            gb = T.backward(lb2)
        assert np.array_equal(combined[x], ga[x2])
        assert np.array_equal(combined[y], gb[y3])

    def test_backward_linearity_shared_graph(self):
        rng = np.random.default_rng(3)
        xv = rng.standard_normal((3, 3))
        with Tape():
            x = param(xv)
            la = T.tsum(T.mul(x, x))
            lb = T.tmean(T.gelu(x))
            g_sum = T.backward(T.add(la, lb))
        with Tape():
            x1 = param(xv)
            g1 = T.backward(T.tsum(T.mul(x1, x1)))
        with Tape():
            x2 = param(xv)
            g2 = T.backward(T.tmean(T.gelu(x2)))
        np.testing.assert_allclose(g_sum[x], g1[x1] + g2[x2], rtol=1e-12, atol=1e-15)

    def test_no_grad_suppresses_recording(self):
        with Tape() as tape:
            x = param([1.0])
            with T.no_grad():
                _ = T.mul(x, x)
            assert tape.num_records == 0


class TestGradCheck:
    def test_linear_model_squared_error(self):
        rng = np.random.default_rng(0)
        w = param(rng.standard_normal((3, 2)))
        x = Tensor(rng.standard_normal((5, 3)))
        y = Tensor(rng.standard_normal((5, 2)))

        def f(ps):
            err = T.sub(T.matmul(x, ps[0]), y)
            return T.tmean(T.mul(err, err))

        assert T.grad_check(f, [w], fd_step=1e-5) < 1e-7

    def test_constant_function_zero_error(self):
        x = param([1.0, 2.0])

        def f(ps):
            return T.tsum(T.mul(ps[0], Tensor([0.0, 0.0])))

        assert T.grad_check(f, [x]) == 0.0

    def test_non_scalar_function_rejected(self):
        x = param([1.0, 2.0])
        with pytest.raises(ShapeError):
            T.grad_check(lambda ps: T.mul(ps[0], ps[0]), [x])


@pytest.mark.parametrize("seed", range(20))
def test_every_primitive_matches_finite_differences(seed):
    """Spec invariant: autodiff vs central differences under 1e-5, 20 seeds."""
    rng = np.random.default_rng(seed)

    def away(shape):
        return rng.uniform(0.2, 1.5, shape) * np.where(rng.random(shape) < 0.5, -1, 1)

    cases = {
        "matmul": ([param(rng.standard_normal((3, 4))),
                    param(rng.standard_normal((4, 2)))],
                   lambda ps: T.tsum(T.matmul(*ps))),
        "add": ([param(rng.standard_normal((2, 3))),
                 param(rng.standard_normal((2, 3)))],
                lambda ps: T.tmean(T.mul(T.add(*ps), T.add(*ps)))),
        "mul": ([param(rng.standard_normal((2, 3))),
                 param(rng.standard_normal((2, 3)))],
                lambda ps: T.tsum(T.mul(*ps))),
        "scale": ([param(rng.standard_normal(4))],
                  lambda ps: T.tsum(T.scale(ps[0], 2.5))),
        "relu": ([param(away((3, 3)))],
                 lambda ps: T.tsum(T.relu(ps[0]))),
        "gelu": ([param(rng.standard_normal((3, 3)))],
                 lambda ps: T.tsum(T.gelu(ps[0]))),
        "silu": ([param(rng.standard_normal((3, 3)))],
                 lambda ps: T.tsum(T.silu(ps[0]))),
        "rms_norm": ([param(rng.standard_normal((2, 5))),
                      param(rng.standard_normal(5))],
                     lambda ps: T.tsum(T.mul(T.rms_norm(*ps), T.rms_norm(*ps)))),
        "l2_normalize_rows": ([param(away((2, 5)))],
                              lambda ps, w=Tensor(rng.standard_normal((2, 5))):
                              T.tsum(T.mul(T.l2_normalize_rows(ps[0]), w))),
        "row_softmax": ([param(rng.standard_normal((2, 5)))],
                        lambda ps, w=Tensor(rng.standard_normal((2, 5))):
                        T.tsum(T.mul(T.row_softmax(ps[0]), w))),
        "log": ([param(rng.uniform(0.3, 2.0, (2, 3)))],
                lambda ps: T.tsum(T.log(ps[0]))),
        "sum": ([param(rng.standard_normal((2, 3)))],
                lambda ps: T.tsum(ps[0])),
        "mean": ([param(rng.standard_normal((2, 3)))],
                 lambda ps, w=Tensor(rng.standard_normal(2)):
                 T.tsum(T.mul(T.tmean(ps[0], axis=-1), w))),
        "gather_rows": ([param(rng.standard_normal((5, 3)))],
                        lambda ps, idx=rng.integers(0, 5, (2, 2)):
                        T.tsum(T.gather_rows(ps[0], idx))),
        "transpose": ([param(rng.standard_normal((2, 3)))],
                      lambda ps, w=Tensor(rng.standard_normal((3, 2))):
                      T.tsum(T.mul(T.transpose(ps[0]), w))),
        "concat": ([param(rng.standard_normal((2, 2))),
                    param(rng.standard_normal((2, 3)))],
                   lambda ps, w=Tensor(rng.standard_normal((2, 5))):
                   T.tsum(T.mul(T.concat(ps, axis=1), w))),
        "masked_causal_softmax": ([param(rng.standard_normal((2, 4, 4)))],
                                  lambda ps, w=Tensor(rng.standard_normal((2, 4, 4))):
                                  T.tsum(T.mul(T.masked_causal_softmax(ps[0]), w))),
        "logsumexp": ([param(rng.standard_normal((2, 4)))],
                      lambda ps: T.tsum(T.logsumexp(ps[0]))),
        "log_softmax": ([param(rng.standard_normal((2, 4)))],
                        lambda ps, w=Tensor(rng.standard_normal((2, 4))):
                        T.tsum(T.mul(T.log_softmax(ps[0]), w))),
        "rope": ([param(rng.standard_normal((2, 3, 4)))],
                 lambda ps, c=np.cos(rng.standard_normal((3, 2))),
                 s=np.sin(rng.standard_normal((3, 2))),
                 w=Tensor(rng.standard_normal((2, 3, 4))):
                 T.tsum(T.mul(T.rope(ps[0], c, s), w))),
        "interp_last": ([param(rng.standard_normal((2, 5)))],
                        lambda ps: T.tsum(T.interp_last(
                            ps[0], np.array([0, 1, 3]), np.array([1, 2, 4]),
                            np.array([0.0, 0.25, 0.75])))),
    }
    for name, (params, fn) in cases.items():
        err = T.grad_check(fn, params, fd_step=1e-5)
        assert err < 1e-5, f"{name}: relative error {err}"


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_row_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).standard_normal((3, 6)) * 5
    p = T.row_softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), np.ones(3), rtol=1e-12)
    assert (p >= 0).all()


def test_causal_softmax_masks_future_positions():
    p = T.masked_causal_softmax(Tensor(np.random.default_rng(0).standard_normal((2, 4, 4)))).data
    upper = np.triu_indices(4, k=1)
    assert np.array_equal(p[:, upper[0], upper[1]], np.zeros((2, 6)))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
