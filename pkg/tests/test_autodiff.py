"""Engine-level tests: every primitive's gradient against central finite
differences, stop-gradient semantics, and backward bookkeeping."""

import numpy as np
import pytest

from prelab import autodiff as ad
from prelab.autodiff import Node, Parameter, backward, no_grad, stop_gradient
from prelab.numerics import ShapeError

RNG = np.random.default_rng(20)


def numeric_grad(f, x, h=1e-6):
    """Dense central differences of scalar f at array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_grad(make_loss, x_val, h=1e-6, tol=1e-4):
    """Backward gradient of make_loss(param) vs finite differences."""
    p = Parameter("x", x_val.copy())
    loss = make_loss(p.node())
    backward(loss)
    analytic = p.grad.copy()

    def f():
        with no_grad():
            return float(make_loss(p.node()).value)

    numeric = numeric_grad(f, p.value, h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    rel = np.max(np.abs(analytic - numeric) / scale)
    assert rel < tol, f"gradient mismatch {rel:.3g}"


class TestPrimitiveGradients:
    def test_add_broadcast(self):
        b = ad.constant(RNG.normal(size=(3,)))
        check_grad(lambda x: ad.sum_all(ad.mul(ad.add(x, b), ad.add(x, b))),
                   RNG.normal(size=(4, 3)))

    def test_mul(self):
        other = ad.constant(RNG.normal(size=(4, 3)))
        check_grad(lambda x: ad.sum_all(ad.mul(x, other)), RNG.normal(size=(4, 3)))

    def test_scale(self):
        check_grad(lambda x: ad.sum_all(ad.scale(x, -2.5)), RNG.normal(size=(5,)))

    def test_matmul_2d(self):
        b = ad.constant(RNG.normal(size=(3, 4)))
        check_grad(lambda x: ad.sum_all(ad.mul(ad.matmul(x, b), ad.matmul(x, b))),
                   RNG.normal(size=(2, 3)))

    def test_matmul_batched_times_2d(self):
        w = RNG.normal(size=(3, 2))
        check_grad(lambda x: ad.sum_all(ad.matmul(x, ad.constant(w))),
                   RNG.normal(size=(2, 4, 3)))

    def test_matmul_weight_side(self):
        a = ad.constant(RNG.normal(size=(2, 5, 3)))
        check_grad(lambda x: ad.mean_all(ad.mul(ad.matmul(a, x), ad.matmul(a, x))),
                   RNG.normal(size=(3, 4)))

    def test_transpose_reshape(self):
        w = ad.constant(RNG.normal(size=(6, 2)))
        check_grad(lambda x: ad.sum_all(
            ad.mul(ad.reshape(ad.transpose(x, (1, 0, 2)), (6, 2)), w)),
            RNG.normal(size=(3, 2, 2)))

    def test_concat_narrow(self):
        other = ad.constant(RNG.normal(size=(2, 3)))

        def loss(x):
            joined = ad.concat([x, other], axis=1)
            piece = ad.narrow(joined, 1, 1, 3)
            return ad.sum_all(ad.mul(piece, piece))

        check_grad(loss, RNG.normal(size=(2, 2)))

    def test_softmax(self):
        w = ad.constant(RNG.normal(size=(3, 5)))
        check_grad(lambda x: ad.sum_all(ad.mul(ad.softmax(x), w)),
                   RNG.normal(size=(3, 5)))

    def test_softmax_uniform_on_zeros(self):
        s = ad.softmax(ad.constant(np.zeros(3)))
        assert np.allclose(s.value, [1 / 3] * 3, atol=0)

    def test_masked_softmax(self):
        mask = np.tril(np.ones((4, 4), dtype=bool))
        w = ad.constant(RNG.normal(size=(2, 4, 4)))
        check_grad(lambda x: ad.sum_all(ad.mul(ad.masked_softmax(x, mask), w)),
                   RNG.normal(size=(2, 4, 4)))

    def test_masked_softmax_exact_zeros(self):
        mask = np.array([[True, False], [True, True]])
        s = ad.masked_softmax(ad.constant(RNG.normal(size=(2, 2))), mask)
        assert s.value[0, 1] == 0.0
        assert abs(s.value[0, 0] - 1.0) < 1e-15

    def test_log_softmax(self):
        w = ad.constant(RNG.normal(size=(3, 6)))
        check_grad(lambda x: ad.sum_all(ad.mul(ad.log_softmax(x), w)),
                   RNG.normal(size=(3, 6)))

    def test_layer_norm(self):
        gamma = ad.constant(RNG.normal(size=(6,)) + 1.0)
        beta = ad.constant(RNG.normal(size=(6,)))
        w = ad.constant(RNG.normal(size=(4, 6)))
        check_grad(lambda x: ad.sum_all(ad.mul(ad.layer_norm(x, gamma, beta), w)),
                   RNG.normal(size=(4, 6)))

    def test_layer_norm_affine_grads(self):
        x = ad.constant(RNG.normal(size=(5, 4)))
        w = ad.constant(RNG.normal(size=(5, 4)))
        check_grad(lambda g: ad.sum_all(ad.mul(
            ad.layer_norm(x, g, ad.constant(np.zeros(4))), w)),
            RNG.normal(size=(4,)) + 1.0)

    def test_layer_norm_statistics(self):
        x = ad.constant(RNG.normal(size=(10, 32)))
        out = ad.layer_norm(x, ad.constant(np.ones(32)), ad.constant(np.zeros(32))).value
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-12
        assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-9

    def test_gelu(self):
        check_grad(lambda x: ad.sum_all(ad.gelu(x)), RNG.normal(size=(30,)) * 2)

    def test_embedding(self):
        ids = np.array([[0, 2], [2, 1]])
        w = ad.constant(RNG.normal(size=(2, 2, 4)))
        check_grad(lambda t: ad.sum_all(ad.mul(ad.embedding(t, ids), w)),
                   RNG.normal(size=(3, 4)))

    def test_take_along_last(self):
        idx = np.array([[0, 2], [1, 1]])
        check_grad(lambda x: ad.sum_all(ad.take_along_last(x, idx)),
                   RNG.normal(size=(2, 2, 3)))

    def test_mean_all(self):
        check_grad(lambda x: ad.mean_all(ad.mul(x, x)), RNG.normal(size=(3, 3)))

    def test_cosine_rows(self):
        z = ad.constant(RNG.normal(size=(5, 4)))
        check_grad(lambda x: ad.mean_all(ad.cosine_rows(x, z)),
                   RNG.normal(size=(5, 4)) + 0.5)

    def test_cosine_rows_both_sides(self):
        p_val = RNG.normal(size=(4, 3))
        check_grad(lambda x: ad.sum_all(ad.cosine_rows(ad.constant(p_val), x)),
                   RNG.normal(size=(4, 3)) + 0.2)

    def test_cosine_rows_zero_row_floored(self):
        p = Parameter("p", np.array([[0.0, 0.0], [1.0, 0.0]]))
        z = ad.constant(np.array([[1.0, 1.0], [1.0, 0.0]]))
        out = ad.cosine_rows(p.node(), z)
        assert out.value[0] == 0.0
        assert out.value[1] == 1.0
        backward(ad.sum_all(out))
        assert np.array_equal(p.grad[0], [0.0, 0.0])


class TestStopGradient:
    def test_forward_identity_bitwise(self):
        x = ad.constant(RNG.normal(size=(4, 4)))
        assert stop_gradient(x).value is x.value

    def test_x_times_stopgrad_x(self):
        p = Parameter("x", np.array(3.0))
        xn = p.node()
        backward(ad.mul(xn, stop_gradient(xn)))
        assert p.grad == 3.0  # not 6: the detached factor contributes nothing

    def test_loss_through_stopgrad_only_gives_exact_zero(self):
        p = Parameter("w", RNG.normal(size=(3, 3)))
        loss = ad.sum_all(ad.mul(stop_gradient(p.node()), stop_gradient(p.node())))
        backward(loss)
        assert np.array_equal(p.grad, np.zeros((3, 3)))

    def test_params_in_graph_excludes_detached(self):
        a = Parameter("a", np.ones(2))
        b = Parameter("b", np.ones(2))
        loss = ad.sum_all(ad.mul(a.node(), stop_gradient(b.node())))
        reachable = ad.params_in_graph(loss)
        assert a in reachable and b not in reachable


class TestBackward:
    def test_quadratic(self):
        p = Parameter("w", np.array([1.0, -2.0, 0.5]))
        backward(ad.sum_all(ad.mul(p.node(), p.node())))
        assert np.array_equal(p.grad, 2 * p.value)

    def test_non_scalar_loss_rejected(self):
        p = Parameter("w", np.ones(3))
        with pytest.raises(ShapeError):
            backward(ad.mul(p.node(), p.node()))

    def test_accumulation_doubles(self):
        p = Parameter("w", RNG.normal(size=(4,)))
        loss = ad.sum_all(ad.mul(p.node(), p.node()))
        backward(loss)
        once = p.grad.copy()
        backward(loss)
        assert np.array_equal(p.grad, 2 * once)

    def test_linearity(self):
        p = Parameter("w", RNG.normal(size=(5,)))
        c = ad.constant(RNG.normal(size=(5,)))

        def grads_of(a, b):
            p.zero_grad()
            l1 = ad.sum_all(ad.mul(p.node(), p.node()))
            l2 = ad.sum_all(ad.mul(p.node(), c))
            backward(ad.add(ad.scale(l1, a), ad.scale(l2, b)))
            return p.grad.copy()

        p.zero_grad()
        backward(ad.sum_all(ad.mul(p.node(), p.node())))
        g1 = p.grad.copy()
        p.zero_grad()
        backward(ad.sum_all(ad.mul(p.node(), c)))
        g2 = p.grad.copy()
        combo = grads_of(2.0, -3.0)
        assert np.max(np.abs(combo - (2.0 * g1 - 3.0 * g2))) < 1e-12

    def test_shared_node_fan_out(self):
        p = Parameter("w", np.array([2.0]))
        xn = p.node()
        y = ad.mul(xn, xn)  # w^2 via a shared node
        backward(ad.sum_all(ad.mul(y, xn)))  # w^3 -> 3 w^2 = 12
        assert abs(p.grad[0] - 12.0) < 1e-12

    def test_no_grad_blocks_recording(self):
        p = Parameter("w", np.ones(2))
        with no_grad():
            loss = ad.sum_all(ad.mul(p.node(), p.node()))
        assert not loss.requires_grad
        assert loss.parents == ()
