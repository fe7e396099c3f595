import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeff import autodiff as ad


def rel_err(a, b, floor=1e-3):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_grad(op, arrays, step=1e-5, tol=1e-5):
    """Analytic tape gradients vs central differences for sum(op(*args))."""
    tensors = [ad.tensor(a) for a in arrays]
    with ad.Tape() as tape:
        out = op(*tensors)
        loss = ad.reduce_sum(out)
    grads = tape.gradients(loss, tensors)
    for i, arr in enumerate(arrays):
        def f(x, i=i):
            args = [a.copy() for a in arrays]
            args[i] = x
            return float(op(*[ad.tensor(a) for a in args]).data.sum())

        fd = ad.fd_gradient(f, arr, step=step)
        assert rel_err(grads[i], fd).max() <= tol, f"operand {i}"


RNG = np.random.default_rng(1234)


class TestMatmul:
    def test_identity(self):
        a = ad.tensor(RNG.normal(size=(2, 2)))
        eye = ad.tensor(np.eye(2))
        assert np.allclose(ad.matmul(eye, a).data, a.data)

    def test_hand_arithmetic(self):
        got = ad.matmul(ad.tensor([[1.0, 2.0], [3.0, 4.0]]), ad.tensor([[1.0], [1.0]]))
        assert np.array_equal(got.data, [[3.0], [7.0]])

    def test_gradients_vs_central_differences(self):
        a = RNG.normal(size=(5, 7))
        b = RNG.normal(size=(7, 3))
        check_grad(ad.matmul, [a, b], tol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.ShapeError) as err:
            ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


class TestSoftmax:
    def test_uniform_on_equal_inputs(self):
        out = ad.softmax_lastaxis(ad.tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_large_inputs_do_not_overflow(self):
        out = ad.softmax_lastaxis(ad.tensor([1000.0, 1000.0]))
        assert np.array_equal(out.data, [0.5, 0.5])

    def test_rows_sum_to_one(self):
        out = ad.softmax_lastaxis(ad.tensor(RNG.normal(size=(4, 6))))
        assert np.abs(out.data.sum(-1) - 1.0).max() <= 1e-12

    def test_gradient(self):
        weights = RNG.normal(size=(3, 5))
        check_grad(
            lambda t: ad.mul(ad.softmax_lastaxis(t), ad.constant(weights)),
            [RNG.normal(size=(3, 5))],
        )


class TestBackwardContract:
    def test_sum_gradient_is_ones(self):
        w = ad.tensor(RNG.normal(size=(3, 4)))
        with ad.Tape() as tape:
            loss = ad.reduce_sum(w)
        (g,) = tape.gradients(loss, [w])
        assert np.array_equal(g, np.ones((3, 4)))

    def test_quadratic_identity(self):
        # loss = ||W x||^2 has gradient 2 (W x) x^T on W
        w = ad.tensor(RNG.normal(size=(4, 3)))
        x = ad.tensor(RNG.normal(size=(3, 1)))
        with ad.Tape() as tape:
            y = ad.matmul(w, x)
            loss = ad.reduce_sum(ad.mul(y, y))
        (g,) = tape.gradients(loss, [w])
        expected = 2.0 * (w.data @ x.data) @ x.data.T
        assert np.allclose(g, expected, atol=1e-12)

    def test_unreferenced_leaf_gets_zero(self):
        used = ad.tensor(RNG.normal(size=(2, 2)))
        unused = ad.tensor(RNG.normal(size=(5,)))
        with ad.Tape() as tape:
            loss = ad.reduce_sum(used)
        g_used, g_unused = tape.gradients(loss, [used, unused])
        assert np.array_equal(g_unused, np.zeros(5))

    def test_non_scalar_loss_rejected(self):
        w = ad.tensor(RNG.normal(size=(3,)))
        with ad.Tape() as tape:
            out = ad.mul(w, 2.0)
        with pytest.raises(ad.GraphError):
            tape.gradients(out, [w])

    def test_mixed_precision_rejected(self):
        a = ad.tensor(np.zeros(3), dtype=np.float64)
        b = ad.tensor(np.zeros(3), dtype=np.float32)
        with pytest.raises(ad.GraphError):
            ad.add(a, b)


@pytest.mark.parametrize(
    "name,op,shapes",
    [
        ("add", ad.add, [(3, 4), (3, 4)]),
        ("add_broadcast", ad.add, [(3, 4), (4,)]),
        ("sub", ad.sub, [(2, 5), (2, 5)]),
        ("mul", ad.mul, [(3, 4), (3, 4)]),
        ("mul_broadcast", ad.mul, [(2, 3, 4), (4,)]),
        ("div", ad.div, [(3, 3), (3, 3)]),
        ("bmm", ad.bmm, [(4, 3, 5), (4, 5, 2)]),
        ("atan2", ad.atan2, [(4, 4), (4, 4)]),
    ],
)
def test_primitive_gradients(name, op, shapes):
    arrays = [RNG.normal(size=s) for s in shapes]
    if name == "div":
        arrays[1] = arrays[1] + 3.0 * np.sign(arrays[1])  # keep away from zero
    check_grad(op, arrays)


@pytest.mark.parametrize(
    "name,op",
    [
        ("exp", ad.exp),
        ("sqrt", lambda t: ad.sqrt(ad.add(ad.mul(t, t), 1.0))),
        ("erf", ad.erf),
        ("sin", ad.sin),
        ("cos", ad.cos),
        ("neg", ad.neg),
        ("log", lambda t: ad.log(ad.add(ad.mul(t, t), 1.0))),
        ("softplusish", lambda t: ad.l2norm_lastaxis(ad.add(t, 0.5))),
        ("transpose", lambda t: ad.transpose(t, (1, 0))),
        ("reshape", lambda t: ad.reshape(t, (12,))),
        ("narrow", lambda t: ad.narrow(t, 1, 1, 2)),
        ("broadcast", lambda t: ad.broadcast_to(ad.reshape(t, (3, 4, 1)), (3, 4, 5))),
        ("sum_axis", lambda t: ad.reduce_sum(t, axis=0)),
        ("mean_keep", lambda t: ad.mean(t, axis=-1, keepdims=True)),
    ],
)
def test_unary_gradients(name, op):
    check_grad(op, [RNG.normal(size=(3, 4))])


def test_concat_gradient():
    a, b = RNG.normal(size=(2, 3)), RNG.normal(size=(2, 2))
    check_grad(lambda x, y: ad.concat([x, y], 1), [a, b])


def test_take_rows_gradient():
    table = RNG.normal(size=(6, 4))
    idx = np.array([[0, 2], [5, 2]])
    check_grad(lambda t: ad.take_rows(t, idx), [table])


@settings(max_examples=20, deadline=None)
@given(
    rows=st.integers(1, 4),
    inner=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_matmul_gradcheck_property(rows, inner, cols, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rows, inner))
    b = rng.normal(size=(inner, cols))
    check_grad(ad.matmul, [a, b])


class TestDeterminismAndPrecision:
    def test_bit_identical_forward_backward(self):
        def run():
            rng = np.random.default_rng(7)
            a = ad.tensor(rng.normal(size=(6, 6)))
            b = ad.tensor(rng.normal(size=(6, 6)))
            with ad.Tape() as tape:
                out = ad.softmax_lastaxis(ad.matmul(a, b))
                loss = ad.reduce_sum(ad.mul(out, out))
            ga, gb = tape.gradients(loss, [a, b])
            return loss.data.copy(), ga.copy(), gb.copy()

        first, second = run(), run()
        for x, y in zip(first, second):
            assert np.array_equal(x, y)

    @pytest.mark.parametrize("bits", [32, 64])
    def test_ops_run_in_both_precisions(self, bits):
        ad.set_default_precision(bits)
        dtype = np.float32 if bits == 32 else np.float64
        a = ad.tensor(RNG.normal(size=(3, 4)))
        assert a.dtype == dtype
        ops_out = [
            ad.add(a, a), ad.sub(a, a), ad.mul(a, a),
            ad.div(a, ad.add(a, 10.0)), ad.exp(a), ad.erf(a),
            ad.sin(a), ad.cos(a), ad.softmax_lastaxis(a),
            ad.l2norm_lastaxis(a), ad.reduce_sum(a), ad.mean(a),
            ad.sqrt(ad.add(ad.mul(a, a), 1.0)),
            ad.matmul(a, ad.tensor(RNG.normal(size=(4, 2)))),
        ]
        for out in ops_out:
            assert out.dtype == dtype

    def test_tape_replay_is_bit_identical(self):
        a = ad.tensor(RNG.normal(size=(4, 4)))
        with ad.Tape() as tape:
            out = ad.softmax_lastaxis(ad.matmul(a, a))
            ad.reduce_sum(ad.mul(out, ad.erf(out)))
        assert tape.replay_matches()


def test_tensor_immutability():
    t = ad.tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_l2norm_zero_row_gradient_is_zero():
    x = ad.tensor(np.zeros((2, 3)))
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.l2norm_lastaxis(x))
    (g,) = tape.gradients(loss, [x])
    assert np.all(np.isfinite(g)) and np.array_equal(g, np.zeros((2, 3)))
