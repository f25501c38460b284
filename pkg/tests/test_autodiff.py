"""Forward values, adjoints and graph invariants of the autodiff core."""

import numpy as np
import pytest

from skelattack import autodiff as ad

from tests.helpers import fd_gradients, max_rel_err

GRAD_TOL = 1e-4
FD_STEP = 1e-5


def test_matmul_identity():
    x = ad.Tensor(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    eye = ad.Tensor(np.eye(2))
    out = ad.matmul(eye, x)
    assert np.array_equal(out.value, x.value)


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.normal(size=(7, 4)))
    w = ad.Tensor(np.eye(4)[None])  # width 1, dilation 1
    out = ad.causal_conv1d(x, w, dilation=1)
    assert np.array_equal(out.value, x.value)


def test_l2_norm_pythagorean():
    v = ad.Tensor([3.0, 4.0])
    assert float(ad.l2_norm(v, axis=-1).value) == 5.0


def test_backward_sum_gives_ones():
    x = ad.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    grads = ad.backward(ad.sum_reduce(x))
    assert np.array_equal(grads[x], np.ones((3, 4)))


def test_backward_l2_norm_direction():
    v = ad.Tensor([3.0, 4.0], requires_grad=True)
    ad.backward(ad.l2_norm(v, axis=-1))
    assert np.allclose(v.grad, [0.6, 0.8], atol=1e-12)


def test_backward_requires_scalar_root():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.relu(x)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(y)


def test_shape_mismatch_names_op_and_shapes():
    a = ad.Tensor(np.ones((2, 3)))
    b = ad.Tensor(np.ones((3, 3)))
    with pytest.raises(ad.ShapeError) as exc:
        ad.add(a, b)
    assert "add" in str(exc.value)
    assert "(2, 3)" in str(exc.value)


def test_forward_op_unknown_kind():
    with pytest.raises(ValueError, match="unknown op kind"):
        ad.forward_op("fourier", [ad.Tensor([1.0])])


def test_adjoint_reset_makes_backward_idempotent():
    x = ad.Tensor([1.0, -2.0, 0.5], requires_grad=True)
    root = ad.sum_reduce(ad.multiply(x, x))
    ad.backward(root)
    first = x.grad.copy()
    ad.zero_grad(root)
    assert x.grad is None
    ad.backward(root)
    assert np.array_equal(x.grad, first)


def test_repeated_use_of_leaf_accumulates():
    x = ad.Tensor([2.0], requires_grad=True)
    root = ad.sum_reduce(ad.add(ad.multiply(x, x), x))  # x^2 + x
    ad.backward(root)
    assert np.allclose(x.grad, [5.0])


# every op kind, checked against central finite differences ------------------

def all_op_gradcheck_cases():
    rng = np.random.default_rng(42)
    t, c = 5, 4
    # keep relu/absolute inputs away from their kinks relative to the fd step
    off_kink = lambda shape: rng.normal(size=shape) + np.sign(rng.normal(size=shape)) * 0.05
    return [
        ("add", [rng.normal(size=(t, c)), rng.normal(size=(t, c))], {}),
        ("add", [rng.normal(size=(t, c)), rng.normal(size=c)], {}),
        ("subtract", [rng.normal(size=(t, c)), rng.normal(size=(t, c))], {}),
        ("subtract", [rng.normal(size=(t, c)), rng.normal(size=c)], {}),
        ("scalar_multiply", [rng.normal(size=(t, c))], {"scalar": -1.7}),
        ("multiply", [rng.normal(size=(t, c)), rng.normal(size=(t, c))], {}),
        ("matmul", [rng.normal(size=(t, c)), rng.normal(size=(c, 3))], {}),
        ("concat_time", [rng.normal(size=(2, c)), rng.normal(size=(3, c))], {}),
        ("slice", [rng.normal(size=(t, c))], {"start": 1, "stop": 3, "axis": 0}),
        ("slice", [rng.normal(size=(t, 6))], {"start": 2, "stop": 5, "axis": 1}),
        ("relu", [off_kink((t, c))], {}),
        ("tanh", [rng.normal(size=(t, c))], {}),
        ("sigmoid", [rng.normal(size=(t, c))], {}),
        ("causal_conv1d", [rng.normal(size=(t, c)), rng.normal(size=(3, c, 2))],
         {"dilation": 2}),
        ("sum_reduce", [rng.normal(size=(t, c))], {}),
        ("l2_norm", [rng.normal(size=(t, c)) + 0.5], {"axis": -1}),
        ("absolute", [off_kink((t, c))], {}),
    ]


def op_gradcheck(kind, arrays, attrs, weights_seed=7):
    """Analytic vs finite-difference gradient for one op kind."""
    rng = np.random.default_rng(weights_seed)
    out_shape = ad.forward_op(kind, [ad.Tensor(a) for a in arrays], attrs).value.shape
    weights = rng.normal(size=out_shape)

    def scalarize(arrs):
        out = ad.forward_op(kind, [ad.Tensor(a) for a in arrs], attrs)
        return float(np.sum(out.value * weights))

    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = ad.forward_op(kind, tensors, attrs)
    root = ad.sum_reduce(ad.multiply(out, ad.Tensor(weights)))
    ad.backward(root)
    numeric = fd_gradients(scalarize, [a.copy() for a in arrays], step=FD_STEP)
    errs = []
    for tensor, num in zip(tensors, numeric):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(num)
        errs.append(max_rel_err(analytic, num))
    return max(errs)


@pytest.mark.parametrize("kind,arrays,attrs", all_op_gradcheck_cases(),
                         ids=lambda v: v if isinstance(v, str) else "")
def test_gradcheck_per_op(kind, arrays, attrs):
    assert op_gradcheck(kind, arrays, attrs) < GRAD_TOL


def test_gradcheck_random_composite_graphs():
    # small random graphs mixing several ops, vs the same fd oracle
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        x0 = rng.normal(size=(4, 3))
        w0 = rng.normal(size=(3, 3))

        def build(arrs):
            x, w = ad.Tensor(arrs[0]), ad.Tensor(arrs[1])
            return build_from(x, w)

        def build_from(x, w):
            h = ad.tanh(ad.matmul(x, w))
            h = ad.add(h, ad.sigmoid(x))
            n = ad.l2_norm(h, axis=-1)
            return ad.sum_reduce(ad.absolute(ad.subtract(n, ad.Tensor(np.full(4, 0.3)))))

        def scalarize(arrs):
            return float(build(arrs).value)

        xt = ad.Tensor(x0, requires_grad=True)
        wt = ad.Tensor(w0, requires_grad=True)
        ad.backward(build_from(xt, wt))
        gx, gw = fd_gradients(scalarize, [x0.copy(), w0.copy()], step=FD_STEP)
        assert max_rel_err(xt.grad, gx) < GRAD_TOL
        assert max_rel_err(wt.grad, gw) < GRAD_TOL


def test_conv_causality_exact():
    # perturbing frame t never changes outputs before t
    rng = np.random.default_rng(5)
    x = rng.normal(size=(10, 3))
    w = rng.normal(size=(3, 3, 4))
    for dilation in (1, 2, 3):
        base = ad.causal_conv1d(ad.Tensor(x), ad.Tensor(w), dilation=dilation).value
        for t in range(10):
            bumped = x.copy()
            bumped[t] += rng.normal(size=3)
            out = ad.causal_conv1d(ad.Tensor(bumped), ad.Tensor(w), dilation=dilation).value
            assert np.array_equal(out[:t], base[:t])


def test_backward_linearity():
    rng = np.random.default_rng(9)
    x0 = rng.normal(size=(3, 3))
    a, b = 2.5, -0.75

    def f_of(x):
        return ad.sum_reduce(ad.tanh(x))

    def g_of(x):
        return ad.sum_reduce(ad.multiply(x, x))

    xt = ad.Tensor(x0, requires_grad=True)
    combo = ad.add(ad.scalar_multiply(f_of(xt), a), ad.scalar_multiply(g_of(xt), b))
    ad.backward(combo)
    combined = xt.grad.copy()

    xf = ad.Tensor(x0, requires_grad=True)
    ad.backward(f_of(xf))
    xg = ad.Tensor(x0, requires_grad=True)
    ad.backward(g_of(xg))
    assert np.allclose(combined, a * xf.grad + b * xg.grad, rtol=1e-12, atol=1e-12)
