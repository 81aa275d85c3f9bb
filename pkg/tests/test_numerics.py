import numpy as np
import pytest

from malab import numerics as nx
from malab.numerics import (GradientError, NonFiniteError, ShapeMismatchError,
                            Tensor, comp_graph, grad_of)


def matmul_oracle(a, b):
    # naive triple loop, independent of the library path
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = nx.matmul(a, Tensor(np.eye(2)))
        assert np.array_equal(out.array, a.array)

    def test_against_triple_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expect = matmul_oracle(a, b)
        assert np.array_equal(expect, [[19.0, 22.0], [43.0, 50.0]])
        assert np.array_equal(nx.matmul(Tensor(a), Tensor(b)).array, expect)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 5))
        got = nx.matmul(Tensor(a), Tensor(b)).array
        assert np.allclose(got, matmul_oracle(a, b), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError) as err:
            nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(err.value)

    def test_identity_association_and_distributivity(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            a = Tensor(rng.standard_normal((8, 8)))
            b = Tensor(rng.standard_normal((8, 8)))
            c = Tensor(rng.standard_normal((8, 8)))
            eye = Tensor(np.eye(8))
            assert np.allclose(
                nx.matmul(nx.matmul(a, eye), b).array,
                nx.matmul(a, nx.matmul(eye, b)).array, atol=1e-10)
            left = nx.matmul(a, nx.add(b, c)).array
            right = nx.add(nx.matmul(a, b), nx.matmul(a, c)).array
            assert np.allclose(left, right, atol=1e-10)

    def test_stacked_lhs(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((3, 4, 6))
        b = rng.standard_normal((6, 2))
        got = nx.matmul(Tensor(a), Tensor(b)).array
        for i in range(3):
            assert np.allclose(got[i], matmul_oracle(a[i], b), atol=1e-12)


class TestLayerNorm:
    def test_constant_input(self):
        out = nx.layer_norm(Tensor([5.0, 5.0, 5.0, 5.0]))
        assert np.array_equal(out.array, np.zeros(4))

    def test_two_point_symmetry(self):
        out = nx.layer_norm(Tensor([1.0, 3.0]), eps=0.0)
        assert np.allclose(out.array, [-1.0, 1.0], atol=1e-15)

    def test_moments_recomputed_directly(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(16)
        out = nx.layer_norm(Tensor(x), eps=0.0).array
        assert abs(out.mean()) < 1e-12
        assert abs(out.var() - 1.0) < 1e-9

    def test_degenerate_axis(self):
        with pytest.raises(ShapeMismatchError):
            nx.layer_norm(Tensor([1.0]))


class TestSoftmax:
    def test_symmetry(self):
        out = nx.softmax_rows(Tensor([0.0, 0.0]))
        assert np.array_equal(out.array, [0.5, 0.5])

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 8))
        a = nx.softmax_rows(Tensor(x)).array
        b = nx.softmax_rows(Tensor(x + 7.0)).array
        assert np.allclose(a, b, atol=1e-12)

    def test_direct_value(self):
        out = nx.softmax_rows(Tensor([0.0, np.log(3.0)]))
        assert np.allclose(out.array, [0.25, 0.75], atol=1e-15)

    def test_rows_sum_to_one_at_large_magnitude(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1e4, 1e4, size=(16, 32))
        out = nx.softmax_rows(Tensor(x)).array
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


class TestSilu:
    def test_zero(self):
        assert nx.silu(Tensor(0.0)).item() == 0.0

    def test_saturation(self):
        assert abs(nx.silu(Tensor(50.0)).item() - 50.0) < 1e-9

    def test_direct_value(self):
        expect = 1.0 / (1.0 + np.exp(-1.0))
        assert abs(nx.silu(Tensor(1.0)).item() - expect) < 1e-15


# ---------------------------------------------------------------------------
# reverse mode


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar f over a flat parameter array."""
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        grad.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-6):
    err = np.abs(analytic - numeric)
    tol = rtol * np.maximum(1.0, np.abs(numeric))
    assert np.all(err <= tol), f"max grad error {err.max():.3e}"


class TestGradOf:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        loss = nx.mul(x, x)
        grads = grad_of(loss, [x])
        assert grads[x].item() == 6.0

    def test_constant_loss_gives_zeros(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        loss = Tensor(1.5)
        grads = grad_of(loss, [x])
        assert np.array_equal(grads[x].array, np.zeros((2, 3)))

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GradientError):
            grad_of(nx.mul(x, x), [x])

    def test_layer_norm_dot_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal(8)
        w0 = rng.standard_normal(8)

        x = Tensor(x0, requires_grad=True)
        w = Tensor(w0, requires_grad=True)
        loss = nx.sum_all(nx.mul(nx.layer_norm(x, 0.0), w))
        grads = grad_of(loss, [x, w])

        def f_x(v):
            return nx.sum_all(nx.mul(nx.layer_norm(Tensor(v), 0.0),
                                     Tensor(w0))).item()

        def f_w(v):
            return nx.sum_all(nx.mul(nx.layer_norm(Tensor(x0), 0.0),
                                     Tensor(v))).item()

        assert_grad_close(grads[x].array, central_diff(f_x, x0))
        assert_grad_close(grads[w].array, central_diff(f_w, w0))

    def test_unreached_param_zero(self):
        x = Tensor(np.ones(4), requires_grad=True)
        y = Tensor(np.ones(4), requires_grad=True)
        loss = nx.sum_all(nx.mul(x, x))
        grads = grad_of(loss, [x, y])
        assert np.array_equal(grads[y].array, np.zeros(4))


def random_graph(seed):
    """A small random pipeline touching every differentiable op; returns
    (params dict, loss builder over raw arrays)."""
    rng = np.random.default_rng(seed)
    shapes = {
        "x": (3, 6), "w": (6, 4), "b": (4,),
        "gamma": (4,), "beta": (4,), "alpha": (4,), "v": (3, 4),
        "table": (5, 6),
    }
    values = {k: rng.standard_normal(s) for k, s in shapes.items()}
    idx = rng.integers(0, 5, size=3)
    picks = rng.integers(0, 2, size=6)

    def build(raw):
        t = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}
        h = nx.affine(t["x"], t["w"], t["b"])
        h = nx.silu(h) if picks[0] else nx.softmax_rows(h, scale=0.7)
        if picks[1]:
            h = nx.scale_shift_norm(h, t["gamma"], t["beta"])
        else:
            h = nx.add(nx.mul(nx.layer_norm(h), t["gamma"]), t["beta"])
        h = nx.add_scaled(h, t["v"], t["alpha"]) if picks[2] \
            else nx.add(h, nx.mul(t["v"], t["alpha"]))
        rows = nx.embed_rows(t["table"], idx)
        extra = nx.matmul(rows, t["w"]) if picks[3] else nx.affine(
            rows, t["w"], t["b"])
        joined = nx.concat_last([h, extra])
        if picks[4]:
            joined = nx.swapaxes(nx.reshape(joined, (3, 2, 4)), 0, 1)
        parts = nx.split_last(joined, 2) if picks[5] else [joined]
        total = nx.mean_all(nx.mul(parts[0], parts[0]))
        for p in parts[1:]:
            total = nx.add(total, nx.sum_all(nx.silu(p)))
        return total, t

    return values, build


@pytest.mark.parametrize("seed", range(50))
def test_gradients_match_finite_differences(seed):
    values, build = random_graph(seed)
    loss, tensors = build(values)
    grads = grad_of(loss, list(tensors.values()))
    for name, tensor in tensors.items():
        def f(v, name=name):
            raw = dict(values)
            raw[name] = v
            return build(raw)[0].item()

        assert_grad_close(grads[tensor].array,
                          central_diff(f, values[name]))


# ---------------------------------------------------------------------------
# invariants and plumbing


def test_finiteness_is_surfaced():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    big = Tensor(np.full(4, 1e308))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        nx.mul(big, Tensor(10.0))


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        nx.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_recording_order_is_topological():
    x = Tensor(np.ones(4), requires_grad=True)
    y = nx.silu(nx.mul(x, Tensor(2.0)))
    loss = nx.sum_all(y)
    nodes, leaves = comp_graph(loss)
    assert all(a._seq < b._seq for a, b in zip(nodes, nodes[1:]))
    for node in nodes:
        assert all(p._seq < node._seq for p in node._parents)
    assert x in leaves


def test_no_grad_disables_recording():
    x = Tensor(np.ones(4), requires_grad=True)
    with nx.no_grad():
        y = nx.silu(x)
    assert y._backward is None
    grads = grad_of(nx.sum_all(nx.mul(x, x)), [x])
    assert np.array_equal(grads[x].array, 2 * np.ones(4))


def test_fused_ops_match_composition():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((5, 8))
    gamma, beta, alpha = (rng.standard_normal(8) for _ in range(3))
    branch = rng.standard_normal((5, 8))

    fused = nx.scale_shift_norm(Tensor(x), Tensor(gamma), Tensor(beta)).array
    composed = nx.add(
        nx.mul(nx.layer_norm(Tensor(x)),
               nx.add(Tensor(1.0), Tensor(gamma))), Tensor(beta)).array
    assert np.allclose(fused, composed, atol=1e-15)

    fused = nx.add_scaled(Tensor(x), Tensor(branch), Tensor(alpha)).array
    composed = nx.add(Tensor(x), nx.mul(Tensor(branch), Tensor(alpha))).array
    assert np.array_equal(fused, composed)


def test_data_is_flat_row_major():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.data.tolist() == [1.0, 2.0, 3.0, 4.0]
    assert t.shape == (2, 2)
    assert t.size == 4
