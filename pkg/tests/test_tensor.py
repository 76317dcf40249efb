import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import max_rel_err, np_cross_entropy, np_gelu, np_layer_norm, np_log_softmax, numeric_grad
from redlab import tensor as T
from redlab.tensor import ShapeError, Tensor


def leaf(arr):
    return Tensor(arr, requires_grad=True)


def grad_of(build, *arrays):
    """Analytic grads of sum-reduced ``build(*leaves)`` for each input."""
    leaves = [leaf(a) for a in arrays]
    T.backward(T.sum_all(build(*leaves)))
    return [t.grad for t in leaves]


# -- matmul -----------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[2, 3], [4, 5]]))
    np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])


def test_matmul_inner_product():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_grads_match_finite_differences(verify, rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))
    ta, tb = leaf(a), leaf(b)
    T.backward(T.sum_all(T.mul(T.matmul(ta, tb), Tensor(w))))
    assert max_rel_err(ta.grad, numeric_grad(lambda x: float(((x @ b) * w).sum()), a)) <= 1e-5
    assert max_rel_err(tb.grad, numeric_grad(lambda x: float(((a @ x) * w).sum()), b)) <= 1e-5
    # Closed forms as a second route.
    np.testing.assert_allclose(ta.grad, w @ b.T)
    np.testing.assert_allclose(tb.grad, a.T @ w)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_batched_matmul_grads(verify, rng):
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 5, 2))
    ga, gb = grad_of(T.matmul, a, b)
    assert max_rel_err(ga, numeric_grad(lambda x: float((x @ b).sum()), a)) <= 1e-6
    assert max_rel_err(gb, numeric_grad(lambda x: float((a @ x).sum()), b)) <= 1e-6


# -- elementwise ------------------------------------------------------------

def test_mul_elementwise():
    assert T.elementwise("mul", Tensor([2, 3]), Tensor([4, 5])).data.tolist() == [8, 15]


def test_add_broadcasts_vector_over_rows():
    out = T.elementwise("add", Tensor([[1, 1], [2, 2]]), Tensor([10, 20]))
    assert out.data.tolist() == [[11, 21], [12, 22]]


def test_broadcast_bias_grad_is_column_sum(verify, rng):
    x, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    up = rng.normal(size=(4, 3))
    tx, tb = leaf(x), leaf(b)
    T.backward(T.sum_all(T.mul(T.add(tx, tb), Tensor(up))))
    np.testing.assert_allclose(tb.grad, up.sum(axis=0))
    assert max_rel_err(tb.grad, numeric_grad(lambda v: float(((x + v) * up).sum()), b)) <= 1e-6


def test_broadcast_mul_and_sub_grads(verify, rng):
    x, s = rng.normal(size=(2, 3, 4)), rng.normal(size=4)
    gx, gs = grad_of(T.mul, x, s)
    assert max_rel_err(gs, numeric_grad(lambda v: float((x * v).sum()), s)) <= 1e-6
    np.testing.assert_allclose(gx, np.broadcast_to(s, x.shape))
    gx, gs = grad_of(T.sub, x, s)
    np.testing.assert_allclose(gs, np.full(4, -6.0))


def test_non_broadcastable_shapes_raise():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        T.elementwise("div", Tensor([1.0]), Tensor([1.0]))


# -- nonlinearities ---------------------------------------------------------

def test_softmax_symmetric():
    assert T.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_softmax_is_stable_for_large_logits():
    out = T.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    assert np.all(np.isfinite(out)) and abs(out.sum() - 1) < 1e-6


def test_softmax_masked_entries_get_zero():
    out = T.softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum(), rtol=1e-6)


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]])).data
    np.testing.assert_array_equal(out, np.zeros((1, 4)))


def test_empty_axis_errors():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.ones((2, 0))))
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.ones((2, 0))))


def test_cross_entropy_grads_match_finite_differences(verify, rng):
    z, y = rng.normal(size=(2, 5)), np.array([1, 4])
    t = leaf(z)
    loss = T.cross_entropy(t, y)
    assert abs(loss.item() - np_cross_entropy(z, y)) < 1e-12
    T.backward(loss)
    assert max_rel_err(t.grad, numeric_grad(lambda v: np_cross_entropy(v, y), z)) <= 1e-5


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@pytest.mark.parametrize(
    "name, build, ref",
    [
        ("softmax", T.softmax, lambda x: np.exp(np_log_softmax(x))),
        ("gelu", T.gelu, np_gelu),
        ("relu", T.relu, lambda x: np.maximum(x, 0)),
        ("layer_norm", lambda x: T.layer_norm(x), np_layer_norm),
    ],
)
def test_unary_ops_forward_and_grad(verify, rng, name, build, ref):
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))  # random upstream weights so grads are not trivially zero
    np.testing.assert_allclose(build(Tensor(x)).data, ref(x), rtol=1e-12, atol=1e-12)
    t = leaf(x)
    T.backward(T.sum_all(T.mul(build(t), Tensor(w))))
    assert max_rel_err(t.grad, numeric_grad(lambda v: float((ref(v) * w).sum()), x)) <= 1e-4


def test_layer_norm_affine_grads(verify, rng):
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=4), rng.normal(size=4)
    up = rng.normal(size=(2, 3, 4))
    tx, tw, tb = leaf(x), leaf(w), leaf(b)
    T.backward(T.sum_all(T.mul(T.layer_norm(tx, tw, tb), Tensor(up))))
    f = lambda xx, ww, bb: float((np_layer_norm(xx, ww, bb) * up).sum())  # noqa: E731
    assert max_rel_err(tx.grad, numeric_grad(lambda v: f(v, w, b), x)) <= 1e-4
    assert max_rel_err(tw.grad, numeric_grad(lambda v: f(x, v, b), w)) <= 1e-4
    assert max_rel_err(tb.grad, numeric_grad(lambda v: f(x, w, v), b)) <= 1e-4


def test_embedding_and_mean_pool_grads(verify, rng):
    wt = rng.normal(size=(5, 3))
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    up = rng.normal(size=(2, 3))
    t = leaf(wt)
    T.backward(T.sum_all(T.mul(T.mean_pool(T.embedding(t, ids)), Tensor(up))))
    f = lambda v: float((v[ids].mean(axis=1) * up).sum())  # noqa: E731
    assert max_rel_err(t.grad, numeric_grad(f, wt)) <= 1e-6
    with pytest.raises(ValueError):
        T.embedding(t, np.array([[5]]))


def test_mean_pool_respects_mask():
    x = Tensor(np.arange(12.0).reshape(1, 4, 3))
    out = T.mean_pool(x, np.array([[True, True, False, False]])).data
    np.testing.assert_allclose(out, [[1.5, 2.5, 3.5]])


# -- backward ---------------------------------------------------------------

def test_sum_grad_is_ones():
    x = leaf(np.zeros((2, 3, 4)))
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_sum_of_product_grad(rng):
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    ta, tb = leaf(a), leaf(b)
    T.backward(T.sum_all(T.mul(ta, tb)))
    np.testing.assert_array_equal(ta.grad, tb.data)
    np.testing.assert_array_equal(tb.grad, ta.data)


def test_backward_accumulates_without_zero_grad(rng):
    x = leaf(rng.normal(size=3))
    for _ in range(2):
        T.backward(T.sum_all(T.scale(x, 3.0)))
    np.testing.assert_allclose(x.grad, np.full(3, 6.0))
    x.zero_grad()
    assert x.grad is None


def test_reused_tensor_accumulates_both_paths(verify, rng):
    a = rng.normal(size=(2, 2))
    t = leaf(a)
    T.backward(T.sum_all(T.mul(t, t)))
    np.testing.assert_allclose(t.grad, 2 * a)


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        T.backward(T.scale(leaf(np.ones(3)), 2.0))


def test_item_requires_single_element():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with T.no_grad():
        y = T.add(x, x)
    assert not y.requires_grad and y._ctx is None


def test_precisions():
    assert Tensor([1]).dtype == np.float32
    with T.precision("verify"):
        assert Tensor([1]).dtype == np.float64
    assert Tensor([1]).dtype == np.float32
    with pytest.raises(ValueError):
        T.set_precision("half")


# -- graph ------------------------------------------------------------------

def _small_graph(seed):
    g = np.random.default_rng(seed)
    x, w = leaf(g.normal(size=(2, 3))), leaf(g.normal(size=(3, 2)))
    return T.cross_entropy(T.gelu(T.matmul(x, w)), [0, 1])


def test_graph_is_topological_and_deterministic():
    g1, g2 = T.trace(_small_graph(0)), T.trace(_small_graph(0))
    assert g1 == g2
    assert [n.op for n in g1.nodes] == ["MatMul", "GELU", "CrossEntropy"]
    for node in g1.nodes:
        assert all(i < node.output for i in node.inputs)


def test_backward_visits_each_node_once(monkeypatch):
    calls = []
    loss = _small_graph(1)
    for cls in (T.MatMul, T.GELU, T.CrossEntropy):
        real = cls.backward

        def counting(self, grad, _real=real, _name=cls.__name__):
            calls.append(_name)
            return _real(self, grad)

        monkeypatch.setattr(cls, "backward", counting)
    T.backward(loss)
    assert calls == ["CrossEntropy", "GELU", "MatMul"]


def test_determinism_bitwise():
    runs = []
    for _ in range(2):
        loss = _small_graph(7)
        T.backward(loss)
        node = loss._ctx.parents[0]._ctx.parents[0]._ctx.parents
        runs.append((loss.data.tobytes(), node[0].grad.tobytes(), node[1].grad.tobytes()))
    assert runs[0] == runs[1]


# -- properties -------------------------------------------------------------

finite = st.floats(-10, 10, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=4), elements=finite))
def test_ops_are_pure(x):
    with T.precision("verify"):
        a = leaf(x)
        v = leaf(np.linspace(-1, 1, x.shape[-1]))
        before = (a.data.tobytes(), v.data.tobytes())
        out = T.layer_norm(T.gelu(T.mul(T.add(a, v), v)), v, v)
        if x.ndim >= 2:
            out = T.softmax(out)
        T.backward(T.sum_all(out))
        assert (a.data.tobytes(), v.data.tobytes()) == before
        assert np.all(np.isfinite(a.grad)) and a.grad.shape == a.shape


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    with T.precision("verify"):
        out = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)
    assert np.all(out >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_matmul_grad_closed_form(m, k, n, seed):
    g = np.random.default_rng(seed)
    a, b, up = g.normal(size=(m, k)), g.normal(size=(k, n)), g.normal(size=(m, n))
    with T.precision("verify"):
        ta, tb = leaf(a), leaf(b)
        T.backward(T.sum_all(T.mul(T.matmul(ta, tb), Tensor(up))))
    np.testing.assert_allclose(ta.grad, up @ b.T)
    np.testing.assert_allclose(tb.grad, a.T @ up)
