import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpdnet import tensor as T
from lpdnet.gradcheck import check_primitives
from lpdnet.tensor import NumericError, ParamStore, ShapeError


def test_shared_mlp_examples():
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(T.shared_mlp(x, np.eye(2), np.zeros(2)).data, x)
    y = T.shared_mlp([[4.0, 5.0]], [[1.0], [2.0]], [3.0])
    assert y.data.tolist() == [[17.0]]
    with pytest.raises(ShapeError):
        T.shared_mlp(np.ones((2, 3)), np.ones((2, 2)))


def test_maxpool_ties_and_identity():
    one = np.array([[1.0, -2.0, 3.0]])
    out, arg = T.maxpool_points(one)
    np.testing.assert_array_equal(out.data, one[0])
    x = T.Tensor(np.array([[1.0, 5.0], [3.0, 5.0], [3.0, 0.0]]))
    out, arg = T.maxpool_points(x)
    assert arg.tolist() == [1, 0]
    T.backward(T.tsum(out))
    np.testing.assert_array_equal(x.grad, [[0, 1], [1, 0], [0, 0]])
    with pytest.raises(ShapeError):
        T.maxpool_points(np.empty((0, 2)))


def test_maxpool_permutation(rng):
    x = rng.normal(size=(20, 6))
    np.testing.assert_array_equal(T.maxpool_points(x)[0].data, T.maxpool_points(x[rng.permutation(20)])[0].data)


def test_softmax_and_l2():
    np.testing.assert_allclose(T.softmax_rows(np.full((2, 4), 3.0)).data, 0.25, rtol=0, atol=1e-15)
    np.testing.assert_allclose(T.l2_normalize(np.array([3.0, 4.0])).data, [0.6, 0.8], rtol=0, atol=1e-15)
    with pytest.warns(RuntimeWarning):
        z = T.l2_normalize(np.zeros(3))
    assert z.data.tolist() == [0, 0, 0]
    big = T.softmax_rows(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(big.data).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 16), st.integers(0, 2**31))
def test_softmax_rows_sum(n, k, seed):
    x = np.random.default_rng(seed).normal(scale=30, size=(n, k))
    np.testing.assert_allclose(T.softmax_rows(x).data.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_non_finite_is_error():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        T.mul(np.array([1e308]), np.array([1e308]))


def test_primitives_gradients():
    errs = check_primitives(seed=3)
    for name, e in errs.items():
        assert e < 1e-6, name


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 8), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
def test_shared_mlp_gradcheck_random_shapes(n, cin, cout, seed):
    r = np.random.default_rng(seed)
    store = ParamStore(0)
    store.add("x", r.normal(size=(n, cin)))
    store.add("w", r.normal(size=(cin, cout)))
    store.add("b", r.normal(size=cout))
    wts = r.normal(size=(n, cout))
    res = T.finite_difference_check(lambda s: T.tsum(T.mul(T.shared_mlp(s["x"], s["w"], s["b"]), wts)), store)
    assert res.max_rel_err < 1e-6


def test_linear_gradient_is_exact():
    store = ParamStore(0)
    store.glorot("w", 4, 3)
    store.zeros("b", (3,))
    x = np.random.default_rng(0).normal(size=(5, 4))
    res = T.finite_difference_check(lambda s: T.tsum(T.shared_mlp(x, s["w"], s["b"])), store)
    assert res.max_rel_err < 1e-9


def test_checker_detects_corrupted_gradient():
    store = ParamStore(0)
    store.glorot("w", 4, 3)
    x = np.random.default_rng(0).normal(size=(5, 4))

    def bad(s):
        y = T.shared_mlp(x, s["w"])
        # forward value is 2*sum(y) but the backward only reports one copy
        return T.Tensor(2 * y.data.sum(), (y,), lambda g: (np.full_like(y.data, g),))
    res = T.finite_difference_check(bad, store)
    assert res.max_rel_err > 1e-2


def test_gather_neighbors_backward_accumulates(rng):
    x = T.Tensor(rng.normal(size=(1, 4, 2)))
    idx = np.array([[[1, 1], [0, 2], [1, 3], [0, 0]]])
    out = T.gather_neighbors(x, idx)
    np.testing.assert_array_equal(out.data[0, 0], x.data[0, [1, 1]])
    T.backward(T.tsum(out))
    counts = np.bincount(idx.ravel(), minlength=4)
    np.testing.assert_array_equal(x.grad[0], np.repeat(counts[:, None], 2, axis=1))


def test_deterministic_forward(rng):
    a = rng.normal(size=(3, 5, 4))
    c = rng.normal(size=(2, 4))
    s = rng.normal(size=(3, 5, 2))
    r1 = T.vlad_aggregate(T.softmax_rows(s), a, c).data
    r2 = T.vlad_aggregate(T.softmax_rows(s), a, c).data
    assert r1.tobytes() == r2.tobytes()


def test_checkpoint_roundtrip(tmp_path):
    store = ParamStore(5)
    store.glorot("b.w", 3, 4)
    store.zeros("a.bias", (4,))
    store.add("scalar", np.array(2.5))
    p = tmp_path / "c.ckpt"
    T.save_checkpoint(p, store)
    raw = p.read_bytes()
    assert raw[:12] == b"LPDNETCKPT\0\0" and int.from_bytes(raw[12:16], "little") == 1
    vals = T.load_checkpoint(p)
    assert list(vals) == ["a.bias", "b.w", "scalar"]
    for k, v in store.values().items():
        np.testing.assert_array_equal(vals[k], v)
    again = tmp_path / "d.ckpt"
    T.save_checkpoint(again, store)
    assert again.read_bytes() == raw
    p.write_bytes(b"garbage" * 4)
    with pytest.raises(ValueError):
        T.load_checkpoint(p)


def test_param_store_rules():
    store = ParamStore(0)
    store.zeros("w", (2,))
    with pytest.raises(KeyError):
        store.zeros("w", (2,))
    with pytest.raises(ShapeError):
        store.load_values({"w": np.zeros(3)})
    with pytest.raises(KeyError):
        store.load_values({})
    with pytest.raises(KeyError):
        store.load_values({"w": np.zeros(2), "v": np.zeros(2)})
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        store.load_values({"w": np.ones(2)})
    assert store["w"].data.tolist() == [1, 1]
