import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from contourqa import autodiff as ad
from contourqa.autodiff import Parameter, Tensor

TOL = 1e-4


def check(f, params, tol=TOL, **kw):
    err = ad.grad_check(f, params, **kw)
    assert err < tol, err
    return err


@pytest.fixture(autouse=True)
def f64():
    with ad.precision(np.float64):
        yield


def nudged(rng, shape):
    """Random values kept >= 1e-3 away from 0 (the leaky-relu kink)."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-3, np.sign(x + 1e-12) * 1e-3, x)


def test_linear_and_quadratic_examples():
    w = Parameter([1.0, 2.0, 3.0])
    ad.backward(ad.tsum(w))
    np.testing.assert_array_equal(w.grad, [1, 1, 1])
    w.grad = None
    ad.backward(ad.tsum(w * w))
    np.testing.assert_array_equal(w.grad, [2, 4, 6])


def test_quadratic_form_grad_check_is_tight(rng):
    A = Tensor(rng.normal(size=(4, 4)))
    x = Parameter(rng.normal(size=(4, 1)))
    err = ad.grad_check(lambda: ad.tsum(ad.mul(x, ad.matmul(A, x))), {"x": x})
    assert err < 1e-9


def test_gradients_accumulate_and_graph_freed(rng):
    w = Parameter(rng.normal(size=3))
    loss = ad.tsum(w * 2.0)
    ad.backward(loss)
    with pytest.raises(ad.GraphFreedError):
        ad.backward(loss)
    ad.backward(ad.tsum(w * 2.0))
    np.testing.assert_allclose(w.grad, 4.0)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(w * 1.0)


def test_elementwise_ops(rng):
    a = Parameter(nudged(rng, (3, 4)))
    b = Parameter(nudged(rng, (1, 4)))  # broadcast
    check(lambda: ad.tsum(ad.mul(ad.add(a, b), a - b)), {"a": a, "b": b})
    check(lambda: ad.tsum(ad.mul(ad.neg(a), ad.sigmoid(a))), {"a": a})
    check(lambda: ad.tsum(ad.mul(ad.leaky_relu(a, 0.01), a)), {"a": a})
    check(lambda: ad.tmean(ad.mul(ad.reshape(a, (4, 3)), ad.reshape(a, (4, 3)))), {"a": a})
    check(lambda: ad.tsum(ad.mul(ad.tsum(a, axis=1), ad.tmean(a, axis=1))), {"a": a})
    check(lambda: ad.tsum(ad.mul(ad.tsum(a, axis=0, keepdims=True), b)), {"a": a, "b": b})


def test_matmul(rng):
    a = Parameter(rng.normal(size=(3, 5)))
    b = Parameter(rng.normal(size=(5, 2)))
    check(lambda: ad.tsum(ad.mul(ad.matmul(a, b), ad.matmul(a, b))), {"a": a, "b": b})


def test_gather_scatter(rng):
    x = Parameter(rng.normal(size=(6, 3)))
    idx = rng.integers(0, 6, size=15)
    w = Tensor(rng.normal(size=(15, 3)))
    check(lambda: ad.tsum(ad.mul(ad.gather(x, idx), w)), {"x": x})
    y = Parameter(rng.normal(size=(15, 3)))
    v = Tensor(rng.normal(size=(6, 3)))
    check(lambda: ad.tsum(ad.mul(ad.scatter_add(y, idx, 6), v)), {"y": y})
    with pytest.raises(IndexError):
        ad.gather(x, [6])
    with pytest.raises(IndexError):
        ad.scatter_add(y, np.full(15, 7), 6)


@given(st.integers(1, 10), st.integers(1, 30), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_scatter_is_adjoint_of_gather(n, m, c, seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=m)
    x = rng.normal(size=(n, c))
    g = rng.normal(size=(m, c))
    # <gather(x), g> == <x, scatter(g)>
    lhs = (x[idx] * g).sum()
    rhs = (x * ad.scatter_add(Tensor(g), idx, n).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)
    # backward of scatter-add is the gather of the upstream gradient
    y = Parameter(g)
    ad.backward(ad.tsum(ad.mul(ad.scatter_add(y, idx, n), Tensor(x))))
    np.testing.assert_allclose(y.grad, x[idx])


def test_spmm(rng):
    S = sp.random(7, 5, density=0.4, random_state=1, format="csr")
    x = Parameter(rng.normal(size=(5, 3)))
    w = Tensor(rng.normal(size=(7, 3)))
    check(lambda: ad.tsum(ad.mul(ad.spmm(S, x), w)), {"x": x})


def test_conv3d(rng):
    x = Parameter(rng.normal(size=(2, 2, 5, 5, 5)))
    w = Parameter(rng.normal(size=(3, 2, 3, 3, 3)) * 0.3)
    b = Parameter(rng.normal(size=3))
    r = Tensor(rng.normal(size=(2, 3, 3, 3, 3)))
    check(lambda: ad.tsum(ad.mul(ad.conv3d(x, w, b), r)), {"x": x, "w": w, "b": b})
    # forward against a direct loop
    out = ad.conv3d(x, w, b).data
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    ref[:, o, i, j, k] = (x.data[:, :, i:i + 3, j:j + 3, k:k + 3] * w.data[o]).sum((1, 2, 3, 4)) + b.data[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_batch_norm(rng):
    x = Parameter(rng.normal(size=(8, 3)) * 2 + 1)
    g = Parameter(rng.normal(size=3))
    b = Parameter(rng.normal(size=3))
    r = Tensor(rng.normal(size=(8, 3)))
    rm, rv = np.zeros(3), np.ones(3)
    check(lambda: ad.tsum(ad.mul(ad.batch_norm(x, g, b, rm.copy(), rv.copy(), True), r)), {"x": x, "g": g, "b": b})
    check(lambda: ad.tsum(ad.mul(ad.batch_norm(x, g, b, rm, rv, False), r)), {"x": x, "g": g, "b": b})
    # running statistics: momentum 0.1, unbiased variance
    rm, rv = np.zeros(3), np.ones(3)
    ad.batch_norm(Tensor(x.data), g, b, rm, rv, True)
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.data.var(0, ddof=1))
    x5 = Parameter(rng.normal(size=(2, 3, 2, 2, 2)))
    r5 = Tensor(rng.normal(size=(2, 3, 2, 2, 2)))
    check(lambda: ad.tsum(ad.mul(ad.batch_norm(x5, g, b, np.zeros(3), np.ones(3), True), r5)), {"x": x5})


def test_losses(rng):
    z = Parameter(rng.normal(size=(6, 5)))
    y = rng.integers(0, 5, size=6)
    w = rng.uniform(0.2, 5, size=5)
    check(lambda: ad.softmax_cross_entropy(z, y), {"z": z})
    check(lambda: ad.softmax_cross_entropy(z, y, w), {"z": z})
    # weighted mean = sum(w_y * ce) / sum(w_y)
    p = np.exp(z.data) / np.exp(z.data).sum(1, keepdims=True)
    ce = -np.log(p[np.arange(6), y])
    assert float(ad.softmax_cross_entropy(z, y, w).data) == pytest.approx((w[y] * ce).sum() / w[y].sum())
    s = Parameter(rng.normal(size=(7, 1)))
    t = rng.integers(0, 2, size=7)
    check(lambda: ad.bce_with_logits(s, t), {"s": s})
    q = 1 / (1 + np.exp(-s.data.ravel()))
    ref = -(t * np.log(q) + (1 - t) * np.log(1 - q)).mean()
    assert float(ad.bce_with_logits(s, t).data) == pytest.approx(ref)


def test_modules_state_dict(rng):
    with ad.precision(np.float32):
        lin = ad.Linear(4, 3, rng)
        bn = ad.BatchNorm(3)
        assert lin.weight.data.dtype == np.float32
    state = {**{f"lin.{k}": v for k, v in lin.state_dict().items()}}
    assert set(state) == {"lin.weight", "lin.bias"}
    lin2 = ad.Linear(4, 3, np.random.default_rng(99))
    lin2.load_state_dict(lin.state_dict())
    np.testing.assert_array_equal(lin2.weight.data, lin.weight.data)
    with pytest.raises(KeyError):
        lin2.load_state_dict({"weight": lin.weight.data})
    assert "running_mean" in bn.state_dict()


# -- optimiser -----------------------------------------------------------------

def test_adamw_decay_only_step():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    st_ = ad.OptimState(lr0=1e-3, weight_decay=1e-3)
    ad.adamw_step(p, {"w": np.zeros(3)}, st_)
    np.testing.assert_array_equal(p["w"], np.array([1.0, -2.0, 3.0]) * (1 - 1e-6))


def test_adamw_first_step_and_limit():
    g = np.array([0.5, -3.0, 1e-3])
    p = {"w": np.zeros(3)}
    st_ = ad.OptimState(lr0=1e-2, weight_decay=0.0)
    ad.adamw_step(p, {"w": g}, st_)
    np.testing.assert_allclose(p["w"], -1e-2 * np.sign(g), rtol=1e-4)
    for _ in range(10_000 - 1):
        before = p["w"].copy()
        ad.adamw_step(p, {"w": g}, st_)
    np.testing.assert_allclose(p["w"] - before, -1e-2 * np.sign(g), rtol=1e-4)
    assert st_.t == 10_000


def test_adamw_deterministic_and_diverged():
    g = {"w": np.array([0.1, 0.2])}
    a, b = {"w": np.ones(2)}, {"w": np.ones(2)}
    sa, sb = ad.OptimState(), ad.OptimState()
    for _ in range(5):
        ad.adamw_step(a, g, sa)
        ad.adamw_step(b, g, sb)
    assert a["w"].tobytes() == b["w"].tobytes()
    with pytest.raises(ad.DivergenceError, match="diverged.*enc.w"):
        ad.adamw_step({"enc.w": np.ones(2)}, {"enc.w": np.array([np.nan, 0.0])}, ad.OptimState())


def test_cosine_schedule():
    assert ad.cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
    assert ad.cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-18)
    assert ad.cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    with pytest.raises(ValueError):
        ad.cosine_lr(0, 0, 1e-3)
    lrs = [ad.cosine_lr(t, 37, 1e-3) for t in range(38)]
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))
    assert math.isclose(lrs[0] + lrs[-1], lrs[10] + lrs[27])


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a.w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
    st_ = ad.OptimState(t=7)
    st_.m["a.w"] = np.ones((3, 4))
    st_.v["a.w"] = np.full((3, 4), 2.0)
    ad.save_checkpoint(tmp_path / "c.ck", tensors, {"fold": 1, "seed": 3}, st_)
    back, meta, opt = ad.load_checkpoint(tmp_path / "c.ck")
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
    assert meta["fold"] == 1 and opt.t == 7
    np.testing.assert_array_equal(opt.v["a.w"], 2.0)
