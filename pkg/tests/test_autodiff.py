import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdcheck import TOL, numeric_grad, rel_err
from rsg import _accel
from rsg import autodiff as ad
from rsg.errors import DetachedLossError, MissingGradError, NotScalarError, ShapeMismatchError


def check_grads(build, arrays):
    """``build`` maps a list of Tensors to a scalar Tensor."""
    ts = [ad.tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(ts)
    ad.backward(loss)

    def f(arrs):
        return build([ad.tensor(a) for a in arrs]).item()

    arrs = [a.copy() for a in arrays]
    return max(rel_err(t.grad, numeric_grad(f, arrs, i)) for i, t in enumerate(ts))


def test_softmax_uniform():
    y = ad.softmax(ad.tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(y.data, [1 / 3] * 3)


def test_sigmoid_zero_and_grad():
    x = ad.tensor(0.0, requires_grad=True)
    y = ad.sigmoid(x)
    assert y.item() == 0.5
    ad.backward(y)
    assert x.grad == pytest.approx(0.25)


def test_matmul_matches_naive_loops():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
    naive = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            for k in range(3):
                naive[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ad.matmul(ad.tensor(a), ad.tensor(b)).data, naive, atol=1e-12, rtol=0)


def test_sum_grad_is_ones():
    x = ad.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(3, 2\)"):
        ad.add(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeMismatchError):
        ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((2, 3))))


def test_scalar_broadcast_allowed():
    x = ad.tensor(np.ones((2, 2)), requires_grad=True)
    s = ad.tensor(3.0, requires_grad=True)
    ad.backward(ad.sum_(x * s))
    assert s.grad == pytest.approx(4.0)
    np.testing.assert_allclose(x.grad, 3.0)


def test_backward_errors():
    with pytest.raises(NotScalarError):
        ad.backward(ad.tensor(np.ones(3), requires_grad=True) * 2.0)
    with pytest.raises(DetachedLossError):
        ad.backward(ad.sum_(ad.tensor(np.ones(3))))


def test_no_tape_without_grad():
    y = ad.sigmoid(ad.tensor(np.ones(3)))
    assert not y.requires_grad and y.is_leaf


UNARY = {
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "exp": ad.exp,
    "square": ad.square,
    "log": lambda t: ad.log(ad.add(ad.square(t), 0.5)),
    "relu": lambda t: ad.relu(t),
    "softmax0": lambda t: ad.softmax(t, axis=0),
    "softmax1": lambda t: ad.softmax(t, axis=-1),
    "mean": lambda t: ad.mean(t, axis=0),
    "transpose": ad.transpose,
    "slice": lambda t: t[1:, ::2],
    "take": lambda t: ad.take(t, [0, 0, 1], axis=1),
    "reshape": lambda t: ad.reshape(t, (-1,)),
    "clip": lambda t: ad.clip(t, -0.7, 0.9),
    "broadcast": lambda t: ad.broadcast_to(ad.sum_(t, axis=0), (4,) + t.shape[1:]),
}


@settings(max_examples=15, deadline=None)
@given(name=st.sampled_from(sorted(UNARY)), rows=st.integers(2, 4), cols=st.integers(2, 5),
       seed=st.integers(0, 10_000))
def test_unary_ops_match_finite_differences(name, rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, cols))
    if name in ("relu", "clip"):  # keep away from kinks
        x = np.where(np.abs(x) < 0.05, 0.3, x)
        x = np.where(np.abs(x - 0.9) < 0.05, 0.5, x)
        x = np.where(np.abs(x + 0.7) < 0.05, 0.5, x)
    w = rng.normal(size=UNARY[name](ad.tensor(x)).shape)
    err = check_grads(lambda ts: ad.sum_(ad.mul(UNARY[name](ts[0]), ad.tensor(w))), [x])
    assert err < TOL


@settings(max_examples=10, deadline=None)
@given(n=st.integers(1, 4), m=st.integers(1, 4), k=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_binary_ops_match_finite_differences(n, m, k, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(n, k)), rng.normal(size=(k, m)), rng.normal(size=(n, k))
    build = lambda ts: ad.sum_(ad.square(ad.concat([
        ad.matmul(ts[0], ts[1]), ad.mul(ts[0], ts[2]), ad.sub(ts[2], ts[0]), ad.add(ts[0], ts[2])], axis=1)))
    assert check_grads(build, [a, b, c]) < TOL


def test_leaf_used_twice_accumulates():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 3))
    build = lambda ts: ad.sum_(ad.mul(ad.sigmoid(ts[0]), ad.matmul(ts[0], ts[0])))
    assert check_grads(build, [x]) < TOL


def test_three_layer_mlp_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 4))
    ws = [rng.normal(size=(4, 6)) * 0.5, rng.normal(size=(6, 6)) * 0.5, rng.normal(size=(6, 3)) * 0.5]
    y = rng.integers(0, 3, size=5)
    onehot = np.eye(3)[y]

    def build(ts):
        h = ad.tanh(ad.matmul(ad.tensor(x), ts[0]))
        h = ad.sigmoid(ad.matmul(h, ts[1]))
        p = ad.softmax(ad.matmul(h, ts[2]), axis=1)
        return ad.mul(ad.sum_(ad.mul(ad.log(p), ad.tensor(onehot))), -1.0)

    assert check_grads(build, ws) < TOL


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def backend(request):
    prev = _accel.USE_NUMBA
    if request.param and not _accel.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)


def test_edge_matvec_mean_grads(backend):
    rng = np.random.default_rng(5)
    n, ne = 5, 9
    src = rng.integers(0, n, ne)
    dst = rng.integers(0, n, ne)
    W, X = rng.normal(size=(ne, 3, 4)), rng.normal(size=(n, 4))
    build = lambda ts: ad.sum_(ad.square(ad.edge_matvec_mean(ts[0], ts[1], src, dst, n)))
    assert check_grads(build, [W, X]) < TOL
    out = ad.edge_matvec_mean(ad.tensor(W), ad.tensor(X), src, dst, n).data
    ref = np.zeros((n, 3))
    for e in range(ne):
        ref[dst[e]] += W[e] @ X[src[e]] / np.sum(dst == dst[e])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_grads_and_reference(backend):
    rng = np.random.default_rng(6)
    x, w = rng.normal(size=(2, 2, 7, 7)), rng.normal(size=(3, 2, 3, 3))
    build = lambda ts: ad.sum_(ad.square(ad.conv2d(ts[0], ts[1], stride=2, pad=1)))
    assert check_grads(build, [x, w]) < TOL
    out = ad.conv2d(ad.tensor(x), ad.tensor(w), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 4, 4))
    for b in range(2):
        for o in range(3):
            for r in range(4):
                for q in range(4):
                    ref[b, o, r, q] = np.sum(xp[b, :, 2 * r:2 * r + 3, 2 * q:2 * q + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_backends_agree_on_kernels():
    if not _accel.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    rng = np.random.default_rng(7)
    for name, (nb, py) in _accel.KERNELS.items():
        if name == "edge_matvec_fwd":
            W, X = rng.normal(size=(6, 3, 2)), rng.normal(size=(4, 2))
            src, dst = rng.integers(0, 4, 6), rng.integers(0, 4, 6)
            inv = rng.random(4)
            np.testing.assert_allclose(nb(W, X, src, dst, inv, 4), py(W, X, src, dst, inv, 4), atol=1e-12)
        elif name == "points_in_polygon":
            poly = np.array([[0, 0], [4, 0], [4, 3], [1, 5], [0, 3.0]])
            px, py_ = rng.uniform(-1, 5, 200), rng.uniform(-1, 6, 200)
            np.testing.assert_array_equal(nb(px, py_, poly), py(px, py_, poly))
        elif name == "min_perm_code":
            import itertools
            M = rng.integers(0, 3, size=(4, 4))
            perms = np.array(list(itertools.permutations(range(4))))
            np.testing.assert_array_equal(nb(M, perms), py(M, perms))
        elif name == "adam_update":
            p, g = rng.normal(size=7), rng.normal(size=7)
            states = [(p.copy(), np.zeros(7), np.zeros(7)) for _ in range(2)]
            for fn, (pp, m, v) in zip((nb, py), states):
                fn(pp, g, m, v, 1e-2, 0.9, 0.999, 1e-8)
            np.testing.assert_allclose(states[0][0], states[1][0], rtol=1e-14)


def test_adam_zero_grad_leaves_params():
    p = ad.tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    st_ = ad.AdamState({"p": p})
    ad.adam_step({"p": p}, st_)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st_.step == 1


def test_adam_first_step_moves_by_lr():
    p = ad.tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0])
    s = ad.AdamState({"p": p}, lr=1e-3)
    ad.adam_step({"p": p}, s)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p.data[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def reference_adam(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1 ** t), v / (1 - b2 ** t)
        theta = theta - lr * mh / (np.sqrt(vh) + eps)
        out.append(theta)
    return out


def test_adam_two_steps_match_transcript():
    # transcript computed with the textbook (uncombined) bias-corrected update
    expected = reference_adam(2.0, [0.3, 0.3], lr=0.01)
    p = ad.tensor(np.array([2.0]), requires_grad=True)
    s = ad.AdamState({"p": p}, lr=0.01)
    got = []
    for _ in range(2):
        p.grad = np.array([0.3])
        ad.adam_step({"p": p}, s)
        got.append(p.data[0])
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(expected, [1.99, 1.98], atol=1e-9)


def test_adam_missing_grad():
    p = ad.tensor(np.ones(2), requires_grad=True)
    with pytest.raises(MissingGradError):
        ad.adam_step({"p": p}, ad.AdamState({"p": p}))


def test_checkpoint_round_trip_and_layout(tmp_path):
    tensors = {"b": np.arange(3.0), "a.w": np.array([[1.5, -2.0]]), "s": np.array(7.0)}
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, tensors)
    back = ad.load_checkpoint(path)
    assert sorted(back) == sorted(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    raw = path.read_bytes()
    assert raw[:4] == b"RSGT" and raw[4:12] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    # first record is "a.w": name length 3, rank 2, shape (1, 2), then two doubles
    assert raw[12:16] == (3).to_bytes(4, "little") and raw[16:19] == b"a.w"
    assert len(raw) == 12 + (4 + 3 + 4 + 16 + 16) + (4 + 1 + 4 + 8 + 24) + (4 + 1 + 4 + 0 + 8)


def test_checkpoint_truncated(tmp_path):
    from rsg.errors import ParseError

    raw = ad.checkpoint_bytes({"w": np.ones((2, 2))})
    with pytest.raises(ParseError):
        ad.parse_checkpoint(raw[:-3])
