import numpy as np
import pytest

from ssllanes.autodiff import (
    Adam,
    CheckpointError,
    ParameterStore,
    ShapeError,
    Tensor,
    backward,
    check_gradients,
    load_checkpoint,
    ops,
    precision,
    read_checkpoint,
    save_checkpoint,
)

N_INSTANCES = 50
TOL = 1e-5


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def away_from_zero(rng, *shape):
    x = rng.normal(size=shape)
    return Tensor(np.where(np.abs(x) < 0.05, 0.3, x), requires_grad=True)


def project(y, w):
    """Random linear functional so every output entry matters."""
    return ops.sum(ops.mul(y, w))


# (name, builder(rng) -> (fn, inputs))
def _unary(op, make=leaf, shape=(3, 4)):
    def build(rng):
        x = make(rng, *shape)
        w = rng.normal(size=op(x).shape)
        return (lambda: project(op(x), w)), [x]
    return build


def _binary(op, sa=(3, 4), sb=(3, 4)):
    def build(rng):
        a, b = leaf(rng, *sa), leaf(rng, *sb)
        w = rng.normal(size=op(a, b).shape)
        return (lambda: project(op(a, b), w)), [a, b]
    return build


def _conv(stride):
    def build(rng):
        x, w, b = leaf(rng, 2, 7, 3), leaf(rng, 3, 3, 4), leaf(rng, 4)
        proj = rng.normal(size=ops.conv1d(x, w, b, stride=stride).shape)
        return (lambda: project(ops.conv1d(x, w, b, stride=stride), proj)), [x, w, b]
    return build


def _scatter(rng):
    src = leaf(rng, 6, 3)
    idx = rng.integers(0, 4, size=6)
    w = rng.normal(size=(4, 3))
    return (lambda: project(ops.scatter_add_rows(src, idx, 4), w)), [src]


def _gather(rng):
    x = leaf(rng, 5, 3)
    idx = rng.integers(0, 5, size=8)
    w = rng.normal(size=(8, 3))
    return (lambda: project(ops.gather_rows(x, idx), w)), [x]


def _layer_norm(rng):
    x, g, b = leaf(rng, 4, 5), leaf(rng, 5), leaf(rng, 5)
    w = rng.normal(size=(4, 5))
    return (lambda: project(ops.layer_norm(x, g, b), w)), [x, g, b]


def _linear(rng):
    x, wt, b = leaf(rng, 4, 3), leaf(rng, 3, 5), leaf(rng, 5)
    w = rng.normal(size=(4, 5))
    return (lambda: project(ops.linear(x, wt, b), w)), [x, wt, b]


def _masked_mean(rng):
    x = leaf(rng, 4, 3)
    m = rng.random(4) < 0.7
    m[0] = True
    w = rng.normal(size=3)
    return (lambda: project(ops.masked_mean(x, m, axis=0), w)), [x]


def _concat(rng):
    a, b = leaf(rng, 3, 2), leaf(rng, 3, 4)
    w = rng.normal(size=(3, 6))
    return (lambda: project(ops.concat([a, b], axis=1), w)), [a, b]


def _smooth_l1(rng):
    p, t = leaf(rng, 5, 2), Tensor(rng.normal(size=(5, 2)) * 2)
    # keep clear of the |d| = 1 kink
    d = p.data - t.data
    p.data[np.abs(np.abs(d) - 1.0) < 0.05] += 0.2
    return (lambda: ops.smooth_l1(p, t)), [p]


def _mse(rng):
    p, t = leaf(rng, 5, 2), leaf(rng, 5, 2)
    return (lambda: ops.mse(p, t)), [p, t]


def _cross_entropy(rng):
    z = leaf(rng, 5, 6)
    y = rng.integers(0, 6, size=5)
    return (lambda: ops.cross_entropy(z, y)), [z]


def _focal(rng):
    z = leaf(rng, 12)
    y = rng.integers(0, 2, size=12)
    return (lambda: ops.focal_loss(z, y, gamma=2.0, alpha=0.25)), [z]


def _weighted_sum(rng):
    x = leaf(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    return (lambda: ops.mul_scalar(ops.weighted_sum(x, w), 1.3)), [x]


OPS = {
    "matmul": _binary(ops.matmul, (3, 4), (4, 2)),
    "add": _binary(ops.add),
    "add_broadcast": _binary(ops.add, (3, 4), (4,)),
    "sub": _binary(ops.sub),
    "sub_broadcast": _binary(ops.sub, (3, 4), (3, 1)),
    "mul": _binary(ops.mul),
    "mul_scalar": _unary(lambda x: ops.mul_scalar(x, -1.7)),
    "concat": _concat,
    "gather_rows": _gather,
    "scatter_add_rows": _scatter,
    "relu": _unary(ops.relu, away_from_zero),
    "layer_norm": _layer_norm,
    "softmax": _unary(lambda x: ops.softmax(x, axis=1)),
    "log_softmax": _unary(lambda x: ops.log_softmax(x, axis=1)),
    "conv1d_stride1": _conv(1),
    "conv1d_stride2": _conv(2),
    "linear": _linear,
    "masked_mean": _masked_mean,
    "sum": _unary(lambda x: ops.sum(x, axis=0)),
    "mean": _unary(ops.mean),
    "weighted_sum": _weighted_sum,
    "cumsum": _unary(lambda x: ops.cumsum(x, axis=1)),
    "reshape": _unary(lambda x: ops.reshape(x, (4, 3))),
    "getitem": _unary(lambda x: ops.getitem(x, (slice(None), [0, 2, 2]))),
    "sqrt": _unary(ops.sqrt, lambda r, *s: leaf(r, *s, positive=True)),
    "log": _unary(ops.log, lambda r, *s: leaf(r, *s, positive=True)),
    "norm": _unary(lambda x: ops.norm(x, axis=1)),
    "smooth_l1": _smooth_l1,
    "mse": _mse,
    "cross_entropy": _cross_entropy,
    "focal_loss": _focal,
}


def worst_gradient_error(build, n=N_INSTANCES, seed=0):
    worst = 0.0
    with precision(np.float64):
        for i in range(n):
            fn, inputs = build(np.random.default_rng([seed, i]))
            worst = max(worst, check_gradients(fn, inputs))
    return worst


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    assert worst_gradient_error(OPS[name]) < TOL


def test_relu_gradient_values():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    backward(ops.sum(ops.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


def test_focal_with_gamma_zero_collapses_to_cross_entropy():
    rng = np.random.default_rng(3)
    with precision(np.float64):
        z = rng.normal(size=40) * 3
        y = rng.integers(0, 2, size=40)
        # binary CE as two-class softmax CE on logits [0, z]
        two = Tensor(np.stack([np.zeros_like(z), z], axis=1))
        ce = ops.cross_entropy(two, y, reduction="none").data
        focal = ops.focal_loss(Tensor(z), y, gamma=0.0, alpha=None, reduction="none").data
        np.testing.assert_allclose(focal, ce, rtol=0, atol=1e-9)
        # with alpha = 1 the weighting keeps positives only, which then match CE exactly
        pos = y == 1
        focal_a1 = ops.focal_loss(Tensor(z), y, gamma=0.0, alpha=1.0, reduction="none").data
        np.testing.assert_allclose(focal_a1[pos], ce[pos], rtol=0, atol=1e-9)
        assert np.all(focal_a1[~pos] == 0)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_log_of_nonpositive_raises():
    with pytest.raises(ValueError):
        ops.log(Tensor(np.array([1.0, 0.0])))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ops.mul_scalar(x, 2.0))


def test_sum_of_weights_gives_ones():
    store = ParameterStore(seed=0)
    w = store.uniform("w", (3, 2), 3, "decoder")
    backward(ops.sum(w))
    assert np.array_equal(store.grads()["w"], np.ones((3, 2)))


def test_unreachable_parameters_get_zero_gradient():
    store = ParameterStore(seed=0)
    a = store.uniform("a", (2,), 2, "pretext_head")
    store.uniform("b", (2,), 2, "decoder")
    backward(ops.sum(ops.mul(a, a)))
    g = store.grads()
    assert np.array_equal(g["b"], np.zeros(2))
    assert np.any(g["a"] != 0)


def _mlp_loss(store, x, y):
    h = ops.relu(ops.linear(x, store["w1"], store["b1"]))
    return ops.mse(ops.linear(h, store["w2"], store["b2"]), y)


def _mlp_store(seed=0):
    store = ParameterStore(seed=seed)
    store.uniform("w1", (4, 8), 4, "decoder")
    store.uniform("b1", (8,), 4, "decoder")
    store.uniform("w2", (8, 2), 8, "decoder")
    store.uniform("b2", (2,), 8, "decoder")
    return store


def test_composite_mlp_gradient_check():
    with precision(np.float64):
        store = _mlp_store()
        rng = np.random.default_rng(0)
        x, y = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 2)))
        err = check_gradients(lambda: _mlp_loss(store, x, y), [t for _, t in store.items()])
    assert err < TOL


def test_backward_is_deterministic_and_does_not_leak():
    store = _mlp_store()
    rng = np.random.default_rng(1)
    x, y = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 2)))
    backward(_mlp_loss(store, x, y))
    first = {k: v.copy() for k, v in store.grads().items()}
    store.zero_grad()
    backward(_mlp_loss(store, x, y))
    second = store.grads()
    for k in first:
        assert first[k].tobytes() == second[k].tobytes()


def test_parameter_store_rejects_duplicates_and_unknown_groups():
    store = ParameterStore()
    store.uniform("w", (2,), 2, "decoder")
    with pytest.raises(KeyError):
        store.uniform("w", (2,), 2, "decoder")
    with pytest.raises(KeyError):
        store.uniform("v", (2,), 2, "nonexistent")


def test_adam_zero_gradient_leaves_parameters():
    store = _mlp_store()
    before = store.state()
    opt = Adam(store)
    for _ in range(5):
        opt.step(1e-3, {k: np.zeros_like(v) for k, v in before.items()})
    for k, v in store.state().items():
        assert np.array_equal(v, before[k])


def test_adam_constant_gradient_steps_approach_lr():
    store = ParameterStore()
    p = store.add("p", np.zeros(3), "decoder")
    opt = Adam(store)
    g = np.array([0.5, -2.0, 1e-3])
    prev = p.data.astype(float).copy()
    for _ in range(200):
        opt.step(1e-2, {"p": g})
        step = p.data.astype(float) - prev
        prev = p.data.astype(float).copy()
    np.testing.assert_allclose(step, -1e-2 * np.sign(g), rtol=1e-3)


def test_adam_minimizes_quadratic_bowl():
    with precision(np.float64):
        store = ParameterStore()
        x = store.add("x", np.array([1.0, -1.0, 0.5]), "decoder")
        opt = Adam(store)
        for _ in range(500):
            store.zero_grad()
            backward(ops.sum(ops.mul(x, x)))
            opt.step(1e-2)
    assert np.abs(x.data).max() < 1e-3


def test_adam_moments_persist_between_steps():
    store = ParameterStore()
    store.add("p", np.zeros(1), "decoder")
    opt = Adam(store)
    opt.step(0.1, {"p": np.ones(1)})
    opt.step(0.1, {"p": np.zeros(1)})
    # with a memoryless update the second step would be zero
    assert opt.m["p"][0] > 0 and store["p"].data[0] < -0.1


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    store = _mlp_store(seed=5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(store, path, extra={"note": "x"})
    other = _mlp_store(seed=9)
    load_checkpoint(other, path)
    for name, t in store.items():
        assert t.data.astype("<f4").tobytes() == other[name].data.astype("<f4").tobytes()
    entries, arrays, extra = read_checkpoint(path)
    assert [e["name"] for e in entries] == list(store)
    assert extra == {"note": "x"}
    save_checkpoint(other, tmp_path / "again.ckpt", extra={"note": "x"})
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    store = _mlp_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(store, path)
    bad = ParameterStore()
    bad.uniform("w1", (5, 8), 4, "decoder")
    with pytest.raises(CheckpointError, match="w1"):
        load_checkpoint(bad, path)
    (tmp_path / "junk").write_bytes(b"hello\n")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk")
    raw = path.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "short")


def test_partial_load_by_group(tmp_path):
    src = ParameterStore(seed=1)
    src.uniform("m", (3,), 3, "map_encoder")
    src.uniform("d", (3,), 3, "decoder")
    save_checkpoint(src, tmp_path / "c")
    dst = ParameterStore(seed=2)
    dst.uniform("m", (3,), 3, "map_encoder")
    d_before = dst.uniform("d", (3,), 3, "decoder").data.copy()
    assert load_checkpoint(dst, tmp_path / "c", groups=["map_encoder"]) == ["m"]
    assert np.array_equal(dst["m"].data, src["m"].data)
    assert np.array_equal(dst["d"].data, d_before)
