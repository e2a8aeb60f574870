import numpy as np
import pytest

from weighted_normals import autodiff as ad
from weighted_normals.autodiff import Adam, ParamStore, Tensor
from weighted_normals.errors import InvalidInput, NumericError, ParseError, ShapeError


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_max_pool_example():
    out = ad.max_pool(Tensor([[1.0, 5.0], [3.0, 2.0]]), axis=0)
    np.testing.assert_array_equal(out.data, [3.0, 5.0])


def test_cosine_self_similarity():
    rng = np.random.default_rng(0)
    for _ in range(10):
        u = rng.normal(size=7) * rng.uniform(0.01, 100)
        assert ad.cosine_similarity(u, u).item() == pytest.approx(1.0, abs=1e-15)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(ad.matmul(a, b).data, naive_matmul(a, b), atol=1e-12, rtol=0)


def test_sum_of_squares_gradient():
    w = leaf([1.0, 2.0])
    ad.sum(ad.mul(w, w)).backward()
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_constant_loss_gives_zero_gradient():
    store = ParamStore()
    w = store.add("w", [1.0, 2.0])
    unused = store.add("unused", [[3.0]])
    store.zero_grad()
    loss = ad.sum(ad.scale(ad.sub(w, w), 3.0))
    loss.backward()
    np.testing.assert_array_equal(w.grad, 0.0)
    np.testing.assert_array_equal(unused.grad, 0.0)


def test_backward_requires_scalar():
    with pytest.raises(InvalidInput):
        ad.mul(leaf([1.0, 2.0]), leaf([1.0, 2.0])).backward()


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        ad.add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_non_finite_rejected_in_checked_mode():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with ad.checked(False):
        t = Tensor([1.0, np.inf])
    assert not np.isfinite(t.data).all()
    with pytest.raises(NumericError):
        ad.log(Tensor([0.0]))


def test_no_grad_builds_no_graph():
    w = leaf([1.0, 2.0])
    with ad.no_grad():
        out = ad.sum(ad.mul(w, w))
    assert not out.requires_grad and out._parents == ()


def test_two_layer_perceptron_matches_finite_differences():
    rng = np.random.default_rng(2)
    store = ParamStore()
    store.add("W1", rng.normal(size=(4, 6)))
    store.add("b1", rng.normal(size=6))
    store.add("W2", rng.normal(size=(6, 2)))
    store.add("b2", rng.normal(size=2))
    x = rng.normal(size=(5, 4))

    def build():
        h = ad.leaky_relu(ad.linear(x, store["W1"], store["b1"]))
        return ad.sum(ad.square(ad.linear(h, store["W2"], store["b2"])))

    report = ad.grad_check(build, store, tolerance=1e-4, h=1e-5)
    assert report.passed, str(report)


def test_grad_check_linear_layer():
    rng = np.random.default_rng(3)
    store = ParamStore()
    store.add("W", rng.normal(size=(3, 4)))
    store.add("b", rng.normal(size=4))
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
    report = ad.grad_check(lambda: ad.sum(ad.square(ad.sub(ad.linear(x, store["W"], store["b"]), Tensor(y)))),
                           store, tolerance=1e-4)
    assert report.passed, str(report)


def test_grad_check_detects_wrong_gradient():
    w = leaf([0.3, -0.7])

    def bad_square(a):
        return ad._make(a.data * a.data, (a,), lambda g: (3.0 * a.data * g,), "bad")

    report = ad.grad_check(lambda: ad.sum(bad_square(w)), {"w": w})
    assert not report.passed


def test_max_pool_tie_routes_to_first_index():
    x = leaf([[2.0, 1.0], [2.0, 3.0], [0.5, 3.0]])
    ad.sum(ad.max_pool(x, axis=0)).backward()
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])


def test_gather_max_tie_routes_to_first_neighbor():
    x = leaf(np.array([[[1.0], [1.0], [0.0]]]))
    idx = np.array([[[2, 1, 0], [0, 1, 2], [2, 0, 1]]])
    ad.sum(ad.gather_max(x, idx)).backward()
    # point 0 sees neighbors (2, 1, 0): first max is 1; point 1 sees 0 first; point 2 sees 0 first
    np.testing.assert_array_equal(x.grad[0, :, 0], [2.0, 1.0, 0.0])


def test_max_pool_subgradient_matches_fd_away_from_ties():
    rng = np.random.default_rng(4)
    x = leaf(rng.normal(size=(6, 5)))
    r = rng.normal(size=5)
    report = ad.grad_check(lambda: ad.sum(ad.mul(ad.max_pool(x, axis=0), Tensor(r))), {"x": x})
    assert report.passed, str(report)


def test_backward_deterministic():
    rng = np.random.default_rng(5)
    w = leaf(rng.normal(size=(4, 3)))
    x = rng.normal(size=(10, 4))
    grads = []
    for _ in range(2):
        w.grad = np.zeros_like(w.data)
        ad.sum(ad.sigmoid(ad.matmul(x, w))).backward()
        grads.append(w.grad.tobytes())
    assert grads[0] == grads[1]


def test_l2_normalize_unit_norm():
    rng = np.random.default_rng(6)
    for _ in range(50):
        v = rng.normal(size=(4, 5)) * 10 ** rng.uniform(-7, 7)
        n = np.linalg.norm(ad.l2_normalize(v).data, axis=-1)
        np.testing.assert_allclose(n, 1.0, atol=1e-12, rtol=0)


def _primitives(rng):
    """(name, input arrays, fn(*tensors) -> tensor) for every differentiable op."""
    idx = rng.integers(0, 4, size=(2, 4, 3))
    return [
        ("add", [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], ad.add),
        ("sub", [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], ad.sub),
        ("mul", [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], ad.mul),
        ("scale", [rng.normal(size=(3, 4))], lambda a: ad.scale(a, -1.7)),
        ("add_scalar", [rng.normal(size=(3, 4))], lambda a: ad.add_scalar(a, 0.3)),
        ("square", [rng.normal(size=(3, 4))], ad.square),
        ("exp", [rng.normal(size=(3, 4))], ad.exp),
        ("log", [rng.uniform(0.5, 2.0, size=(3, 4))], ad.log),
        ("leaky_relu", [rng.normal(size=(3, 4))], ad.leaky_relu),
        ("sigmoid", [rng.normal(size=(3, 4)) * 3], ad.sigmoid),
        ("matmul", [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))], ad.matmul),
        ("add_bias", [rng.normal(size=(2, 3, 4)), rng.normal(size=4)], ad.add_bias),
        ("transpose", [rng.normal(size=(3, 4))], ad.transpose),
        ("concat", [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))], lambda a, b: ad.concat([a, b], -1)),
        ("concat0", [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))], lambda a, b: ad.concat([a, b], 0)),
        ("reshape", [rng.normal(size=(3, 4))], lambda a: ad.reshape(a, (2, 6))),
        ("take", [rng.normal(size=(5, 3))], lambda a: ad.take(a, slice(1, 4))),
        ("gather", [rng.normal(size=(2, 4, 3))], lambda a: ad.gather(a, idx)),
        ("gather_max", [rng.normal(size=(2, 4, 3))], lambda a: ad.gather_max(a, idx)),
        ("expand", [rng.normal(size=(2, 3))], lambda a: ad.expand(a, 1, 4)),
        ("scale_rows", [rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4))], ad.scale_rows),
        ("sum_axis", [rng.normal(size=(3, 4))], lambda a: ad.sum(a, axis=1)),
        ("mean", [rng.normal(size=(3, 4))], lambda a: ad.mean(a, axis=0)),
        ("max_pool", [rng.normal(size=(2, 5, 3))], lambda a: ad.max_pool(a, axis=1)),
        ("l2_normalize", [rng.normal(size=(3, 4))], ad.l2_normalize),
        ("dot", [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], ad.dot),
        ("cosine", [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], ad.cosine_similarity),
    ]


PRIMITIVE_NAMES = [p[0] for p in _primitives(np.random.default_rng(0))]


@pytest.mark.parametrize("name", PRIMITIVE_NAMES)
def test_primitive_vjp_matches_finite_differences(name):
    for trial in range(20):
        rng = np.random.default_rng(1000 * PRIMITIVE_NAMES.index(name) + trial)
        _, arrays, fn = next(p for p in _primitives(rng) if p[0] == name)
        inputs = {f"x{i}": leaf(a) for i, a in enumerate(arrays)}
        probe = rng.normal(size=fn(*inputs.values()).shape)

        def build():
            return ad.sum(ad.mul(fn(*inputs.values()), Tensor(probe)))

        report = ad.grad_check(build, inputs, tolerance=1e-4, h=1e-5)
        assert report.passed, f"{name} trial {trial}\n{report}"


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        store = ParamStore()
        store.add("p", [1.0, -2.0])
        opt = Adam(store, ["p"])
        store.zero_grad()
        opt.step()
        np.testing.assert_array_equal(store["p"].data, [1.0, -2.0])
        assert opt.t == 1

    def test_first_step_moves_by_lr(self):
        store = ParamStore()
        store.add("p", [0.0])
        opt = Adam(store, ["p"], lr=0.001)
        store["p"].grad = np.array([1.0])
        opt.step()
        assert store["p"].data[0] == pytest.approx(-0.001, rel=1e-7)

    def test_two_steps_match_reference_recurrence(self):
        lr, b1, b2, eps, g = 0.01, 0.9, 0.999, 1e-8, 0.37
        p = m = v = 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        store = ParamStore()
        store.add("p", [0.0])
        opt = Adam(store, ["p"], lr, b1, b2, eps)
        for _ in range(2):
            store["p"].grad = np.array([g])
            opt.step()
        assert abs(store["p"].data[0] - p) < 1e-12

    def test_only_touches_its_own_params(self):
        store = ParamStore()
        store.add("a", [1.0])
        store.add("b", [1.0])
        for t in store.items():
            t[1].grad = np.array([1.0])
        Adam(store, ["a"]).step()
        assert store["b"].data[0] == 1.0 and store["a"].data[0] != 1.0


class TestParamStore:
    def test_duplicate_names(self):
        store = ParamStore()
        store.add("w", [1.0])
        with pytest.raises(InvalidInput):
            store.add("w", [2.0])

    def test_load_shape_mismatch(self):
        store = ParamStore()
        store.add("w", [1.0, 2.0])
        with pytest.raises(ShapeError):
            store.load_arrays({"w": np.zeros(3)})


class TestSerialization:
    def test_round_trip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(7)
        arrays = {"a.W": rng.normal(size=(3, 4)), "b": np.arange(5, dtype=np.float32), "s": np.array(2.5)}
        meta = {"note": "x", "values": [0.1, 1e-300, 3]}
        p1, p2 = tmp_path / "one.bin", tmp_path / "two.bin"
        ad.save_tensors(p1, arrays, meta)
        loaded, meta2 = ad.load_tensors(p1)
        ad.save_tensors(p2, loaded, meta2)
        assert p1.read_bytes() == p2.read_bytes()
        for k, v in arrays.items():
            assert loaded[k].dtype == v.dtype
            np.testing.assert_array_equal(loaded[k], v)
        assert meta2 == meta

    def test_header_is_text(self, tmp_path):
        p = tmp_path / "t.bin"
        ad.save_tensors(p, {"w": np.ones(2)})
        first = p.read_bytes().split(b"\n", 1)[0]
        assert first.startswith(b"WNTENSORS 1 ")

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"hello\nworld")
        with pytest.raises(ParseError):
            ad.load_tensors(p)
