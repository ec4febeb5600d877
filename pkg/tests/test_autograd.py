"""Tensor engine tests.

Expected values come from independent oracles computed inside the tests:
plain-python arithmetic for matmul, central finite differences for every
gradient, and a scalar recurrence for Adam.  None of them call back into
the library path under test.
"""

import numpy as np
import pytest

from kgir import autograd as ag
from kgir.autograd import Tensor
from kgir.gradcheck import grad_check, NonDeterministicLoss
from kgir.optim import Adam, AdamState, adam_step


def naive_matmul(a, b):
    """Triple-loop reference; deliberately dumb."""
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i][j] += a[i][t] * b[t][j]
    return np.array(out)


def central_diff(f, x, eps=1e-6):
    """Numeric gradient of scalar f at numpy array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = f()
        flat[i] = keep - eps
        down = f()
        flat[i] = keep
        gf[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom


class TestMatmul:
    def test_small_frozen_case(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        out = ag.matmul(a, b)
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_identity_and_zero(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 4))
        np.testing.assert_allclose(ag.matmul(Tensor(x), Tensor(np.eye(4))).data, x)
        assert not ag.matmul(Tensor(x), Tensor(np.zeros((4, 2)))).data.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_against_naive_loops(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 5))
        b = rng.normal(size=(5, 2))
        np.testing.assert_allclose(
            ag.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a.tolist(), b.tolist())
        )

    def test_batched_broadcasting(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(5, 2))
        out = ag.matmul(Tensor(a), Tensor(b))
        assert out.shape == (4, 3, 2)
        for i in range(4):
            np.testing.assert_allclose(out.data[i], a[i] @ b)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestSoftmax:
    def test_uniform_rows(self):
        out = ag.softmax(Tensor([[0.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, 0.25)

    def test_shift_invariance(self):
        x = np.array([1.0, 2.0, 3.0])
        a = ag.softmax(Tensor(x)).data
        b = ag.softmax(Tensor(x + 1000.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_stable_at_large_magnitude(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1e3, 1e3, size=(8, 16))
        out = ag.softmax(Tensor(x)).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=5.0, size=(3, 4, 7))
        out = ag.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert (out >= 0).all()


class TestLayerNorm:
    def test_constant_row_maps_to_shift(self):
        x = Tensor(np.full((1, 4), 7.0))
        gain = Tensor(np.ones(4))
        shift = Tensor(np.zeros(4))
        out = ag.layer_norm(x, gain, shift)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_two_point_row(self):
        # mean 3, biased std 1 -> normalised to [-1, 1]
        out = ag.layer_norm(Tensor([[2.0, 4.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_row_statistics(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 32)) * 10 + 5
        out = ag.layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)


class TestLossFunctions:
    def test_bce_at_zero_logit(self):
        np.testing.assert_allclose(
            ag.bce_with_logits(Tensor(0.0), 1.0).data, np.log(2.0)
        )
        np.testing.assert_allclose(
            ag.bce_with_logits(Tensor(0.0), 0.0).data, np.log(2.0)
        )

    def test_bce_confident_and_stable(self):
        assert ag.bce_with_logits(Tensor(20.0), 1.0).data < 1e-8
        assert np.isfinite(ag.bce_with_logits(Tensor(-500.0), 1.0).data)
        np.testing.assert_allclose(
            ag.bce_with_logits(Tensor(-500.0), 1.0).data, 500.0
        )

    def test_cross_entropy_uniform_logits(self):
        logits = Tensor(np.zeros((3, 8)))
        loss = ag.cross_entropy(logits, [0, 3, 7])
        np.testing.assert_allclose(loss.data, np.log(8.0))

    def test_cross_entropy_confident(self):
        z = np.full((1, 5), -50.0)
        z[0, 2] = 50.0
        assert ag.cross_entropy(Tensor(z), [2]).data < 1e-8

    def test_cross_entropy_mask(self):
        logits = Tensor(np.zeros((4, 6)), requires_grad=True)
        loss = ag.cross_entropy(logits, [1, 2, 3, 4], score_mask=[1, 0, 0, 1])
        np.testing.assert_allclose(loss.data, np.log(6.0))
        loss.backward()
        # unscored rows contribute exactly zero gradient
        assert not logits.grad[1].any() and not logits.grad[2].any()
        assert logits.grad[0].any()

    def test_cross_entropy_all_ignored_is_zero(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(4, 6)), requires_grad=True)
        loss = ag.cross_entropy(logits, [0, 1, 2, 3], score_mask=[0, 0, 0, 0])
        assert loss.data == 0.0
        assert not loss.requires_grad


class TestBackward:
    def test_square_at_three(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        np.testing.assert_allclose(x.grad, 6.0)

    def test_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()

    def test_accumulation_through_shared_use(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x + x  # dy/dx = 2x + 1 = 5
        y.backward()
        np.testing.assert_allclose(x.grad, 5.0)

    def test_each_node_visited_once(self):
        calls = {"n": 0}
        x = Tensor(1.5, requires_grad=True)
        mid = x * 3.0
        orig = mid._backward_fn

        def counting(g):
            calls["n"] += 1
            orig(g)

        mid._backward_fn = counting
        # diamond: mid feeds the loss twice
        loss = mid * mid + mid
        loss.backward()
        assert calls["n"] == 1
        np.testing.assert_allclose(x.grad, 3.0 * (2 * 4.5 + 1))

    def test_matmul_chain_matches_finite_difference(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def loss_fn():
            return float(ag.tensor_sum(ag.matmul(Tensor(a.data), Tensor(b.data)) ** 2.0).data)

        ag.tensor_sum(ag.matmul(a, b) ** 2.0).backward()
        assert rel_err(a.grad, central_diff(loss_fn, a.data)) < 1e-7
        assert rel_err(b.grad, central_diff(loss_fn, b.data)) < 1e-7

    def test_no_grad_blocks_recording(self):
        x = Tensor(2.0, requires_grad=True)
        with ag.no_grad():
            y = x * x
        assert not y.requires_grad
        assert y._backward_fn is None


OPS_FOR_GRADCHECK = [
    ("add", lambda x, y: ag.tensor_sum(x + y), 2, (3, 4)),
    ("mul", lambda x, y: ag.tensor_sum(x * y), 2, (3, 4)),
    ("div", lambda x, y: ag.tensor_sum(ag.div(x, y + 3.0)), 2, (3, 4)),
    ("matmul", lambda x, y: ag.tensor_sum(ag.matmul(x, y)), 2, (4, 4)),
    ("power", lambda x: ag.tensor_sum((x * x + 1.0) ** 0.5), 1, (3, 4)),
    ("exp", lambda x: ag.tensor_sum(ag.exp(x)), 1, (3, 4)),
    ("log", lambda x: ag.tensor_sum(ag.log(x * x + 1.0)), 1, (3, 4)),
    ("tanh", lambda x: ag.tensor_sum(ag.tanh(x)), 1, (3, 4)),
    ("sigmoid", lambda x: ag.tensor_sum(ag.sigmoid(x)), 1, (3, 4)),
    ("relu", lambda x: ag.tensor_sum(ag.relu(x + 0.1)), 1, (3, 4)),
    ("gelu", lambda x: ag.tensor_sum(ag.gelu(x)), 1, (3, 4)),
    ("softmax", lambda x: ag.tensor_sum(ag.softmax(x) ** 2.0), 1, (3, 5)),
    ("sum_axis", lambda x: ag.tensor_sum(ag.tensor_sum(x, axis=0) ** 2.0), 1, (3, 4)),
    ("mean", lambda x: ag.tensor_sum(ag.tensor_mean(x, axis=1) ** 2.0), 1, (3, 4)),
    ("reshape", lambda x: ag.tensor_sum(ag.reshape(x, (2, 6)) ** 2.0), 1, (3, 4)),
    ("swapaxes", lambda x: ag.tensor_sum(ag.swapaxes(x, 0, 1) ** 2.0), 1, (3, 4)),
    ("take", lambda x: ag.tensor_sum(x[1:, :2] ** 2.0), 1, (3, 4)),
    ("concat", lambda x, y: ag.tensor_sum(ag.concat([x, y], axis=1) ** 2.0), 2, (3, 4)),
    ("broadcast", lambda x: ag.tensor_sum(ag.broadcast_to(x, (5, 3, 4)) ** 2.0), 1, (3, 4)),
    ("bce", lambda x: ag.tensor_mean(ag.bce_with_logits(x, np.tile([0.0, 1.0], (3, 2)))), 1, (3, 4)),
]


@pytest.mark.parametrize("name,fn,arity,shape", OPS_FOR_GRADCHECK, ids=[o[0] for o in OPS_FOR_GRADCHECK])
@pytest.mark.parametrize("seed", range(20))
def test_every_op_matches_finite_difference(name, fn, arity, shape, seed):
    rng = np.random.default_rng(seed)
    params = {
        f"x{i}": Tensor(rng.normal(size=shape), requires_grad=True) for i in range(arity)
    }

    def closure():
        return fn(*params.values())

    report = grad_check(closure, params)
    assert report.max_rel_err < 1e-4, f"{name}: {report.max_rel_err:.2e}"


@pytest.mark.parametrize("seed", range(20))
def test_embedding_and_cross_entropy_gradients(seed):
    rng = np.random.default_rng(seed)
    table = Tensor(rng.normal(size=(7, 5)), requires_grad=True)
    ids = rng.integers(0, 7, size=(2, 3))
    targets = rng.integers(0, 9, size=6)
    proj = Tensor(rng.normal(size=(5, 9)), requires_grad=True)
    mask = rng.integers(0, 2, size=6)
    mask[0] = 1  # keep at least one scored position

    def closure():
        h = ag.embedding(table, ids).reshape(6, 5)
        return ag.cross_entropy(ag.matmul(h, proj), targets, score_mask=mask)

    report = grad_check(closure, {"table": table, "proj": proj})
    assert report.max_rel_err < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_composite_gradient(seed):
    rng = np.random.default_rng(seed)
    params = {
        "x": Tensor(rng.normal(size=(3, 8)), requires_grad=True),
        "gain": Tensor(rng.normal(size=8), requires_grad=True),
        "shift": Tensor(rng.normal(size=8), requires_grad=True),
    }

    def closure():
        out = ag.layer_norm(params["x"], params["gain"], params["shift"])
        return ag.tensor_sum(out * out)

    assert grad_check(closure, params).max_rel_err < 1e-4


class TestGradCheckHarness:
    def test_clean_quadratic_is_tiny(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        report = grad_check(lambda: ag.tensor_sum(p * p), {"p": p})
        assert report.max_rel_err < 1e-8

    def test_planted_fault_detected(self):
        # a loss whose backward deliberately doubles the true gradient
        p = Tensor(np.array([0.7, -1.3]), requires_grad=True)

        def closure():
            out = ag.tensor_sum(p * p)

            def bad_backward(g):
                p._accumulate(4.0 * p.data * g)  # truth is 2x

            return Tensor(out.data, requires_grad=True, parents=(p,), backward_fn=bad_backward)

        report = grad_check(closure, {"p": p})
        assert report.max_rel_err > 0.3

    def test_nondeterministic_closure_rejected(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = {"n": 0}

        def closure():
            state["n"] += 1
            return ag.tensor_sum(p * p) * float(state["n"])

        with pytest.raises(NonDeterministicLoss):
            grad_check(closure, {"p": p})


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = np.array([1.0, 1.0, 1.0])
        g = np.array([0.3, -2.0, 1e-3])
        adam_step(p, g, AdamState.zeros_like(p), lr=0.01)
        np.testing.assert_allclose(p, 1.0 - 0.01 * np.sign(g), atol=1e-4)

    def test_zero_gradient_keeps_param(self):
        p = np.array([5.0])
        adam_step(p, np.zeros(1), AdamState.zeros_like(p), lr=0.1)
        np.testing.assert_allclose(p, 5.0)

    def test_two_steps_match_scalar_recurrence(self):
        # independent recurrence, plain floats
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        g = 0.4
        theta, m, v = 2.0, 0.0, 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

        p = np.array([2.0])
        state = AdamState.zeros_like(p)
        adam_step(p, np.array([g]), state, lr)
        adam_step(p, np.array([g]), state, lr)
        np.testing.assert_allclose(p, theta, rtol=1e-12)
        assert state.t == 2

    def test_optimizer_multipliers_and_skips(self):
        params = {
            "text.emb": Tensor(np.zeros(2), requires_grad=True),
            "joint.w": Tensor(np.zeros(2), requires_grad=True),
            "untouched": Tensor(np.ones(2), requires_grad=True),
        }
        opt = Adam(params, lr=0.1, lr_multipliers={"text.": 0.1})
        params["text.emb"].grad = np.array([1.0, 1.0])
        params["joint.w"].grad = np.array([1.0, 1.0])
        opt.step()
        np.testing.assert_allclose(params["joint.w"].data, -0.1, atol=1e-6)
        np.testing.assert_allclose(params["text.emb"].data, -0.01, atol=1e-7)
        np.testing.assert_allclose(params["untouched"].data, 1.0)
        opt.zero_grad()
        assert params["joint.w"].grad is None

    def test_lr_zero_is_identity(self):
        p = np.array([3.0, -1.0])
        before = p.copy()
        adam_step(p, np.array([1.0, 2.0]), AdamState.zeros_like(p), lr=0.0)
        np.testing.assert_array_equal(p, before)
