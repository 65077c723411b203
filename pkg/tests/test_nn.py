import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from label2label import nn
from label2label import tensor as T
from label2label.errors import MissingGradient, ShapeMismatch, ZeroLengthSequence
from label2label.tensor import Tensor

from tests.conftest import autodiff_vs_fd


def test_init_schemes_are_seeded():
    a = nn.init_params((3, 4), "normal", np.random.default_rng(0))
    b = nn.init_params((3, 4), "normal", np.random.default_rng(0))
    assert a.tobytes() == b.tobytes()
    assert nn.init_params((2,), "zeros", None).tolist() == [0, 0]
    assert nn.init_params((2,), "ones", None).tolist() == [1, 1]


def test_uniform_fanin_bound():
    w = nn.init_params((16, 1000), "uniform_fanin", np.random.default_rng(0))
    assert np.abs(w).max() <= 1 / math.sqrt(16)
    with pytest.raises(ValueError):
        nn.init_params((0, 3), "zeros", None)


def test_normal_scale():
    w = nn.init_params((200, 200), "normal", np.random.default_rng(1), sigma=0.02)
    assert abs(w.std() - 0.02) < 0.001


def test_linear_hand_value(rng):
    lin = nn.Linear(2, 1, rng)
    lin.weight.data = np.array([[2.0], [3.0]])
    lin.bias.data = np.array([1.0])
    assert lin(Tensor([[1.0, 1.0]])).data.tolist() == [[6.0]]
    with pytest.raises(ShapeMismatch):
        lin(Tensor([[1.0, 1.0, 1.0]]))


class TestAttention:
    def test_rows_sum_to_one(self, rng):
        att = nn.MultiHeadAttention(8, 2, rng)
        q, kv = Tensor(rng.normal(size=(2, 3, 8))), Tensor(rng.normal(size=(2, 5, 8)))
        out = att(q, kv, kv)
        assert out.shape == (2, 3, 8)
        assert att.last_attn.shape == (2, 2, 3, 5)
        np.testing.assert_allclose(att.last_attn.sum(-1), 1.0, atol=1e-12)

    def test_single_key_returns_projected_value(self, rng):
        att = nn.MultiHeadAttention(4, 1, rng)
        v = Tensor(rng.normal(size=(1, 4)))
        q = Tensor(rng.normal(size=(3, 4)))
        out = att(q, v, v)
        want = att.wo(att.wv(v)).data
        np.testing.assert_allclose(out.data, np.repeat(want, 3, axis=0), atol=1e-12)

    def test_empty_keys(self, rng):
        att = nn.MultiHeadAttention(4, 1, rng)
        with pytest.raises(ZeroLengthSequence):
            att(Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 0, 4))), Tensor(np.ones((1, 0, 4))))

    def test_head_divisibility(self, rng):
        with pytest.raises(ShapeMismatch):
            nn.MultiHeadAttention(6, 4, rng)

    def test_query_permutation_equivariance(self, rng):
        att = nn.MultiHeadAttention(8, 2, rng)
        q, kv = rng.normal(size=(1, 4, 8)), Tensor(rng.normal(size=(1, 6, 8)))
        perm = rng.permutation(4)
        a = att(Tensor(q), kv, kv).data
        b = att(Tensor(q[:, perm]), kv, kv).data
        np.testing.assert_allclose(a[:, perm], b, atol=1e-12)

    def test_key_permutation_invariance(self, rng):
        att = nn.MultiHeadAttention(8, 2, rng)
        q, kv = Tensor(rng.normal(size=(1, 4, 8))), rng.normal(size=(1, 6, 8))
        perm = rng.permutation(6)
        a = att(q, Tensor(kv), Tensor(kv)).data
        b = att(q, Tensor(kv[:, perm]), Tensor(kv[:, perm])).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gradients(self, rng):
        att = nn.MultiHeadAttention(4, 2, rng)
        q = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        kv = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 4)))
        assert autodiff_vs_fd(lambda: T.reduce_sum(att(q, kv, kv) * w), [q, kv] + att.parameters()) < 1e-6


class TestDecoderLayer:
    def test_shapes_and_gradients(self, rng):
        layer = nn.TransformerDecoderLayer(4, 2, 6, rng)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        mem = Tensor(rng.normal(size=(2, 5, 4)))
        w = Tensor(rng.normal(size=(2, 3, 4)))
        assert layer(x, mem, mem).shape == (2, 3, 4)
        assert autodiff_vs_fd(lambda: T.reduce_sum(layer(x, mem, mem) * w), [x] + layer.parameters()) < 1e-5

    def test_output_rows_are_normalized(self, rng):
        layer = nn.TransformerDecoderLayer(8, 2, 16, rng)
        out = layer(Tensor(rng.normal(size=(1, 3, 8))), Tensor(rng.normal(size=(1, 4, 8))),
                    Tensor(rng.normal(size=(1, 4, 8)))).data
        np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)

    def test_cross_needs_memory(self, rng):
        layer = nn.TransformerDecoderLayer(4, 1, 4, rng)
        with pytest.raises(ShapeMismatch):
            layer(Tensor(np.ones((1, 2, 4))))

    def test_no_cross_layer(self, rng):
        layer = nn.TransformerDecoderLayer(4, 1, 4, rng, cross=False)
        assert not any("cross" in k for k, _ in layer.named_parameters())
        assert layer(Tensor(rng.normal(size=(1, 2, 4)))).shape == (1, 2, 4)


class TestModule:
    def test_state_dict_round_trip(self, rng):
        a = nn.FeedForward(3, 5, rng)
        b = nn.FeedForward(3, 5, np.random.default_rng(99))
        b.load_state_dict(a.state_dict())
        x = Tensor(rng.normal(size=(2, 3)))
        assert a(x).data.tobytes() == b(x).data.tobytes()
        assert [k for k, _ in a.named_parameters()] == ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]

    def test_strict_load(self, rng):
        a = nn.FeedForward(3, 5, rng)
        with pytest.raises(KeyError):
            a.load_state_dict({})


class TestSGD:
    def test_plain_step(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([0.5])
        nn.SGD([p], lr=0.1).step()
        assert p.data[0] == pytest.approx(0.95, abs=1e-15)
        assert p.grad is None

    def test_momentum_two_steps(self):
        p = Tensor([0.0], requires_grad=True)
        opt = nn.SGD([p], lr=1.0, momentum=0.9)
        p.grad = np.array([1.0])
        opt.step()
        p.grad = np.array([1.0])
        opt.step()
        # v1 = 1, v2 = 1.9; theta = -(1 + 1.9)
        assert p.data[0] == pytest.approx(-2.9, abs=1e-15)

    def test_weight_decay(self):
        p = Tensor([2.0], requires_grad=True)
        p.grad = np.array([0.0])
        nn.SGD([p], lr=0.5, weight_decay=0.1).step()
        assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.2, abs=1e-15)

    def test_missing_gradient(self):
        with pytest.raises(MissingGradient):
            nn.SGD([Tensor([1.0], requires_grad=True)], lr=0.1).step()

    def test_invalid_settings(self):
        with pytest.raises(ValueError):
            nn.SGD([], lr=0.0)
        with pytest.raises(ValueError):
            nn.SGD([], lr=0.1, weight_decay=-1)

    def test_minimizes_quadratic(self):
        p = Tensor([5.0, -3.0], requires_grad=True)
        opt = nn.SGD([p], lr=0.1, momentum=0.5)
        for _ in range(200):
            T.backward(T.reduce_sum(p * p))
            opt.step()
        assert np.abs(p.data).max() < 1e-6

    def test_clip_grad_norm(self):
        a = Tensor([0.0], requires_grad=True)
        b = Tensor([0.0, 0.0], requires_grad=True)
        a.grad, b.grad = np.array([3.0]), np.array([0.0, 4.0])
        assert nn.clip_grad_norm([a, b], 1.0) == 5.0
        assert a.grad.tolist() == pytest.approx([0.6]) and b.grad.tolist() == pytest.approx([0.0, 0.8])


class TestSchedules:
    def test_cosine_endpoints(self):
        assert nn.lr_schedule("cosine", (0.1, 0, 10)) == 0.1
        assert nn.lr_schedule("cosine", (0.1, 10, 10)) == pytest.approx(0.0, abs=1e-18)
        assert nn.lr_schedule("cosine", (0.1, 5, 10)) == pytest.approx(0.05, abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 50))
    def test_cosine_monotone(self, total):
        vals = [nn.lr_schedule("cosine", (1.0, t, total)) for t in range(total + 1)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_plateau_reduces_after_patience(self):
        assert nn.lr_schedule("plateau", (0.1, [1.0, 1.0, 1.0, 1.0, 1.0], 4)) == 0.1
        assert nn.lr_schedule("plateau", (0.1, [1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 4)) == pytest.approx(0.01)

    def test_plateau_improvement_resets(self):
        assert nn.lr_schedule("plateau", (0.1, [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5], 4)) == 0.1

    def test_unknown(self):
        with pytest.raises(ValueError):
            nn.lr_schedule("step", ())
