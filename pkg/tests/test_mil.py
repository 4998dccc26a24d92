import math

import numpy as np
import pytest

from clearct import tensor as T
from clearct.mil import (AdapterConfig, AttentionParams, Bag, MILHead, abmil_pool, adapter_forward,
                         attention_weights, bce_multilabel_loss, cross_entropy_loss, pad_bags)
from clearct.tensor import Tensor

from conftest import fd_grad, rel_err


def params(V, w):
    return AttentionParams(Tensor(np.asarray(V, dtype=float)), Tensor(np.asarray(w, dtype=float)))


def test_adapter_with_identity_is_relu(rng):
    h = rng.normal(size=(5, 4))
    out = adapter_forward(h, Tensor(np.eye(4)), Tensor(np.zeros(4))).data
    np.testing.assert_array_equal(out, np.maximum(h, 0.0))


def test_single_instance_gets_all_attention(rng):
    p = params(rng.normal(size=(3, 4)), rng.normal(size=(3, 1)))
    h = rng.normal(size=(1, 4))
    np.testing.assert_array_equal(attention_weights(h, p).data, [1.0])
    np.testing.assert_array_equal(abmil_pool(h, p).data, h[0])


def test_identical_instances_share_attention(rng):
    p = params(rng.normal(size=(3, 4)), rng.normal(size=(3, 1)))
    row = rng.normal(size=4)
    a = attention_weights(np.stack([row] * 6), p).data
    np.testing.assert_allclose(a, np.full(6, 1 / 6), rtol=1e-14)


def test_scalar_attention_case():
    a = attention_weights([[0.0], [10.0]], params([[1.0]], [[1.0]])).data
    t = math.tanh(10.0)
    np.testing.assert_allclose(a, [1 / (1 + math.exp(t)), math.exp(t) / (1 + math.exp(t))], rtol=1e-14)
    np.testing.assert_allclose(a, [0.268941, 0.731059], atol=1e-6)


def test_uniform_pool_is_mean():
    p = params(np.zeros((2, 2)), np.ones((2, 1)))
    np.testing.assert_allclose(abmil_pool([[1.0, 0.0], [0.0, 1.0]], p).data, [0.5, 0.5], rtol=1e-15)


def test_pool_is_permutation_invariant(rng):
    p = params(rng.normal(size=(4, 5)), rng.normal(size=(4, 1)))
    H = rng.normal(size=(9, 5))
    perm = rng.permutation(9)
    np.testing.assert_allclose(abmil_pool(H[perm], p).data, abmil_pool(H, p).data, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(attention_weights(H[perm], p).data, attention_weights(H, p).data[perm], rtol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 50, 700])
def test_attention_is_a_distribution_at_any_bag_size(rng, k):
    p = params(rng.normal(size=(8, 16)) * 50, rng.normal(size=(8, 1)) * 50)
    a = attention_weights(rng.normal(size=(k, 16)) * 100, p).data
    assert np.all(np.isfinite(a)) and np.all(a >= 0)
    assert abs(a.sum() - 1.0) <= 1e-12


def test_attention_rejects_empty_bag():
    with pytest.raises(T.ShapeError):
        attention_weights(np.zeros((0, 3)), params(np.ones((2, 3)), np.ones((2, 1))))


def _head(in_dim=6, n_classes=3, kind="multilabel", seed=0):
    return MILHead(AdapterConfig(in_dim, n_classes, kind, head_hidden=8, attention_dim=5), seed)


def test_zero_weight_head_returns_its_bias(rng):
    m = _head()
    m.head.fc1.weight.data = np.zeros(m.head.fc1.weight.shape)
    m.head.fc2.weight.data = np.zeros(m.head.fc2.weight.shape)
    m.head.fc2.bias.data = np.array([0.3, -1.2, 2.0])
    logits, _ = m.forward_bag(rng.normal(size=(4, 6)))
    np.testing.assert_array_equal(logits.data, m.head.fc2.bias.data)


def test_identical_bags_identical_logits(rng):
    m = _head()
    H = rng.normal(size=(7, 6))
    np.testing.assert_array_equal(m.forward_bag(H)[0].data, m.forward_bag(H.copy())[0].data)


def test_adapter_width_is_fixed():
    assert _head().adapter.weight.shape == (256, 6)
    with pytest.raises(ValueError, match="adapter width"):
        AdapterConfig(6, 3, hidden=128)
    with pytest.raises(ValueError, match="two classes"):
        AdapterConfig(6, 1, "multiclass")


@pytest.mark.parametrize("kind", ["multilabel", "multiclass"])
def test_full_chain_gradient_matches_finite_differences(rng, kind):
    m = _head(in_dim=4, n_classes=3, kind=kind, seed=2)
    H = rng.normal(size=(5, 4))
    target = np.array([1, 0, 1]) if kind == "multilabel" else 2

    def loss():
        logits, _ = m.forward_bag(H)
        return bce_multilabel_loss(logits, target) if kind == "multilabel" else cross_entropy_loss(logits, target)

    m.zero_grad()
    T.backward(loss())
    T.reset_tape()
    for name, p in m.named_parameters():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()

        def f(v, p=p):
            old = p.data
            p.data = v
            with T.no_grad():
                out = loss().item()
            p.data = old
            return out

        assert rel_err(analytic, fd_grad(f, p.data)) < 1e-5, name


def test_loss_closed_forms():
    assert bce_multilabel_loss(Tensor([0.0, 0.0]), [1, 0]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy_loss(Tensor(np.zeros(4)), 3).item() == pytest.approx(math.log(4), abs=1e-15)
    batched = cross_entropy_loss(Tensor([[0.0, 0.0], [math.log(3.0), 0.0]]), [0, 0]).item()
    assert batched == pytest.approx((math.log(2) + math.log(4 / 3)) / 2, abs=1e-15)
    with pytest.raises(ValueError):
        bce_multilabel_loss(Tensor([0.0]), [0.5])
    with pytest.raises(IndexError):
        cross_entropy_loss(Tensor(np.zeros(3)), 3)


def test_padded_batch_matches_single_bags(rng):
    m = _head()
    bags = [rng.normal(size=(k, 6)) for k in (3, 7, 1)]
    H, mask = pad_bags(bags)
    assert H.shape == (3, 7, 6) and mask.sum() == 11
    logits, att = m.forward_batch(H, mask)
    for i, b in enumerate(bags):
        lo, a = m.forward_bag(b)
        np.testing.assert_allclose(logits.data[i], lo.data, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(att.data[i, :len(b)], a.data, rtol=1e-10, atol=1e-15)
        assert np.all(att.data[i, len(b):] == 0.0)


def test_bag_validation():
    with pytest.raises(ValueError, match="embeddings"):
        Bag(np.zeros((0, 3)), np.array([1]))
    with pytest.raises(ValueError, match="non-finite"):
        Bag(np.array([[np.nan, 0.0]]), np.array([1]))
    with pytest.raises(ValueError, match="key slice"):
        Bag(np.zeros((2, 3)), np.array([1]), key_slice_indices=(2,))
    b = Bag(np.zeros((3, 2)), np.array([0, 1]))
    assert b.n_instances == 3 and b.slice_indices == (0, 1, 2)
