import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from uniflow.distill import (adaptive_weights, alignment_penalty, base_weights, distillation_loss,
                             strategy_variant)
from uniflow.encoder import LayerFeatureStack

# Independent 30-digit evaluation of the weighting rule at L=2, beta=2,
# alpha=(0.5, 0.1), frozen to 12+ digits.
W_ORACLE = (0.526687817288866, 0.473312182711134)
LOSS_ORACLE = 0.310675126915547

penalties = st.lists(st.floats(0, 2, allow_nan=False), min_size=1, max_size=12)
betas = st.floats(0, 10, allow_nan=False)


def _tokens_with_cos(cos: float, b=2, s=3) -> tuple[torch.Tensor, torch.Tensor]:
    """Student/teacher token grids whose every token pair has cosine ``cos``."""
    angle = math.acos(cos)
    t = torch.zeros(b, s, 4, dtype=torch.float64)
    t[..., 0] = 1.0
    st_ = torch.zeros_like(t)
    st_[..., 0], st_[..., 1] = math.cos(angle), math.sin(angle)
    scale = torch.arange(1, b * s + 1, dtype=torch.float64).reshape(b, s, 1)
    return st_ * scale, t * 2.5


def _stacks(alphas):
    pairs = [_tokens_with_cos(1.0 - a) for a in alphas]
    return (LayerFeatureStack([p[0] for p in pairs], "student"),
            LayerFeatureStack([p[1] for p in pairs], "teacher"))


# ---------------------------------------------------------------- penalty

def test_penalty_identities():
    x = torch.randn(2, 5, 8, dtype=torch.float64)
    assert alignment_penalty(x, x).item() == 0.0
    orth = torch.zeros_like(x)
    orth[..., 0] = x[..., 1]
    orth[..., 1] = -x[..., 0]
    torch.testing.assert_close(alignment_penalty(orth, x), torch.tensor(1.0, dtype=torch.float64))
    torch.testing.assert_close(alignment_penalty(-x, x), torch.tensor(2.0, dtype=torch.float64))


def test_penalty_matches_one_minus_cosine():
    g = torch.Generator().manual_seed(0)
    s, t = torch.randn(3, 7, 8, generator=g, dtype=torch.float64), torch.randn(3, 7, 8, generator=g,
                                                                                   dtype=torch.float64)
    ref = (1 - torch.nn.functional.cosine_similarity(s, t, dim=-1)).mean()
    torch.testing.assert_close(alignment_penalty(s, t), ref, rtol=0, atol=1e-14)


def test_penalty_zero_tokens_and_shape_errors():
    z = torch.zeros(1, 2, 4)
    assert torch.isfinite(alignment_penalty(z, torch.ones(1, 2, 4)))
    with pytest.raises(ValueError):
        alignment_penalty(torch.zeros(1, 2, 4), torch.zeros(1, 3, 4))


# ---------------------------------------------------------------- weights

def test_derived_two_layer_weights():
    w = adaptive_weights([0.5, 0.1], beta=2.0)
    np.testing.assert_allclose(w.weights, W_ORACLE, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(w.base, [0.5, 1.0])


@settings(max_examples=200, deadline=None)
@given(penalties, betas)
def test_weights_sum_to_one_and_positive(alpha, beta):
    w = adaptive_weights(alpha, beta).weights
    assert abs(w.sum() - 1.0) < 1e-12
    assert (w > 0).all() or beta * (max(alpha) - min(alpha)) > 700


@settings(max_examples=100, deadline=None)
@given(penalties)
def test_beta_zero_is_arithmetic_series(alpha):
    n = len(alpha)
    expected = 2 * np.arange(1, n + 1) / (n * (n + 1))
    np.testing.assert_allclose(adaptive_weights(alpha, 0.0).weights, expected, rtol=0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.floats(0, 2), betas)
def test_equal_penalties_cancel(n, a, beta):
    w = adaptive_weights([a] * n, beta).weights
    np.testing.assert_allclose(w, 2 * np.arange(1, n + 1) / (n * (n + 1)), rtol=0, atol=1e-15)
    assert (np.diff(w) > 0).all()


@settings(max_examples=200, deadline=None)
@given(penalties, st.floats(0, 5), st.floats(0.01, 5), st.data())
def test_pairwise_ratio_increases_with_beta(alpha, beta, delta, data):
    assume(len(alpha) >= 2)
    i = data.draw(st.integers(0, len(alpha) - 1))
    j = data.draw(st.integers(0, len(alpha) - 1))
    assume(alpha[i] - alpha[j] > 1e-3)
    lo = adaptive_weights(alpha, beta).weights
    hi = adaptive_weights(alpha, beta + delta).weights
    assert np.log(hi[i]) - np.log(hi[j]) > np.log(lo[i]) - np.log(lo[j])


def test_weights_reject_bad_input():
    with pytest.raises(ValueError):
        adaptive_weights([], 2.0)
    with pytest.raises(ValueError):
        adaptive_weights([0.1, float("nan")], 2.0)


def test_large_beta_does_not_overflow():
    w = adaptive_weights([2.0, 0.0, 1.0], beta=1e4).weights
    assert np.isfinite(w).all() and abs(w.sum() - 1) < 1e-12
    assert w.argmax() == 0


def test_base_weights():
    np.testing.assert_array_equal(base_weights(4), [0.25, 0.5, 0.75, 1.0])


# ---------------------------------------------------------------- loss

def test_loss_zero_when_equal():
    x = [torch.randn(2, 4, 8, dtype=torch.float64, requires_grad=True) for _ in range(3)]
    loss, w = distillation_loss(LayerFeatureStack(x, "student"),
                                LayerFeatureStack([h.detach().clone() for h in x], "teacher"), 2.0)
    assert loss.item() == 0.0
    loss.backward()
    assert all(h.grad.abs().max().item() == 0.0 for h in x)
    np.testing.assert_array_equal(w.penalties, 0.0)


@pytest.mark.parametrize("beta", [0.0, 0.5, 2.0, 5.0])
def test_orthogonal_everywhere_gives_one(beta):
    s, t = _stacks([1.0, 1.0, 1.0])
    loss, _ = distillation_loss(s, t, beta)
    assert abs(loss.item() - 1.0) < 1e-12


def test_derived_two_layer_loss():
    s, t = _stacks([0.5, 0.1])
    loss, w = distillation_loss(s, t, 2.0)
    np.testing.assert_allclose(w.penalties, [0.5, 0.1], rtol=0, atol=1e-14)
    assert abs(loss.item() - LOSS_ORACLE) < 1e-12


def test_weights_are_detached():
    s, t = _stacks([0.5, 0.1])
    s = LayerFeatureStack([h.requires_grad_(True) for h in s.per_layer], "student")
    loss, w = distillation_loss(s, t, 2.0)
    loss.backward()
    # with w held fixed, d loss / d h_l = w_l * d alpha_l / d h_l
    for layer, wl in enumerate(w.weights):
        h = s.per_layer[layer].detach().clone().requires_grad_(True)
        alignment_penalty(h, t.per_layer[layer]).backward()
        torch.testing.assert_close(s.per_layer[layer].grad, wl * h.grad, rtol=1e-12, atol=1e-15)


def test_strategies():
    s, t = _stacks([0.5, 0.1])
    assert abs(strategy_variant(s, t, "uniform").item() - 0.3) < 1e-12
    torch.testing.assert_close(strategy_variant(s, t, "progressive"), distillation_loss(s, t, 0.0)[0])
    s2, t2 = _stacks([0.9, 0.0])
    assert strategy_variant(s2, t2, "final_layer").item() == 0.0
    assert abs(strategy_variant(s, t, "adaptive", beta=2.0).item() - LOSS_ORACLE) < 1e-12
    with pytest.raises(ValueError):
        strategy_variant(s, t, "bogus")


def test_stack_length_mismatch():
    s, t = _stacks([0.5, 0.1])
    with pytest.raises(ValueError):
        distillation_loss(s, LayerFeatureStack(t.per_layer[:1], "teacher"), 2.0)
