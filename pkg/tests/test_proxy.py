import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_VOCAB, random_batch, randomize, tiny_config
from test_adapter import random_adapter
from fedpt.adapter import AdaptedModel, new_adapter
from fedpt.decode import greedy_decode
from fedpt.errors import ConfigurationError
from fedpt.model import Vocab, forward_logits, init_params, softmax, target_logits
from fedpt.proxy import ProxyEnsemble, ProxyTeacher, proxy_logits, proxy_next_distribution


@pytest.fixture
def trio():
    large = randomize(init_params(tiny_config(width=16, heads=4, layers=2), 0), 1)
    small = randomize(init_params(tiny_config(width=8, heads=2, layers=1), 2), 3)
    return large, small


def ensemble(trio, adapter_seed=None, alpha=1.5):
    large, small = trio
    a = (new_adapter(small.config, 2, 0) if adapter_seed is None
         else random_adapter(small.config, 2, adapter_seed))
    return ProxyEnsemble(large, small, AdaptedModel(small, a), alpha)


def test_fresh_adapter_cancels_exactly(trio):
    toks = [10, 1, 2, 3]
    for alpha in (0.0, 1.0, 1.5, 7.25):
        assert np.array_equal(proxy_logits(ensemble(trio, alpha=alpha), toks),
                              forward_logits(trio[0], toks))


def test_alpha_zero_returns_large_logits(trio):
    toks = [10, 4, 4, 2]
    assert np.array_equal(proxy_logits(ensemble(trio, 5, alpha=0.0), toks),
                          forward_logits(trio[0], toks))


def test_two_token_worked_example(trio):
    e = ensemble(trio, alpha=2.0)
    z = e.combine(np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 0.0]))
    assert np.array_equal(z, [2.0, 0.0])
    p = softmax(z)
    e2 = math.exp(2.0)
    np.testing.assert_allclose(p, [e2 / (e2 + 1), 1 / (e2 + 1)], rtol=1e-15)
    np.testing.assert_allclose(p, [0.8808, 0.1192], atol=5e-5)


def test_alpha_sandwich_on_positive_offset(trio):
    offset = np.array([0.7, 0.0, 0.0])
    base = np.array([0.1, -0.3, 0.5])
    probs = {a: softmax(ensemble(trio, alpha=a).combine(base, offset, np.zeros(3)))
             for a in (1.0, 1.5, 2.0)}
    lo = np.minimum(probs[1.0], probs[2.0])
    hi = np.maximum(probs[1.0], probs[2.0])
    assert np.all(lo <= probs[1.5]) and np.all(probs[1.5] <= hi)


def test_uniform_combined_logits_give_uniform_distribution(trio):
    large, small = trio
    flat = large.replace({"lm_head": np.zeros_like(large["lm_head"])})
    e = ProxyEnsemble(flat, small, AdaptedModel(small, new_adapter(small.config, 2, 0)), 1.5)
    np.testing.assert_allclose(proxy_next_distribution(e, [10, 1]), np.full(12, 1 / 12),
                               rtol=1e-15)


def test_vocabulary_mismatch_is_rejected(trio):
    large, small = trio
    other = init_params(tiny_config(vocab=Vocab(size=13, pad=9, bos=10, eos=11)), 0)
    with pytest.raises(ConfigurationError):
        ProxyEnsemble(other, small, AdaptedModel(small, new_adapter(small.config, 2, 0)), 1.0)
    with pytest.raises(ConfigurationError):
        ensemble(trio, alpha=-0.5)
    with pytest.raises(ConfigurationError):
        ensemble(trio, alpha=float("nan"))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_continuity_near_alpha_zero(seed):
    rng = np.random.default_rng(seed)
    large = randomize(init_params(tiny_config(), seed), seed + 1)
    small = randomize(init_params(tiny_config(layers=1), seed + 2), seed + 3)
    e = ProxyEnsemble(large, small, AdaptedModel(small, random_adapter(small.config, 2, seed)),
                      1e-3)
    toks = [10] + list(rng.integers(0, 9, size=5))
    p = proxy_next_distribution(e, toks)
    q = softmax(forward_logits(large, toks)[-1])
    assert float(np.sum(p * (np.log(p) - np.log(q)))) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.floats(-100, 100),
       st.floats(0, 3))
def test_shift_invariance_and_argmax_transfer(g, c, alpha):
    g_large = np.array(g)
    e = ProxyEnsemble.__new__(ProxyEnsemble)
    object.__setattr__(e, "alpha", alpha)
    rng = np.random.default_rng(0)
    g_tuned, g_pre = rng.standard_normal(4), rng.standard_normal(4)
    a = softmax(e.combine(g_large, g_tuned, g_pre))
    b = softmax(e.combine(g_large, g_tuned + c, g_pre))
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
    same = e.combine(g_large, g_pre, g_pre)
    assert np.argmax(same) == np.argmax(g_large)


def test_stream_matches_full_proxy_logits(trio):
    e = ensemble(trio, 9)
    toks = [10, 1, 2, 3, 4, 5]
    full = proxy_logits(e, toks)
    s = e.stream(toks[:2])
    rows = [s.logits] + [s.append(t) for t in toks[2:]]
    np.testing.assert_allclose(np.array(rows), full[1:], rtol=1e-10, atol=1e-12)


def test_greedy_with_cancelled_offset_matches_large(trio):
    e = ensemble(trio, alpha=1.5)
    assert greedy_decode(e, [10, 1, 2], 8) == greedy_decode(trio[0], [10, 1, 2], 8)


def test_teacher_cache_matches_direct_combination(trio):
    large, small = trio
    e = ensemble(trio, 4)
    batch = random_batch(np.random.default_rng(0), TINY_VOCAB, 5)
    cached = ProxyTeacher(large, small, batch, chunk=2).logits(e)
    direct = e.combine(target_logits(large, batch),
                       target_logits(small, batch, e.small_tuned.adapter.factors),
                       target_logits(small, batch))
    np.testing.assert_allclose(np.concatenate(cached), direct, rtol=1e-12, atol=1e-12)
    other = randomize(init_params(large.config, 5), 6)
    with pytest.raises(ConfigurationError):
        ProxyTeacher(other, small, batch).logits(e)
