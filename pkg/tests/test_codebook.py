import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semnav.codebook import (
    frequency_from_batch,
    full_vocabulary,
    init_dynamic,
    init_static,
    selected_subset,
    top_k,
    update_dynamic,
)
from semnav.errors import InvalidArgument
from semnav.semantics import AggregatedSemantics
from semnav.tokenizer import TokenDistribution, make_codebook, token_frequency
from semnav.world import generate_environment

T = 256


def brute_top(scores, k):
    return tuple(sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k])


def pair(state, rng, same=False):
    S = state.selected_S
    a = rng.dirichlet(np.ones(len(S)))
    b = a if same else rng.dirichlet(np.ones(len(S)))
    return AggregatedSemantics(a, "mean", S), AggregatedSemantics(b, "mean", S)


def test_static_hand_cases():
    one = np.zeros(T)
    one[5] = 1.0
    assert init_static(one, 1).selected_S == (5,)
    assert init_static(np.full(T, 1 / T), 3).selected_S == (0, 1, 2)
    with pytest.raises(InvalidArgument):
        init_static(np.full(T, 1 / T), T + 1)


def test_static_on_environment_frequencies():
    freq = token_frequency(generate_environment(2, 4), make_codebook(0))
    st_ = init_static(freq, 64)
    assert st_.selected_S == brute_top(list(freq), 64)
    assert selected_subset(st_) == st_.selected_S
    assert init_dynamic(freq, 64).selected_S == st_.selected_S


def test_static_rejects_updates():
    s = init_static(np.full(T, 1 / T), 4)
    p, q = pair(s, np.random.default_rng(0))
    with pytest.raises(InvalidArgument):
        update_dynamic(s, np.full(T, 1 / T), p, q)


def test_hand_evaluated_update():
    T4 = 4
    freq = np.array([0.2, 0.3, 0.25, 0.25])
    s = init_dynamic(freq, 2)  # S = (1, 2)
    from dataclasses import replace

    s = replace(s, s_t=np.array([0.2, 0.3, 0.2, 0.1]))
    S = s.selected_S
    assert S == (1, 2)
    pred = AggregatedSemantics(np.array([0.5, 0.5]), "mean", S)
    target = AggregatedSemantics(np.array([0.6, 0.4]), "mean", S)
    out = update_dynamic(s, np.array([0.4, 0.1, 0.3, 0.2]), pred, target)
    # token 2: 0.5*0.2 + 0.5*(0.3 + 0.1)
    assert abs(out.s_t[2] - 0.3) < 1e-15
    # token 0 is outside S: s_d stays 0
    assert out.s_d[0] == 0.0 and abs(out.s_t[0] - (0.5 * 0.2 + 0.5 * 0.4)) < 1e-15
    assert len(out.s_t) == T4


def test_equation_hand_value():
    lam, gamma = 0.5, 1.0
    assert abs(lam * 0.2 + (1 - lam) * (0.4 + gamma * 0.1) - 0.35) < 1e-15


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_update_properties(seed):
    rng = np.random.default_rng(seed)
    s = init_dynamic(rng.dirichlet(np.ones(T)), 64)
    f = rng.dirichlet(np.ones(T))
    p, q = pair(s, rng)
    out = update_dynamic(s, f, p, q)
    assert out.selected_S == brute_top(list(out.s_t), 64)
    # equal prediction and target zero the difficulty on S
    p, q = pair(s, rng, same=True)
    assert (update_dynamic(s, f, p, q).s_d[list(s.selected_S)] == 0).all()


def test_lambda_one_freezes():
    rng = np.random.default_rng(0)
    s = init_dynamic(rng.dirichlet(np.ones(T)), 64, lam=1.0)
    for _ in range(5):
        p, q = pair(s, rng)
        s2 = update_dynamic(s, rng.dirichlet(np.ones(T)), p, q)
        assert np.array_equal(s2.s_t, s.s_t)
        s = s2


def test_geometric_convergence_and_static_limit():
    rng = np.random.default_rng(1)
    s0 = init_dynamic(rng.dirichlet(np.ones(T)), 64, lam=0.5, gamma=0.0)
    f = rng.dirichlet(np.ones(T))
    target_S = init_static(f, 64).selected_S
    s = s0
    for t in range(1, 51):
        p, q = pair(s, rng)
        s = update_dynamic(s, f, p, q)
        assert np.abs(s.s_t - f).max() <= 0.5**t * np.abs(s0.s_t - f).max() + 1e-9
    assert s.selected_S == target_S


def test_mismatched_kind_rejected():
    rng = np.random.default_rng(0)
    s = init_dynamic(rng.dirichlet(np.ones(T)), 8)
    p, _ = pair(s, rng)
    q = AggregatedSemantics(p.probs_S, "sample", s.selected_S, 3)
    with pytest.raises(InvalidArgument):
        update_dynamic(s, np.full(T, 1 / T), p, q)


def test_frequency_from_batch():
    p = np.zeros((16, T))
    p[:, 3] = 1
    assert frequency_from_batch([TokenDistribution(p, np.full(16, 3))])[3] == 1.0
    with pytest.raises(InvalidArgument):
        frequency_from_batch([])
    rng = np.random.default_rng(0)
    batch = []
    for _ in range(5):
        toks = rng.integers(0, T, 16)
        batch.append(TokenDistribution(np.eye(T)[toks], toks))
    f = frequency_from_batch(batch)
    counts = np.zeros(T)
    for td in batch:
        for t in td.argmax_tokens:
            counts[t] += 1
    assert np.allclose(f, counts / 80) and abs(f.sum() - 1) < 1e-9


def test_top_k_and_full_vocabulary():
    assert top_k(np.array([1.0, 3.0, 3.0, 2.0]), 3) == (1, 2, 3)
    assert full_vocabulary(T).selected_S == tuple(range(T))
