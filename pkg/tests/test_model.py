import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semnav.errors import InvalidArgument, InvalidState, TrainingDiverged
from semnav.model import autograd as ag
from semnav.model.agent import Agent, ModelConfig, cross_entropy, kl_loss
from semnav.model.gradcheck import TINY, _tiny_input, run_gradcheck
from semnav.model.params import Adam, ParameterStore, checkpoint_bytes, read_checkpoint

SMALL = dataclasses.replace(TINY, dtype="float64")


def tiny(seed=0, **kw):
    cfg = dataclasses.replace(SMALL, **kw)
    inp, t = _tiny_input(cfg, np.random.default_rng(seed))
    return Agent(cfg, seed=seed), inp, t


def finite_difference(f, x, step=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        up = f()
        x[i] = orig - step
        down = f()
        x[i] = orig
        g[i] = (up - down) / (2 * step)
    return g


# -- autograd core ---------------------------------------------------------------


OPS = {
    "exp": lambda a, b: ag.exp(a),
    "log": lambda a, b: ag.log(ag.exp(a) + 1.0),
    "gelu": lambda a, b: ag.gelu(a),
    "mul": lambda a, b: a * b,
    "matmul": lambda a, b: ag.matmul(a, ag.transpose(b, (1, 0))),
    "softmax": lambda a, b: ag.softmax(a, axis=-1) * b,
    "log_softmax": lambda a, b: ag.log_softmax(a, axis=0) * b,
    "layer_norm": lambda a, b: ag.layer_norm(a, b[0], b[1]),
    "take": lambda a, b: ag.take(a, np.array([2, 0, 2]), axis=1),
    "take_along": lambda a, b: ag.take_along(a, np.array([[1], [0], [2]]), axis=1),
    "concat": lambda a, b: ag.concat([a, b * b], axis=0),
    "getitem": lambda a, b: a[1:, ::2] * 3.0,
    "mean": lambda a, b: ag.tmean(a * b, axis=0),
    "broadcast": lambda a, b: a + b[0],
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_against_finite_differences(name):
    rng = np.random.default_rng(len(name))
    a = ag.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    b = ag.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    w = rng.normal(size=OPS[name](a, b).shape)

    def f():
        return float((OPS[name](a, b).data * w).sum())

    with ag.Tape() as tape:
        loss = ag.tsum(OPS[name](a, b) * w)
    tape.backward(loss)
    for t in (a, b):
        num = finite_difference(f, t.data)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert np.allclose(ana, num, atol=1e-6, rtol=1e-5)


def test_sum_of_squares_gradient_exact():
    ps = ParameterStore(np.float64)
    x = ps.add("x", np.array([0.5, -1.25, 2.0]))
    with ag.Tape() as tape:
        loss = ag.tsum(x * x)
    tape.backward(loss)
    assert np.array_equal(ps.grad("x"), 2 * x.data)


def test_zero_loss_gives_zero_gradients():
    ps = ParameterStore(np.float64)
    x = ps.add("x", np.ones(4))
    with ag.Tape() as tape:
        loss = ag.tsum(x * 0.0)
    tape.backward(loss)
    assert not ps.grad("x").any()


def test_backward_without_tape():
    x = ag.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(InvalidState):
        ag.backward(ag.tsum(x))


def test_backward_is_one_shot():
    x = ag.Tensor(np.ones(2), requires_grad=True)
    with ag.Tape() as tape:
        loss = ag.tsum(x * x)
    tape.backward(loss)
    with pytest.raises(InvalidState):
        tape.backward(loss)


# -- whole-model gradient check ----------------------------------------------------


def test_gradcheck_all_groups():
    rep = run_gradcheck()
    assert rep.ok, "\n".join(rep.lines())
    groups = set(rep.groups)
    for g in ("lang.0", "lang.1", "temporal.0", "temporal.1", "panorama.0", "cross.0", "cross.1",
              "head.mtm", "head.mpm", "head.apig", "action", "value", "cond", "mlm", "itm"):
        assert g in groups


def test_gradcheck_catches_broken_backward(monkeypatch):
    # a deliberately wrong derivative rule must be detected
    monkeypatch.setattr(ag, "_gelu_backward", lambda x, t, g: g * 0.5)
    assert not run_gradcheck().ok


# -- encoder contracts -------------------------------------------------------------


def test_encode_is_pure():
    agent, inp, _ = tiny()
    a, b = agent.encode(inp), agent.encode(inp)
    for x, y in ((a.lang, b.lang), (a.history, b.history), (a.pano, b.pano)):
        assert np.array_equal(x.data, y.data)


def test_masking_a_step_changes_its_output():
    agent, inp, _ = tiny()
    base = agent.encode(inp).history.data
    m = inp.hist_masked.copy()
    m[1, 0] = True
    out = agent.encode(dataclasses.replace(inp, hist_masked=m)).history.data
    assert not np.allclose(out[1, 1], base[1, 1])


def test_masked_input_content_is_ignored():
    agent, inp, _ = tiny()
    base = agent.encode(inp)
    vis = inp.hist_vis.copy()
    vis[0, 1] += 5.0  # step 1 of item 0 is masked
    pvis = inp.pano_vis.copy()
    pvis[inp.pano_masked] -= 3.0
    out = agent.encode(dataclasses.replace(inp, hist_vis=vis, pano_vis=pvis))
    assert np.array_equal(out.history.data, base.history.data)
    assert np.array_equal(out.pano.data, base.pano.data)


def test_all_masked_panorama_is_finite():
    agent, inp, _ = tiny()
    st_ = agent.encode(dataclasses.replace(inp, pano_masked=np.ones_like(inp.pano_masked)))
    assert np.isfinite(st_.pano.data).all() and np.isfinite(agent.action_logits(st_).data[:, :3]).all()


def test_masking_locality_without_cross_attention():
    agent, inp, _ = tiny(cross_modal=False)
    base = agent.encode(inp)
    # padded word of item 1 changes: nothing valid moves
    words = inp.words.copy()
    words[1, -1] = (words[1, -1] + 1) % SMALL.vocab_size
    out = agent.encode(dataclasses.replace(inp, words=words))
    assert np.array_equal(out.lang.data[1, :-1], base.lang.data[1, :-1])
    assert np.array_equal(out.history.data, base.history.data)
    # history changes leave language and panorama encodings alone
    out = agent.encode(dataclasses.replace(inp, hist_vis=inp.hist_vis + 1.0))
    assert np.array_equal(out.lang.data, base.lang.data)
    assert np.array_equal(out.pano.data, base.pano.data)
    assert not np.allclose(out.history.data, base.history.data)


def test_length_limits():
    agent, inp, _ = tiny()
    long = np.ones((2, SMALL.max_words + 1), dtype=np.int64)
    with pytest.raises(InvalidArgument):
        agent.encode(dataclasses.replace(inp, words=long, word_valid=np.ones_like(long, dtype=bool)))
    H = SMALL.max_history + 1
    with pytest.raises(InvalidArgument):
        agent.encode(dataclasses.replace(
            inp, hist_vis=np.zeros((2, H, SMALL.d_tok)), hist_ang=np.zeros((2, H, SMALL.n_angle)),
            hist_valid=np.ones((2, H), dtype=bool), hist_masked=np.zeros((2, H), dtype=bool)))


# -- heads --------------------------------------------------------------------------


def test_action_logits_layout_and_symmetry():
    agent, inp, _ = tiny()
    cand = inp.cand_views.copy()
    cand[0, 1] = cand[0, 0]
    st_ = agent.encode(dataclasses.replace(inp, cand_views=cand))
    logits = agent.action_logits(st_).data
    assert logits.shape == (2, 4)
    assert logits[0, 0] == logits[0, 1]
    assert logits[1, 3] <= -1e8 and np.isfinite(logits[1, :3]).all()


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(0, 2**32 - 1))
def test_argmax_shift_invariance(c, seed):
    logits = np.random.default_rng(seed).normal(size=(4, 6))
    assert np.array_equal(logits.argmax(1), (logits + c).argmax(1))
    a = ag.softmax(ag.Tensor(logits)).data
    b = ag.softmax(ag.Tensor(logits + c)).data
    assert np.allclose(a, b, atol=1e-12)


def test_head_outputs_and_conditioning():
    agent, inp, t = tiny()
    st_ = agent.encode(inp)
    S = t["S"]
    p = agent.head_predict("apig", st_.cls, "mean", None, S)
    assert np.allclose(p.sum(1), 1, atol=1e-9) and (p > 0).all()
    # mean mode adds nothing to the context
    h = ag.gelu(agent.linear("head.apig.fc1", st_.cls))
    bare = agent.linear("head.apig.fc2", h).data[:, S]
    bare = np.exp(bare - bare.max(1, keepdims=True))
    assert np.allclose(p, bare / bare.sum(1, keepdims=True), atol=1e-12)
    w1 = np.full((2, 16), 1 / 16)
    w2 = np.eye(16)[[3, 9]]
    assert not np.allclose(agent.head_predict("apig", st_.cls, "weighted", w1, S),
                           agent.head_predict("apig", st_.cls, "weighted", w2, S))
    with pytest.raises(InvalidArgument):
        agent.head_predict("apig", st_.cls, "bogus", None, S)
    with pytest.raises(InvalidArgument):
        agent.head_predict("xyz", st_.cls, "mean", None, S)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_nonnegative_and_zero_at_target(seed):
    rng = np.random.default_rng(seed)
    target = rng.dirichlet(np.ones(5), size=3)
    logits = rng.normal(size=(3, 5))
    assert float(kl_loss(ag.log_softmax(ag.Tensor(logits)), target).data) >= 0
    assert abs(float(kl_loss(ag.Tensor(np.log(target)), target).data)) < 1e-12


def test_kl_hand_case():
    p = np.array([[0.5, 0.25, 0.25]])
    q = np.array([[0.25, 0.5, 0.25]])
    expected = 0.5 * np.log(2) + 0.25 * np.log(0.5)
    assert abs(float(kl_loss(ag.Tensor(np.log(q)), p).data) - expected) < 1e-15


# -- optimizer and checkpoints ------------------------------------------------------


def test_adam_zero_gradients_leave_params():
    agent, _, _ = tiny()
    before = {k: v.copy() for k, v in agent.params.state().items()}
    Adam(agent.params).step(1e-2)
    assert all(np.array_equal(before[k], v) for k, v in agent.params.state().items())


def test_adam_reduces_quadratic():
    ps = ParameterStore(np.float64)
    x = ps.add("x", np.array([3.0]))
    opt = Adam(ps)
    with ag.Tape() as tape:
        loss = ag.tsum(x * x)
    tape.backward(loss)
    opt.step(0.1)
    assert float(x.data[0] ** 2) < 9.0
    assert not ps.grad("x").any()


def test_adam_raises_on_nan():
    ps = ParameterStore(np.float64)
    ps.add("x", np.array([1.0]))
    ps["x"].grad = np.array([np.nan])
    with pytest.raises(TrainingDiverged, match="training-diverged"):
        Adam(ps).step(0.1)


def _train(seed):
    agent, inp, t = tiny(seed=0)
    opt = Adam(agent.params)
    from semnav.model.gradcheck import composite_loss

    for _ in range(3):
        with ag.Tape() as tape:
            loss = composite_loss(agent, inp, t)
        tape.backward(loss)
        opt.step(1e-2, 1.0)
    return agent


def test_training_replay_is_bit_identical():
    a, b = _train(0), _train(0)
    assert checkpoint_bytes(a.params) == checkpoint_bytes(b.params)


def test_checkpoint_round_trip():
    agent = Agent(ModelConfig(), seed=1)
    blob = checkpoint_bytes(agent.params, {"s_t": np.linspace(0, 1, 5)}, {"k": 1})
    assert blob[:4] == b"SNMD"
    f32, f64, meta = read_checkpoint(blob)
    assert meta == {"k": 1}
    assert np.array_equal(f64["s_t"], np.linspace(0, 1, 5))
    clone = Agent(ModelConfig(), seed=99)
    clone.params.load_state(f32)
    assert checkpoint_bytes(clone.params, {"s_t": np.linspace(0, 1, 5)}, {"k": 1}) == blob
    with pytest.raises(InvalidArgument):
        read_checkpoint(b"NOPE" + blob[4:])


def test_cross_entropy_matches_manual():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    ce = float(cross_entropy(ag.Tensor(logits), np.array([1, 2])).data)
    lse = np.log(np.exp(logits).sum(1))
    assert abs(ce - np.mean([lse[0] - 2.0, lse[1] - 0.0])) < 1e-12
