"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import dataclasses
import time

import numpy as np
import pytest

from semnav import cli
from semnav.codebook import init_dynamic, init_static, update_dynamic
from semnav.data import EnvCache, sample_routes
from semnav.experiment import (
    ablation_rows,
    build_corpus,
    parse_spec,
    parse_variant,
    pretrain_stage,
    val_routes,
    variant_means,
)
from semnav.finetune import rollout_batch
from semnav.generation import reconstruction_study
from semnav.metrics import distance_matrix, dtw, evaluate_trajectory
from semnav.model import autograd as ag
from semnav.model.agent import Agent, ModelConfig, kl_loss
from semnav.model.gradcheck import TINY, param_group, run_gradcheck
from semnav.pretrain import (
    PretrainConfig,
    initial_codebook,
    mask_count,
    mask_panorama,
    mask_trajectory,
    run_pretraining,
    task_loss,
)
from semnav.semantics import (
    AggregatedSemantics,
    aggregate,
    indicator_weights,
    mean_patch_prob,
    restrict,
    sample_patch_prob,
    sample_weights,
    uniform_weights,
    weighted_patch_prob,
)
from semnav.tokenizer import TokenDistribution, make_codebook
from semnav.world import generate_environment

N, T = 16, 256


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")

    return emit


def random_td(rng):
    p = np.exp(rng.standard_normal((N, T)))
    p /= p.sum(axis=1, keepdims=True)
    return TokenDistribution(p, p.argmax(axis=1))


# -- 1 -------------------------------------------------------------------------------


def test_01_aggregation_identities(report):
    rng = np.random.default_rng(1)
    cases = [(random_td(rng), np.sort(rng.choice(T, 64, replace=False)), int(rng.integers(N))) for _ in range(1000)]
    t0 = time.perf_counter()
    worst = 0.0
    for td, S, j in cases:
        worst = max(worst, np.abs(weighted_patch_prob(td, uniform_weights(), S).probs_S - mean_patch_prob(td, S).probs_S).max())
        worst = max(worst, np.abs(weighted_patch_prob(td, indicator_weights(j), S).probs_S - sample_patch_prob(td, j, S).probs_S).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 1.0
    report(1, ok, f"max deviation {worst:.2e} (tol 1e-12) over 1000 cases in {elapsed:.2f}s (limit 1s)")
    assert ok


# -- 2 -------------------------------------------------------------------------------


def test_02_weighted_probability_bound_and_converse(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    violations, worst_slack = 0, -np.inf
    for eps in (1e-3, 1e-2):
        for i in range(1000):
            S = np.sort(rng.choice(T, 64, replace=False))
            p = random_td(rng).probs[:, S]
            p_hat = np.clip(p + rng.uniform(-eps, eps, p.shape), 0.0, None)
            assert np.abs(p - p_hat).max() <= eps
            w = sample_weights(rng, block_wise=bool(i % 2)).w
            gap = np.abs(aggregate(p, w) - aggregate(p_hat, w)).max()
            worst_slack = max(worst_slack, gap - eps)
            violations += gap > eps
    # converse: four independent weighted sums over four patches determine every patch
    n = 4
    p = random_td(rng).probs[:n]
    W = rng.uniform(0.05, 1.0, (n, n))
    W /= W.sum(axis=1, keepdims=True)
    recovered = np.linalg.solve(W, W @ p)
    err = np.abs(recovered - p).max()
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and err < 1e-9 and elapsed < 5.0
    report(2, ok, f"bound violations {violations}/2000 (max gap-eps {worst_slack:.2e}); converse error {err:.2e} (tol 1e-9); {elapsed:.2f}s (limit 5s)")
    assert ok


# -- 3 -------------------------------------------------------------------------------


def test_03_dynamic_codebook(report):
    # hand case for one token: lam * s_prev + (1 - lam) * (s_f + gamma * s_d)
    freq = np.array([0.1, 0.4, 0.3, 0.2])
    st = dataclasses.replace(init_dynamic(freq, 2), s_t=np.array([0.1, 0.2, 0.3, 0.05]))
    S = st.selected_S  # tokens 1 and 2 by initial frequency
    pred = AggregatedSemantics(np.array([0.6, 0.4]), "mean", S)
    target = AggregatedSemantics(np.array([0.5, 0.5]), "mean", S)
    out = update_dynamic(st, np.array([0.2, 0.4, 0.2, 0.2]), pred, target)
    hand = out.s_t[1]
    hand_ok = abs(hand - 0.35) < 1e-12

    # gamma = 0 with a stationary batch frequency converges to the static top-|S|
    rng = np.random.default_rng(3)
    f = rng.dirichlet(np.ones(T))
    goal = init_static(f, 64).selected_S
    s = init_dynamic(rng.dirichlet(np.ones(T)), 64, lam=0.5, gamma=0.0)
    converged_at = None
    for t in range(1, 51):
        a = rng.dirichlet(np.ones(64))
        s = update_dynamic(s, f, AggregatedSemantics(a, "mean", s.selected_S), AggregatedSemantics(rng.dirichlet(np.ones(64)), "mean", s.selected_S))
        if s.selected_S == goal and converged_at is None:
            converged_at = t
    conv_ok = s.selected_S == goal

    # lam = 1 freezes the running score
    s = init_dynamic(rng.dirichlet(np.ones(T)), 64, lam=1.0)
    frozen = True
    for _ in range(10):
        nxt = update_dynamic(s, rng.dirichlet(np.ones(T)), AggregatedSemantics(rng.dirichlet(np.ones(64)), "mean", s.selected_S),
                             AggregatedSemantics(rng.dirichlet(np.ones(64)), "mean", s.selected_S))
        frozen &= np.array_equal(nxt.s_t, s.s_t)
        s = nxt
    ok = hand_ok and conv_ok and frozen
    report(3, ok, f"hand update {hand:.15f} (expect 0.35); static top-|S| reached at update {converged_at} (limit 50); lam=1 frozen: {frozen}")
    assert ok


# -- 4 -------------------------------------------------------------------------------


def test_04_gradient_check(report):
    t0 = time.perf_counter()
    rep = run_gradcheck(step=1e-4)
    elapsed = time.perf_counter() - t0
    groups = set(rep.groups)
    required = {param_group(n) for n in Agent(TINY, seed=0).params.names()}
    ok = rep.max_error < 1e-3 and required == groups and TINY.d == 8 and elapsed < 30
    report(4, ok, f"max relative error {rep.max_error:.2e} (tol 1e-3) over {rep.n_checked} scalars in {len(groups)} groups, d=8, {elapsed:.1f}s (limit 30s)")
    assert ok


# -- 5 -------------------------------------------------------------------------------


def test_05_kl_contract(report):
    rng = np.random.default_rng(5)
    negative, nonzero_at_equal, zero_when_different = 0, 0, 0
    modes = ("mean", "sample", "weighted")
    for i in range(1000):
        td = random_td(rng)
        S = np.sort(rng.choice(T, int(rng.integers(2, 65)), replace=False))
        mode = modes[i % 3]
        if mode == "mean":
            w = uniform_weights().w
        elif mode == "sample":
            w = indicator_weights(int(rng.integers(N))).w
        else:
            w = sample_weights(rng, block_wise=bool(i % 2)).w
        target = restrict(aggregate(td.probs, w), S)[None]
        logits = rng.normal(scale=2.0, size=(1, len(S)))
        loss = float(kl_loss(ag.log_softmax(ag.Tensor(logits)), target).data)
        negative += loss < 0
        zero_when_different += loss <= 1e-12
        exact = float(kl_loss(ag.Tensor(np.log(target)), target).data)
        nonzero_at_equal += abs(exact) > 1e-9
    # the real task losses on a fresh model
    cb = make_codebook(0)
    caches = [EnvCache(generate_environment(s, 4), cb) for s in (11, 12)]
    routes = sample_routes(caches[0], 8, 0)
    S = initial_codebook(PretrainConfig(), caches).subset
    agent = Agent(ModelConfig(d=16, n_heads=2), seed=0)
    task_losses = [float(task_loss(t, agent, routes, np.random.default_rng(k), S, agg)[0].data)
                   for k, (t, agg) in enumerate((t, a) for t in ("MTM", "MPM", "APIG") for a in ("mean", "sample", "weighted", "weighted-block"))]
    ok = negative == 0 and nonzero_at_equal == 0 and zero_when_different == 0 and min(task_losses) >= 0
    report(5, ok, f"1000 instances: negative {negative}, nonzero at equality {nonzero_at_equal}, zero while different {zero_when_different}; "
                  f"min model task loss {min(task_losses):.3f}")
    assert ok


# -- 6 -------------------------------------------------------------------------------


def test_06_masking_contract(report):
    rng = np.random.default_rng(6)
    counts_ok = all(
        len(mask_trajectory(m, r, rng)) == max(1, int(np.ceil(r * m - 1e-9)))
        for m in range(2, 9) for r in (0.1, 0.25, 0.3, 0.5, 0.75, 0.9)
    )
    pano_n = len(mask_panorama(None, 0.3, rng))
    worst = 0.0
    for m in (4, 5, 6):
        hits = np.zeros(m)
        for _ in range(10_000):
            hits[list(mask_trajectory(m, 0.5, rng))] += 1
        worst = max(worst, np.abs(hits / 10_000 - mask_count(0.5, m) / m).max())
        if m % 2 == 0:
            worst = max(worst, np.abs(hits / 10_000 - 0.5).max())
    ok = counts_ok and pano_n == 11 and worst <= 0.02
    report(6, ok, f"trajectory counts ceil(r*M): {counts_ok}; panorama count {pano_n} (expect 11); max per-index rate deviation {worst:.4f} (tol 0.02)")
    assert ok


# -- 7 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_07_pretraining_smoke(report):
    cb = make_codebook(0)
    caches = [EnvCache(generate_environment(s, 4), cb) for s in (11, 12)]
    ratios, times = {}, {}
    for task in ("MTM", "MPM", "APIG"):
        cfg = PretrainConfig(steps=500, task_weights={task: 1.0}, seed=0)
        t0 = time.perf_counter()
        res = run_pretraining(cfg, caches, Agent(ModelConfig(), seed=0))
        times[task] = time.perf_counter() - t0
        losses = [r["loss"] for r in res.log]
        ratios[task] = float(np.mean(losses[-20:]) / losses[0])
    total = sum(times.values())
    ok = all(r < 0.5 for r in ratios.values()) and max(times.values()) < 300
    detail = ", ".join(f"{t} last-20 mean / step-0 = {ratios[t]:.3f} ({times[t]:.0f}s)" for t in ratios)
    report(7, ok, f"{detail}; limit ratio < 0.5 and < 300s per run (total {total:.0f}s)")
    assert ok


# -- 8 and 9 share one ablation run ------------------------------------------------------


@pytest.fixture(scope="module")
def ablation():
    spec = parse_spec("")
    corpus = build_corpus(spec.experiment)
    seeds = list(range(spec.experiment.n_seeds))
    # one call so that all-lat and all-nolat fine-tune from the same pre-trained checkpoints
    t0 = time.perf_counter()
    stamps = []
    rows = ablation_rows(spec, [parse_variant(n) for n in ("baseline", "all-lat", "all-nolat")], seeds, corpus,
                         progress=lambda row: stamps.append(time.perf_counter() - t0))
    # rows arrive variant by variant; baseline and all-lat finish first
    return rows, variant_means(rows), stamps[2 * len(seeds) - 1]


@pytest.mark.slow
def test_08_new_tasks_beat_baseline(ablation, report):
    rows, means, elapsed = ablation
    base, full = means["baseline"]["sr"], means["all-lat"]["sr"]
    per_seed = ", ".join(f"{r['variant']}/{r['seed']}={r['sr']:.3f}" for r in rows if r["variant"] in ("baseline", "all-lat"))
    ok = full > base and elapsed < 1800
    report(8, ok, f"mean unseen SR all-tasks {full:.4f} vs baseline {base:.4f} (need strictly greater); {elapsed:.0f}s (limit 1800s); {per_seed}")
    assert ok


@pytest.mark.slow
def test_09_auxiliary_loss_not_worse(ablation, report):
    rows, means, _ = ablation
    lat, nolat = means["all-lat"]["sr"], means["all-nolat"]["sr"]
    per_seed = ", ".join(f"{r['variant']}/{r['seed']}={r['sr']:.3f}" for r in rows if r["variant"] in ("all-lat", "all-nolat"))
    ok = lat >= nolat
    report(9, ok, f"mean unseen SR with L_AT {lat:.4f} vs without {nolat:.4f} (need >=), shared pre-trained checkpoints; {per_seed}")
    assert ok


# -- 10 ------------------------------------------------------------------------------


def _alignment_costs(a, b, dist):
    n, m = len(a), len(b)
    best = np.inf

    def walk(i, j, acc):
        nonlocal best
        acc += dist[a[i], b[j]]
        if (i, j) == (n - 1, m - 1):
            best = min(best, acc)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


def _walks(env, start, max_nodes):
    out = [[start]]
    frontier = [[start]]
    for _ in range(max_nodes - 1):
        frontier = [w + [v] for w in frontier for v in env.neighbors(w[-1])]
        out += frontier
    return out


def test_10_metrics_suite(report):
    env = generate_environment(3, 4)
    dist = distance_matrix(env)
    # identity
    ref = _walks(env, 0, 4)[-1]
    r = evaluate_trajectory(ref, ref, env)
    identity_ok = (r.sr, r.spl, r.ndtw, r.sdtw, r.cls, r.ne) == (1.0, 1.0, 1.0, 1.0, 1.0, 0.0)
    # every walk of up to 5 nodes from one corner against every other
    walks = _walks(env, 0, 5)
    mismatches = sum(dtw(a, b, dist) != _alignment_costs(a, b, dist) for a in walks for b in walks)
    n_pairs = len(walks) ** 2
    # 1000 sampled rollouts of an untrained agent
    cb = make_codebook(0)
    cache = EnvCache(env, cb)
    routes = sample_routes(cache, 1000, 10)
    agent = Agent(ModelConfig(d=16, n_heads=2), seed=10)
    rng = np.random.default_rng(10)
    bad = 0
    for i in range(0, 1000, 250):
        for tr, rt in zip(rollout_batch(agent, routes[i : i + 250], "sample", rng, 10), routes[i : i + 250]):
            m = evaluate_trajectory(tr.nodes, rt.path, env)
            bad += not (m.spl <= m.sr and m.sdtw == m.sr * m.ndtw)
    ok = identity_ok and mismatches == 0 and bad == 0
    report(10, ok, f"identity all-ones/zero-NE: {identity_ok}; DTW vs exhaustive alignment: {mismatches} mismatches in {n_pairs} pairs (<= 5 nodes); "
                   f"SPL<=SR and sDTW=SR*nDTW violated on {bad}/1000 rollouts")
    assert ok


# -- 11 ------------------------------------------------------------------------------


@pytest.mark.slow
def test_11_reconstruction(report):
    spec = parse_spec("pretrain.aggregation = weighted\npretrain.steps = 500\npretrain.task_weights = APIG:1")
    corpus = build_corpus(spec.experiment)
    agent, S, _ = pretrain_stage(spec, corpus, 0)
    routes = val_routes(corpus, 100, seed=11)
    s70, _ = reconstruction_study(agent, routes, S, 70, np.random.default_rng(11))
    s100, _ = reconstruction_study(agent, routes, S, 100, np.random.default_rng(11))
    ok = s70.n_views == 100 and s70.model_distance <= s70.random_distance and s100.model_feature_accuracy == 1.0
    report(11, ok, f"x=70 over {s70.n_views} unseen views: model distance {s70.model_distance:.4f} vs random {s70.random_distance:.4f} (need <=); "
                   f"x=100 feature accuracy {s100.model_feature_accuracy:.3f} (need 1.0)")
    assert ok


# -- 12 ------------------------------------------------------------------------------


def test_12_reproducibility(tmp_path, report):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "n_train_envs = 2\nn_val_envs = 2\nval_episodes = 10\npretrain.steps = 20\npretrain.routes_per_env = 20\n"
        "finetune.iterations = 4\nfinetune.eval_every = 2\nfinetune.eval_episodes = 6\nfinetune.routes_per_env = 10\n"
    )
    files = {}
    for tag in ("a", "b"):
        pre, ft = tmp_path / tag / "pre", tmp_path / tag / "ft"
        assert cli.main(["pretrain", "--config", str(cfg), "--seed", "7", "--out", str(pre)]) == 0
        assert cli.main(["finetune", "--config", str(cfg), "--seed", "7", "--ckpt", str(pre / "pretrain.snmd"), "--out", str(ft)]) == 0
        files[tag] = {p.relative_to(tmp_path / tag).as_posix(): p.read_bytes() for p in (tmp_path / tag).rglob("*") if p.is_file()}
    differing = sorted(k for k in files["a"] if files["a"][k] != files["b"].get(k))
    ok = set(files["a"]) == set(files["b"]) and not differing
    report(12, ok, f"{len(files['a'])} artifacts (checkpoints, JSONL logs, manifests) compared byte-for-byte; differing: {differing or 'none'}")
    assert ok
