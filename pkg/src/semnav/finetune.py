"""Navigation fine-tuning: imitation plus policy-gradient learning, with the
APIG head reused as an auxiliary loss on imitation steps.

Per iteration the loss is

    il_rl_ratio * (CE(teacher actions) + lat_weight * L_AT) + L_RL

where L_RL is an advantage-weighted log-likelihood of sampled actions against
a learned value baseline, plus the baseline's squared error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Context, EnvCache, Route, facing_view, make_input, sample_routes
from .errors import InvalidArgument, TrainingDiverged
from .metrics import distance_matrix, report_from_paths
from .model import autograd as ag
from .model.agent import Agent, cross_entropy, kl_loss, nll
from .model.params import Adam
from .pretrain import aggregation_mode, head_conditioning, target_semantics
from .seeding import derive_rng, derive_seed
from .semantics import uniform_weights
from .world import N_PATCHES

POLICIES = ("teacher", "sample", "greedy")


@dataclass(frozen=True)
class FinetuneConfig:
    il_rl_ratio: float = 0.15
    lat_weight: float = 1.0
    aggregation: str = "mean"
    episodes_per_iteration: int = 8
    iterations: int = 200
    lr: float = 5e-4
    max_grad_norm: float = 1.0
    max_steps: int = 10
    success_reward: float = 1.0
    step_penalty: float = 0.0
    value_weight: float = 0.5
    success_distance: float = 1.0
    routes_per_env: int = 200
    eval_every: int = 50
    eval_episodes: int = 100
    divergence_threshold: float = 1e4
    seed: int = 0

    def validate(self) -> None:
        if self.il_rl_ratio < 0 or self.lat_weight < 0 or self.value_weight < 0:
            raise InvalidArgument("loss ratios must be nonnegative")
        aggregation_mode(self.aggregation)
        if self.episodes_per_iteration < 1 or self.iterations < 0 or self.max_steps < 1:
            raise InvalidArgument("need positive episode counts and step cap")

    def describe(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# -- rollouts ----------------------------------------------------------------------


@dataclass
class Trajectory:
    nodes: list[int]
    actions: list[int] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    stopped: bool = False
    logps: list = field(default_factory=list)  # recorded log-prob tensors (training only)
    values: list = field(default_factory=list)  # recorded value tensors (training only)
    history: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n_moves(self) -> int:
        return len(self.nodes) - 1


def rollout_batch(
    agent: Agent,
    routes: list[Route],
    policy: str,
    rng: np.random.Generator | None = None,
    max_steps: int = 10,
    record: bool = False,
) -> list[Trajectory]:
    """Step every route's agent in lockstep until STOP or ``max_steps`` actions."""
    if policy not in POLICIES:
        raise InvalidArgument(f"unknown policy {policy!r}")
    if policy == "sample" and rng is None:
        raise InvalidArgument("sampling policy needs an rng")
    trajs = [Trajectory([rt.path[0]]) for rt in routes]
    cfg = agent.config
    for step in range(max_steps):
        active = [i for i, t in enumerate(trajs) if not t.stopped]
        if not active:
            break
        ctxs = [Context(routes[i].cache, list(routes[i].instruction), trajs[i].history, trajs[i].nodes[-1]) for i in active]
        inp = make_input(ctxs, cfg.max_history)
        state = agent.encode(inp)
        logits = agent.action_logits(state)
        logp = ag.log_softmax(logits, axis=-1)
        if policy == "teacher":
            acts = np.array([routes[i].teacher_action(step) for i in active])
        elif policy == "greedy":
            acts = logits.data.argmax(axis=1)
        else:
            p = np.exp(logp.data)
            acts = np.array([rng.choice(p.shape[1], p=row / row.sum()) for row in p])
        if record:
            chosen = ag.reshape(ag.take_along(logp, acts[:, None], axis=1), (len(active),))
            values = agent.value(state)
        for k, i in enumerate(active):
            t = trajs[i]
            a = int(acts[k])
            n = int(inp.n_cand[k])
            t.actions.append(a)
            t.logits.append(logits.data[k, : n + 1].copy())
            if record:
                t.logps.append(chosen[k])
                t.values.append(values[k])
            if a >= n:
                t.stopped = True
                continue
            cache = routes[i].cache
            here = t.nodes[-1]
            nxt = int(cache.candidates(here)[0][a])
            t.history.append((here, cache.move_view(here, nxt)))
            t.nodes.append(nxt)
    return trajs


def rollout(agent: Agent, route: Route, policy: str, rng: np.random.Generator | None = None, max_steps: int = 10) -> Trajectory:
    return rollout_batch(agent, [route], policy, rng, max_steps)[0]


def episode_return(traj: Trajectory, route: Route, success_reward: float = 1.0, step_penalty: float = 0.0, success_distance: float = 1.0) -> float:
    """+success_reward on success, minus step_penalty per action taken."""
    return float(sum(step_rewards(traj, route, success_reward, step_penalty, success_distance)))


def step_rewards(traj: Trajectory, route: Route, success_reward=1.0, step_penalty=0.0, success_distance=1.0) -> list[float]:
    d = distance_matrix(route.cache.env)[traj.nodes[-1], route.path[-1]]
    r = [-step_penalty] * len(traj.actions)
    if r and d <= success_distance:
        r[-1] += success_reward
    return r


# -- auxiliary generation loss ----------------------------------------------------


def lat_loss(agent: Agent, context: ag.Tensor, units: list[tuple[EnvCache, int, int]], aggregation: str, S, rng: np.random.Generator) -> ag.Tensor:
    """APIG auxiliary loss for step contexts (B, d) against their teacher-direction views.

    mean: KL to the mean patch semantics.  sample: cross-entropy against the
    argmax token of one uniformly drawn patch (patches whose token is outside
    S carry no loss).  weighted: weights fixed to 1/N, KL to the resulting
    target.
    """
    mode, _ = aggregation_mode(aggregation)
    S = np.asarray(S, dtype=np.int64)
    if S.size == 0 or len(units) != context.shape[0]:
        raise InvalidArgument("inconsistent auxiliary-loss inputs")
    if mode == "sample":
        patches = rng.integers(N_PATCHES, size=len(units))
        tokens = np.array([c.tokens[n, v, j] for (c, n, v), j in zip(units, patches)])
        pos = {int(k): i for i, k in enumerate(S)}
        keep = np.array([int(t) in pos for t in tokens], dtype=np.float64)
        labels = np.array([pos.get(int(t), 0) for t in tokens])
        logp = agent.head_logprobs("apig", context, "sample", patches, S)
        if not keep.any():
            return ag.tsum(ag.mul(logp, 0.0))
        return nll(logp, labels, keep)
    conds = [None] * len(units) if mode == "mean" else [uniform_weights()] * len(units)
    target = target_semantics(units, mode, conds, S)
    logp = agent.head_logprobs("apig", context, mode, head_conditioning(mode, conds), S)
    return kl_loss(logp, target)


# -- training ----------------------------------------------------------------------


def il_loss(agent: Agent, routes: list[Route], cfg: FinetuneConfig, S, rng) -> tuple[ag.Tensor, ag.Tensor | None]:
    """Teacher-forced action cross-entropy over every step, and L_AT on the same states."""
    ctxs, labels, units = [], [], []
    for rt in routes:
        for t in range(rt.n_moves + 1):
            ctxs.append(rt.context(t))
            labels.append(rt.teacher_action(t))
            units.append((rt.cache, *rt.target_view(t)))
    state = agent.encode(make_input(ctxs, agent.config.max_history))
    ce = cross_entropy(agent.action_logits(state), labels)
    lat = lat_loss(agent, state.cls, units, cfg.aggregation, S, rng) if cfg.lat_weight > 0 else None
    return ce, lat


def rl_loss(agent: Agent, routes: list[Route], cfg: FinetuneConfig, rng) -> tuple[ag.Tensor, list[Trajectory]]:
    trajs = rollout_batch(agent, routes, "sample", rng, cfg.max_steps, record=True)
    logps, values, adv, rtg = [], [], [], []
    for tr, rt in zip(trajs, routes):
        rewards = step_rewards(tr, rt, cfg.success_reward, cfg.step_penalty, cfg.success_distance)
        g = np.cumsum(rewards[::-1])[::-1]
        for lp, v, gt in zip(tr.logps, tr.values, g):
            logps.append(lp)
            values.append(v)
            rtg.append(gt)
            adv.append(gt - float(v.data))
    n = len(logps)
    lp = ag.concat([ag.reshape(x, (1,)) for x in logps], axis=0)
    vv = ag.concat([ag.reshape(x, (1,)) for x in values], axis=0)
    pg = -ag.tsum(ag.mul(lp, np.array(adv) / n))
    err = vv - np.array(rtg)
    return pg + cfg.value_weight * ag.tmean(err * err), trajs


@dataclass
class FinetuneResult:
    agent: Agent
    eval_log: list[dict]
    train_log: list[dict]


def evaluate(agent: Agent, routes: list[Route], max_steps: int = 10) -> dict:
    trajs = rollout_batch(agent, routes, "greedy", max_steps=max_steps)
    return report_from_paths([t.nodes for t in trajs], routes).aggregate.as_dict()


def run_finetuning(
    config: FinetuneConfig,
    agent: Agent,
    train: list[EnvCache],
    val: list[EnvCache],
    S,
    eval_file=None,
) -> FinetuneResult:
    config.validate()
    if not train or not val:
        raise InvalidArgument("need training and validation environments")
    routes = [rt for i, c in enumerate(train) for rt in sample_routes(c, config.routes_per_env, derive_seed(config.seed, "ft-routes", i))]
    per_val = max(1, -(-config.eval_episodes // len(val)))
    val_routes = [rt for i, c in enumerate(val) for rt in sample_routes(c, per_val, derive_seed(config.seed, "val-routes", i))][: config.eval_episodes]
    rng = derive_rng(config.seed, "finetune")
    opt = Adam(agent.params)
    eval_log, train_log = [], []

    def do_eval(it):
        rec = {"iteration": it, "split": "val_unseen", **evaluate(agent, val_routes, config.max_steps)}
        eval_log.append(rec)
        if eval_file is not None:
            eval_file.write(json.dumps(rec, sort_keys=True) + "\n")

    for it in range(config.iterations):
        if config.eval_every and it % config.eval_every == 0:
            do_eval(it)
        batch = [routes[int(i)] for i in rng.integers(len(routes), size=config.episodes_per_iteration)]
        with ag.Tape() as tape:
            total = None
            ce = lat = None
            if config.il_rl_ratio > 0 or config.lat_weight > 0:
                ce, lat = il_loss(agent, batch, config, S, rng)
                il_side = ce if lat is None else ce + config.lat_weight * lat
                total = config.il_rl_ratio * il_side
            rl, trajs = rl_loss(agent, batch, config, rng)
            total = rl if total is None else total + rl
        value = float(total.data)
        if not np.isfinite(value) or abs(value) > config.divergence_threshold:
            raise TrainingDiverged(f"loss {value} at iteration {it}")
        tape.backward(total)
        opt.step(config.lr, config.max_grad_norm)
        sr = float(np.mean([distance_matrix(rt.cache.env)[t.nodes[-1], rt.path[-1]] <= config.success_distance for t, rt in zip(trajs, batch)]))
        train_log.append(
            {
                "iteration": it,
                "loss": value,
                "il": None if ce is None else float(ce.data),
                "lat": None if lat is None else float(lat.data),
                "rl": float(rl.data),
                "train_sr": sr,
            }
        )
    do_eval(config.iterations)
    return FinetuneResult(agent, eval_log, train_log)
