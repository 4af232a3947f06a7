"""Proxy-task pre-training: masked trajectory / panorama modeling and action
prediction with image generation, plus desk-scale MLM, ITM and SAP.

Generation tasks predict whole-image semantics (an aggregated token
distribution restricted to the selected subset S) and are trained with the KL
divergence between the renormalized target and the prediction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import codebook as cbk
from .config import format_weights
from .data import CLS_ID, MASK_ID, Context, EnvCache, Route, make_input, sample_routes
from .errors import InvalidArgument, TrainingDiverged
from .model import autograd as ag
from .model.agent import Agent, cross_entropy, kl_loss
from .model.params import Adam
from .semantics import AggregatedSemantics, aggregate, conditioning_weights, draw_conditioning, restrict
from .seeding import derive_rng, derive_seed
from .tokenizer import token_frequency
from .world import N_VIEWS

LOG_SCHEMA = "semnav-log/1"
TASKS = ("MTM", "MPM", "APIG", "MLM", "ITM", "SAP")
GENERATION_HEADS = {"MTM": "mtm", "MPM": "mpm", "APIG": "apig"}
DEFAULT_TASK_WEIGHTS = {"MTM": 3.0, "MPM": 1.0, "APIG": 1.0, "MLM": 1.0, "ITM": 1.0, "SAP": 1.0}
AGGREGATIONS = ("mean", "sample", "weighted", "weighted-block")
CODEBOOK_MODES = ("static", "dynamic", "none")
ITM_CANDIDATES = 5  # the positive plus two batch swaps and two shuffles


@dataclass(frozen=True)
class PretrainConfig:
    r: float = 0.5
    u: float = 0.3
    task_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TASK_WEIGHTS))
    aggregation: str = "mean"
    codebook: str = "dynamic"
    codebook_size: int = 64
    lam: float = 0.5
    gamma: float = 1.0
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    max_grad_norm: float = 1.0
    mlm_ratio: float = 0.15
    routes_per_env: int = 200
    divergence_threshold: float = 1e4
    seed: int = 0

    def validate(self) -> None:
        if not (0 < self.r < 1 and 0 < self.u < 1):
            raise InvalidArgument("mask ratios must lie in (0, 1)")
        if not self.task_weights:
            raise InvalidArgument("no pre-training tasks selected")
        for k, v in self.task_weights.items():
            if k not in TASKS:
                raise InvalidArgument(f"unknown task {k!r}")
            if not v > 0:
                raise InvalidArgument(f"task weight for {k} must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise InvalidArgument(f"unknown aggregation {self.aggregation!r}")
        if self.codebook not in CODEBOOK_MODES:
            raise InvalidArgument(f"unknown codebook mode {self.codebook!r}")
        if self.steps < 0 or self.batch_size < 3:
            raise InvalidArgument("need steps >= 0 and batch_size >= 3")

    def describe(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["task_weights"] = format_weights(self.task_weights)
        return d


def aggregation_mode(aggregation: str) -> tuple[str, bool]:
    """Split a configured aggregation into (mode, block_wise)."""
    if aggregation == "weighted-block":
        return "weighted", True
    if aggregation not in ("mean", "sample", "weighted"):
        raise InvalidArgument(f"unknown aggregation {aggregation!r}")
    return aggregation, False


# -- masking ---------------------------------------------------------------------


def mask_count(ratio: float, n: int) -> int:
    """ceil(ratio * n), at least one; a tiny slack absorbs floating error."""
    return max(1, math.ceil(ratio * n - 1e-9))


def mask_trajectory(episode, r: float, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniformly chosen step indices to mask; ``episode`` may be a step count."""
    m = episode if isinstance(episode, (int, np.integer)) else len(episode.path) - 1
    if m < 2:
        raise InvalidArgument("trajectory masking needs at least 2 steps")
    if not 0 < r < 1:
        raise InvalidArgument("mask ratio must lie in (0, 1)")
    return tuple(sorted(int(i) for i in rng.choice(m, mask_count(r, m), replace=False)))


def mask_panorama(panorama, u: float, rng: np.random.Generator) -> tuple[int, ...]:
    n = N_VIEWS if panorama is None else len(panorama.views)
    if n != N_VIEWS:
        raise InvalidArgument(f"panorama must have {N_VIEWS} views")
    if not 0 < u < 1:
        raise InvalidArgument("mask ratio must lie in (0, 1)")
    return tuple(sorted(int(i) for i in rng.choice(n, mask_count(u, n), replace=False)))


def sample_task(weights: dict[str, float], rng: np.random.Generator) -> str:
    names = list(weights)
    p = np.array([weights[k] for k in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=p / p.sum()))]


# -- targets ---------------------------------------------------------------------


def target_semantics(units: list[tuple[EnvCache, int, int]], mode: str, conds: list, S) -> np.ndarray:
    """Aggregated semantics over S for each (cache, node, view) unit, shape (U, |S|)."""
    probs = np.stack([c.patch_probs(n, v) for c, n, v in units])
    w = np.stack([conditioning_weights(mode, c) for c in conds])
    return restrict(aggregate(probs, w), S)


def head_conditioning(mode: str, conds: list):
    if mode == "mean":
        return None
    if mode == "sample":
        return np.array(conds, dtype=np.int64)
    return np.stack([np.asarray(c.w, dtype=np.float64) for c in conds])


@dataclass
class GenerationBatch:
    """What a generation-task step produced, for codebook updates and inspection."""

    loss: ag.Tensor
    pred: np.ndarray  # (U, |S|)
    target: np.ndarray  # (U, |S|)
    tokens: np.ndarray  # argmax tokens of the target views, (U, 16)


def generation_loss(agent: Agent, head: str, context: ag.Tensor, units, mode: str, conds: list, S) -> GenerationBatch:
    target = target_semantics(units, mode, conds, S)
    logp = agent.head_logprobs(head, context, mode, head_conditioning(mode, conds), S)
    loss = kl_loss(logp, target)
    tokens = np.stack([c.tokens[n, v] for c, n, v in units])
    return GenerationBatch(loss, np.exp(logp.data), target, tokens)


def task_loss(
    task: str,
    agent: Agent,
    routes: list[Route],
    rng: np.random.Generator,
    S,
    aggregation: str = "mean",
    r: float = 0.5,
    u: float = 0.3,
    mlm_ratio: float = 0.15,
) -> tuple[ag.Tensor, GenerationBatch | None]:
    """Loss of one task on a batch of routes; generation tasks also return their batch record."""
    mode, block = aggregation_mode(aggregation)
    cfg = agent.config
    S = np.asarray(S, dtype=np.int64)

    if task == "MTM":
        masks = [mask_trajectory(rt.n_moves, r, rng) for rt in routes]
        inp = make_input([rt.context(rt.n_moves, with_pano=False) for rt in routes], cfg.max_history, hist_masks=masks)
        state = agent.encode(inp)
        bi = np.array([b for b, m in enumerate(masks) for _ in m])
        si = np.array([i for m in masks for i in m])
        units = [(routes[b].cache, routes[b].path[i], routes[b].cache.move_view(routes[b].path[i], routes[b].path[i + 1])) for b, i in zip(bi, si)]
        conds = [draw_conditioning(rng, mode, block) for _ in units]
        gb = generation_loss(agent, "mtm", state.history[bi, 1 + si], units, mode, conds, S)
        return gb.loss, gb

    if task == "MPM":
        ts = [int(rng.integers(rt.n_moves + 1)) for rt in routes]
        masks = [mask_panorama(None, u, rng) for _ in routes]
        inp = make_input([rt.context(t) for rt, t in zip(routes, ts)], cfg.max_history, pano_masks=masks)
        state = agent.encode(inp)
        bi = np.array([b for b, m in enumerate(masks) for _ in m])
        vi = np.array([v for m in masks for v in m])
        units = [(routes[b].cache, routes[b].path[ts[b]], int(v)) for b, v in zip(bi, vi)]
        conds = [draw_conditioning(rng, mode, block) for _ in units]
        gb = generation_loss(agent, "mpm", state.pano[bi, vi], units, mode, conds, S)
        return gb.loss, gb

    if task == "APIG":
        ts = [int(rng.integers(rt.n_moves + 1)) for rt in routes]
        state = agent.encode(make_input([rt.context(t) for rt, t in zip(routes, ts)], cfg.max_history))
        units = [(rt.cache, *rt.target_view(t)) for rt, t in zip(routes, ts)]
        conds = [draw_conditioning(rng, mode, block) for _ in units]
        gb = generation_loss(agent, "apig", state.cls, units, mode, conds, S)
        return gb.loss, gb

    if task == "SAP":
        ts = [int(rng.integers(rt.n_moves + 1)) for rt in routes]
        state = agent.encode(make_input([rt.context(t) for rt, t in zip(routes, ts)], cfg.max_history))
        labels = [rt.teacher_action(t) for rt, t in zip(routes, ts)]
        return cross_entropy(agent.action_logits(state), labels), None

    if task == "MLM":
        words, pos, labels = [], [], []
        for b, rt in enumerate(routes):
            seq = [CLS_ID] + list(rt.instruction)
            n = len(rt.instruction)
            chosen = rng.choice(n, max(1, int(round(mlm_ratio * n))), replace=False) + 1
            for p in sorted(int(x) for x in chosen):
                labels.append(seq[p])
                pos.append((b, p))
                seq[p] = MASK_ID
            words.append(seq)
        ctxs = [rt.context(rt.n_moves, with_pano=False) for rt in routes]
        state = agent.encode(make_input(ctxs, cfg.max_history, words=words))
        bi, pi = (np.array(x) for x in zip(*pos))
        return cross_entropy(agent.mlm_logits(state)[bi, pi], labels), None

    if task == "ITM":
        ctxs = []
        for b, rt in enumerate(routes):
            own = rt.history()
            ctxs.append(rt.context(rt.n_moves, with_pano=False))
            others = [k for k in range(len(routes)) if k != b]
            for k in rng.choice(others, 2, replace=False):
                o = routes[int(k)]
                ctxs.append(Context(o.cache, list(rt.instruction), o.history(), None))
            for _ in range(2):
                perm = rng.permutation(len(own))
                while np.array_equal(perm, np.arange(len(own))):
                    perm = rng.permutation(len(own))
                ctxs.append(Context(rt.cache, list(rt.instruction), [own[i] for i in perm], None))
        state = agent.encode(make_input(ctxs, cfg.max_history))
        scores = ag.reshape(agent.itm_score(state), (len(routes), ITM_CANDIDATES))
        return cross_entropy(scores, np.zeros(len(routes), dtype=np.int64)), None

    raise InvalidArgument(f"unknown task {task!r}")


# -- codebook ----------------------------------------------------------------------


def initial_codebook(config: PretrainConfig, caches: list[EnvCache]) -> cbk.CodebookState:
    vocab = caches[0].codebook.vocab_size
    if config.codebook == "none":
        return cbk.full_vocabulary(vocab)
    freq = np.mean([token_frequency(c.env, c.codebook) for c in caches], axis=0)
    freq = freq / freq.sum()
    init = cbk.init_dynamic if config.codebook == "dynamic" else cbk.init_static
    return init(freq, config.codebook_size, config.lam, config.gamma)


def codebook_update(state: cbk.CodebookState, gb: GenerationBatch, mode: str) -> cbk.CodebookState:
    """One dynamic update from a generation batch (batch-averaged prediction and target)."""
    S = state.selected_S
    pred = AggregatedSemantics(gb.pred.mean(axis=0), mode, S)
    target = AggregatedSemantics(gb.target.mean(axis=0), mode, S)
    freq = cbk.frequency_from_tokens(gb.tokens, len(state.s_t))
    return cbk.update_dynamic(state, freq, pred, target)


# -- training loop -------------------------------------------------------------------


@dataclass
class PretrainResult:
    agent: Agent
    codebook: cbk.CodebookState
    log: list[dict]


def log_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def run_pretraining(config: PretrainConfig, caches: list[EnvCache], agent: Agent, log_file=None) -> PretrainResult:
    config.validate()
    if len(caches) < 2:
        raise InvalidArgument("pre-training needs at least two environments")
    routes = [rt for i, c in enumerate(caches) for rt in sample_routes(c, config.routes_per_env, derive_seed(config.seed, "routes", i))]
    rng = derive_rng(config.seed, "pretrain")
    opt = Adam(agent.params)
    state = initial_codebook(config, caches)
    mode, _ = aggregation_mode(config.aggregation)
    log = []
    for step in range(config.steps):
        task = sample_task(config.task_weights, rng)
        batch = [routes[int(i)] for i in rng.integers(len(routes), size=config.batch_size)]
        with ag.Tape() as tape:
            loss, gb = task_loss(task, agent, batch, rng, state.subset, config.aggregation, config.r, config.u, config.mlm_ratio)
        value = float(loss.data)
        if not np.isfinite(value) or value > config.divergence_threshold:
            raise TrainingDiverged(f"loss {value} at step {step} ({task})")
        tape.backward(loss)
        opt.step(config.lr, config.max_grad_norm)
        if gb is not None and state.dynamic:
            state = codebook_update(state, gb, mode)
        rec = {"schema": LOG_SCHEMA, "step": step, "task": task, "loss": value, "selected": state.digest()}
        log.append(rec)
        if log_file is not None:
            log_file.write(log_line(rec) + "\n")
    return PretrainResult(agent, state, log)
