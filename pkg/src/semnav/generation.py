"""Future-view reconstruction from partial ground-truth tokens and tokens
generated by the APIG head, plus action selection by closest generated view.

Per-patch generation queries the weighted-mode head with an indicator weight
vector for each patch and takes the argmax over the selected subset S.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import Route, facing_view, make_input
from .errors import InvalidArgument
from .model import autograd as ag
from .model.agent import Agent
from .pretrain import target_semantics
from .tokenizer import Codebook, decode, semantic_distance
from .world import N_PATCHES, PATCH_GRID

X_PERCENTS = (70, 80, 90, 100)


def generate_patch_tokens(agent: Agent, context: ag.Tensor | np.ndarray, S, mode: str = "weighted") -> np.ndarray:
    """Token ids (B, N) generated for each patch of the next view from step contexts (B, d)."""
    if mode not in ("weighted", "weighted-block"):
        raise InvalidArgument("per-patch generation needs a head trained with weighted aggregation")
    S = np.asarray(S, dtype=np.int64)
    ctx = context.data if isinstance(context, ag.Tensor) else np.asarray(context, dtype=np.float64)
    single = ctx.ndim == 1
    ctx = ctx.reshape(-1, ctx.shape[-1])
    B = ctx.shape[0]
    rep = np.repeat(ctx, N_PATCHES, axis=0)
    eye = np.tile(np.eye(N_PATCHES), (B, 1))
    logp = agent.head_logprobs("apig", ag.Tensor(rep), "weighted", eye, S).data
    tokens = S[logp.argmax(axis=1)].reshape(B, N_PATCHES)
    return tokens[0] if single else tokens


def route_contexts(agent: Agent, routes: list[Route], steps: list[int]) -> np.ndarray:
    """Instruction <CLS> outputs at the given steps, shape (B, d)."""
    state = agent.encode(make_input([rt.context(t) for rt, t in zip(routes, steps)], agent.config.max_history))
    return state.cls.data


@dataclass
class FillScores:
    patch_accuracy: float
    feature_accuracy: float
    semantic_distance: float
    tokens: tuple[int, ...]


@dataclass
class ReconstructionReport:
    x_percent: int
    patch_accuracy: float
    feature_accuracy: float
    semantic_distance: float
    baseline_random: FillScores
    kept: tuple[int, ...]
    filled: tuple[int, ...]
    tokens: tuple[int, ...]
    truth: tuple[int, ...]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _score(recon: np.ndarray, truth: np.ndarray, filled: np.ndarray, cb: Codebook) -> FillScores:
    if len(filled):
        patch_acc = float((recon[filled] == truth[filled]).mean())
        dist = semantic_distance(recon[filled], truth[filled], cb)
    else:
        patch_acc, dist = 1.0, 0.0
    feat_acc = float(np.mean([a == b for a, b in zip(decode(recon, cb), decode(truth, cb))]))
    return FillScores(patch_acc, feat_acc, dist, tuple(int(t) for t in recon))


def reconstruct(truth_tokens, generated_tokens, x_percent: int, rng: np.random.Generator, cb: Codebook, S) -> ReconstructionReport:
    """Keep x% of the true tokens, fill the rest from the model and, on the same patches, uniformly from S.

    Accuracy and semantic distance are measured on the filled patches (both
    are vacuous at x = 100); feature accuracy is over the whole decoded view.
    """
    if x_percent not in X_PERCENTS:
        raise InvalidArgument(f"x_percent must be one of {X_PERCENTS}")
    truth = np.asarray(truth_tokens, dtype=np.int64)
    gen = np.asarray(generated_tokens, dtype=np.int64)
    if truth.shape != (N_PATCHES,) or gen.shape != (N_PATCHES,):
        raise InvalidArgument(f"expected {N_PATCHES} tokens")
    if gen.min() < 0 or gen.max() >= cb.vocab_size:
        raise InvalidArgument("generated token out of range")
    n_keep = int(round(x_percent / 100 * N_PATCHES))
    order = rng.permutation(N_PATCHES)
    kept, filled = np.sort(order[:n_keep]), np.sort(order[n_keep:])
    S = np.asarray(S, dtype=np.int64)
    model = truth.copy()
    model[filled] = gen[filled]
    rand = truth.copy()
    rand[filled] = rng.choice(S, len(filled))
    m = _score(model, truth, filled, cb)
    b = _score(rand, truth, filled, cb)
    return ReconstructionReport(
        x_percent, m.patch_accuracy, m.feature_accuracy, m.semantic_distance, b,
        tuple(int(i) for i in kept), tuple(int(i) for i in filled), m.tokens, tuple(int(t) for t in truth),
    )


def grid_text(tokens, cb: Codebook) -> list[str]:
    """A 4x4 grid of decoded (surface.color.object) ids, one row per line."""
    feats = decode(tokens, cb)
    return [" ".join(f"{f.surface_id}.{f.color_id}.{f.object_id}" for f in feats[r * PATCH_GRID : (r + 1) * PATCH_GRID]) for r in range(PATCH_GRID)]


def side_by_side(truth, model, random, cb: Codebook) -> str:
    cols = [grid_text(t, cb) for t in (truth, model, random)]
    width = max(len(line) for c in cols for line in c)
    head = "  |  ".join(h.ljust(width) for h in ("truth", "model", "random"))
    rows = ["  |  ".join(c[r].ljust(width) for c in cols) for r in range(PATCH_GRID)]
    return "\n".join([head, *rows]) + "\n"


def closest_candidate_actions(agent: Agent, routes: list[Route], steps: list[int], S, mode: str = "mean") -> np.ndarray:
    """Pick, per context, the candidate (STOP = facing view) whose mean semantics has least KL from the APIG output."""
    S = np.asarray(S, dtype=np.int64)
    ctxs = [rt.context(t) for rt, t in zip(routes, steps)]
    state = agent.encode(make_input(ctxs, agent.config.max_history))
    if mode == "mean":
        pred = agent.head_predict("apig", state.cls, "mean", None, S)
    elif mode in ("weighted", "weighted-block"):
        pred = agent.head_predict("apig", state.cls, "weighted", np.full((len(ctxs), N_PATCHES), 1.0 / N_PATCHES), S)
    else:
        raise InvalidArgument("closest-candidate selection needs mean or weighted aggregation")
    out = []
    for b, c in enumerate(ctxs):
        _, views = c.cache.candidates(c.node)
        options = [(c.cache, c.node, int(v)) for v in views] + [(c.cache, c.node, facing_view(c.history))]
        q = target_semantics(options, "mean", [None] * len(options), S)
        kl = (q * (np.log(q) - np.log(pred[b]))).sum(axis=1)
        out.append(int(np.argmin(kl)))
    return np.array(out)


@dataclass
class StudySummary:
    x_percent: int
    n_views: int
    model_distance: float
    random_distance: float
    model_feature_accuracy: float
    random_feature_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


def reconstruction_study(agent: Agent, routes: list[Route], S, x_percent: int, rng: np.random.Generator) -> tuple[StudySummary, list[ReconstructionReport]]:
    """Reconstruct the view ahead at a random step of every route; paired model/random scores."""
    steps = [int(rng.integers(rt.n_moves + 1)) for rt in routes]
    gen = generate_patch_tokens(agent, route_contexts(agent, routes, steps), S)
    reports = []
    for rt, t, g in zip(routes, steps, gen):
        node, view = rt.target_view(t)
        reports.append(reconstruct(rt.cache.tokens[node, view], g, x_percent, rng, rt.cache.codebook, S))
    summary = StudySummary(
        x_percent,
        len(reports),
        float(np.mean([r.semantic_distance for r in reports])),
        float(np.mean([r.baseline_random.semantic_distance for r in reports])),
        float(np.mean([r.feature_accuracy for r in reports])),
        float(np.mean([r.baseline_random.feature_accuracy for r in reports])),
    )
    return summary, reports
