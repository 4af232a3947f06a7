"""Per-environment caches and assembly of padded model inputs.

A navigation context is an instruction, the views faced on past moves, and the
current node.  Visual features of a view are the mean of its patches' argmax
token prototypes; angles are encoded as (sin h, cos h, sin 2h, cos 2h, sin e,
cos e).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .model.agent import ModelInput
from .seeding import derive_seed
from .tokenizer import Codebook, argmax_tokens_packed
from .world import (
    ELEVATIONS,
    LEVEL,
    N_ELEVATIONS,
    N_HEADINGS,
    N_VIEWS,
    WORD_ID,
    Environment,
    Episode,
    direction_between,
    instruction_for_path,
    navigable_candidates,
    sample_path,
    view_index,
)

CLS_ID = WORD_ID["<cls>"]
PAD_ID = WORD_ID["<pad>"]
MASK_ID = WORD_ID["<mask>"]


def angle_features() -> np.ndarray:
    """(36, 6) angle encoding in heading-major, elevation-minor view order."""
    out = np.zeros((N_VIEWS, 6))
    for v in range(N_VIEWS):
        h, e = divmod(v, N_ELEVATIONS)
        th, el = 2 * np.pi * h / N_HEADINGS, ELEVATIONS[e]
        out[v] = [np.sin(th), np.cos(th), np.sin(2 * th), np.cos(2 * th), np.sin(el), np.cos(el)]
    return out


ANGLES = angle_features()


@dataclass
class EnvCache:
    """Tokenized views of one environment."""

    env: Environment
    codebook: Codebook
    tokens: np.ndarray = field(init=False)  # (n, 36, 16) argmax token ids
    vis: np.ndarray = field(init=False)  # (n, 36, d_tok)
    _cands: dict = field(init=False, default_factory=dict)

    def __post_init__(self):
        self.tokens = argmax_tokens_packed(self.env.features, self.codebook)
        self.vis = self.codebook.prototypes[self.tokens].mean(axis=2)

    def patch_probs(self, node, view) -> np.ndarray:
        """(..., 16, |T|) per-patch token distributions."""
        return self.codebook.prob_table[self.env.features[node, view]]

    def candidates(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        """Neighbour ids and their facing view indices (STOP excluded)."""
        if node not in self._cands:
            cands = navigable_candidates(self.env, node)[:-1]
            self._cands[node] = (
                np.array([c.node for c in cands], dtype=np.int64),
                np.array([c.view_index for c in cands], dtype=np.int64),
            )
        return self._cands[node]

    def move_view(self, a: int, b: int) -> int:
        """View index faced at ``a`` when moving to neighbour ``b``."""
        return view_index(3 * direction_between(self.env, a, b), LEVEL)


@dataclass
class Context:
    cache: EnvCache
    instruction: list[int]
    history: list[tuple[int, int]]  # (node, view index) faced on each past move
    node: int | None = None  # current node; None means no panorama input


def path_history(cache: EnvCache, path: list[int], t: int | None = None) -> list[tuple[int, int]]:
    """Views faced on the first ``t`` moves of ``path`` (all moves when t is None)."""
    t = len(path) - 1 if t is None else t
    return [(path[i], cache.move_view(path[i], path[i + 1])) for i in range(t)]


def facing_view(history: list[tuple[int, int]]) -> int:
    """The view ahead after ``history``: the heading of the last move, or heading 0 with no history."""
    if not history:
        return view_index(0, LEVEL)
    return history[-1][1]


def episode_context(cache: EnvCache, ep: Episode, t: int) -> Context:
    return Context(cache, list(ep.instruction), path_history(cache, ep.path, t), ep.path[t])


def make_input(
    contexts: list[Context],
    max_history: int,
    hist_masks: list | None = None,
    pano_masks: list | None = None,
    words: list[list[int]] | None = None,
) -> ModelInput:
    """Pad a batch of contexts.  History beyond ``max_history`` keeps the most recent steps."""
    if not contexts:
        raise InvalidArgument("empty batch")
    B = len(contexts)
    seqs = words if words is not None else [[CLS_ID] + list(c.instruction) for c in contexts]
    L = max(len(s) for s in seqs)
    w = np.full((B, L), PAD_ID, dtype=np.int64)
    wv = np.zeros((B, L), dtype=bool)
    for b, s in enumerate(seqs):
        w[b, : len(s)] = s
        wv[b, : len(s)] = True

    hists = [c.history[-max_history:] if max_history else [] for c in contexts]
    H = max(len(h) for h in hists)
    d_tok = contexts[0].cache.vis.shape[-1]
    hv = np.zeros((B, H, d_tok))
    ha = np.zeros((B, H, ANGLES.shape[1]))
    hvalid = np.zeros((B, H), dtype=bool)
    hmask = np.zeros((B, H), dtype=bool)
    for b, (c, h) in enumerate(zip(contexts, hists)):
        if h:
            nodes = np.array([x[0] for x in h])
            views = np.array([x[1] for x in h])
            hv[b, : len(h)] = c.cache.vis[nodes, views]
            ha[b, : len(h)] = ANGLES[views]
            hvalid[b, : len(h)] = True
        if hist_masks is not None and hist_masks[b] is not None and len(hist_masks[b]):
            hmask[b, np.asarray(hist_masks[b], dtype=np.int64)] = True
    inp = ModelInput(w, wv, hv, ha, hvalid, hmask)

    if contexts[0].node is not None:
        if any(c.node is None for c in contexts):
            raise InvalidArgument("mixed panorama and no-panorama contexts")
        pv = np.stack([c.cache.vis[c.node] for c in contexts])
        nav = np.zeros((B, N_VIEWS), dtype=np.int64)
        pmask = np.zeros((B, N_VIEWS), dtype=bool)
        cand_lists = [c.cache.candidates(c.node)[1] for c in contexts]
        K = max(len(v) for v in cand_lists)
        cv = np.zeros((B, K), dtype=np.int64)
        nc = np.zeros(B, dtype=np.int64)
        for b, views in enumerate(cand_lists):
            nav[b, views] = 1
            cv[b, : len(views)] = views
            nc[b] = len(views)
            if pano_masks is not None and pano_masks[b] is not None and len(pano_masks[b]):
                pmask[b, np.asarray(pano_masks[b], dtype=np.int64)] = True
        inp.pano_vis = pv
        inp.pano_ang = np.broadcast_to(ANGLES, (B, N_VIEWS, ANGLES.shape[1])).copy()
        inp.pano_nav = nav
        inp.pano_masked = pmask
        inp.cand_views = cv
        inp.n_cand = nc
    return inp


@dataclass(frozen=True, eq=False)
class Route:
    """A shortest-path instruction-trajectory pair without materialized panoramas."""

    cache: EnvCache
    path: tuple[int, ...]
    instruction: tuple[int, ...]

    @property
    def n_moves(self) -> int:
        return len(self.path) - 1

    def history(self, t: int | None = None) -> list[tuple[int, int]]:
        return path_history(self.cache, list(self.path), t)

    def context(self, t: int, with_pano: bool = True) -> Context:
        return Context(self.cache, list(self.instruction), self.history(t), self.path[t] if with_pano else None)

    def teacher_action(self, t: int) -> int:
        """Index among the candidates at step t; STOP is index K."""
        nbrs, _ = self.cache.candidates(self.path[t])
        if t == self.n_moves:
            return len(nbrs)
        return int(np.flatnonzero(nbrs == self.path[t + 1])[0])

    def target_view(self, t: int) -> tuple[int, int]:
        """(node, view) ahead of the teacher at step t: the next candidate's view, or the facing view at the goal."""
        node = self.path[t]
        if t < self.n_moves:
            return node, self.cache.move_view(node, self.path[t + 1])
        return node, facing_view(self.history(t))


def route_from_episode(cache: EnvCache, ep: Episode) -> Route:
    return Route(cache, tuple(ep.path), tuple(ep.instruction))


def sample_routes(cache: EnvCache, n: int, seed: int) -> list[Route]:
    out = []
    for k in range(n):
        path = sample_path(cache.env, derive_seed(seed, "route", k))
        out.append(Route(cache, tuple(path), tuple(instruction_for_path(cache.env, path))))
    return out
