"""Central finite-difference check of every parameter group on a tiny agent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..world import N_PATCHES, N_VIEWS
from . import autograd as ag
from .agent import Agent, ModelConfig, ModelInput, cross_entropy, kl_loss

TINY = ModelConfig(d=8, n_heads=2, ffn_mult=2, max_words=12, max_history=4, n_tokens=32, vocab_size=24, dtype="float64")


@dataclass
class GradcheckReport:
    groups: dict[str, float] = field(default_factory=dict)  # group -> max relative error
    n_checked: int = 0
    tolerance: float = 1e-3

    @property
    def max_error(self) -> float:
        return max(self.groups.values()) if self.groups else 0.0

    @property
    def ok(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self) -> list[str]:
        out = [f"{g:24s} max_rel_err={e:.3e}" for g, e in sorted(self.groups.items())]
        out.append(f"checked {self.n_checked} scalars; max relative error {self.max_error:.3e}")
        return out


def param_group(name: str) -> str:
    """Group key: transformer block, head, or embedding family."""
    parts = name.split(".")
    if parts[0] in ("lang", "temporal", "panorama", "cross", "head"):
        return ".".join(parts[:2])
    return parts[0]


def _tiny_input(cfg: ModelConfig, rng: np.random.Generator, B: int = 2) -> tuple[ModelInput, dict]:
    L, H = 6, 3
    words = rng.integers(4, cfg.vocab_size, size=(B, L))
    words[:, 0] = 1
    wv = np.ones((B, L), dtype=bool)
    wv[1, -1] = False
    hvalid = np.ones((B, H), dtype=bool)
    hvalid[1, -1] = False
    hmask = np.zeros((B, H), dtype=bool)
    hmask[0, 1] = True
    pmask = np.zeros((B, N_VIEWS), dtype=bool)
    pmask[:, rng.choice(N_VIEWS, 5, replace=False)] = True
    cand = np.stack([rng.choice(N_VIEWS, 3, replace=False) for _ in range(B)])
    nav = np.zeros((B, N_VIEWS), dtype=np.int64)
    for b in range(B):
        nav[b, cand[b]] = 1
    inp = ModelInput(
        words=words,
        word_valid=wv,
        hist_vis=rng.normal(size=(B, H, cfg.d_tok)),
        hist_ang=rng.normal(size=(B, H, cfg.n_angle)),
        hist_valid=hvalid,
        hist_masked=hmask,
        pano_vis=rng.normal(size=(B, N_VIEWS, cfg.d_tok)),
        pano_ang=rng.normal(size=(B, N_VIEWS, cfg.n_angle)),
        pano_nav=nav,
        pano_masked=pmask,
        cand_views=cand,
        n_cand=np.array([3, 2]),
    )
    S = np.sort(rng.choice(cfg.n_tokens, 10, replace=False))
    w = rng.random((B, N_PATCHES))
    targets = {
        "S": S,
        "w": w / w.sum(1, keepdims=True),
        "patch": rng.integers(N_PATCHES, size=B),
        "dist": rng.dirichlet(np.ones(len(S)), size=(4, B)),
        "actions": np.array([1, 2]),
        "mlm": rng.integers(cfg.vocab_size, size=B),
        "returns": rng.normal(size=B),
    }
    return inp, targets


def composite_loss(agent: Agent, inp: ModelInput, t: dict) -> ag.Tensor:
    """A scalar touching every head and block."""
    st = agent.encode(inp)
    S, dist = t["S"], t["dist"]
    B = inp.batch
    loss = cross_entropy(agent.action_logits(st), t["actions"])
    v = agent.value(st) - t["returns"]
    loss = loss + ag.tmean(v * v)
    loss = loss + kl_loss(agent.head_logprobs("mtm", st.history[np.arange(B), np.array([1, 2])], "mean", None, S), dist[0])
    loss = loss + kl_loss(agent.head_logprobs("mpm", st.pano[:, 4], "sample", t["patch"], S), dist[1])
    loss = loss + kl_loss(agent.head_logprobs("apig", st.cls, "weighted", t["w"], S), dist[2])
    loss = loss + cross_entropy(agent.mlm_logits(st)[:, 2], t["mlm"])
    s = agent.itm_score(st)
    loss = loss + ag.tmean(s * s)
    return loss


def run_gradcheck(seed: int = 0, per_group: int = 4, step: float = 1e-4, tol: float = 1e-3, floor: float = 1e-6) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    agent = Agent(TINY, seed=seed)
    inp, targets = _tiny_input(TINY, rng)
    ps = agent.params

    with ag.Tape() as tape:
        loss = composite_loss(agent, inp, targets)
    tape.backward(loss)
    analytic = {k: ps.grad(k).copy() for k in ps.names()}
    ps.zero_grad()

    groups: dict[str, list[str]] = {}
    for name in ps.names():
        groups.setdefault(param_group(name), []).append(name)

    report = GradcheckReport(tolerance=tol)
    for g, names in groups.items():
        sizes = np.array([ps[n].data.size for n in names])
        flat_grad = np.concatenate([analytic[n].reshape(-1) for n in names])
        # prefer entries the loss actually depends on
        pool = np.flatnonzero(flat_grad != 0)
        if len(pool) < per_group:
            pool = np.arange(int(sizes.sum()))
        picks = rng.choice(pool, min(per_group, len(pool)), replace=False)
        worst = 0.0
        for flat in picks:
            i = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
            name = names[i]
            j = int(flat - (sizes[:i].sum() if i else 0))
            data = ps[name].data.reshape(-1)
            orig = data[j]
            data[j] = orig + step
            up = composite_loss(agent, inp, targets).data.item()
            data[j] = orig - step
            down = composite_loss(agent, inp, targets).data.item()
            data[j] = orig
            num = (up - down) / (2 * step)
            ana = analytic[name].reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            report.n_checked += 1
        report.groups[g] = worst
    return report
