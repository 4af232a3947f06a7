"""History-aware cross-modal navigation agent with semantic generation heads.

Topology: a language encoder over the instruction; a temporal encoder over the
trajectory views (one view per past step, led by a learned history token); a
panorama encoder over the 36 current views; and cross-modal layers over the
concatenation of the three segments.  The instruction <CLS> output acts as the
agent state: it scores candidates against their view encodings and feeds the
APIG generation head.

    h_i = LN(W_t v_i) + LN(W_a a_i) + E^S_i + E^T_hist
    o_i = LN(W_o v^o_i) + LN(W_ao a^o_i) + E^O_nav(i) + E^T_obs

Masked steps/views have their visual term replaced by a learned mask vector.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import InvalidArgument
from ..world import N_PATCHES, N_VIEWS, VOCAB_SIZE
from . import autograd as ag
from .autograd import Tensor
from .params import ParameterStore

HEADS = ("mtm", "mpm", "apig")
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    ffn_mult: int = 2
    n_lang: int = 2
    n_pano: int = 1
    n_temporal: int = 2
    n_cross: int = 2
    vocab_size: int = VOCAB_SIZE
    max_words: int = 32
    max_history: int = 8
    d_tok: int = 16
    n_angle: int = 6
    n_tokens: int = 256
    n_patches: int = N_PATCHES
    cross_modal: bool = True
    ln_eps: float = 1e-5
    dtype: str = "float32"  # compute precision; gradient checks use float64

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelInput:
    """Batched, padded encoder input.  ``*_valid`` marks real (non-pad) slots."""

    words: np.ndarray  # (B, L) int, position 0 is <CLS>
    word_valid: np.ndarray  # (B, L) bool
    hist_vis: np.ndarray  # (B, H, d_tok)
    hist_ang: np.ndarray  # (B, H, n_angle)
    hist_valid: np.ndarray  # (B, H) bool
    hist_masked: np.ndarray  # (B, H) bool
    pano_vis: np.ndarray | None = None  # (B, 36, d_tok)
    pano_ang: np.ndarray | None = None  # (B, 36, n_angle)
    pano_nav: np.ndarray | None = None  # (B, 36) int 0/1
    pano_masked: np.ndarray | None = None  # (B, 36) bool
    cand_views: np.ndarray | None = None  # (B, K) int view index
    n_cand: np.ndarray | None = None  # (B,) int

    @property
    def batch(self) -> int:
        return self.words.shape[0]


@dataclass
class EncodedState:
    lang: Tensor  # (B, L, d)
    cls: Tensor  # (B, d), the instruction <CLS> output
    history: Tensor  # (B, 1 + H, d); index 0 is the history token
    pano: Tensor | None  # (B, 36, d)
    inputs: ModelInput

    def history_step(self, i) -> Tensor:
        """Outputs at trajectory steps ``i`` (skipping the history token)."""
        return self.history[:, 1 + i]


def _init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParameterStore:
    ps = ParameterStore(np.dtype(cfg.dtype))
    d = cfg.d

    def lin(name, fan_in, fan_out):
        ps.add(f"{name}.w", rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)))
        ps.add(f"{name}.b", np.zeros(fan_out))

    def ln(name, n=d):
        ps.add(f"{name}.g", np.ones(n))
        ps.add(f"{name}.b", np.zeros(n))

    def emb(name, shape, std=0.1):
        ps.add(name, rng.normal(0.0, std, shape))

    def block(name):
        ln(f"{name}.ln1")
        lin(f"{name}.qkv", d, 3 * d)
        lin(f"{name}.out", d, d)
        ln(f"{name}.ln2")
        lin(f"{name}.ff1", d, cfg.ffn_mult * d)
        lin(f"{name}.ff2", cfg.ffn_mult * d, d)

    emb("embed.word", (cfg.vocab_size, d))
    emb("embed.word_pos", (cfg.max_words, d))
    emb("embed.type", (3, d))
    for i in range(cfg.n_lang):
        block(f"lang.{i}")
    ln("lang.ln_f")

    lin("hist.vis", cfg.d_tok, d)
    ln("hist.vis_ln")
    lin("hist.ang", cfg.n_angle, d)
    ln("hist.ang_ln")
    emb("hist.step", (cfg.max_history + 1, d))
    emb("hist.start", (d,))
    emb("hist.mask", (d,))
    for i in range(cfg.n_temporal):
        block(f"temporal.{i}")
    ln("temporal.ln_f")

    lin("pano.vis", cfg.d_tok, d)
    ln("pano.vis_ln")
    lin("pano.ang", cfg.n_angle, d)
    ln("pano.ang_ln")
    emb("pano.nav", (2, d))
    emb("pano.mask", (d,))
    for i in range(cfg.n_pano):
        block(f"panorama.{i}")
    ln("panorama.ln_f")

    for i in range(cfg.n_cross):
        block(f"cross.{i}")
    ln("cross.ln_f")

    lin("action.proj", d, d)
    emb("action.stop", (d,))
    lin("value", d, 1)

    for h in HEADS:
        lin(f"head.{h}.fc1", d, d)
        lin(f"head.{h}.fc2", d, cfg.n_tokens)
    emb("cond.patch_pos", (cfg.n_patches, d))
    lin("cond.w1", cfg.n_patches, d)
    lin("cond.w2", d, d)

    lin("mlm", d, cfg.vocab_size)
    lin("itm", d, 1)
    return ps


class Agent:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, params: ParameterStore | None = None):
        self.config = config or ModelConfig()
        if self.config.d % self.config.n_heads:
            raise InvalidArgument("d must be divisible by n_heads")
        self.params = params if params is not None else _init_params(self.config, np.random.default_rng(seed))

    # -- building blocks -----------------------------------------------------

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def linear(self, name: str, x) -> Tensor:
        return ag.matmul(x, self.p(f"{name}.w")) + self.p(f"{name}.b")

    def ln(self, name: str, x) -> Tensor:
        return ag.layer_norm(x, self.p(f"{name}.g"), self.p(f"{name}.b"), self.config.ln_eps)

    def block(self, name: str, x: Tensor, key_bias: np.ndarray) -> Tensor:
        """Pre-norm transformer layer; key_bias is (B, T) additive mask."""
        cfg = self.config
        B, T, d = x.shape
        nh, dh = cfg.n_heads, d // cfg.n_heads
        h = self.ln(f"{name}.ln1", x)
        qkv = self.linear(f"{name}.qkv", h).reshape(B, T, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        scores = scores + key_bias[:, None, None, :]
        att = ag.softmax(scores, axis=-1)
        ctx = ag.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, d)
        x = x + self.linear(f"{name}.out", ctx)
        h = self.ln(f"{name}.ln2", x)
        return x + self.linear(f"{name}.ff2", ag.gelu(self.linear(f"{name}.ff1", h)))

    def stack(self, prefix: str, n: int, x: Tensor, valid: np.ndarray) -> Tensor:
        bias = np.where(valid, 0.0, NEG_INF)
        for i in range(n):
            x = self.block(f"{prefix}.{i}", x, bias)
        return self.ln(f"{prefix}.ln_f", x)

    @staticmethod
    def _masked_replace(vis: Tensor, masked: np.ndarray, mask_vec: Tensor) -> Tensor:
        m = masked[..., None].astype(np.float64)
        if not m.any():
            return vis
        return vis * (1.0 - m) + ag.mul(mask_vec, m)

    # -- encoder ---------------------------------------------------------------

    def encode(self, inp: ModelInput) -> EncodedState:
        cfg = self.config
        B, L = inp.words.shape
        H = inp.hist_vis.shape[1]
        if L > cfg.max_words:
            raise InvalidArgument(f"instruction length {L} exceeds {cfg.max_words}")
        if H > cfg.max_history:
            raise InvalidArgument(f"history length {H} exceeds {cfg.max_history}")
        type_emb = self.p("embed.type")

        lang = ag.take(self.p("embed.word"), inp.words) + self.p("embed.word_pos")[:L] + type_emb[0]
        lang = self.stack("lang", cfg.n_lang, lang, inp.word_valid)

        start = ag.reshape(self.p("hist.start") + self.p("hist.step")[0] + type_emb[2], (1, 1, cfg.d))
        start = ag.mul(start, np.ones((B, 1, 1)))
        if H:
            vis = self.ln("hist.vis_ln", self.linear("hist.vis", inp.hist_vis))
            vis = self._masked_replace(vis, inp.hist_masked, self.p("hist.mask"))
            ang = self.ln("hist.ang_ln", self.linear("hist.ang", inp.hist_ang))
            steps = vis + ang + self.p("hist.step")[1 : H + 1] + type_emb[2]
            hist = ag.concat([start, steps], axis=1)
        else:
            hist = start
        hist_valid = np.concatenate([np.ones((B, 1), dtype=bool), inp.hist_valid.astype(bool)], axis=1)
        hist = self.stack("temporal", cfg.n_temporal, hist, hist_valid)

        pano = None
        segments = [lang, hist]
        valids = [inp.word_valid.astype(bool), hist_valid]
        if inp.pano_vis is not None:
            vis = self.ln("pano.vis_ln", self.linear("pano.vis", inp.pano_vis))
            masked = inp.pano_masked if inp.pano_masked is not None else np.zeros((B, N_VIEWS), dtype=bool)
            vis = self._masked_replace(vis, masked, self.p("pano.mask"))
            ang = self.ln("pano.ang_ln", self.linear("pano.ang", inp.pano_ang))
            nav = ag.take(self.p("pano.nav"), inp.pano_nav.astype(np.int64))
            pano = vis + ang + nav + type_emb[1]
            pano_valid = np.ones((B, N_VIEWS), dtype=bool)
            pano = self.stack("panorama", cfg.n_pano, pano, pano_valid)
            segments.append(pano)
            valids.append(pano_valid)

        if cfg.cross_modal:
            sizes = [s.shape[1] for s in segments]
            joint = self.stack("cross", cfg.n_cross, ag.concat(segments, axis=1), np.concatenate(valids, axis=1))
            cuts = np.cumsum([0] + sizes)
            lang = joint[:, cuts[0] : cuts[1]]
            hist = joint[:, cuts[1] : cuts[2]]
            if pano is not None:
                pano = joint[:, cuts[2] : cuts[3]]
        return EncodedState(lang, lang[:, 0], hist, pano, inp)

    # -- outputs ---------------------------------------------------------------

    def action_logits(self, state: EncodedState) -> Tensor:
        """Candidate scores (B, K+1): real candidates, then STOP, then -1e9 padding."""
        inp = state.inputs
        if state.pano is None or inp.cand_views is None:
            raise InvalidArgument("action scoring needs a panorama and candidates")
        B, K = inp.cand_views.shape
        d = self.config.d
        query = self.linear("action.proj", state.cls)  # (B, d)
        cand = ag.take_along(state.pano, inp.cand_views[:, :, None].repeat(d, axis=2), axis=1)  # (B, K, d)
        scale = 1.0 / math.sqrt(d)
        scores = ag.tsum(cand * ag.reshape(query, (B, 1, d)), axis=-1) * scale
        stop = ag.reshape(ag.matmul(query, ag.reshape(self.p("action.stop"), (d, 1))), (B, 1)) * scale
        full = ag.concat([scores, stop], axis=1)  # stop at column K
        n = np.asarray(inp.n_cand, dtype=np.int64)
        cols = np.arange(K + 1)[None, :]
        order = np.where(cols < n[:, None], cols, np.where(cols == n[:, None], K, 0))
        bias = np.where(cols <= n[:, None], 0.0, NEG_INF)
        return ag.take_along(full, order, axis=1) + bias

    def value(self, state: EncodedState) -> Tensor:
        return ag.reshape(self.linear("value", state.cls), (state.cls.shape[0],))

    def condition(self, mode: str, cond: np.ndarray | None, batch: int) -> Tensor | None:
        """E_p: None for mean, patch-position embedding for sample, weight encoding for weighted."""
        if mode == "mean":
            return None
        if mode == "sample":
            return ag.take(self.p("cond.patch_pos"), np.asarray(cond, dtype=np.int64).reshape(batch))
        if mode == "weighted":
            w = np.asarray(cond, dtype=np.float64).reshape(batch, self.config.n_patches)
            return self.linear("cond.w2", ag.gelu(self.linear("cond.w1", w)))
        raise InvalidArgument(f"unknown aggregation mode {mode!r}")

    def head_logprobs(self, head: str, context: Tensor, mode: str, cond, subset) -> Tensor:
        """Log-probabilities over the token subset S, shape (B, |S|)."""
        if head not in HEADS:
            raise InvalidArgument(f"unknown head {head!r}")
        ep = self.condition(mode, cond, context.shape[0])
        x = context if ep is None else context + ep
        hidden = ag.gelu(self.linear(f"head.{head}.fc1", x))
        logits = self.linear(f"head.{head}.fc2", hidden)
        logits = ag.take(logits, np.asarray(subset, dtype=np.int64), axis=-1)
        return ag.log_softmax(logits, axis=-1)

    def head_predict(self, head: str, context: Tensor, mode: str, cond, subset) -> np.ndarray:
        return np.exp(self.head_logprobs(head, context, mode, cond, subset).data)

    def mlm_logits(self, state: EncodedState) -> Tensor:
        return self.linear("mlm", state.lang)

    def itm_score(self, state: EncodedState) -> Tensor:
        joint = state.cls * state.history[:, 0]
        return ag.reshape(self.linear("itm", joint), (state.cls.shape[0],))


# -- losses ----------------------------------------------------------------------


def kl_loss(logp: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Mean over rows of KL(target || exp(logp)) = cross-entropy minus target entropy."""
    target = np.asarray(target, dtype=np.float64)
    safe = np.where(target > 0, target, 1.0)
    ent = (target * np.log(safe)).sum(-1)
    per_row = ag.tsum(ag.mul(logp, -target), axis=-1) + ent
    if weight is None:
        return ag.tmean(per_row)
    w = np.asarray(weight, dtype=np.float64)
    return ag.tsum(ag.mul(per_row, w / max(w.sum(), 1e-12)))


def cross_entropy(logits: Tensor, labels: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    logp = ag.log_softmax(logits, axis=-1)
    return nll(logp, labels, weight)


def nll(logp: Tensor, labels: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    flat = ag.reshape(logp, (-1, logp.shape[-1]))
    picked = ag.take_along(flat, labels.reshape(-1, 1), axis=1)
    picked = ag.reshape(picked, (-1,))
    if weight is None:
        return -ag.tmean(picked)
    w = np.asarray(weight, dtype=np.float64).reshape(-1)
    return -ag.tsum(ag.mul(picked, w / max(w.sum(), 1e-12)))
