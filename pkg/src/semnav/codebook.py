"""Selection of the learnable visual-token subset S.

Static selection keeps the |S| most frequent tokens of the training
environments.  Dynamic selection keeps a running score per token that mixes
batch frequency and prediction difficulty,

    s_t = lam * s_{t-1} + (1 - lam) * (s_f + gamma * s_d),

and re-selects the top-|S| tokens after every update.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidArgument
from .semantics import AggregatedSemantics
from .tokenizer import TokenDistribution


@dataclass(frozen=True, eq=False)
class CodebookState:
    s_f: np.ndarray
    s_d: np.ndarray
    s_t: np.ndarray
    selected_S: tuple[int, ...]
    lam: float = 0.5
    gamma: float = 1.0
    dynamic: bool = False

    @property
    def size(self) -> int:
        return len(self.selected_S)

    @property
    def subset(self) -> np.ndarray:
        return np.array(self.selected_S, dtype=np.int64)

    def digest(self) -> str:
        return hashlib.sha256(np.array(sorted(self.selected_S), dtype="<i8").tobytes()).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, CodebookState):
            return NotImplemented
        return (
            self.selected_S == other.selected_S
            and (self.lam, self.gamma, self.dynamic) == (other.lam, other.gamma, other.dynamic)
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("s_f", "s_d", "s_t"))
        )


def top_k(scores: np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the k largest scores, descending, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return tuple(int(i) for i in order[:k])


def _init(freq, size: int, lam: float, gamma: float, dynamic: bool) -> CodebookState:
    freq = np.asarray(freq, dtype=np.float64)
    if size > len(freq) or size < 1:
        raise InvalidArgument(f"subset size {size} must be in [1, {len(freq)}]")
    if abs(freq.sum() - 1.0) > 1e-6:
        raise InvalidArgument("token frequencies must sum to 1")
    if not 0.0 <= lam <= 1.0 or gamma < 0:
        raise InvalidArgument("need lam in [0, 1] and gamma >= 0")
    return CodebookState(freq.copy(), np.zeros_like(freq), freq.copy(), top_k(freq, size), lam, gamma, dynamic)


def init_static(freq, size: int, lam: float = 0.5, gamma: float = 1.0) -> CodebookState:
    return _init(freq, size, lam, gamma, dynamic=False)


def init_dynamic(freq, size: int, lam: float = 0.5, gamma: float = 1.0) -> CodebookState:
    return _init(freq, size, lam, gamma, dynamic=True)


def full_vocabulary(vocab_size: int) -> CodebookState:
    """No codebook selection: S is the whole vocabulary."""
    uniform = np.full(vocab_size, 1.0 / vocab_size)
    return init_static(uniform, vocab_size)


def selected_subset(state: CodebookState) -> tuple[int, ...]:
    return state.selected_S


def update_dynamic(
    state: CodebookState,
    batch_freq,
    pred: AggregatedSemantics,
    target: AggregatedSemantics,
) -> CodebookState:
    if not state.dynamic:
        raise InvalidArgument("static codebook state does not take updates")
    if not pred.same_kind(target):
        raise InvalidArgument("prediction and target differ in mode, conditioning or subset")
    if pred.subset != state.selected_S:
        raise InvalidArgument("prediction subset is not the current selection")
    s_f = np.asarray(batch_freq, dtype=np.float64).copy()
    s_d = state.s_d.copy()
    s_d[state.subset] = np.abs(np.asarray(pred.probs_S) - np.asarray(target.probs_S))
    s_t = state.lam * state.s_t + (1.0 - state.lam) * (s_f + state.gamma * s_d)
    return replace(state, s_f=s_f, s_d=s_d, s_t=s_t, selected_S=top_k(s_t, state.size))


def frequency_from_batch(batch: list[TokenDistribution], vocab_size: int | None = None) -> np.ndarray:
    if len(batch) == 0:
        raise InvalidArgument("empty batch")
    vocab_size = vocab_size or batch[0].probs.shape[1]
    tokens = np.concatenate([np.asarray(td.argmax_tokens).ravel() for td in batch])
    return frequency_from_tokens(tokens, vocab_size)


def frequency_from_tokens(tokens, vocab_size: int) -> np.ndarray:
    counts = np.bincount(np.asarray(tokens).ravel(), minlength=vocab_size).astype(np.float64)
    return counts / counts.sum()
