"""Whole-image semantic targets built from per-patch token distributions.

Three aggregations are supported: the mean over patches, a single sampled patch,
and a weighted combination with weights on the simplex.  Targets are restricted
to a token subset S and renormalized over it so that predictions and targets
are both proper distributions over S.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import InvalidArgument
from .tokenizer import TokenDistribution
from .world import N_PATCHES, PATCH_GRID

MODES = ("mean", "sample", "weighted")
BLOCK_SIDE = 2
BLOCK_FACTOR = 4.0


@dataclass(frozen=True, eq=False)
class PatchWeights:
    w: np.ndarray
    block: tuple[int, int, int, int] | None = None

    def block_mask(self) -> np.ndarray:
        m = np.zeros((PATCH_GRID, PATCH_GRID), dtype=bool)
        if self.block is not None:
            r, c, h, w = self.block
            m[r : r + h, c : c + w] = True
        return m.ravel()

    def __eq__(self, other):
        return (
            isinstance(other, PatchWeights) and self.block == other.block and np.array_equal(self.w, other.w)
        )


@dataclass(frozen=True, eq=False)
class AggregatedSemantics:
    probs_S: np.ndarray
    mode: str
    subset: tuple[int, ...]
    conditioning: Any = None  # patch index (sample) or PatchWeights (weighted)

    def same_kind(self, other: "AggregatedSemantics") -> bool:
        if self.mode != other.mode or self.subset != other.subset:
            return False
        return self.conditioning == other.conditioning


def _subset(S) -> np.ndarray:
    S = np.asarray(S, dtype=np.int64).ravel()
    if S.size == 0:
        raise InvalidArgument("token subset S must be nonempty")
    return S


def restrict(p: np.ndarray, S) -> np.ndarray:
    """Restrict distributions (..., |T|) to S and renormalize over S."""
    q = np.asarray(p)[..., _subset(S)]
    z = q.sum(axis=-1, keepdims=True)
    return q / z


def aggregate(probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Unrenormalized weighted patch sum: probs (..., N, |T|), weights (..., N)."""
    return np.einsum("...j,...jk->...k", weights, probs)


def mean_patch_prob(td: TokenDistribution, S) -> AggregatedSemantics:
    S = _subset(S)
    p = td.probs.sum(axis=0) / td.probs.shape[0]
    return AggregatedSemantics(restrict(p, S), "mean", tuple(int(k) for k in S))


def sample_patch_prob(td: TokenDistribution, j: int, S) -> AggregatedSemantics:
    S = _subset(S)
    if not 0 <= int(j) < td.probs.shape[0]:
        raise InvalidArgument(f"patch index {j} out of range")
    return AggregatedSemantics(restrict(td.probs[int(j)], S), "sample", tuple(int(k) for k in S), int(j))


def validate_weights(pw: PatchWeights, n: int = N_PATCHES, tol: float = 1e-6) -> None:
    w = np.asarray(pw.w, dtype=np.float64)
    if w.shape != (n,):
        raise InvalidArgument(f"expected {n} patch weights")
    if (w < 0).any():
        raise InvalidArgument("patch weights must be nonnegative")
    if abs(w.sum() - 1.0) > tol:
        raise InvalidArgument(f"patch weights sum to {w.sum()}, not 1")


def weighted_patch_prob(td: TokenDistribution, pw: PatchWeights, S) -> AggregatedSemantics:
    S = _subset(S)
    validate_weights(pw, td.probs.shape[0])
    p = aggregate(td.probs, np.asarray(pw.w, dtype=np.float64))
    return AggregatedSemantics(restrict(p, S), "weighted", tuple(int(k) for k in S), pw)


def uniform_weights(n: int = N_PATCHES) -> PatchWeights:
    return PatchWeights(np.full(n, 1.0 / n))


def indicator_weights(j: int, n: int = N_PATCHES) -> PatchWeights:
    w = np.zeros(n)
    w[j] = 1.0
    return PatchWeights(w)


def sample_weights(rng: np.random.Generator, block_wise: bool = False) -> PatchWeights:
    """Random patch weights.

    Plain mode draws independent uniform(0, 1] variates.  Block mode picks a
    random 2x2 block of the 4x4 grid; every patch draws from uniform(0.5, 1]
    and in-block draws are multiplied by 4, so in-block weights always exceed
    out-of-block ones.
    """
    if not block_wise:
        raw = 1.0 - rng.random(N_PATCHES)
        return PatchWeights(raw / raw.sum())
    r0, c0 = (int(x) for x in rng.integers(0, PATCH_GRID - BLOCK_SIDE + 1, size=2))
    pw = PatchWeights(np.zeros(N_PATCHES), (r0, c0, BLOCK_SIDE, BLOCK_SIDE))
    raw = 1.0 - 0.5 * rng.random(N_PATCHES)
    raw[pw.block_mask()] *= BLOCK_FACTOR
    return PatchWeights(raw / raw.sum(), pw.block)


def draw_conditioning(rng: np.random.Generator, mode: str, block_wise: bool = False):
    """Patch index for sample mode, weights for weighted mode, None for mean."""
    if mode == "mean":
        return None
    if mode == "sample":
        return int(rng.integers(N_PATCHES))
    if mode == "weighted":
        return sample_weights(rng, block_wise)
    raise InvalidArgument(f"unknown aggregation mode {mode!r}")


def conditioning_weights(mode: str, cond) -> np.ndarray:
    """Patch weights equivalent to a conditioning (one-hot for sample mode)."""
    if mode == "mean":
        return np.full(N_PATCHES, 1.0 / N_PATCHES)
    if mode == "sample":
        w = np.zeros(N_PATCHES)
        w[int(cond)] = 1.0
        return w
    return np.asarray(cond.w, dtype=np.float64)
