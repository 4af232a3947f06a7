"""Synthetic discrete image tokenizer standing in for a pre-trained dVAE.

Each of the 256 feature tuples owns exactly one token.  Token prototypes are
structured: the prototype of tuple (s, c, o) is ``scale * (A[s] + B[c] + C[o])``
with A, B, C drawn from a seeded standard normal generator, so tokens that share
attributes sit close together.  A patch is tokenized by a temperature softmax
over negative squared distances to every prototype, which gives soft per-patch
distributions whose argmax is always the patch's own token.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .world import N_COLORS, N_FEATURES, N_OBJECTS, N_PATCHES, N_SURFACES, Environment, FeatureTuple, View, pack_feature

MAGIC = b"SNTK"
VERSION = 1
PROTOTYPE_SCALE = 0.18


@dataclass(frozen=True, eq=False)
class Codebook:
    prototypes: np.ndarray  # (|T|, d_tok), float32-representable
    token_of_feature: np.ndarray  # packed feature id -> token id
    tau: float = 0.25
    seed: int = 0
    prob_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidArgument("temperature must be positive")
        object.__setattr__(self, "prob_table", _softmax_rows(self.embed_table(), self.prototypes, self.tau))

    @property
    def vocab_size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def decoder_table(self) -> np.ndarray:
        """token id -> packed feature id."""
        inv = np.empty_like(self.token_of_feature)
        inv[self.token_of_feature] = np.arange(len(self.token_of_feature))
        return inv

    def embed_table(self) -> np.ndarray:
        """Embedding of every packed feature id (the prototype of its own token)."""
        return self.prototypes[self.token_of_feature]

    def embed(self, f: FeatureTuple) -> np.ndarray:
        return self.prototypes[self.token_of_feature[pack_feature(f)]]

    def unit_prototypes(self) -> np.ndarray:
        return self.prototypes / np.linalg.norm(self.prototypes, axis=1, keepdims=True)

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.tau == other.tau
            and self.seed == other.seed
            and np.array_equal(self.prototypes, other.prototypes)
            and np.array_equal(self.token_of_feature, other.token_of_feature)
        )


def _softmax_rows(x: np.ndarray, prototypes: np.ndarray, tau: float) -> np.ndarray:
    x = x.astype(np.float64)
    p = prototypes.astype(np.float64)
    d2 = ((x[:, None, :] - p[None, :, :]) ** 2).sum(-1)
    logits = -d2 / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def make_codebook(seed: int = 0, tau: float = 0.25, dim: int = 16) -> Codebook:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((N_SURFACES, dim))
    b = rng.standard_normal((N_COLORS, dim))
    c = rng.standard_normal((N_OBJECTS, dim))
    perm = rng.permutation(N_FEATURES)
    feats = np.arange(N_FEATURES)
    s, col, o = feats // (N_COLORS * N_OBJECTS), (feats // N_OBJECTS) % N_COLORS, feats % N_OBJECTS
    protos = np.empty((N_FEATURES, dim), dtype=np.float64)
    protos[perm] = PROTOTYPE_SCALE * (a[s] + b[col] + c[o])
    protos = protos.astype(np.float32).astype(np.float64)
    d2 = ((protos[:, None] - protos[None]) ** 2).sum(-1) + np.eye(N_FEATURES)
    assert d2.min() > 0, "prototypes must be pairwise distinct"
    return Codebook(protos, perm.astype(np.int64), float(tau), int(seed))


@dataclass(frozen=True)
class TokenDistribution:
    probs: np.ndarray  # (N, |T|)
    argmax_tokens: np.ndarray  # (N,)


def tokenize_packed(packed: np.ndarray, cb: Codebook) -> np.ndarray:
    """Probability rows for an array of packed feature ids; shape (..., |T|)."""
    return cb.prob_table[np.asarray(packed)]


def tokenize(view: View, cb: Codebook) -> TokenDistribution:
    if len(view.patches) != N_PATCHES:
        raise InvalidArgument(f"expected {N_PATCHES} patches, got {len(view.patches)}")
    x = np.stack([cb.embed(p) for p in view.patches])
    probs = _softmax_rows(x, cb.prototypes, cb.tau)
    return TokenDistribution(probs, probs.argmax(axis=1))


def decode(tokens, cb: Codebook) -> tuple[FeatureTuple, ...]:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cb.vocab_size:
        raise InvalidArgument("token id out of range")
    table = cb.decoder_table
    out = []
    for t in tokens:
        i = int(table[t])
        out.append(FeatureTuple(i // (N_COLORS * N_OBJECTS), (i // N_OBJECTS) % N_COLORS, i % N_OBJECTS))
    return tuple(out)


def argmax_tokens_packed(packed: np.ndarray, cb: Codebook) -> np.ndarray:
    return cb.token_of_feature[np.asarray(packed)]


def token_frequency(env: Environment, cb: Codebook) -> np.ndarray:
    tokens = argmax_tokens_packed(env.features, cb)
    counts = np.bincount(tokens.ravel(), minlength=cb.vocab_size).astype(np.float64)
    return counts / counts.sum()


def semantic_distance(tokens_a, tokens_b, cb: Codebook) -> float:
    a = np.asarray(tokens_a, dtype=np.int64)
    b = np.asarray(tokens_b, dtype=np.int64)
    if a.shape != b.shape:
        raise InvalidArgument("token sequences differ in length")
    for t in (a, b):
        if t.size and (t.min() < 0 or t.max() >= cb.vocab_size):
            raise InvalidArgument("token id out of range")
    u = cb.unit_prototypes()
    return float(np.linalg.norm(u[a] - u[b], axis=-1).mean())


def codebook_to_bytes(cb: Codebook) -> bytes:
    header = MAGIC + bytes([VERSION])
    header += struct.pack("<IIdQ", cb.vocab_size, cb.dim, cb.tau, cb.seed & (2**64 - 1))
    body = cb.prototypes.astype("<f4").tobytes()
    body += cb.token_of_feature.astype("<u2").tobytes()
    return header + body


def codebook_from_bytes(blob: bytes) -> Codebook:
    if blob[:4] != MAGIC:
        raise InvalidArgument("bad codebook magic")
    if blob[4] != VERSION:
        raise InvalidArgument(f"unsupported codebook version {blob[4]}")
    vocab, dim, tau, seed = struct.unpack_from("<IIdQ", blob, 5)
    off = 5 + struct.calcsize("<IIdQ")
    protos = np.frombuffer(blob, dtype="<f4", count=vocab * dim, offset=off).reshape(vocab, dim)
    off += vocab * dim * 4
    perm = np.frombuffer(blob, dtype="<u2", count=vocab, offset=off)
    return Codebook(protos.astype(np.float64), perm.astype(np.int64), tau, seed)
