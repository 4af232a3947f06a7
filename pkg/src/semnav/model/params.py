"""Named parameter tensors, Adam, and the SNMD checkpoint format."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

from ..errors import InvalidArgument, TrainingDiverged
from .autograd import Tensor

MAGIC = b"SNMD"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}


def snap32(x: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept in float64 storage."""
    return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


class ParameterStore:
    """Ordered named tensors with gradient buffers.

    Values are kept float32-representable after every update so checkpoints
    (stored as float32) round-trip bit-exactly.  ``dtype`` is the storage and
    compute precision: float32 for training, float64 for gradient checks.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise InvalidArgument(f"duplicate parameter {name}")
        t = Tensor(snap32(value).astype(self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            if k not in state:
                raise InvalidArgument(f"missing tensor {k}")
            v = np.asarray(state[k])
            if v.shape != t.data.shape:
                raise InvalidArgument(f"shape mismatch for {k}: {v.shape} vs {t.data.shape}")
            t.data = snap32(v).astype(self.dtype)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((self.grad(k).astype(np.float64) ** 2).sum()) for k in self._params)))

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self._params.values())


class Adam:
    def __init__(self, params: ParameterStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(t.data.shape) for k, t in params.items()}
        self.v = {k: np.zeros(t.data.shape) for k, t in params.items()}

    def step(self, lr: float, max_grad_norm: float | None = None) -> None:
        ps = self.params
        grads = {k: ps.grad(k).astype(np.float64) for k in ps.names()}
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in {k}")
        scale = 1.0
        if max_grad_norm is not None:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if norm > max_grad_norm:
                scale = max_grad_norm / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k, t in ps.items():
            g = grads[k] * scale if scale != 1.0 else grads[k]
            if not g.any() and not self.m[k].any():
                continue
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            t.data = snap32(t.data - update).astype(ps.dtype)
        ps.zero_grad()
        if not ps.all_finite():
            raise TrainingDiverged("non-finite parameter after update")


def optimizer_step(opt: Adam, lr: float, max_grad_norm: float | None = None) -> None:
    opt.step(lr, max_grad_norm)


def save_checkpoint(path, params: ParameterStore, extra_tensors: dict | None = None, meta: dict | None = None) -> bytes:
    blob = checkpoint_bytes(params, extra_tensors, meta)
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def checkpoint_bytes(params: ParameterStore, extra_tensors: dict | None = None, meta: dict | None = None) -> bytes:
    """SNMD: magic, version, tensor count, then per tensor (name, dtype, shape, data), then JSON meta.

    Model parameters are stored as little-endian float32; extra tensors (for
    example codebook scores) are stored as float64.
    """
    entries = [(k, 0, t.data) for k, t in params.items()]
    entries += [(k, 1, np.asarray(v, dtype=np.float64)) for k, v in (extra_tensors or {}).items()]
    out = [MAGIC, bytes([VERSION]), struct.pack("<I", len(entries))]
    for name, code, arr in entries:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    mb = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(mb)) + mb)
    return b"".join(out)


def read_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    """Returns (float32 tensors, float64 tensors, meta)."""
    if blob[:4] != MAGIC:
        raise InvalidArgument("bad checkpoint magic")
    if blob[4] != VERSION:
        raise InvalidArgument(f"unsupported checkpoint version {blob[4]}")
    (count,) = struct.unpack_from("<I", blob, 5)
    off = 9
    f32, f64 = {}, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + n].decode("utf-8")
        off += n
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPES[code])
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dt, count=size, offset=off).reshape(shape).astype(np.float64)
        off += size * dt.itemsize
        (f32 if code == 0 else f64)[name] = arr
    (m,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off : off + m].decode("utf-8"))
    return f32, f64, meta
