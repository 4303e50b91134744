"""Parameter storage, initialization, Adam, and checkpoint files.

Checkpoint layout (version 1): the magic bytes ``PCNAV1``, a little-endian
uint32 format version, a uint64 manifest length, a JSON manifest listing
``(name, shape, dtype)`` per array plus free-form metadata, then the raw
array bytes little-endian in manifest order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor

_MAGIC = b"PCNAV1"
_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class ParamStore:
    """Named parameter tensors sharing one float width."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.ascontiguousarray(value, dtype=self.dtype),
                   requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        return total ** 0.5

    def clip_grad_norm(self, max_norm: float) -> float:
        """Scale all gradients so their global L2 norm is at most max_norm."""
        norm = self.grad_norm()
        if norm > max_norm and norm > 0.0:
            scale = max_norm / norm
            for t in self._params.values():
                if t.grad is not None:
                    t.grad *= scale
        return norm

    def state_arrays(self) -> dict:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise CheckpointFormatError(
                f"parameter names do not match (missing {sorted(missing)}, "
                f"unexpected {sorted(extra)})")
        for name, t in self._params.items():
            arr = arrays[name]
            if arr.shape != t.data.shape:
                raise CheckpointFormatError(
                    f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = np.ascontiguousarray(arr, dtype=self.dtype)
            t.grad = None


# -- initializers -----------------------------------------------------------

def orthogonal(shape, rng: np.random.Generator, gain: float = 1.0,
               dtype=np.float64) -> np.ndarray:
    """Orthogonal init (rows or columns orthonormal, whichever fits)."""
    rows, cols = shape
    flat = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q *= np.sign(np.diag(r))  # fix the sign ambiguity for determinism
    if rows < cols:
        q = q.T
    return (gain * q[:rows, :cols]).astype(dtype)


def scaled_uniform(shape, rng: np.random.Generator,
                   dtype=np.float64) -> np.ndarray:
    """Uniform on +-sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# -- optimizer ---------------------------------------------------------------

class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, store: ParamStore, lr: float = 2.5e-4,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-5):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data)
                  for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data)
                  for name, t in store.items()}

    def step(self, lr: float | None = None) -> None:
        if lr is None:
            lr = self.lr
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_arrays(self) -> dict:
        out = {"adam.t": np.array([self.t], dtype=np.int64)}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_arrays(self, arrays: dict) -> None:
        self.t = int(arrays["adam.t"][0])
        for name in self.m:
            self.m[name] = np.ascontiguousarray(
                arrays[f"adam.m.{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.ascontiguousarray(
                arrays[f"adam.v.{name}"], dtype=self.v[name].dtype)


# -- checkpoint files ---------------------------------------------------------

def write_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.str.lstrip("<>=|")})
        blobs.append(le.tobytes())
    manifest = json.dumps({"meta": meta or {}, "arrays": entries}).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path):
    """Returns (arrays dict, meta dict); rejects unknown format versions."""
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise CheckpointFormatError(
                f"{path}: format version {version} is not supported "
                f"(reader supports {_VERSION})")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode())
        arrays = {}
        for entry in manifest["arrays"]:
            dt = np.dtype(entry["dtype"]).newbyteorder("<")
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(n * dt.itemsize)
            if len(raw) != n * dt.itemsize:
                raise CheckpointFormatError(f"{path}: truncated array data")
            arrays[entry["name"]] = np.frombuffer(
                raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return arrays, manifest["meta"]
