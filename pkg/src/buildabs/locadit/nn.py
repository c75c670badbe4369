"""Parameter storage, layers and optimisers built on the autodiff engine."""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..rng import make_rng
from . import autodiff as ad
from .autodiff import Tensor
from .sparse import VoxelSet

CKPT_MAGIC = b"LCPT"


class ParamStore:
    """Named float64 arrays that together form one flat parameter vector."""

    def __init__(self, seed: int = 0, hyper: dict | None = None):
        self.seed = int(seed)
        self.hyper = dict(hyper or {})
        self.arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._rng = make_rng(seed, "init")

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.arrays:
            raise KeyError(f"duplicate parameter {name}")
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def normal(self, name: str, shape, std: float) -> None:
        self.add(name, self._rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> None:
        self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> None:
        self.add(name, np.ones(shape))

    def linear(self, name: str, fan_in: int, fan_out: int, scale: float = 1.0, bias: bool = True) -> None:
        self.normal(f"{name}.w", (fan_in, fan_out), scale / np.sqrt(fan_in))
        if bias:
            self.zeros(f"{name}.b", (fan_out,))

    def tensors(self, prefix: str = "", trainable: bool = True) -> dict[str, Tensor]:
        return {
            k: Tensor(v, requires_grad=trainable)
            for k, v in self.arrays.items()
            if k.startswith(prefix)
        }

    def manifest(self) -> list[dict]:
        out, off = [], 0
        for k, v in self.arrays.items():
            out.append({"name": k, "shape": list(v.shape), "offset": off, "size": int(v.size)})
            off += v.size
        return out

    def flat(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        for entry in self.manifest():
            k = entry["name"]
            self.arrays[k] = vec[entry["offset"] : entry["offset"] + entry["size"]].reshape(entry["shape"]).copy()

    def copy(self) -> "ParamStore":
        other = ParamStore(self.seed, self.hyper)
        for k, v in self.arrays.items():
            other.arrays[k] = v.copy()
        return other

    def merge(self, other: "ParamStore") -> None:
        for k, v in other.arrays.items():
            self.add(k, v)

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


def save_params(path, params: ParamStore, extra: dict | None = None) -> None:
    manifest = {
        "slices": params.manifest(),
        "hyper": params.hyper,
        "seed": params.seed,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(params.flat().astype("<f4").tobytes())


def load_params(path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (hlen,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8 : 8 + hlen])
    total = sum(s["size"] for s in manifest["slices"])
    vec = np.frombuffer(raw, dtype="<f4", count=total, offset=8 + hlen).astype(np.float64)
    params = ParamStore(manifest["seed"], manifest["hyper"])
    for s in manifest["slices"]:
        params.arrays[s["name"]] = vec[s["offset"] : s["offset"] + s["size"]].reshape(s["shape"]).copy()
    return params, manifest.get("extra", {})


# --------------------------------------------------------------------------
# layers


def linear(x: Tensor, p: dict, name: str) -> Tensor:
    y = x @ p[f"{name}.w"]
    b = p.get(f"{name}.b")
    return y if b is None else y + b


def sparse_conv(x: Tensor, vs: VoxelSet, p: dict, name: str) -> Tensor:
    """3x3x3 convolution over the active voxels of ``vs`` (inactive = zero)."""
    cols = ad.gather_rows(x, vs.neighbors())
    return linear(cols.reshape(len(vs), 27 * x.shape[1]), p, name)


def strided_down(x: Tensor, vs: VoxelSet, p: dict, name: str) -> tuple[Tensor, VoxelSet]:
    """2x2x2 stride-2 convolution onto the parent set."""
    parent, table = vs.parents()
    cols = ad.gather_rows(x, table)
    return linear(cols.reshape(len(parent), 8 * x.shape[1]), p, name), parent


def upsample(x: Tensor, p: dict, name: str) -> Tensor:
    """Each parent row becomes 8 child rows (transposed stride-2 conv)."""
    y = linear(x, p, name)
    return y.reshape(y.shape[0] * 8, y.shape[1] // 8)


def scatter_to(x: Tensor, src: VoxelSet, dst: VoxelSet) -> Tensor:
    """Features of ``src`` placed on ``dst``; voxels of ``dst`` absent in ``src`` get zeros."""
    return ad.gather_rows(x, dst.rows_in(src))


def sinusoidal(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / max(half - 1, 1))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


# --------------------------------------------------------------------------
# optimisers


class Adam:
    def __init__(self, params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = 1.0):
        self.params = params
        self.lr, self.betas, self.eps, self.clip = lr, betas, eps, clip
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        grads = clip_grads(grads, self.clip)
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            self.params.arrays[k] = self.params.arrays[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    """Gradient descent with heavy-ball momentum."""

    def __init__(self, params: ParamStore, lr: float = 1e-2, momentum: float = 0.9, clip: float | None = None):
        self.params = params
        self.lr, self.momentum, self.clip = lr, momentum, clip
        self.buf = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        grads = clip_grads(grads, self.clip)
        for k, g in grads.items():
            self.buf[k] = self.momentum * self.buf[k] + g
            self.params.arrays[k] = self.params.arrays[k] - self.lr * self.buf[k]


def make_optimizer(kind: str, params: ParamStore, lr: float):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimiser {kind!r}")


def clip_grads(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def collect_grads(tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
