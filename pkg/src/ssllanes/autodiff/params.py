"""Named parameter storage, Adam, and the checkpoint file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor

GROUPS = ("agent_encoder", "map_encoder", "interaction", "decoder", "pretext_head")

CHECKPOINT_MAGIC = "SSLLANES-CKPT 1"


class CheckpointError(ValueError):
    pass


class ParameterStore:
    """Ordered name -> parameter map where every entry belongs to one group."""

    def __init__(self, seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, value: np.ndarray, group: str) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if group not in GROUPS:
            raise KeyError(f"unknown parameter group {group!r}")
        t = Tensor(value, requires_grad=True, op="param")
        self._params[name] = t
        self._groups[name] = group
        return t

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int, group: str) -> Tensor:
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return self.add(name, self.rng.uniform(-bound, bound, size=shape), group)

    def constant(self, name: str, shape: tuple[int, ...], value: float, group: str) -> Tensor:
        return self.add(name, np.full(shape, value), group)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def names_in(self, group: str) -> list[str]:
        return [n for n, g in self._groups.items() if g == group]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter; unreachable parameters report zeros."""
        return {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for n, t in self._params.items()
        }

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def num_values(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))


@dataclass
class Adam:
    """Adam with bias correction; moments live on the optimizer."""

    store: ParameterStore
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, lr: float, grads: dict[str, np.ndarray] | None = None) -> None:
        grads = self.store.grads() if grads is None else grads
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.store.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)


def adam_step(
    opt: Adam, grads: dict[str, np.ndarray], lr: float,
) -> None:
    opt.step(lr, grads)


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(store: ParameterStore, path: str | Path, extra: dict | None = None) -> None:
    """Write a one-line JSON manifest followed by little-endian float32 values."""
    manifest = {
        "params": [
            {"name": n, "group": store.group_of(n), "shape": list(t.shape)}
            for n, t in store.items()
        ],
        "extra": extra or {},
    }
    payload = b"".join(
        np.ascontiguousarray(t.data, dtype="<f4").tobytes() for _, t in store.items()
    )
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode())
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode())
        fh.write(payload)


def read_checkpoint(path: str | Path) -> tuple[list[dict], dict[str, np.ndarray], dict]:
    """Return (manifest entries, name -> float32 array, extra metadata)."""
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    if first < 0 or raw[:first].decode(errors="replace") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    second = raw.find(b"\n", first + 1)
    if second < 0:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(raw[first + 1 : second].decode())
    payload = raw[second + 1 :]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload too short at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=offset
        ).reshape(entry["shape"])
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    return manifest["params"], arrays, manifest.get("extra", {})


def load_checkpoint(
    store: ParameterStore, path: str | Path, groups: Iterable[str] | None = None,
) -> list[str]:
    """Copy checkpoint values into ``store``, optionally restricted to ``groups``.

    Returns the names that were loaded.
    """
    entries, arrays, _ = read_checkpoint(path)
    wanted = set(groups) if groups is not None else None
    loaded = []
    for entry in entries:
        name, group = entry["name"], entry["group"]
        if wanted is not None and group not in wanted:
            continue
        if name not in store:
            raise CheckpointError(f"parameter {name!r} not present in model")
        target = store[name]
        if tuple(entry["shape"]) != target.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {tuple(entry['shape'])} "
                f"!= model shape {target.shape}"
            )
        target.data = arrays[name].astype(target.data.dtype)
        loaded.append(name)
    if wanted is not None:
        missing = [n for g in wanted for n in store.names_in(g) if n not in loaded]
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters {missing}")
    return loaded
