"""Named parameter storage, checkpoint serialization and Adam updates.

Checkpoint layout: magic b"XCN1", a little-endian uint32 with the byte
length of a JSON index, the index itself, then raw float32 little-endian
parameter blobs in index order. Each index entry records name, shape, byte
offset (relative to the blob section) and partition; the index object also
carries an optional "meta" dictionary for model configuration.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import IoFailure, ShapeMismatch, TruncatedFile
from .tensor import Tensor

MAGIC = b"XCN1"

PARTITIONS = ("primary", "cracking", "contamination", "fusion")


class ParamStore:
    """Ordered mapping of parameter name -> (Tensor, partition)."""

    def __init__(self):
        self._items = {}

    def add(self, name: str, tensor: Tensor, partition: str) -> Tensor:
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}, expected one of {PARTITIONS}")
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._items[name] = (tensor, partition)
        return tensor

    def __contains__(self, name):
        return name in self._items

    def __len__(self):
        return len(self._items)

    def names(self):
        return list(self._items)

    def tensor(self, name: str) -> Tensor:
        return self._items[name][0]

    def partition_of(self, name: str) -> str:
        return self._items[name][1]

    def items(self):
        return [(name, t, part) for name, (t, part) in self._items.items()]

    def partition(self, tag: str):
        """All (name, tensor) pairs in one partition, in insertion order."""
        if tag not in PARTITIONS:
            raise ValueError(f"unknown partition {tag!r}")
        return [(n, t) for n, (t, p) in self._items.items() if p == tag]

    def select(self, prefixes) -> list:
        """All (name, tensor) pairs whose name starts with any prefix."""
        if isinstance(prefixes, str):
            prefixes = (prefixes,)
        return [
            (n, t)
            for n, (t, _) in self._items.items()
            if any(n.startswith(p) for p in prefixes)
        ]

    def zero_grad(self):
        for tensor, _ in self._items.values():
            tensor.grad = None

    def snapshot(self, names=None) -> dict:
        """Raw parameter bytes, for exact freeze checks."""
        chosen = names if names is not None else self._items.keys()
        return {n: self._items[n][0].data.tobytes() for n in chosen}

    def save(self, path, meta: dict | None = None) -> None:
        entries = []
        blobs = []
        offset = 0
        for name, (tensor, partition) in self._items.items():
            raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
            entries.append(
                {
                    "name": name,
                    "shape": list(tensor.data.shape),
                    "offset": offset,
                    "partition": partition,
                }
            )
            blobs.append(raw)
            offset += len(raw)
        index = {"params": entries}
        if meta:
            index["meta"] = meta
        encoded = json.dumps(index, sort_keys=True).encode("utf-8")
        try:
            with open(path, "wb") as fh:
                fh.write(MAGIC)
                fh.write(struct.pack("<I", len(encoded)))
                fh.write(encoded)
                for raw in blobs:
                    fh.write(raw)
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc

    @classmethod
    def load(cls, path, dtype=np.float32):
        """Read a checkpoint; returns (store, meta_dict)."""
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
        if len(raw) < 8 or raw[:4] != MAGIC:
            raise TruncatedFile(f"{path}: not a checkpoint (bad magic)")
        (index_len,) = struct.unpack("<I", raw[4:8])
        if len(raw) < 8 + index_len:
            raise TruncatedFile(f"{path}: truncated index")
        try:
            index = json.loads(raw[8 : 8 + index_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TruncatedFile(f"{path}: corrupt index: {exc}") from exc
        body = raw[8 + index_len :]
        store = cls()
        for entry in index["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            end = start + 4 * count
            if end > len(body):
                raise TruncatedFile(f"{path}: blob for {entry['name']} out of bounds")
            flat = np.frombuffer(body, dtype="<f4", count=count, offset=start)
            data = flat.astype(dtype).reshape(shape)
            store.add(entry["name"], Tensor(data.copy()), entry["partition"])
        return store, index.get("meta", {})


def adam_step(named_params, state: dict, *, lr: float, beta1: float,
              beta2: float, eps: float, t: int) -> None:
    """One bias-corrected Adam update at step t over (name, Tensor) pairs.

    state maps name -> [m, v]. Parameters whose grad is None are skipped
    entirely (no state decay), so an untouched partition stays bit-exact;
    a parameter that never receives gradients is never moved.
    """
    if t < 1:
        raise ValueError(f"step index t starts at 1, got {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, tensor in named_params:
        grad = tensor.grad
        if grad is None:
            continue
        if grad.shape != tensor.data.shape:
            raise ShapeMismatch(f"{name}: grad shape {grad.shape} != {tensor.data.shape}")
        if name not in state:
            state[name] = [np.zeros_like(tensor.data), np.zeros_like(tensor.data)]
        m, v = state[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        tensor.data = tensor.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam with per-parameter state and an independent step counter per call site."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}
        self._counters = {}

    def step(self, named_params, group: str = "default") -> int:
        """Apply one update to the given parameters; returns the group's step index."""
        t = self._counters.get(group, 0) + 1
        self._counters[group] = t
        adam_step(
            named_params,
            self.state,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            t=t,
        )
        return t
