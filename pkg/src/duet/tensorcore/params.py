"""Named parameter storage and the JSON checkpoint format."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

CHECKPOINT_FORMAT = "duet-checkpoint"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Dot-named parameter tensors plus optimizer state.

    Iteration is always in sorted-name order so that anything derived from a
    walk over the store (updates, checkpoints, hashes) is deterministic.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self.step = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._params[name] = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        return self._params[name]

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def group(self, prefix):
        """Sub-mapping ``{suffix: tensor}`` for every name under ``prefix.``."""
        p = prefix + "."
        return {n[len(p):]: t for n, t in self._params.items() if n.startswith(p)}

    def size(self):
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self):
        return {n: t.grad for n, t in self.items()}

    def copy(self):
        out = ParamStore(self.dtype)
        for n, t in self.items():
            out.add(n, t.data.copy())
        out.step = self.step
        out.moments = {n: (m.copy(), v.copy()) for n, (m, v) in self.moments.items()}
        return out

    def astype(self, dtype):
        out = ParamStore(dtype)
        for n, t in self.items():
            out.add(n, t.data)
        out.step = self.step
        out.moments = {n: (m.astype(dtype), v.astype(dtype)) for n, (m, v) in self.moments.items()}
        return out

    # -- serialisation -----------------------------------------------------
    def to_dict(self):
        params = {}
        for n, t in self.items():
            entry = {"shape": list(t.data.shape), "values": t.data.ravel().tolist()}
            if n in self.moments:
                m, v = self.moments[n]
                entry["m"] = m.ravel().tolist()
                entry["v"] = v.ravel().tolist()
            params[n] = entry
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dtype": self.dtype.name,
            "step": self.step,
            "params": params,
        }

    @classmethod
    def from_dict(cls, doc, expected_shapes=None):
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a duet checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        store = cls(doc.get("dtype", "float64"))
        if expected_shapes is not None:
            missing = set(expected_shapes) - set(doc["params"])
            extra = set(doc["params"]) - set(expected_shapes)
            if missing or extra:
                raise ValueError(f"checkpoint parameters do not match model: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for n in sorted(doc["params"]):
            e = doc["params"][n]
            shape = tuple(e["shape"])
            if expected_shapes is not None and tuple(expected_shapes[n]) != shape:
                raise ValueError(f"shape mismatch for {n}: checkpoint {shape}, model {tuple(expected_shapes[n])}")
            store.add(n, np.asarray(e["values"], dtype=store.dtype).reshape(shape))
            if "m" in e:
                store.moments[n] = (
                    np.asarray(e["m"], dtype=store.dtype).reshape(shape),
                    np.asarray(e["v"], dtype=store.dtype).reshape(shape),
                )
        store.step = int(doc["step"])
        return store

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path, expected_shapes=None):
        return cls.from_dict(json.loads(Path(path).read_text()), expected_shapes)

    def digest(self):
        """SHA-256 over names, shapes and raw parameter bytes."""
        h = hashlib.sha256()
        for n, t in self.items():
            h.update(n.encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()
