"""Named parameter storage, checkpoint I/O, and the finite-difference gradient oracle."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from ..errors import ConfigError, ContractError, NumericError, ShapeError
from .tensor import Tensor

DTYPE = "<f8"


class ParamStore:
    """Ordered mapping of unique names to trainable tensors.

    Each tensor carries its own ``grad`` buffer, which after ``backward`` has
    the parameter's shape.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, op=name)
        self._params[name] = t
        return t

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

    def names(self) -> list[str]:
        return list(self._params)

    def num_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for n, t in self._params.items()
        }

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        if set(state) != set(self._params):
            missing = set(self._params) ^ set(state)
            raise ContractError(f"state keys do not match parameters: {sorted(missing)}")
        for n, t in self._params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{n}: expected {t.data.shape}, got {arr.shape}")
            t.data = arr.copy()

    def to_bytes(self) -> bytes:
        return b"".join(t.data.astype(DTYPE).tobytes() for t in self._params.values())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path, meta: dict | None = None) -> tuple[Path, Path]:
        """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 blob)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        entries, offset = [], 0
        for n, t in self._params.items():
            nbytes = t.data.size * 8
            entries.append({"name": n, "shape": list(t.data.shape), "offset": offset, "nbytes": nbytes})
            offset += nbytes
        blob = self.to_bytes()
        manifest = {
            "dtype": DTYPE,
            "params": entries,
            "sha256": hashlib.sha256(blob).hexdigest(),
            **(meta or {}),
        }
        mpath, bpath = path.with_suffix(".json"), path.with_suffix(".bin")
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        bpath.write_bytes(blob)
        return mpath, bpath

    @staticmethod
    def read(path) -> tuple[dict[str, np.ndarray], dict]:
        """Load a checkpoint written by :meth:`save`; returns (state, manifest)."""
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        blob = path.with_suffix(".bin").read_bytes()
        if manifest.get("dtype") != DTYPE:
            raise ConfigError(f"unsupported dtype {manifest.get('dtype')}")
        if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
            raise ConfigError(f"checkpoint blob {path.with_suffix('.bin')} fails its checksum")
        state = {}
        for e in manifest["params"]:
            raw = np.frombuffer(blob, dtype=DTYPE, count=e["nbytes"] // 8, offset=e["offset"])
            state[e["name"]] = raw.astype(np.float64).reshape(e["shape"])
        return state, manifest


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore, step: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-6) -> float:
    """Largest relative error between backprop gradients and central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_entries`` set, each parameter is probed at a random subset of
    entries drawn from ``rng``.
    """
    if not (1e-6 < step < 1e-2):
        raise ContractError("finite-difference step must lie in (1e-6, 1e-2)")
    params.zero_grad()
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is not finite")
    loss.backward()
    analytic = params.grads()

    def evaluate() -> float:
        val = float(f(params).data)
        if not np.isfinite(val):
            raise NumericError("objective is not finite under perturbation")
        return val

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate()
            flat[i] = orig - step
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    params.zero_grad()
    return worst
