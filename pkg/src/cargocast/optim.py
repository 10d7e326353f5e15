"""Trainable-parameter store, SGD/Adam updates, and the gradient oracle.

ParamStore has value semantics on update: `sgd_step` and `adam_step`
return fresh stores and never touch their inputs, which is what the
two-loop meta-training relies on for its model copies.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .autodiff import Tensor, backward
from .errors import CargocastError, NonFiniteError, ShapeError


class ParamStore:
    """Ordered name -> Tensor map of trainable parameters."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise CargocastError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Current gradient per parameter; zeros where none accumulated."""
        return {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._params.items()
        }

    def allclose(self, other: "ParamStore", atol: float = 0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.allclose(self[n].data, other[n].data, rtol=0.0, atol=atol) for n in self.names()
        )

    # -- serialization: text lines with hex floats, lossless at 64 bits --

    MAGIC = "cargocast-params v1"

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write(self.MAGIC + "\n")
            for name, t in self._params.items():
                dims = " ".join(str(d) for d in t.data.shape)
                fh.write(f"param {name} {t.data.ndim} {dims}".rstrip() + "\n")
                fh.write(" ".join(v.hex() for v in t.data.reshape(-1)) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ParamStore":
        store = cls()
        with Path(path).open("r", encoding="utf-8") as fh:
            if fh.readline().rstrip("\n") != cls.MAGIC:
                raise CargocastError(f"{path}: not a parameter file")
            while True:
                header = fh.readline()
                if not header:
                    break
                parts = header.split()
                if parts[0] != "param":
                    raise CargocastError(f"{path}: bad header line {header!r}")
                name, ndim = parts[1], int(parts[2])
                shape = tuple(int(d) for d in parts[3 : 3 + ndim])
                values = np.array([float.fromhex(v) for v in fh.readline().split()])
                store.add(name, values.reshape(shape))
        return store


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Dense-layer init: uniform with Glorot bound from fan-in/fan-out."""
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def _check_aligned(params: ParamStore, grads: dict[str, np.ndarray]) -> None:
    if set(grads) != set(params.names()):
        missing = set(params.names()) ^ set(grads)
        raise CargocastError(f"gradient/parameter name mismatch: {sorted(missing)}")


def sgd_step(params: ParamStore, grads: dict[str, np.ndarray], lr: float) -> ParamStore:
    """p' = p - lr * g, returned as a new store."""
    if lr <= 0:
        raise CargocastError(f"learning rate must be > 0, got {lr}")
    _check_aligned(params, grads)
    out = ParamStore()
    for name, t in params.items():
        out.add(name, t.data - lr * grads[name])
    return out


@dataclass(frozen=True)
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init(cls, params: ParamStore) -> "AdamState":
        zeros = {name: np.zeros_like(t.data) for name, t in params.items()}
        return cls(step=0, m=zeros, v={k: v.copy() for k, v in zeros.items()})


def adam_step(
    state: AdamState,
    params: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[AdamState, ParamStore]:
    """Standard Adam with bias correction; value semantics throughout."""
    if lr <= 0:
        raise CargocastError(f"learning rate must be > 0, got {lr}")
    _check_aligned(params, grads)
    t = state.step + 1
    new_m, new_v = {}, {}
    out = ParamStore()
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_m[name] = m
        new_v[name] = v
        out.add(name, p.data - lr * m_hat / (np.sqrt(v_hat) + eps))
    return AdamState(step=t, m=new_m, v=new_v), out


def finite_difference_check(
    f: Callable[[ParamStore], Tensor], params: ParamStore, h: float = 1e-5
) -> float:
    """Worst relative disagreement between backprop and central differences.

    Relative error uses denominator max(1, |analytic|, |numeric|) per
    coordinate. `f` must rebuild its graph on every call.
    """
    if h <= 0:
        raise CargocastError(f"step size must be > 0, got {h}")
    params.zero_grad()
    loss = f(params)
    backward(loss)
    analytic = params.grads()
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            up = f(params).item()
            flat[i] = original - h
            down = f(params).item()
            flat[i] = original
            numeric = (up - down) / (2.0 * h)
            if not np.isfinite(numeric):
                raise NonFiniteError(f"finite differences diverged at {name}[{i}]")
            denom = max(1.0, abs(grad_flat[i]), abs(numeric))
            worst = max(worst, abs(grad_flat[i] - numeric) / denom)
    return worst
