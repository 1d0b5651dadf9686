"""Parameter containers, initialisers and name-based traversal."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .numerics import Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, name=None) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True, name=name)


def normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d: int) -> "LayerNormParams":
        return cls(ones(d), zeros(d))


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, din: int, dout: int) -> "LinearParams":
        return cls(xavier_uniform(rng, din, dout), zeros(dout))

    @classmethod
    def zero(cls, din: int, dout: int) -> "LinearParams":
        return cls(zeros((din, dout)), zeros(dout))


def named_parameters(tree, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted.name, tensor)`` for every Tensor reachable from ``tree``.

    Dataclasses, lists/tuples and dicts are walked; any other leaf is skipped.
    """
    if isinstance(tree, Tensor):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            yield from named_parameters(getattr(tree, f.name), _join(prefix, f.name))
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from named_parameters(item, _join(prefix, str(i)))
    elif isinstance(tree, dict):
        for k, item in tree.items():
            yield from named_parameters(item, _join(prefix, str(k)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def state_dict(tree) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in named_parameters(tree)}


def load_state_dict(tree, state: dict[str, np.ndarray]):
    """Copy arrays into the matching tensors; names and shapes must agree exactly."""
    params = dict(named_parameters(tree))
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise KeyError(f"parameter mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    for name, t in params.items():
        if state[name].shape != t.shape:
            raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model shape {t.shape}")
        t.data = np.array(state[name], dtype=t.data.dtype)
