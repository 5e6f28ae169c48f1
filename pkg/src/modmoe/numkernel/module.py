"""Parameter containers: a minimal ``Module`` tree and the named ``ParamSet``."""

from __future__ import annotations

import fnmatch
from collections import OrderedDict
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor


def matches(name: str, patterns: Iterable[str]) -> bool:
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


class ParamSet:
    """Ordered ``name -> Tensor`` mapping with per-name freezing.

    Frozen parameters keep ``requires_grad=False`` so backward never computes
    their gradients, and the optimizer refuses to touch them.
    """

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.frozen: set[str] = set()
        for name, t in items:
            if name in self._params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._params[name] = t
            if not t.requires_grad:
                self.frozen.add(name)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def select(self, patterns: Iterable[str]) -> list[str]:
        patterns = list(patterns)
        return [n for n in self._params if matches(n, patterns)]

    def set_trainable(self, names: Iterable[str]) -> None:
        """Freeze everything except ``names``."""
        keep = set(names)
        unknown = keep - set(self._params)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)[:3]}")
        self.frozen = set(self._params) - keep
        for n, t in self._params.items():
            t.requires_grad = n in keep

    def freeze(self, names: Iterable[str]) -> None:
        for n in names:
            self.frozen.add(n)
            self._params[n].requires_grad = False

    def trainable(self) -> list[str]:
        return [n for n in self._params if n not in self.frozen]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, bytes]:
        """Raw bytes per parameter, for byte-level freezing checks."""
        return {n: t.data.tobytes() for n, t in self._params.items()}

    def count(self, names: Iterable[str] | None = None) -> int:
        names = self._params if names is None else names
        return int(sum(self._params[n].size for n in names))


class Module:
    """Attribute-walking parameter discovery, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def param_set(self) -> ParamSet:
        return ParamSet(self.named_parameters())


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad or value.name == "param":
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def parameter(shape) -> Tensor:
    """A trainable leaf; values are filled later by ``init_parameters``."""
    return Tensor(np.zeros(shape), requires_grad=True, name="param")
