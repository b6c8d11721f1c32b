from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Iterable

import numpy as np

LayoutEntry = tuple[str, tuple[int, ...], int]


def make_layout(shapes: Iterable[tuple[str, tuple[int, ...]]]) -> tuple[LayoutEntry, ...]:
    layout = []
    offset = 0
    for name, shape in shapes:
        shape = tuple(int(s) for s in shape)
        layout.append((name, shape, offset))
        offset += prod(shape)
    return tuple(layout)


def layout_size(layout: tuple[LayoutEntry, ...]) -> int:
    if not layout:
        return 0
    name, shape, offset = layout[-1]
    return offset + prod(shape)


@dataclass(eq=False)
class ParamVector:
    """Flat parameter storage with a named layout.

    Views returned by :meth:`view` alias ``values``; writing through them
    updates the vector.
    """

    values: np.ndarray
    layout: tuple[LayoutEntry, ...]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values).reshape(-1)
        offset = 0
        for name, shape, off in self.layout:
            if off != offset:
                raise ValueError(f"layout entry {name!r} is not contiguous")
            offset += prod(shape)
        if offset != self.values.size:
            raise ValueError(f"layout covers {offset} values, got {self.values.size}")

    @classmethod
    def zeros(cls, layout, dtype=np.float32) -> ParamVector:
        return cls(np.zeros(layout_size(layout), dtype=dtype), tuple(layout))

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], dtype=np.float32) -> ParamVector:
        layout = make_layout((k, np.shape(v)) for k, v in arrays.items())
        flat = np.concatenate([np.asarray(v, dtype=dtype).reshape(-1) for v in arrays.values()]) if arrays else np.zeros(0, dtype)
        return cls(flat, layout)

    def __len__(self) -> int:
        return self.values.size

    @property
    def names(self) -> list[str]:
        return [name for name, _, _ in self.layout]

    def view(self, name: str) -> np.ndarray:
        for n, shape, off in self.layout:
            if n == name:
                return self.values[off:off + prod(shape)].reshape(shape)
        raise KeyError(name)

    def unflatten(self) -> dict[str, np.ndarray]:
        return {n: self.values[off:off + prod(shape)].reshape(shape) for n, shape, off in self.layout}

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout)

    def astype(self, dtype) -> ParamVector:
        return ParamVector(self.values.astype(dtype), self.layout)

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layout)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
        )

    def __hash__(self):
        return hash((self.layout, self.values.tobytes()))

    def __repr__(self) -> str:
        return f"ParamVector(n={self.values.size}, tensors={len(self.layout)}, dtype={self.values.dtype})"
