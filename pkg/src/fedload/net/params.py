"""Flat parameter vectors with a named layout.

A `ParamVector` is the unit that gets trained, differenced, clipped, noised,
averaged and secret-shared. The layout records `(name, shape, offset)` per
tensor in declaration order so pack/unpack is exact and deterministic.
"""

import json
from dataclasses import dataclass

import numpy as np


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ParamLayout:
    """Ordered (name, shape) entries mapped onto one flat float64 vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return int(sum(int(np.prod(shape)) for _, shape in self.entries))

    def offsets(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out, off = {}, 0
        for name, shape in self.entries:
            out[name] = (off, shape)
            off += int(np.prod(shape))
        return out

    def to_json(self) -> str:
        return json.dumps([[name, list(shape)] for name, shape in self.entries])

    @classmethod
    def from_json(cls, text: str) -> "ParamLayout":
        return cls(tuple((name, tuple(shape)) for name, shape in json.loads(text)))


@dataclass(frozen=True)
class ParamVector:
    """A flat float64 vector plus the layout describing its tensors."""

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size != self.layout.size:
            raise LayoutError(f"vector of size {v.size} does not match layout size {self.layout.size}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, layout: ParamLayout) -> "ParamVector":
        return cls(np.zeros(layout.size), layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def unpack(self) -> dict[str, np.ndarray]:
        """Views into the flat vector, one array per layout entry."""
        out = {}
        for name, (off, shape) in self.layout.offsets().items():
            out[name] = self.values[off : off + int(np.prod(shape))].reshape(shape)
        return out

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def _check(self, other: "ParamVector"):
        if not isinstance(other, ParamVector) or not self.same_layout(other):
            raise LayoutError("parameter vectors have different layouts")


def pack(tensors: dict[str, np.ndarray], layout: ParamLayout) -> ParamVector:
    """Inverse of `ParamVector.unpack`."""
    flat = np.empty(layout.size)
    for name, (off, shape) in layout.offsets().items():
        if name not in tensors:
            raise LayoutError(f"missing tensor {name!r}")
        t = np.asarray(tensors[name], dtype=np.float64)
        if t.shape != shape:
            raise LayoutError(f"tensor {name!r} has shape {t.shape}, layout expects {shape}")
        flat[off : off + t.size] = t.ravel()
    return ParamVector(flat, layout)


_MAGIC = b"FLPV"


def save_params(path, params: ParamVector):
    """Checkpoint format: magic, 4-byte header length, JSON layout, LE float64 blob."""
    header = params.layout.to_json().encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        fh.write(params.values.astype("<f8").tobytes())


def load_params(path) -> ParamVector:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise LayoutError(f"{path}: not a parameter checkpoint")
        hlen = int.from_bytes(fh.read(4), "little")
        layout = ParamLayout.from_json(fh.read(hlen).decode())
        values = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return ParamVector(values, layout)
