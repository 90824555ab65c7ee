"""Block non-linear maps acting on partitioned vectors.

A :class:`BlockMap` is a square grid of cells over a :class:`BlockPartition`.
Row ``i`` of the output is ``post_act[i](sum_j cells[i][j](v_j))`` with the sum
taken left to right over ``j``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Activation",
    "Affine",
    "BlockMap",
    "BlockPartition",
    "Cell",
    "MapFormatError",
    "PartitionMismatchError",
    "ScaledIdentity",
    "StateBatch",
    "StateVector",
    "Zero",
    "apply",
    "apply_batch",
    "deserialize",
    "iterate",
    "serialize",
]


class PartitionMismatchError(ValueError):
    pass


class MapFormatError(ValueError):
    """Malformed map document or inconsistent cell grid.

    ``coords`` holds the offending ``(row, col)`` when one is known.
    """

    def __init__(self, message, coords=None):
        if coords is not None:
            message = f"cell ({coords[0]},{coords[1]}): {message}"
        super().__init__(message)
        self.coords = coords


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


class Activation(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.IDENTITY:
            return z
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        if self is Activation.TANH:
            return np.tanh(z)
        return 1.0 / (1.0 + np.exp(-z))

    def grad_from_output(self, out: np.ndarray) -> np.ndarray:
        """Derivative expressed through the activation's output value."""
        if self is Activation.IDENTITY:
            return np.ones_like(out)
        if self is Activation.RELU:
            return (out > 0.0).astype(out.dtype)
        if self is Activation.TANH:
            return 1.0 - out * out
        return out * (1.0 - out)

    @property
    def positively_homogeneous(self) -> bool:
        return self in (Activation.IDENTITY, Activation.RELU)


@dataclass(frozen=True)
class BlockPartition:
    sizes: tuple

    def __init__(self, sizes: Iterable[int]):
        sizes = tuple(int(s) for s in sizes)
        if not sizes:
            raise ValueError("a partition needs at least one block")
        if any(s < 1 for s in sizes):
            raise ValueError(f"block sizes must be >= 1, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    def __len__(self):
        return len(self.sizes)

    def __getitem__(self, i):
        return self.sizes[i]

    def __iter__(self):
        return iter(self.sizes)

    def total(self) -> int:
        return sum(self.sizes)

    @property
    def offsets(self) -> tuple:
        return tuple(np.concatenate([[0], np.cumsum(self.sizes)]).tolist())

    def prefix_blocks(self, dim: int) -> int:
        """Number of leading blocks whose sizes add up to ``dim``."""
        acc = 0
        for k, s in enumerate(self.sizes, start=1):
            acc += s
            if acc == dim:
                return k
            if acc > dim:
                break
        raise PartitionMismatchError(f"{dim} is not a block-aligned prefix of {self.sizes}")

    def suffix_blocks(self, dim: int) -> int:
        """Number of trailing blocks whose sizes add up to ``dim``."""
        return BlockPartition(self.sizes[::-1]).prefix_blocks(dim)

    def slices(self) -> list:
        off = self.offsets
        return [slice(off[i], off[i + 1]) for i in range(len(self.sizes))]


# --- cells -----------------------------------------------------------------


class Cell:
    """One entry of the block grid."""

    def __call__(self, z: np.ndarray, out_dim: int) -> np.ndarray:
        raise NotImplementedError

    def check_dims(self, in_dim: int, out_dim: int) -> None:
        pass

    @property
    def is_zero(self) -> bool:
        return False

    @property
    def is_linear(self) -> bool:
        return True


@dataclass(frozen=True, eq=False)
class Zero(Cell):
    def __call__(self, z, out_dim):
        return np.zeros((out_dim,) + z.shape[1:])

    @property
    def is_zero(self):
        return True

    def __eq__(self, other):
        return isinstance(other, Zero)

    def __hash__(self):
        return hash("zero")


@dataclass(frozen=True, eq=False)
class ScaledIdentity(Cell):
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scale", float(self.scale))

    def __call__(self, z, out_dim):
        return self.scale * z

    def check_dims(self, in_dim, out_dim):
        if in_dim != out_dim:
            raise ValueError(
                f"scaled identity needs a square cell, got {out_dim}x{in_dim}")

    def __eq__(self, other):
        return isinstance(other, ScaledIdentity) and other.scale == self.scale

    def __hash__(self):
        return hash(("scaled_identity", self.scale))


@dataclass(frozen=True, eq=False)
class Affine(Cell):
    """``act(W @ z + b)``; a missing bias counts as zero."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    act: Activation = Activation.IDENTITY

    def __post_init__(self):
        w = _frozen(self.weight)
        if w.ndim != 2:
            raise ValueError(f"weight must be 2-D, got shape {w.shape}")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = _frozen(self.bias).reshape(-1)
            if b.shape[0] != w.shape[0]:
                raise ValueError(
                    f"bias length {b.shape[0]} does not match weight rows {w.shape[0]}")
            object.__setattr__(self, "bias", b)
        object.__setattr__(self, "act", Activation(self.act))

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def pre_activation(self, z: np.ndarray) -> np.ndarray:
        # Accumulate one input feature at a time with elementwise ops. Unlike
        # BLAS or einsum, the result for a column then cannot depend on batch
        # width or memory layout, which batch/column equivalence relies on.
        w = self.weight
        col = z.ndim == 1
        z2 = z[:, None] if col else z
        y = np.zeros((w.shape[0], z2.shape[1]))
        for k in range(w.shape[1]):
            y += w[:, k:k + 1] * z2[k:k + 1, :]
        if self.bias is not None:
            y += self.bias[:, None]
        return y[:, 0] if col else y

    def __call__(self, z, out_dim):
        return self.act(self.pre_activation(z))

    def check_dims(self, in_dim, out_dim):
        if self.weight.shape != (out_dim, in_dim):
            raise ValueError(
                f"weight shape {self.weight.shape} does not match "
                f"block dims ({out_dim}, {in_dim})")

    @property
    def is_linear(self):
        no_bias = self.bias is None or not np.any(self.bias)
        return self.act is Activation.IDENTITY and no_bias

    def __eq__(self, other):
        if not isinstance(other, Affine) or other.act is not self.act:
            return False
        if not np.array_equal(self.weight, other.weight):
            return False
        if (self.bias is None) != (other.bias is None):
            return False
        return self.bias is None or np.array_equal(self.bias, other.bias)

    def __hash__(self):
        return hash(("affine", self.weight.shape, self.act))

    def scaled(self, factor: float) -> "Affine":
        """The cell ``factor * self``; exact only for positively homogeneous acts."""
        if factor < 0 or not self.act.positively_homogeneous:
            raise ValueError(
                f"cannot fold scale {factor} into a cell with activation {self.act.value}")
        bias = None if self.bias is None else factor * self.bias
        return Affine(factor * self.weight, bias, self.act)


# --- states ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StateVector:
    partition: BlockPartition
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data).reshape(-1)
        if data.shape[0] != self.partition.total():
            raise PartitionMismatchError(
                f"vector of length {data.shape[0]} does not fit partition "
                f"{self.partition.sizes}")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_blocks(cls, blocks: Sequence, partition=None) -> "StateVector":
        blocks = [np.atleast_1d(np.asarray(b, dtype=np.float64)).reshape(-1) for b in blocks]
        if partition is None:
            partition = BlockPartition(len(b) for b in blocks)
        return cls(partition, np.concatenate(blocks))

    @classmethod
    def zeros(cls, partition: BlockPartition) -> "StateVector":
        return cls(partition, np.zeros(partition.total()))

    def block(self, i: int) -> np.ndarray:
        return self.data[self.partition.slices()[i]]

    def blocks(self) -> list:
        return [self.data[s] for s in self.partition.slices()]

    def __eq__(self, other):
        return (isinstance(other, StateVector) and other.partition == self.partition
                and np.array_equal(other.data, self.data))

    def __repr__(self):
        return f"StateVector({[b.tolist() for b in self.blocks()]})"


@dataclass(frozen=True, eq=False)
class StateBatch:
    """Columns are examples."""

    partition: BlockPartition
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 2 or data.shape[0] != self.partition.total():
            raise PartitionMismatchError(
                f"batch of shape {data.shape} does not fit partition "
                f"{self.partition.sizes}")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_columns(cls, columns: Sequence[StateVector]) -> "StateBatch":
        partition = columns[0].partition
        if any(c.partition != partition for c in columns):
            raise PartitionMismatchError("columns do not share one partition")
        return cls(partition, np.stack([c.data for c in columns], axis=1))

    @classmethod
    def from_inputs(cls, partition: BlockPartition, inputs: np.ndarray) -> "StateBatch":
        """Leading block(s) hold ``inputs`` (examples as rows), the rest is zero.

        The input width must cover a whole number of leading blocks.
        """
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2:
            raise PartitionMismatchError(f"inputs must be 2-D, got shape {inputs.shape}")
        partition.prefix_blocks(inputs.shape[1])
        data = np.zeros((partition.total(), inputs.shape[0]))
        data[: inputs.shape[1]] = inputs.T
        return cls(partition, data)

    @property
    def n(self) -> int:
        return self.data.shape[1]

    def column(self, k: int) -> StateVector:
        return StateVector(self.partition, self.data[:, k])

    def block(self, i: int) -> np.ndarray:
        return self.data[self.partition.slices()[i]]

    def blocks(self) -> list:
        return [self.data[s] for s in self.partition.slices()]

    def __eq__(self, other):
        return (isinstance(other, StateBatch) and other.partition == self.partition
                and np.array_equal(other.data, self.data))


# --- the map ---------------------------------------------------------------


def _as_activation_list(post_act, n):
    if post_act is None:
        return (Activation.IDENTITY,) * n
    post_act = tuple(Activation(a) for a in post_act)
    if len(post_act) != n:
        raise ValueError(f"expected {n} post activations, got {len(post_act)}")
    return post_act


@dataclass(frozen=True, eq=False)
class BlockMap:
    partition: BlockPartition
    cells: tuple
    post_act: tuple = field(default=None)

    def __post_init__(self):
        n = len(self.partition)
        cells = tuple(tuple(row) for row in self.cells)
        if len(cells) != n or any(len(row) != n for row in cells):
            raise MapFormatError(f"cell grid must be {n}x{n}")
        for i, row in enumerate(cells):
            for j, cell in enumerate(row):
                if not isinstance(cell, Cell):
                    raise MapFormatError(f"not a cell: {cell!r}", (i, j))
                try:
                    cell.check_dims(self.partition[j], self.partition[i])
                except ValueError as exc:
                    raise MapFormatError(str(exc), (i, j)) from None
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "post_act", _as_activation_list(self.post_act, n))

    @classmethod
    def from_dict(cls, partition, cells: dict, post_act=None) -> "BlockMap":
        """Build from ``{(row, col): cell}``; unlisted cells are :class:`Zero`."""
        partition = partition if isinstance(partition, BlockPartition) else BlockPartition(partition)
        n = len(partition)
        grid = [[Zero() for _ in range(n)] for _ in range(n)]
        for (i, j), cell in cells.items():
            grid[i][j] = cell
        return cls(partition, grid, post_act)

    @property
    def n_blocks(self) -> int:
        return len(self.partition)

    def nonzero(self) -> list:
        """``(row, col, cell)`` for every non-Zero cell in row-major order."""
        return [(i, j, c) for i, row in enumerate(self.cells)
                for j, c in enumerate(row) if not c.is_zero]

    def replace(self, updates: dict, post_act=None) -> "BlockMap":
        grid = [list(row) for row in self.cells]
        for (i, j), cell in updates.items():
            grid[i][j] = cell
        return BlockMap(self.partition, grid,
                        self.post_act if post_act is None else post_act)

    @property
    def is_sequential1d(self) -> bool:
        return all(j == 0 for _, j, _ in self.nonzero())

    @property
    def kind(self) -> str:
        """``"Sequential1D"`` when every non-Zero cell sits in column 0."""
        return "Sequential1D" if self.is_sequential1d else "Sequential2D"

    @property
    def is_linear(self) -> bool:
        return (all(c.is_linear for _, _, c in self.nonzero())
                and all(a is Activation.IDENTITY for a in self.post_act))

    def __eq__(self, other):
        return (isinstance(other, BlockMap) and other.partition == self.partition
                and other.post_act == self.post_act and other.cells == self.cells)

    def __call__(self, v):
        if isinstance(v, StateBatch):
            return apply_batch(self, v)
        return apply(self, v)


def _apply_blocks(m: BlockMap, blocks: list) -> list:
    out = []
    for i, row in enumerate(m.cells):
        acc = None
        for j, cell in enumerate(row):
            if cell.is_zero:
                continue
            y = cell(blocks[j], m.partition[i])
            acc = y if acc is None else acc + y
        if acc is None:
            acc = np.zeros((m.partition[i],) + blocks[0].shape[1:])
        out.append(m.post_act[i](acc))
    return out


def apply(m: BlockMap, v: StateVector) -> StateVector:
    if v.partition != m.partition:
        raise PartitionMismatchError(
            f"vector partition {v.partition.sizes} != map partition {m.partition.sizes}")
    return StateVector(m.partition, np.concatenate(_apply_blocks(m, v.blocks())))


def apply_batch(m: BlockMap, b: StateBatch) -> StateBatch:
    if b.partition != m.partition:
        raise PartitionMismatchError(
            f"batch partition {b.partition.sizes} != map partition {m.partition.sizes}")
    return StateBatch(m.partition, np.concatenate(_apply_blocks(m, b.blocks()), axis=0))


def iterate(m: BlockMap, v0, k: int) -> list:
    """``[v0, M(v0), M(M(v0)), ...]`` with ``k + 1`` entries."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    out = [v0]
    for _ in range(k):
        out.append(m(out[-1]))
    return out


# --- JSON documents ----------------------------------------------------------

_KINDS = ("zero", "scaled_identity", "affine")


def map_to_dict(m: BlockMap) -> dict:
    cells = []
    for i, j, cell in m.nonzero():
        entry = {"row": i, "col": j}
        if isinstance(cell, ScaledIdentity):
            entry.update(kind="scaled_identity", scale=cell.scale)
        else:
            entry.update(kind="affine", weight=cell.weight.tolist(), act=cell.act.value)
            if cell.bias is not None:
                entry["bias"] = cell.bias.tolist()
        cells.append(entry)
    return {
        "partition": list(m.partition.sizes),
        "post_act": [a.value for a in m.post_act],
        "cells": cells,
    }


def serialize(m: BlockMap, indent=None) -> str:
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(map_to_dict(m), indent=indent)


def _cell_from_entry(entry, coords):
    kind = entry.get("kind")
    if kind not in _KINDS:
        raise MapFormatError(f"unknown kind {kind!r}", coords)
    try:
        if kind == "zero":
            return Zero()
        if kind == "scaled_identity":
            return ScaledIdentity(float(entry.get("scale", 1.0)))
        if "weight" not in entry:
            raise MapFormatError("affine cell without weight", coords)
        return Affine(np.array(entry["weight"], dtype=np.float64),
                      entry.get("bias"), entry.get("act", "identity"))
    except MapFormatError:
        raise
    except (TypeError, ValueError) as exc:
        raise MapFormatError(str(exc), coords) from None


def map_from_dict(doc: dict) -> BlockMap:
    if not isinstance(doc, dict):
        raise MapFormatError("map document must be a JSON object")
    try:
        partition = BlockPartition(doc["partition"])
    except KeyError:
        raise MapFormatError("missing 'partition'") from None
    except (TypeError, ValueError) as exc:
        raise MapFormatError(f"bad partition: {exc}") from None
    n = len(partition)
    grid = [[Zero() for _ in range(n)] for _ in range(n)]
    seen = set()
    for entry in doc.get("cells", []):
        try:
            i, j = int(entry["row"]), int(entry["col"])
        except (KeyError, TypeError, ValueError):
            raise MapFormatError(f"cell entry without integer row/col: {entry!r}") from None
        if not (0 <= i < n and 0 <= j < n):
            raise MapFormatError("outside the grid", (i, j))
        if (i, j) in seen:
            raise MapFormatError("listed twice", (i, j))
        seen.add((i, j))
        cell = _cell_from_entry(entry, (i, j))
        try:
            cell.check_dims(partition[j], partition[i])
        except ValueError as exc:
            raise MapFormatError(str(exc), (i, j)) from None
        grid[i][j] = cell
    try:
        post_act = _as_activation_list(doc.get("post_act"), n)
    except ValueError as exc:
        raise MapFormatError(f"bad post_act: {exc}") from None
    return BlockMap(partition, grid, post_act)


def deserialize(text: str) -> BlockMap:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MapFormatError(f"invalid JSON: {exc}") from None
    return map_from_dict(doc)
