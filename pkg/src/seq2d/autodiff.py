"""Reverse-mode gradients through ``T`` applications of one shared block map."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blockmap import (
    Activation,
    Affine,
    BlockMap,
    PartitionMismatchError,
    ScaledIdentity,
    StateBatch,
)

__all__ = [
    "AdamState",
    "NonFiniteActivationError",
    "ParamEntry",
    "ParamVector",
    "Tape",
    "accuracy",
    "adam_step",
    "backward",
    "forward_unrolled",
    "loss_xent",
    "softmax",
]


class NonFiniteActivationError(ArithmeticError):
    def __init__(self, iteration):
        super().__init__(f"non-finite activations at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class ParamEntry:
    row: int
    col: int
    role: str  # "weight" | "bias" | "scale"
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat trainable scalars plus the index locating them in the cell grid."""

    values: np.ndarray
    index: tuple

    @classmethod
    def pack(cls, m: BlockMap, cells=None, scales=()) -> "ParamVector":
        """Collect parameters of ``cells`` (default: every Affine cell).

        Scaled-identity cells contribute their scale only when listed in ``scales``.
        """
        if cells is None:
            cells = [(i, j) for i, j, c in m.nonzero() if isinstance(c, Affine)]
        wanted = set(map(tuple, cells)) | set(map(tuple, scales))
        index, chunks, offset = [], [], 0
        for i, j, cell in m.nonzero():
            if (i, j) not in wanted:
                continue
            if isinstance(cell, Affine) and (i, j) in set(map(tuple, cells)):
                parts = [("weight", cell.weight)]
                if cell.bias is not None:
                    parts.append(("bias", cell.bias))
            elif isinstance(cell, ScaledIdentity) and (i, j) in set(map(tuple, scales)):
                parts = [("scale", np.array(cell.scale))]
            else:
                raise ValueError(f"cell ({i},{j}) has no trainable parameters of that kind")
            for role, arr in parts:
                index.append(ParamEntry(i, j, role, offset, tuple(arr.shape)))
                chunks.append(np.asarray(arr, dtype=np.float64).reshape(-1))
                offset += arr.size
        missing = wanted - {(e.row, e.col) for e in index}
        if missing:
            raise ValueError(f"cells {sorted(missing)} are Zero or absent")
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, tuple(index))

    def __len__(self):
        return self.values.shape[0]

    def with_values(self, values) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ValueError(f"expected {self.values.shape} values, got {values.shape}")
        return ParamVector(values, self.index)

    def view(self, entry: ParamEntry) -> np.ndarray:
        return self.values[entry.offset: entry.offset + entry.size].reshape(entry.shape)

    def unpack(self, m: BlockMap) -> BlockMap:
        """``m`` with every indexed parameter replaced by this vector's values."""
        per_cell = {}
        for e in self.index:
            per_cell.setdefault((e.row, e.col), {})[e.role] = self.view(e)
        updates = {}
        for (i, j), roles in per_cell.items():
            cell = m.cells[i][j]
            if isinstance(cell, Affine):
                if "weight" not in roles or roles["weight"].shape != cell.weight.shape:
                    raise ValueError(f"parameter index does not match cell ({i},{j})")
                updates[(i, j)] = Affine(roles["weight"],
                                         roles.get("bias", cell.bias), cell.act)
            elif isinstance(cell, ScaledIdentity) and "scale" in roles:
                updates[(i, j)] = ScaledIdentity(float(roles["scale"]))
            else:
                raise ValueError(f"parameter index does not match cell ({i},{j})")
        return m.replace(updates)

    def coords(self) -> set:
        return {(e.row, e.col) for e in self.index}


@dataclass
class _Step:
    inputs: list
    cell_out: dict
    row_out: list


@dataclass
class Tape:
    map: BlockMap
    params: ParamVector | None
    steps: list = field(default_factory=list)
    n_out_blocks: int = 1


def _logits(blocks: list, n_out_blocks: int) -> np.ndarray:
    if n_out_blocks == 1:
        return blocks[-1]
    return np.concatenate(blocks[-n_out_blocks:], axis=0)


def _forward_blocks(m: BlockMap, blocks: list, iterations: int, record: bool):
    steps = []
    parts = m.partition
    nz_rows = [[(j, c) for j, c in enumerate(row) if not c.is_zero] for row in m.cells]
    n = blocks[0].shape[1]
    for t in range(iterations):
        cell_out, out = {}, []
        for i, row in enumerate(nz_rows):
            acc = None
            for j, cell in row:
                if isinstance(cell, ScaledIdentity):
                    y = cell.scale * blocks[j]
                else:
                    y = cell.weight @ blocks[j]
                    if cell.bias is not None:
                        y += cell.bias[:, None]
                    if cell.act is not Activation.IDENTITY:
                        y = cell.act(y)
                        if record:
                            cell_out[(i, j)] = y
                acc = y if acc is None else acc + y
            if acc is None:
                acc = np.zeros((parts[i], n))
            out.append(m.post_act[i](acc))
        if not all(np.all(np.isfinite(b)) for b in out):
            raise NonFiniteActivationError(t + 1)
        if record:
            steps.append(_Step(blocks, cell_out, out))
        blocks = out
    return blocks, steps


def forward_unrolled(m: BlockMap, params: ParamVector | None, batch: StateBatch,
                     iterations: int, output_dim: int | None = None):
    """Apply the map ``iterations`` times; returns ``(logits, tape)``.

    Logits are the last block of the final iterate, or the trailing
    ``output_dim`` entries when the output spans several blocks.
    """
    if batch.partition != m.partition:
        raise PartitionMismatchError("batch does not match the map partition")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    n_out = 1 if output_dim is None else m.partition.suffix_blocks(output_dim)
    if params is not None:
        m = params.unpack(m)
    blocks, steps = _forward_blocks(m, [np.array(b) for b in batch.blocks()], iterations, True)
    return _logits(blocks, n_out), Tape(m, params, steps, n_out)


def backward(tape: Tape, upstream: np.ndarray) -> ParamVector:
    """Gradient of the loss with respect to ``tape.params``.

    Each shared cell collects the sum of its contributions from every iteration.
    """
    m, params = tape.map, tape.params
    if params is None:
        params = ParamVector.pack(m)
    if not tape.steps:
        raise ValueError("empty tape")
    upstream = np.asarray(upstream, dtype=np.float64)
    n_blocks = m.n_blocks
    if upstream.shape != _logits(tape.steps[-1].row_out, tape.n_out_blocks).shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match logits")
    grads = {(e.row, e.col, e.role): np.zeros(e.shape) for e in params.index}
    for e in params.index:
        cell = m.cells[e.row][e.col]
        ok = ((e.role in ("weight", "bias") and isinstance(cell, Affine))
              or (e.role == "scale" and isinstance(cell, ScaledIdentity)))
        if not ok:
            raise ValueError(f"tape/params mismatch at cell ({e.row},{e.col})")
    trainable = params.coords()
    nz_rows = [[(j, c) for j, c in enumerate(row) if not c.is_zero] for row in m.cells]

    g = [None] * n_blocks
    cut = np.cumsum([m.partition[i] for i in range(n_blocks - tape.n_out_blocks, n_blocks)])[:-1]
    g[n_blocks - tape.n_out_blocks:] = np.split(upstream, cut, axis=0)
    for t in range(len(tape.steps) - 1, -1, -1):
        step = tape.steps[t]
        g_in = [None] * n_blocks
        for i in range(n_blocks):
            if g[i] is None:
                continue
            g_s = g[i]
            if m.post_act[i] is not Activation.IDENTITY:
                g_s = g_s * m.post_act[i].grad_from_output(step.row_out[i])
            for j, cell in nz_rows[i]:
                v_j = step.inputs[j]
                if isinstance(cell, ScaledIdentity):
                    contrib = cell.scale * g_s
                    if (i, j) in trainable:
                        grads[(i, j, "scale")] += np.sum(g_s * v_j)
                else:
                    g_z = g_s
                    if cell.act is not Activation.IDENTITY:
                        g_z = g_s * cell.act.grad_from_output(step.cell_out[(i, j)])
                    if (i, j) in trainable:
                        grads[(i, j, "weight")] += g_z @ v_j.T
                        if cell.bias is not None:
                            grads[(i, j, "bias")] += g_z.sum(axis=1)
                    if t == 0:
                        continue
                    contrib = cell.weight.T @ g_z
                g_in[j] = contrib if g_in[j] is None else g_in[j] + contrib
        g = g_in
    flat = np.zeros(len(params))
    for e in params.index:
        flat[e.offset: e.offset + e.size] = np.reshape(grads[(e.row, e.col, e.role)], -1)
    return params.with_values(flat)


# --- loss, metrics, optimizer --------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    return labels.astype(np.int64)


def loss_xent(logits: np.ndarray, labels, return_grad: bool = False):
    """Mean softmax cross-entropy; ``logits`` is (classes, examples)."""
    labels = _check_labels(labels, logits.shape[0])
    n = logits.shape[1]
    z = logits - logits.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=0))
    loss = float(np.mean(log_norm - z[labels, np.arange(n)]))
    if not return_grad:
        return loss
    grad = np.exp(z - log_norm)
    grad[labels, np.arange(n)] -= 1.0
    return loss, grad / n


def accuracy(logits: np.ndarray, labels) -> float:
    # argmax picks the lowest class index on ties
    labels = _check_labels(labels, logits.shape[0])
    return float(np.mean(np.argmax(logits, axis=0) == labels))


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("params, grad and optimizer state must share one shape")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)
