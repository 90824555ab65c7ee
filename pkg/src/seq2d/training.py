"""Mini-batch training of an iterated block map."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    AdamState,
    NonFiniteActivationError,
    ParamVector,
    _forward_blocks,
    _logits,
    accuracy,
    adam_step,
    backward,
    forward_unrolled,
    loss_xent,
)
from .blockmap import BlockMap, ScaledIdentity, StateBatch
from .constructors import TileGrid

__all__ = ["AdamConfig", "Continuation", "TrainConfig", "TrainResult", "evaluate",
           "predict_logits", "train"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class Continuation:
    """Linear schedule for a scheduled (not trained) scaled-identity cell.

    ``cell`` defaults to the corner ``(0, 0)`` for epsilon and to
    ``(last, 0)`` for eta.
    """

    param: str
    start: float
    end: float
    cell: tuple | None = None

    def __post_init__(self):
        if self.param not in ("epsilon", "eta"):
            raise ValueError(f"continuation param must be epsilon or eta, got {self.param!r}")

    def value(self, epoch: int, epochs: int) -> float:
        if epochs <= 1:
            return float(self.start)
        return float(self.start + (self.end - self.start) * epoch / (epochs - 1))

    def target(self, m: BlockMap) -> tuple:
        if self.cell is not None:
            return tuple(self.cell)
        return (0, 0) if self.param == "epsilon" else (m.n_blocks - 1, 0)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    continuation: Continuation | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.optimizer.lr > 0:
            raise ValueError("learning rate must be > 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        opt = AdamConfig(**doc.pop("optimizer", {}) or {})
        cont = doc.pop("continuation", None)
        cont = Continuation(**cont) if cont else None
        return cls(optimizer=opt, continuation=cont, **doc)


@dataclass
class TrainResult:
    log: list
    params: ParamVector
    map: BlockMap
    schedule: list = field(default_factory=list)


def _trainable_cells(m: BlockMap, trainable):
    if trainable is None:
        return None
    if isinstance(trainable, TileGrid):
        if trainable.partition != m.partition:
            raise ValueError("tile grid partition does not match the map")
        return trainable.trainable_tiles()
    return [tuple(c) for c in trainable]


def predict_logits(m: BlockMap, X: np.ndarray, iterations: int, output_dim: int | None = None,
                   batch_size: int = 1024) -> np.ndarray:
    """Logits (classes x examples) of the final iterate for inputs ``X`` (rows)."""
    X = np.asarray(X, dtype=np.float64)
    n_out = 1 if output_dim is None else m.partition.suffix_blocks(output_dim)
    m.partition.prefix_blocks(X.shape[1])
    cols = []
    for start in range(0, X.shape[0], batch_size):
        batch = StateBatch.from_inputs(m.partition, X[start:start + batch_size])
        out, _ = _forward_blocks(m, [np.array(b) for b in batch.blocks()], iterations, False)
        cols.append(_logits(out, n_out))
    return np.concatenate(cols, axis=1)


def evaluate(m: BlockMap, X: np.ndarray, y, iterations: int, output_dim: int | None = None,
             batch_size: int = 1024):
    """``(loss, accuracy)`` of the final iterate's output on ``(X, y)``."""
    logits = predict_logits(m, X, iterations, output_dim, batch_size)
    return loss_xent(logits, y), accuracy(logits, y)


def train(m: BlockMap, trainable, data, cfg: TrainConfig, eval_sets: dict | None = None,
          run_id: int = 0, model: str = "layered", output_dim: int | None = None) -> TrainResult:
    """Train the cells named by ``trainable`` (a TileGrid, coordinates, or None for all Affine).

    ``data`` is ``(X, y)`` with examples as rows of ``X``. The log holds one row
    per ``(epoch, split)`` evaluated after each epoch.
    """
    X, y = data
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise ValueError("training data is empty")
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y lengths differ")
    m.partition.prefix_blocks(X.shape[1])
    if output_dim is None and isinstance(trainable, TileGrid):
        output_dim = trainable.dims[-1]
    eval_sets = {"train": (X, y), **(eval_sets or {})}

    cont = cfg.continuation
    if cont is not None:
        target = cont.target(m)
        if not isinstance(m.cells[target[0]][target[1]], ScaledIdentity):
            raise ValueError(f"continuation cell {target} is not a scaled identity")

    params = ParamVector.pack(m, _trainable_cells(m, trainable))
    state = AdamState.zeros(len(params))
    opt = cfg.optimizer
    rng = np.random.default_rng(cfg.seed)
    log, schedule = [], []
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        if cont is not None:
            scale = cont.value(epoch, cfg.epochs)
            m = m.replace({target: ScaledIdentity(scale)})
            schedule.append(scale)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = StateBatch.from_inputs(m.partition, X[idx])
            logits, tape = forward_unrolled(m, params, batch, cfg.iterations, output_dim)
            _, upstream = loss_xent(logits, y[idx], return_grad=True)
            grad = backward(tape, upstream)
            values, state = adam_step(params.values, grad.values, state,
                                      opt.lr, opt.beta1, opt.beta2, opt.eps)
            params = params.with_values(values)
        current = params.unpack(m)
        for split, (Xs, ys) in eval_sets.items():
            loss, acc = evaluate(current, np.asarray(Xs, dtype=np.float64), np.asarray(ys),
                                 cfg.iterations, output_dim)
            if not np.isfinite(loss):
                raise NonFiniteActivationError(cfg.iterations)
            log.append({"run_id": run_id, "model": model, "seed": cfg.seed,
                        "epoch": epoch + 1, "split": split, "loss": loss, "accuracy": acc})
        logger.info("run %s epoch %d: %s", run_id, epoch + 1,
                    ", ".join(f"{r['split']} acc={r['accuracy']:.4f}" for r in log[-len(eval_sets):]))
    return TrainResult(log, params, params.unpack(m), schedule)
