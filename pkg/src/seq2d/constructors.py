"""Builders for the named iterated maps and for tiled layered/random architectures."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .blockmap import (
    Activation,
    Affine,
    BlockMap,
    BlockPartition,
    Cell,
    ScaledIdentity,
    Zero,
)

__all__ = [
    "MlpLayerSpec",
    "RnnSpec",
    "TileGrid",
    "build_tiled_map",
    "make_above_map",
    "make_diag_map",
    "make_epsilon_map",
    "make_layered_tiling",
    "make_mlp_map",
    "make_random_tiling",
    "make_rnn_map",
    "make_skip_map",
    "logit_depth",
    "make_superdiag_map",
    "random_mlp_spec",
]


@dataclass(frozen=True)
class MlpLayerSpec:
    """Layer dims ``[d_0, ..., d_T]`` with ``W_i`` of shape ``(d_i, d_{i-1})``."""

    dims: tuple
    weights: tuple
    biases: tuple = None
    act: Activation = Activation.RELU

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 2:
            raise ValueError("an MLP needs at least one layer (T >= 1)")
        weights = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        if len(weights) != len(dims) - 1:
            raise ValueError(f"{len(dims) - 1} layers need {len(dims) - 1} weights, got {len(weights)}")
        for i, w in enumerate(weights, start=1):
            if w.shape != (dims[i], dims[i - 1]):
                raise ValueError(
                    f"W_{i} has shape {w.shape}, dimension chain needs {(dims[i], dims[i - 1])}")
        biases = self.biases
        if biases is None:
            biases = (None,) * len(weights)
        biases = tuple(None if b is None else np.asarray(b, dtype=np.float64).reshape(-1)
                       for b in biases)
        if len(biases) != len(weights):
            raise ValueError("one bias (or None) per layer")
        for i, b in enumerate(biases, start=1):
            if b is not None and b.shape != (dims[i],):
                raise ValueError(f"b_{i} has length {b.shape[0]}, expected {dims[i]}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "act", Activation(self.act))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def layer_cells(self) -> list:
        return [Affine(w, b, self.act) for w, b in zip(self.weights, self.biases)]

    def forward(self, h0: np.ndarray) -> np.ndarray:
        """Plain nested evaluation ``f_T(...f_1(h0))``; columns are examples."""
        h = np.asarray(h0, dtype=np.float64)
        for w, b in zip(self.weights, self.biases):
            z = w @ h
            if b is not None:
                z = z + (b if h.ndim == 1 else b[:, None])
            h = self.act(z)
        return h


def random_mlp_spec(rng, max_dim=8, max_layers=5, acts=("relu", "tanh"), bias=True):
    n_layers = int(rng.integers(1, max_layers + 1))
    dims = rng.integers(1, max_dim + 1, size=n_layers + 1).tolist()
    weights = [rng.standard_normal((dims[i], dims[i - 1])) for i in range(1, len(dims))]
    biases = [rng.standard_normal(d) if bias else None for d in dims[1:]]
    return MlpLayerSpec(dims, weights, biases, acts[int(rng.integers(len(acts)))])


@dataclass(frozen=True)
class RnnSpec:
    """``h_{t+1} = act(W_x x_{t+1} + W_h h_t + b)`` with forcing ``x_1..x_T``."""

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray
    forcing: tuple
    act: Activation = Activation.TANH

    def __post_init__(self):
        w_x = np.atleast_2d(np.asarray(self.w_x, dtype=np.float64))
        w_h = np.atleast_2d(np.asarray(self.w_h, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64)).reshape(-1)
        n = w_h.shape[0]
        if w_h.shape != (n, n):
            raise ValueError(f"W_h must be square, got {w_h.shape}")
        if w_x.shape[0] != n or b.shape != (n,):
            raise ValueError(f"W_x {w_x.shape} and b {b.shape} must have {n} rows")
        forcing = tuple(np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(-1)
                        for x in self.forcing)
        if not forcing:
            raise ValueError("forcing needs at least one step (T >= 1)")
        for t, x in enumerate(forcing, start=1):
            if x.shape != (w_x.shape[1],):
                raise ValueError(f"x_{t} has length {x.shape[0]}, W_x expects {w_x.shape[1]}")
        for name, val in (("w_x", w_x), ("w_h", w_h), ("b", b), ("forcing", forcing)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "act", Activation(self.act))

    @property
    def state_dim(self) -> int:
        return self.w_h.shape[0]

    def recurrence(self, h0) -> np.ndarray:
        """Direct unrolled recurrence; returns ``h_T``."""
        h = np.asarray(h0, dtype=np.float64).reshape(-1)
        for x in self.forcing:
            h = self.act(self.w_x @ x + self.w_h @ h + self.b)
        return h


def _subdiagonal_map(dims, layer_cells, corner: Cell, extra=None) -> BlockMap:
    cells = {(0, 0): corner}
    for t, cell in enumerate(layer_cells, start=1):
        cells[(t, t - 1)] = cell
    cells.update(extra or {})
    return BlockMap.from_dict(BlockPartition(dims), cells)


def make_mlp_map(spec: MlpLayerSpec, identity_corner: bool = False) -> BlockMap:
    corner = ScaledIdentity(1.0) if identity_corner else Zero()
    return _subdiagonal_map(spec.dims, spec.layer_cells(), corner)


def make_rnn_map(spec: RnnSpec) -> BlockMap:
    """Lifted RNN map with the forcing folded into per-step biases."""
    cells = [Affine(spec.w_h, spec.b + spec.w_x @ x, spec.act) for x in spec.forcing]
    dims = [spec.state_dim] * (len(spec.forcing) + 1)
    return _subdiagonal_map(dims, cells, Zero())


def make_epsilon_map(spec: MlpLayerSpec, epsilon: float) -> BlockMap:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    return _subdiagonal_map(spec.dims, spec.layer_cells(), ScaledIdentity(epsilon))


def _scale_cell(cell: Cell, eta: float) -> Cell:
    if isinstance(cell, ScaledIdentity):
        return ScaledIdentity(eta * cell.scale)
    if isinstance(cell, Affine):
        return cell.scaled(eta)
    return Zero()


def make_skip_map(spec: MlpLayerSpec, skip: Cell, eta: float = 1.0) -> BlockMap:
    """SK(eta): the identity-corner MLP map plus ``eta * skip`` from block 0 to the last block."""
    last = spec.n_layers
    if last < 2:
        raise ValueError("a skip cell needs at least two layers; with one it would replace f1")
    try:
        skip.check_dims(spec.dims[0], spec.dims[last])
    except ValueError as exc:
        raise ValueError(f"skip cell does not map block 0 to block {last}: {exc}") from None
    return _subdiagonal_map(spec.dims, spec.layer_cells(), ScaledIdentity(1.0),
                            {(last, 0): _scale_cell(skip, eta)})


def make_above_map(spec: MlpLayerSpec, s: Cell) -> BlockMap:
    """Identity-corner MLP map with ``s`` above the diagonal at (1, 2)."""
    if spec.n_layers < 2:
        raise ValueError("an above-diagonal cell at (1, 2) needs at least two layers")
    try:
        s.check_dims(spec.dims[2], spec.dims[1])
    except ValueError as exc:
        raise ValueError(f"cell (1,2) does not map block 2 to block 1: {exc}") from None
    return _subdiagonal_map(spec.dims, spec.layer_cells(), ScaledIdentity(1.0), {(1, 2): s})


def _cell_dims(cell: Cell, default_in=None, default_out=None):
    if isinstance(cell, Affine):
        return cell.in_dim, cell.out_dim
    return default_in, default_out


def _chain_dims(f1, f2, f3, h0_dim=None):
    d0, d1 = _cell_dims(f1, h0_dim, h0_dim)
    d1b, d2 = _cell_dims(f2, d1, d1)
    d2b, d3 = _cell_dims(f3, d2, d2)
    dims = [d0, d1 if d1 is not None else d1b, d2 if d2 is not None else d2b, d3]
    # propagate through square (scaled identity / zero) cells
    for i in range(1, 4):
        if dims[i] is None:
            dims[i] = dims[i - 1]
    for i in range(2, -1, -1):
        if dims[i] is None:
            dims[i] = dims[i + 1]
    if any(d is None for d in dims):
        raise ValueError("cannot infer block sizes; pass h0_dim or use affine cells")
    return dims


def make_diag_map(f1: Cell, f2: Cell, f3: Cell, s: Cell, h0_dim: int | None = None) -> BlockMap:
    """M_d: identity corner, ``s`` on the diagonal at (1, 1)."""
    dims = _chain_dims(f1, f2, f3, h0_dim)
    try:
        s.check_dims(dims[1], dims[1])
    except ValueError as exc:
        raise ValueError(f"diagonal cell must be square on block 1: {exc}") from None
    return _subdiagonal_map(dims, [f1, f2, f3], ScaledIdentity(1.0), {(1, 1): s})


def make_superdiag_map(f1: Cell, f2: Cell, f3: Cell, s: Cell, h0_dim: int | None = None) -> BlockMap:
    """M_ad: identity corner, ``s`` above the diagonal at (1, 2)."""
    dims = _chain_dims(f1, f2, f3, h0_dim)
    try:
        s.check_dims(dims[2], dims[1])
    except ValueError as exc:
        raise ValueError(f"cell (1,2) does not map block 2 to block 1: {exc}") from None
    return _subdiagonal_map(dims, [f1, f2, f3], ScaledIdentity(1.0), {(1, 2): s})


# --- tilings -----------------------------------------------------------------


def _tile_sizes(d: int, tile: int) -> list:
    full, rest = divmod(d, tile)
    return [tile] * full + ([rest] if rest else [])


@dataclass(frozen=True, eq=False)
class TileGrid:
    """Layer dims cut into ``tile``-sized blocks plus a trainable-tile mask.

    ``layer_of[k]`` is the layer block that tile row/column ``k`` belongs to.
    """

    dims: tuple
    tile: int
    mask: np.ndarray
    seed: int | None = None
    architecture: str = "layered"
    partition: BlockPartition = field(init=False)
    layer_of: tuple = field(init=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"bad layer dims {dims}")
        if int(self.tile) < 1:
            raise ValueError("tile must be >= 1")
        sizes, layer_of = [], []
        for layer, d in enumerate(dims):
            pieces = _tile_sizes(d, int(self.tile))
            sizes += pieces
            layer_of += [layer] * len(pieces)
        mask = np.array(self.mask, dtype=bool)
        mask.flags.writeable = False
        if mask.shape != (len(sizes), len(sizes)):
            raise ValueError(f"mask shape {mask.shape} != grid shape {(len(sizes),) * 2}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "tile", int(self.tile))
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "partition", BlockPartition(sizes))
        object.__setattr__(self, "layer_of", tuple(layer_of))
        if np.any(mask & self.corner_mask()):
            raise ValueError("mask marks tiles in the frozen identity rows")

    @property
    def shape(self):
        return self.mask.shape

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def corner_mask(self) -> np.ndarray:
        """Tiles in the rows of block 0, which stay ``[I, 0, ..., 0]``."""
        rows = np.array(self.layer_of) == 0
        return np.repeat(rows[:, None], len(rows), axis=1)

    def eligible_mask(self) -> np.ndarray:
        return ~self.corner_mask()

    def tile_shape(self, i: int, j: int) -> tuple:
        return self.partition[i], self.partition[j]

    def trainable_tiles(self) -> list:
        return [tuple(ix) for ix in np.argwhere(self.mask).tolist()]

    @property
    def n_trainable_tiles(self) -> int:
        return int(self.mask.sum())

    @property
    def n_trainable_weights(self) -> int:
        sizes = np.array(self.partition.sizes)
        return int((np.outer(sizes, sizes) * self.mask).sum())

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "tile": self.tile,
                "mask": self.mask.tolist(), "seed": self.seed,
                "architecture": self.architecture}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "TileGrid":
        try:
            return cls(doc["dims"], doc["tile"], doc["mask"], doc.get("seed"),
                       doc.get("architecture", "layered"))
        except KeyError as exc:
            raise ValueError(f"tile grid document missing {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "TileGrid":
        return cls.from_dict(json.loads(text))


def make_layered_tiling(dims, tile: int = 100) -> TileGrid:
    """Trainable tiles exactly covering the first-subdiagonal layer blocks."""
    probe = TileGrid(dims, tile, _empty_mask(dims, tile))
    layer_of = np.array(probe.layer_of)
    mask = (layer_of[:, None] - layer_of[None, :]) == 1
    return TileGrid(dims, tile, mask, None, "layered")


def _empty_mask(dims, tile):
    n = sum(len(_tile_sizes(int(d), int(tile))) for d in dims)
    return np.zeros((n, n), dtype=bool)


def logit_depth(grid: TileGrid, max_iterations: int = 64) -> int | None:
    """Fewest iterations after which the output layer sees the input through a hidden tile.

    ``None`` means the output never depends on any hidden block, so the
    network reduces to a readout of raw input tiles.
    """
    layer = np.array(grid.layer_of)
    mask = grid.mask
    hidden = (layer > 0) & (layer < grid.n_layers)
    output = layer == grid.n_layers
    seen = layer == 0          # depends on the input at all
    deep = np.zeros_like(seen)  # depends on it via some hidden block
    for t in range(1, max_iterations + 1):
        seen, deep = ((layer == 0) | mask[:, seen].any(axis=1),
                      mask[:, deep | (seen & hidden)].any(axis=1))
        if np.any(deep & output):
            return t
    return None


def make_random_tiling(dims, tile: int = 100, budget: int | None = None, seed: int = 0,
                       match: str = "tiles", max_depth: int | None = None,
                       max_draws: int = 1000) -> TileGrid:
    """Random trainable-tile placement.

    ``budget`` tiles (default: the layered count) are drawn uniformly without
    replacement from all eligible positions. With ``match="shape"`` the draw
    is instead stratified by tile shape, each shape appearing as often as in
    the layered grid, so trainable weight counts agree exactly even when the
    tiles are ragged.

    ``max_depth`` rejects and redraws masks whose :func:`logit_depth` is
    missing or larger; accepted masks are uniform over the valid ones.
    """
    if match not in ("tiles", "shape"):
        raise ValueError(f"match must be 'tiles' or 'shape', got {match!r}")
    layered = make_layered_tiling(dims, tile)
    eligible = layered.eligible_mask()
    positions = np.argwhere(eligible)
    if budget is None:
        budget = layered.n_trainable_tiles
    elif match == "shape":
        raise ValueError("match='shape' fixes the budget to the layered count")
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if budget > len(positions):
        raise ValueError(f"budget {budget} exceeds {len(positions)} eligible tiles")
    sizes = np.array(layered.partition.sizes)
    strata = {}
    if match == "shape":
        for i, j in layered.trainable_tiles():
            key = (sizes[i], sizes[j])
            strata[key] = strata.get(key, 0) + 1
    rng = np.random.default_rng(seed)
    for _ in range(max_draws):
        mask = np.zeros_like(eligible)
        if match == "tiles":
            chosen = rng.choice(len(positions), size=int(budget), replace=False)
            mask[tuple(positions[chosen].T)] = True
        else:
            for key in sorted(strata):
                pool = positions[(sizes[positions[:, 0]] == key[0])
                                 & (sizes[positions[:, 1]] == key[1])]
                chosen = rng.choice(len(pool), size=strata[key], replace=False)
                mask[tuple(pool[chosen].T)] = True
        grid = TileGrid(dims, tile, mask, seed, "random")
        if max_depth is None:
            return grid
        depth = logit_depth(grid, max_depth)
        if depth is not None:
            return grid
    raise ValueError(f"no mask with logit depth <= {max_depth} in {max_draws} draws")


def _fan_in(grid: TileGrid) -> np.ndarray:
    sizes = np.array(grid.partition.sizes)
    return (grid.mask * sizes[None, :]).sum(axis=1)


def build_tiled_map(grid: TileGrid, seed: int = 0, cell_act=None, row_act=None,
                    bias: bool | None = None, output_act="identity") -> BlockMap:
    """Materialize a :class:`TileGrid` as a block map with freshly initialized tiles.

    Layered grids default to linear tiles, a per-layer bias on the first tile of
    each row, and ReLU applied after the row sum, which reproduces the plain
    MLP. Random grids default to per-tile ReLU without bias and an identity
    row activation. Rows of the final layer (the logits) use ``output_act``
    in place of the ReLU, both per tile and after the row sum; pass ``None``
    to keep ReLU there too. Weights are He-uniform with bound ``sqrt(6 / fan_in)``
    where ``fan_in`` counts every trainable input feeding the tile row; each
    tile draws from its own generator keyed by ``(seed, row, col)``.
    """
    layered = grid.architecture == "layered"
    cell_act = Activation(cell_act or ("identity" if layered else "relu"))
    row_act = Activation(row_act or ("relu" if layered else "identity"))
    if bias is None:
        bias = layered
    out_layer = grid.n_layers
    out_act = None if output_act is None else Activation(output_act)
    fan_in = _fan_in(grid)
    cells = {}
    for i, j in [(k, k) for k in range(len(grid.partition)) if grid.layer_of[k] == 0]:
        cells[(i, j)] = ScaledIdentity(1.0)
    has_bias = set()
    for i, j in grid.trainable_tiles():
        rng = np.random.default_rng([int(seed), i, j])
        bound = math.sqrt(6.0 / fan_in[i])
        w = rng.uniform(-bound, bound, size=grid.tile_shape(i, j))
        b = None
        if bias and i not in has_bias:
            b = np.zeros(grid.partition[i])
            has_bias.add(i)
        act = cell_act
        if out_act is not None and grid.layer_of[i] == out_layer:
            act = out_act
        cells[(i, j)] = Affine(w, b, act)
    post = []
    for i in range(len(grid.partition)):
        layer = grid.layer_of[i]
        if layer == 0:
            post.append(Activation.IDENTITY)
        elif layer == out_layer and out_act is not None:
            post.append(out_act)
        else:
            post.append(row_act)
    return BlockMap.from_dict(grid.partition, cells, post)
