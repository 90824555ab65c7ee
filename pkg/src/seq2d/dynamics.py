"""Trajectory analysis for iterated block maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blockmap import (
    BlockMap,
    BlockPartition,
    Cell,
    ScaledIdentity,
    StateVector,
    Zero,
    apply,
)
from .constructors import MlpLayerSpec, _chain_dims, make_epsilon_map

__all__ = [
    "FixedPointReport",
    "ImpulseClass",
    "NonFiniteTrajectoryError",
    "classify_impulse",
    "closed_form_diag",
    "closed_form_superdiag",
    "epsilon_decay_check",
    "find_fixed_point",
    "q_invariance_check",
]

DEFAULT_TOL = 1e-12


class NonFiniteTrajectoryError(ArithmeticError):
    def __init__(self, iteration):
        super().__init__(f"non-finite state at iteration {iteration}")
        self.iteration = iteration


@dataclass
class FixedPointReport:
    reached: bool
    at_iteration: int
    residual: float
    residuals: list = field(default_factory=list)

    def to_dict(self):
        return {"reached": self.reached, "at_iteration": self.at_iteration,
                "residual": self.residual}


@dataclass
class ImpulseClass:
    kind: str  # "finite" | "infinite" | "asymptotically_finite"
    horizon: int
    differences: list
    agree_from: int | None = None
    decay_ratio: float | None = None
    r_squared: float | None = None
    last_block_differences: list | None = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items()}


def _sup(a) -> float:
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def find_fixed_point(m: BlockMap, v0: StateVector, max_k: int = 100,
                     tol: float = DEFAULT_TOL) -> FixedPointReport:
    """First ``k <= max_k`` with ``|v_{k+1} - v_k|_inf <= tol``."""
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    v = v0
    residuals = []
    for k in range(max_k + 1):
        nxt = apply(m, v)
        if not np.all(np.isfinite(nxt.data)):
            raise NonFiniteTrajectoryError(k + 1)
        r = _sup(nxt.data - v.data)
        residuals.append(r)
        if r <= tol:
            return FixedPointReport(True, k, r, residuals)
        v = nxt
    return FixedPointReport(False, max_k, residuals[-1], residuals)


def _trajectory(m, v0, k):
    out = [v0]
    for t in range(k):
        nxt = apply(m, out[-1])
        if not np.all(np.isfinite(nxt.data)):
            raise NonFiniteTrajectoryError(t + 1)
        out.append(nxt)
    return out


def _loglinear_fit(values):
    y = np.log(np.asarray(values))
    x = np.arange(len(y), dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return float(np.exp(slope)), r2


def classify_impulse(m: BlockMap, probes, horizon: int | None = None,
                     tol: float = DEFAULT_TOL, window: int = 5,
                     min_r2: float = 0.99) -> ImpulseClass:
    """Label the map's response to changes in block 0.

    Probes must differ only in block 0. ``finite`` when every pair of
    trajectories agrees within ``tol`` at ``horizon``; ``asymptotically_finite``
    when the spread still exceeds ``tol`` but its log decays linearly
    (ratio < 1, R^2 >= ``min_r2``) over the last ``window`` iterates;
    ``infinite`` otherwise.
    """
    probes = list(probes)
    if len(probes) < 2:
        raise ValueError("need at least two probe inputs")
    for p in probes[1:]:
        if p.partition != probes[0].partition:
            raise ValueError("probes must share one partition")
        for i in range(1, len(p.partition)):
            if not np.array_equal(p.block(i), probes[0].block(i)):
                raise ValueError(f"probes differ outside block 0 (block {i})")
    if horizon is None:
        horizon = 2 * m.n_blocks
    trajs = [_trajectory(m, p, horizon) for p in probes]
    diffs, last_diffs = [], []
    for t in range(horizon + 1):
        states = np.stack([tr[t].data for tr in trajs])
        diffs.append(_sup(states - states[0]))
        lasts = np.stack([tr[t].block(-1) for tr in trajs])
        last_diffs.append(_sup(lasts - lasts[0]))

    agree_from = None
    for t in range(horizon, -1, -1):
        if diffs[t] > tol:
            break
        agree_from = t
    if agree_from is not None:
        return ImpulseClass("finite", horizon, diffs, agree_from=agree_from,
                            last_block_differences=last_diffs)
    tail = diffs[-window:]
    ratio, r2 = (None, None)
    if len(tail) >= 3 and min(tail) > 0:
        ratio, r2 = _loglinear_fit(tail)
        if ratio < 1.0 and r2 >= min_r2:
            return ImpulseClass("asymptotically_finite", horizon, diffs, decay_ratio=ratio,
                                r_squared=r2, last_block_differences=last_diffs)
    return ImpulseClass("infinite", horizon, diffs, decay_ratio=ratio, r_squared=r2,
                        last_block_differences=last_diffs)


def q_invariance_check(m: BlockMap, h0, q_samples: int = 100, k: int | None = None,
                       seed: int = 0, region: str = "auto", scale: float = 1.0):
    """Does iterate ``k`` ignore random fills of blocks 1..n?

    ``region`` is ``"last"`` (output block only), ``"full"`` (whole state) or
    ``"auto"``: last block when the corner cell is Zero, full state otherwise.
    Returns ``(invariant, max_deviation)``.
    """
    n_layers = m.n_blocks - 1
    if k is None:
        k = n_layers
    if k < n_layers:
        raise ValueError(f"k={k} is below the number of layer blocks {n_layers}")
    if region == "auto":
        region = "last" if m.cells[0][0].is_zero else "full"
    h0 = np.asarray(h0, dtype=np.float64).reshape(-1)
    part = m.partition
    base_blocks = [h0] + [np.zeros(d) for d in part.sizes[1:]]
    base = _trajectory(m, StateVector.from_blocks(base_blocks, part), k)[-1]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(q_samples):
        blocks = [h0] + [scale * rng.standard_normal(d) for d in part.sizes[1:]]
        out = _trajectory(m, StateVector.from_blocks(blocks, part), k)[-1]
        diff = out.block(-1) - base.block(-1) if region == "last" else out.data - base.data
        worst = max(worst, _sup(diff))
    return worst <= DEFAULT_TOL, worst


# --- closed forms for linear cells -------------------------------------------


def _matrix(cell: Cell, in_dim: int, out_dim: int) -> np.ndarray:
    if isinstance(cell, Zero):
        return np.zeros((out_dim, in_dim))
    if not cell.is_linear:
        raise ValueError("closed forms need linear cells (identity activation, zero bias)")
    if isinstance(cell, ScaledIdentity):
        return cell.scale * np.eye(in_dim)
    return np.array(cell.weight)


def _power_sum(a: np.ndarray, upto: int) -> np.ndarray:
    """``sum_{i=0}^{upto} a^i``; empty (zero matrix) when ``upto < 0``."""
    total = np.zeros_like(a)
    p = np.eye(a.shape[0])
    for _ in range(upto + 1):
        total = total + p
        p = a @ p
    return total


def _linear_chain(f1, f2, f3, h0):
    h0 = np.asarray(h0, dtype=np.float64).reshape(-1)
    dims = _chain_dims(f1, f2, f3, h0.shape[0])
    if dims[0] != h0.shape[0]:
        raise ValueError(f"h0 has length {h0.shape[0]}, f1 expects {dims[0]}")
    mats = [_matrix(f, dims[i], dims[i + 1]) for i, f in enumerate((f1, f2, f3))]
    return dims, mats, h0


def closed_form_diag(f1: Cell, f2: Cell, f3: Cell, s: Cell, h0, k: int) -> StateVector:
    """State of the diagonal-S map after ``k >= 3`` steps from ``[h0, 0, 0, 0]``."""
    if k < 3:
        raise ValueError("closed form holds for k >= 3")
    dims, (a1, a2, a3), h0 = _linear_chain(f1, f2, f3, h0)
    sm = _matrix(s, dims[1], dims[1])
    x = a1 @ h0
    return StateVector.from_blocks([
        h0,
        _power_sum(sm, k - 1) @ x,
        a2 @ (_power_sum(sm, k - 2) @ x),
        a3 @ (a2 @ (_power_sum(sm, k - 3) @ x)),
    ], BlockPartition(dims))


def closed_form_superdiag(f1: Cell, f2: Cell, f3: Cell, s: Cell, h0, k: int) -> StateVector:
    """State of the (1, 2)-S map after ``k >= 3`` steps from ``[h0, 0, 0, 0]``.

    With ``A = S f2``: odd ``k`` sums powers of ``A`` up to ``(k-1)/2`` for
    block 1 and ``(k-3)/2`` for blocks 2 and 3; even ``k`` uses ``(k-2)/2``
    for blocks 1 and 2 and ``(k-4)/2`` for block 3.
    """
    if k < 3:
        raise ValueError("closed form holds for k >= 3")
    dims, (a1, a2, a3), h0 = _linear_chain(f1, f2, f3, h0)
    sm = _matrix(s, dims[2], dims[1])
    a = sm @ a2
    if k % 2:
        n1, n2, n3 = (k - 1) // 2, (k - 3) // 2, (k - 3) // 2
    else:
        n1, n2, n3 = (k - 2) // 2, (k - 2) // 2, (k - 4) // 2
    x = a1 @ h0
    return StateVector.from_blocks([
        h0,
        _power_sum(a, n1) @ x,
        a2 @ (_power_sum(a, n2) @ x),
        a3 @ (a2 @ (_power_sum(a, n3) @ x)),
    ], BlockPartition(dims))


def epsilon_decay_check(spec: MlpLayerSpec, epsilon: float, h0, k: int,
                        tol: float = DEFAULT_TOL) -> bool:
    """Top block of M_inf(eps) after ``k`` steps is ``eps^k h0``; block ``i`` is
    the first ``i`` layers applied to ``eps^(k-i) h0`` (for ``i <= k``)."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    m = make_epsilon_map(spec, epsilon)
    h0 = np.asarray(h0, dtype=np.float64).reshape(-1)
    v0 = StateVector.from_blocks([h0] + [np.zeros(d) for d in spec.dims[1:]], m.partition)
    final = _trajectory(m, v0, k)[-1]
    cells = spec.layer_cells()

    def rel_close(got, want):
        return _sup(got - want) <= tol * max(1.0, _sup(want))

    if not rel_close(final.block(0), epsilon ** k * h0):
        return False
    for i in range(1, spec.n_layers + 1):
        if i <= k:
            z = epsilon ** (k - i) * h0
            start = 0
        else:
            z = np.zeros(spec.dims[i - k])
            start = i - k
        for cell in cells[start:i]:
            z = cell(z, cell.out_dim)
        if not rel_close(final.block(i), z):
            return False
    return True
