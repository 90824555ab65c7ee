"""Self-verification suite behind ``seq2d verify``.

Each check returns a short detail string on success and raises
:class:`CheckFailed` otherwise. Checks are cheap enough to run on every
install; the golden maps they read ship with the package.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ParamVector, backward, forward_unrolled
from .blockmap import (
    Activation,
    Affine,
    BlockMap,
    BlockPartition,
    MapFormatError,
    ScaledIdentity,
    StateBatch,
    StateVector,
    apply,
    apply_batch,
    deserialize,
    iterate,
    serialize,
)
from .constructors import (
    MlpLayerSpec,
    RnnSpec,
    make_above_map,
    make_diag_map,
    make_epsilon_map,
    make_layered_tiling,
    make_mlp_map,
    make_random_tiling,
    make_rnn_map,
    make_skip_map,
    make_superdiag_map,
    random_mlp_spec,
)
from .dynamics import (
    classify_impulse,
    closed_form_diag,
    closed_form_superdiag,
    epsilon_decay_check,
    find_fixed_point,
    q_invariance_check,
)

GOLDEN_DIR = Path(__file__).with_name("golden")

__all__ = ["CHECKS", "Check", "CheckFailed", "CheckResult", "GOLDEN_DIR",
           "finite_difference_gradient", "gradient_relative_error", "random_linear_chain", "random_small_map",
           "run_checks", "scalar_spec"]


class CheckFailed(AssertionError):
    pass


@dataclass(frozen=True)
class Check:
    name: str
    fn: Callable


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _require(cond, message):
    if not cond:
        raise CheckFailed(message)


def _rel(got, want) -> float:
    got, want = np.asarray(got, dtype=np.float64), np.asarray(want, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(want))) if want.size else 0.0)
    return float(np.max(np.abs(got - want))) / scale if want.size else 0.0


def scalar_spec(a=2.0, b=3.0, c=5.0) -> MlpLayerSpec:
    """Three linear scalar layers ``a z``, ``b z``, ``c z``."""
    w = [np.array([[float(x)]]) for x in (a, b, c)]
    return MlpLayerSpec([1, 1, 1, 1], w, None, Activation.IDENTITY)


def _e0(m: BlockMap, h0) -> StateVector:
    h0 = np.atleast_1d(np.asarray(h0, dtype=np.float64))
    return StateVector.from_blocks([h0] + [np.zeros(d) for d in m.partition.sizes[1:]],
                                   m.partition)


def _last(m, h0, k):
    return iterate(m, _e0(m, h0), k)[-1]


def random_linear_chain(rng, max_dim=4, scale=0.6):
    """Random linear ``f1, f2, f3, S`` cells with S square on the second block."""
    d = rng.integers(1, max_dim + 1, size=4)
    f = [Affine(scale * rng.standard_normal((d[i + 1], d[i]))) for i in range(3)]
    return f, d


# --- blockmap -----------------------------------------------------------------


def check_apply_examples(ctx):
    part = BlockPartition([1, 1])
    m = BlockMap.from_dict(part, {(0, 0): ScaledIdentity(1.0),
                                  (1, 0): Affine([[2.0]], [0.0], "relu")})
    out = apply(m, StateVector.from_blocks([[3.0], [0.0]]))
    _require(out.data.tolist() == [3.0, 6.0], f"apply gave {out.data.tolist()}")
    batch = StateBatch(part, np.array([[3.0, -1.0], [0.0, 0.0]]))
    got = apply_batch(m, batch).data
    _require(got.tolist() == [[3.0, -1.0], [6.0, 0.0]], f"apply_batch gave {got.tolist()}")
    summed = BlockMap.from_dict(part, {(0, 0): ScaledIdentity(1.0), (0, 1): ScaledIdentity(0.5)})
    row0 = apply(summed, StateVector.from_blocks([[4.0], [2.0]])).block(0)
    _require(row0.tolist() == [5.0], f"row sum gave {row0.tolist()}")
    return "hand-evaluated examples reproduced"


def random_small_map(rng, max_blocks=4, max_dim=3, acts=("identity", "relu", "tanh", "sigmoid"),
                     density=0.6):
    sizes = rng.integers(1, max_dim + 1, size=rng.integers(2, max_blocks + 1)).tolist()
    part = BlockPartition(sizes)
    cells = {}
    for i, di in enumerate(sizes):
        for j, dj in enumerate(sizes):
            if rng.random() > density:
                continue
            if di == dj and rng.random() < 0.25:
                cells[(i, j)] = ScaledIdentity(float(rng.uniform(-1, 1)))
            else:
                bias = rng.standard_normal(di) if rng.random() < 0.5 else None
                cells[(i, j)] = Affine(rng.standard_normal((di, dj)), bias, str(rng.choice(acts)))
    post = [str(rng.choice(acts)) for _ in sizes]
    return BlockMap.from_dict(part, cells, post)


def check_batch_columns(ctx):
    rng = np.random.default_rng(11)
    for _ in range(ctx.get("trials", 200)):
        m = random_small_map(rng)
        data = rng.standard_normal((m.partition.total(), int(rng.integers(1, 6))))
        out = apply_batch(m, StateBatch(m.partition, data))
        for k in range(data.shape[1]):
            col = apply(m, StateVector(m.partition, data[:, k]))
            _require(np.array_equal(out.column(k).data, col.data),
                     "batch column differs from single-column apply")
    return "batch columns bit-identical to per-column apply"


def check_serialization(ctx):
    rng = np.random.default_rng(12)
    for _ in range(ctx.get("trials", 100)):
        m = random_small_map(rng)
        _require(deserialize(serialize(m)) == m, "round trip changed the map")
    bad = ('{"partition":[1,2],"cells":[{"row":0,"col":1,"kind":"affine",'
           '"weight":[[1.0]]}]}')
    try:
        deserialize(bad)
    except MapFormatError as exc:
        _require("(0,1)" in str(exc), f"error does not name the cell: {exc}")
    else:
        raise CheckFailed("mismatched cell accepted")
    return "round trip exact; bad cell reported with coordinates"


# --- equivalences -----------------------------------------------------------------


def check_mlp_equivalence(ctx):
    rng = np.random.default_rng(ctx.get("seed", 1))
    worst = 0.0
    for _ in range(ctx.get("trials", 1000)):
        spec = random_mlp_spec(rng)
        h0 = rng.standard_normal(spec.dims[0])
        got = _last(make_mlp_map(spec), h0, spec.n_layers).block(-1)
        worst = max(worst, _rel(got, spec.forward(h0)))
    _require(worst <= 1e-12, f"max relative error {worst:.3e}")
    return f"max relative error {worst:.1e}"


def check_mlp_golden(ctx):
    golden = Path(ctx.get("golden_dir", GOLDEN_DIR))
    m = deserialize((golden / "mlp3.json").read_text())
    ref = scalar_spec()
    for h0 in (1.0, -0.75, 2.5):
        got = _last(m, h0, 3).block(-1)
        want = ref.forward(np.array([h0]))
        _require(_rel(got, want) <= 1e-12,
                 f"mlp3.json with h0={h0}: iterate gives {got.tolist()}, MLP gives {want.tolist()}")
    return "golden corner-0 map matches the nested MLP"


def check_rnn_equivalence(ctx):
    rng = np.random.default_rng(ctx.get("seed", 2))
    worst = 0.0
    for _ in range(ctx.get("trials", 1000)):
        n, mdim, T = (int(x) for x in rng.integers(1, 4, size=3))
        spec = RnnSpec(rng.standard_normal((n, mdim)), rng.standard_normal((n, n)),
                       rng.standard_normal(n), [rng.standard_normal(mdim) for _ in range(T)],
                       str(rng.choice(["tanh", "relu", "identity"])))
        h0 = rng.standard_normal(n)
        got = _last(make_rnn_map(spec), h0, T).block(-1)
        worst = max(worst, _rel(got, spec.recurrence(h0)))
    _require(worst <= 1e-12, f"max relative error {worst:.3e}")
    return f"max relative error {worst:.1e}"


# --- dynamics -----------------------------------------------------------------


def check_finite_impulse(ctx):
    rng = np.random.default_rng(3)
    for _ in range(ctx.get("trials", 200)):
        spec = random_mlp_spec(rng)
        m = make_mlp_map(spec)
        T = spec.n_layers
        a = iterate(m, _e0(m, rng.standard_normal(spec.dims[0])), T + 2)
        b = iterate(m, _e0(m, rng.standard_normal(spec.dims[0])), T + 2)
        _require(np.array_equal(a[T + 1].data, b[T + 1].data), "iterate T+1 depends on h0")
        _require(np.array_equal(a[T + 2].data, a[T + 1].data), "iterate T+2 differs from T+1")
    return "iterate T+1 is input-independent and fixed"


def check_fixed_point(ctx):
    spec = scalar_spec()
    mlp = make_mlp_map(spec)
    r = find_fixed_point(mlp, _e0(mlp, 1.0))
    _require(r.reached and r.at_iteration == 4 and r.residual == 0.0,
             f"corner-0 map: {r.to_dict()}")
    inf = make_mlp_map(spec, identity_corner=True)
    r = find_fixed_point(inf, _e0(inf, 1.0))
    _require(r.reached and r.at_iteration == 3, f"identity-corner map: {r.to_dict()}")
    s1 = iterate(inf, _e0(inf, 1.0), 3)[-1]
    s2 = iterate(inf, _e0(inf, 2.0), 3)[-1]
    _require(s1 != s2, "identity-corner fixed point ignores h0")
    above = make_above_map(spec, Affine([[0.7]]))
    v0 = StateVector.from_blocks([[1.0], [0.0], [0.4], [0.0]])
    r = find_fixed_point(above, v0, max_k=10)
    _require(not r.reached, "above-diagonal map reported a fixed point")
    return "fixed points at k=4 (corner 0) and k=3 (identity corner); none with S above"


def check_above_not_fixed(ctx):
    spec = scalar_spec()
    m = make_above_map(spec, Affine([[0.7]]))
    traj0 = iterate(m, _e0(m, 1.0), 5)
    res = float(np.max(np.abs(traj0[5].data - traj0[4].data)))
    _require(res > 1e-6, f"k=4 residual {res:.3e}")
    q = StateVector.from_blocks([[1.0], [0.0], [0.9], [0.0]])
    traj_q = iterate(m, q, 4)
    _require(not np.allclose(traj_q[4].data, traj0[4].data, atol=1e-6), "k=4 state ignores q2")
    return f"k=4 residual {res:.3g}; q2 changes the state"


def check_impulse_class(ctx):
    spec = scalar_spec()
    probes = lambda m: [_e0(m, 1.0), _e0(m, -2.0)]  # noqa: E731
    want = {"finite": make_mlp_map(spec), "infinite": make_mlp_map(spec, True),
            "asymptotically_finite": make_epsilon_map(spec, 0.5)}
    for kind, m in want.items():
        got = classify_impulse(m, probes(m), horizon=40 if kind != "finite" else None)
        _require(got.kind == kind, f"expected {kind}, got {got.kind}")
    return "finite / infinite / asymptotically finite labels reproduced"


def check_q_invariance(ctx):
    rng = np.random.default_rng(4)
    spec = MlpLayerSpec([3, 4, 4, 2],
                        [rng.standard_normal((4, 3)), rng.standard_normal((4, 4)),
                         rng.standard_normal((2, 4))],
                        [rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(2)])
    h0 = rng.standard_normal(3)
    ok, dev = q_invariance_check(make_mlp_map(spec), h0, 100, 3)
    _require(ok, f"corner-0 map deviates by {dev:.3e}")
    ok, dev = q_invariance_check(make_mlp_map(spec, True), h0, 100, 3)
    _require(ok, f"identity-corner map deviates by {dev:.3e}")
    skip = make_skip_map(spec, Affine(rng.standard_normal((2, 3))), 1.0)
    ok, dev = q_invariance_check(skip, h0, 100, 3)
    _require(ok, f"skip map deviates by {dev:.3e}")
    diag = make_diag_map(Affine([[2.0]]), Affine([[3.0]]), Affine([[5.0]]), Affine([[0.5]]))
    ok, dev = q_invariance_check(diag, [1.0], 100, 3, region="full")
    _require(not ok and dev > 1e-6, f"diagonal S map looked invariant (dev {dev:.3e})")
    return f"invariant for corner-0, identity-corner and skip maps; diagonal S deviates by {dev:.3g}"


def check_epsilon(ctx):
    rng = np.random.default_rng(5)
    for _ in range(ctx.get("trials", 20)):
        spec = random_mlp_spec(rng, max_layers=3)
        h0 = rng.standard_normal(spec.dims[0])
        for eps in (0.0, 0.25, 0.5, 1.0):
            for k in range(1, 21):
                _require(epsilon_decay_check(spec, eps, h0, k),
                         f"eps={eps}, k={k}: blocks do not follow eps^k decay")
    spec = scalar_spec()
    _require(make_epsilon_map(spec, 1.0) == make_mlp_map(spec, True), "eps=1 differs from M_inf")
    return "top block eps^k h0 for eps in {0, .25, .5, 1}, k <= 20"


def check_skip(ctx):
    spec = scalar_spec()
    m = make_skip_map(spec, Affine([[7.0]]), 1.0)
    traj = iterate(m, _e0(m, 1.0), 4)
    _require(traj[3].block(-1).tolist() == [37.0], f"last block {traj[3].block(-1).tolist()}")
    _require(traj[4] == traj[3], "k=4 differs from k=3")
    inf_last = iterate(make_mlp_map(spec, True), _e0(m, 1.0), 4)[-1].block(-1)
    gaps = []
    for eta in (0.1, 0.01, 0.001):
        sk = make_skip_map(spec, Affine([[7.0]]), eta)
        gaps.append(float(abs(iterate(sk, _e0(sk, 1.0), 4)[-1].block(-1)[0] - inf_last[0])))
    ratios = [gaps[i] / gaps[i + 1] for i in range(2)]
    _require(all(abs(r - 10.0) < 1e-6 for r in ratios), f"gap not linear in eta: {gaps}")
    return "skip value 37 and fixed; gap to M_inf linear in eta"


def check_closed_form(ctx):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(ctx.get("trials", 200)):
        f, d = random_linear_chain(rng)
        s_diag = Affine(0.6 * rng.standard_normal((d[1], d[1])))
        s_sup = Affine(0.6 * rng.standard_normal((d[1], d[2])))
        h0 = rng.standard_normal(d[0])
        diag = make_diag_map(*f, s_diag)
        sup = make_superdiag_map(*f, s_sup)
        td = iterate(diag, _e0(diag, h0), 20)
        ts = iterate(sup, _e0(sup, h0), 20)
        for k in range(3, 21):
            worst = max(worst, _rel(closed_form_diag(*f, s_diag, h0, k).data, td[k].data),
                        _rel(closed_form_superdiag(*f, s_sup, h0, k).data, ts[k].data))
    _require(worst <= 1e-10, f"max relative error {worst:.3e}")
    a = closed_form_diag(Affine([[2.0]]), Affine([[3.0]]), Affine([[5.0]]), Affine([[0.5]]), [1.0], 4)
    b = closed_form_superdiag(Affine([[2.0]]), Affine([[3.0]]), Affine([[5.0]]), Affine([[0.5]]),
                              [1.0], 5)
    _require(abs(a.block(1)[0] - 3.75) < 1e-12, f"diag k=4 block 1 = {a.block(1)[0]}")
    _require(abs(b.block(1)[0] - 9.5) < 1e-12, f"superdiag k=5 block 1 = {b.block(1)[0]}")
    return f"max relative error {worst:.1e}; spot values 3.75 and 9.5"


# --- gradients and tilings -------------------------------------------------------------


def finite_difference_gradient(loss, values, h=1e-6):
    """Central differences of ``loss`` (a function of a flat vector) at ``values``."""
    values = np.asarray(values, dtype=np.float64)
    grad = np.empty_like(values)
    for i in range(values.size):
        up, down = values.copy(), values.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (loss(up) - loss(down)) / (2 * h)
    return grad


def gradient_relative_error(analytic, numeric, floor=1e-4):
    """Worst per-coordinate ``|a - n| / max(|a|, |n|, floor * max(1, |a|_inf))``.

    Central-difference roundoff grows with the loss, so coordinates far below
    the largest gradient entry are compared against a floor scaled to it.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    if not analytic.size:
        return 0.0
    scale = floor * max(1.0, float(np.max(np.abs(analytic))))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _gradient_instance(rng):
    while True:
        m = random_small_map(rng, acts=("identity", "tanh", "sigmoid", "relu"))
        params = ParamVector.pack(m)
        if 0 < len(params) <= 100:
            break
    n = int(rng.integers(1, 4))
    batch = StateBatch(m.partition, rng.standard_normal((m.partition.total(), n)))
    T = int(rng.integers(1, 4))
    target = rng.standard_normal((m.partition[-1], n))

    def loss(values):
        logits, _ = forward_unrolled(m, params.with_values(values), batch, T)
        return 0.5 * float(np.sum((logits - target) ** 2)) / n

    logits, tape = forward_unrolled(m, params, batch, T)
    analytic = backward(tape, (logits - target) / n).values
    return analytic, finite_difference_gradient(loss, params.values)


def check_gradients(ctx):
    rng = np.random.default_rng(ctx.get("seed", 7))
    worst = 0.0
    for _ in range(ctx.get("trials", 200)):
        worst = max(worst, gradient_relative_error(*_gradient_instance(rng)))
    _require(worst <= 1e-5, f"max relative error {worst:.3e}")
    return f"max relative error {worst:.1e}"


def check_tilings(ctx):
    dims = [2500, 500, 200, 100, 10]
    layered = make_layered_tiling(dims, 100)
    _require(layered.n_trainable_tiles == 5 * 25 + 2 * 5 + 2 + 1,
             f"layered tile count {layered.n_trainable_tiles}")
    shaped = make_random_tiling(dims, 100, seed=0, match="shape")
    _require(shaped.n_trainable_weights == layered.n_trainable_weights,
             "shape-matched random grid has a different weight count")
    plain = make_random_tiling(dims, 100, seed=0)
    _require(plain.n_trainable_tiles == layered.n_trainable_tiles, "tile counts differ")
    _require(not np.any(plain.mask & plain.corner_mask()), "random mask touches the input rows")
    return f"{layered.n_trainable_tiles} tiles, {layered.n_trainable_weights} weights"


CHECKS = [
    Check("blockmap.apply_examples", check_apply_examples),
    Check("blockmap.batch_columns", check_batch_columns),
    Check("blockmap.serialization", check_serialization),
    Check("mlp_equivalence.random", check_mlp_equivalence),
    Check("mlp_equivalence.golden", check_mlp_golden),
    Check("rnn_equivalence", check_rnn_equivalence),
    Check("finite_impulse", check_finite_impulse),
    Check("fixed_point", check_fixed_point),
    Check("fixed_point.above_diagonal", check_above_not_fixed),
    Check("impulse_class", check_impulse_class),
    Check("q_invariance", check_q_invariance),
    Check("epsilon_continuum", check_epsilon),
    Check("skip_connection", check_skip),
    Check("closed_forms", check_closed_form),
    Check("gradients", check_gradients),
    Check("tilings", check_tilings),
]


def run_checks(name_filter: str | None = None, ctx: dict | None = None) -> list:
    """Run every check whose name contains ``name_filter``."""
    ctx = dict(ctx or {})
    results = []
    for check in CHECKS:
        if name_filter and name_filter not in check.name:
            continue
        t0 = time.perf_counter()
        try:
            detail, passed = check.fn(ctx), True
        except CheckFailed as exc:
            detail, passed = str(exc), False
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            detail, passed = f"{type(exc).__name__}: {exc}", False
        results.append(CheckResult(check.name, passed, detail, time.perf_counter() - t0))
    return results
