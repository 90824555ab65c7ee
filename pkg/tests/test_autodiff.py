import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seq2d.autodiff import (
    AdamState,
    NonFiniteActivationError,
    ParamVector,
    accuracy,
    adam_step,
    backward,
    forward_unrolled,
    loss_xent,
)
from seq2d.blockmap import (
    Affine,
    BlockMap,
    BlockPartition,
    PartitionMismatchError,
    ScaledIdentity,
    StateBatch,
)
from seq2d.checks import _gradient_instance, gradient_relative_error, random_small_map
from seq2d.constructors import MlpLayerSpec, make_mlp_map, random_mlp_spec


def inputs_batch(m, X):
    return StateBatch.from_inputs(m.partition, np.asarray(X, dtype=np.float64))


def test_forward_matches_nested_mlp():
    rng = np.random.default_rng(3)
    for _ in range(50):
        spec = random_mlp_spec(rng)
        m = make_mlp_map(spec, identity_corner=bool(rng.integers(2)))
        X = rng.standard_normal((4, spec.dims[0]))
        logits, tape = forward_unrolled(m, None, inputs_batch(m, X), spec.n_layers)
        want = np.stack([spec.forward(x) for x in X], axis=1)
        assert np.max(np.abs(logits - want)) <= 1e-12 * max(1.0, np.abs(want).max())
        assert len(tape.steps) == spec.n_layers


def test_zero_weights_give_zero_logits():
    dims = [3, 2, 2]
    spec = MlpLayerSpec(dims, [np.zeros((2, 3)), np.zeros((2, 2))])
    m = make_mlp_map(spec)
    logits, _ = forward_unrolled(m, None, inputs_batch(m, np.ones((5, 3))), 2)
    assert not logits.any()


def test_forward_errors():
    m = make_mlp_map(MlpLayerSpec([1, 1], [np.array([[1e300]])]))
    m = m.replace({(1, 0): Affine([[1e300]], None, "identity"), (1, 1): Affine([[1e300]])})
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NonFiniteActivationError):
        forward_unrolled(m, None, inputs_batch(m, [[1e300]]), 3)
    other = StateBatch(BlockPartition([2, 1]), np.zeros((3, 1)))
    with pytest.raises(PartitionMismatchError):
        forward_unrolled(m, None, other, 1)
    with pytest.raises(ValueError):
        forward_unrolled(m, None, inputs_batch(m, [[1.0]]), 0)


def test_scalar_chain_gradient():
    a, b, c, x, t = 2.0, -3.0, 0.5, 1.5, 1.0
    m = make_mlp_map(MlpLayerSpec([1, 1, 1, 1], [[[a]], [[b]], [[c]]], act="identity"))
    logits, tape = forward_unrolled(m, None, inputs_batch(m, [[x]]), 3)
    r = c * b * a * x - t
    g = backward(tape, logits - t).values
    assert np.allclose(g, [r * c * b * x, r * c * a * x, r * b * a * x], rtol=1e-12, atol=0)


def test_dead_relu_gives_zero_gradient():
    spec = MlpLayerSpec([2, 3, 2], [-np.ones((3, 2)), -np.ones((2, 3))])
    m = make_mlp_map(spec)
    logits, tape = forward_unrolled(m, None, inputs_batch(m, np.ones((4, 2))), 2)
    assert not backward(tape, np.ones_like(logits)).values.any()


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(21)
    worst = max(gradient_relative_error(*_gradient_instance(rng)) for _ in range(100))
    assert worst <= 1e-5


def unrolled_copy(m, T):
    """Chain of T distinct copies of ``m``; copy t+1 reads only copy t."""
    n = m.n_blocks
    part = BlockPartition(list(m.partition.sizes) * (T + 1))
    cells = {(i, i): ScaledIdentity(1.0) for i in range(n)}
    for c in range(T):
        for i, j, cell in m.nonzero():
            cells[((c + 1) * n + i, c * n + j)] = cell
    post = ["identity"] * n + [a.value for a in m.post_act] * T
    return BlockMap.from_dict(part, cells, post)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_weight_sharing_sums_per_iteration_gradients(seed):
    rng = np.random.default_rng(seed)
    m = random_small_map(rng)
    params = ParamVector.pack(m)
    if not len(params):
        return
    T = int(rng.integers(1, 4))
    n = int(rng.integers(1, 4))
    data = rng.standard_normal((m.partition.total(), n))
    logits, tape = forward_unrolled(m, params, StateBatch(m.partition, data), T)
    up = rng.standard_normal(logits.shape)
    shared = backward(tape, up)

    big = unrolled_copy(m, T)
    big_data = np.vstack([data] + [np.zeros_like(data)] * T)
    big_params = ParamVector.pack(big)
    big_logits, big_tape = forward_unrolled(big, big_params, StateBatch(big.partition, big_data), T)
    assert np.allclose(big_logits, logits, rtol=1e-12, atol=1e-12)
    big_grad = backward(big_tape, up)
    total = np.zeros(len(params))
    per_entry = {(e.row, e.col, e.role): e for e in shared.index}
    nb = m.n_blocks
    for e in big_grad.index:
        if e.row < nb:
            continue
        src = per_entry[(e.row % nb, e.col % nb, e.role)]
        total[src.offset: src.offset + src.size] += big_grad.view(e).reshape(-1)
    scale = max(1.0, np.abs(total).max())
    assert np.max(np.abs(shared.values - total)) <= 1e-10 * scale


def test_backward_rejects_bad_upstream_and_params():
    m = make_mlp_map(random_mlp_spec(np.random.default_rng(0)))
    logits, tape = forward_unrolled(m, None, inputs_batch(m, np.ones((2, m.partition[0]))),
                                    m.n_blocks - 1)
    with pytest.raises(ValueError):
        backward(tape, np.ones((logits.shape[0] + 1, 2)))
    other = make_mlp_map(random_mlp_spec(np.random.default_rng(5)), identity_corner=True)
    bogus = ParamVector.pack(other, cells=[], scales=[(0, 0)])
    tape.params = bogus
    with pytest.raises(ValueError):
        backward(tape, logits)


def test_scale_gradient():
    part = BlockPartition([1, 1])
    m = BlockMap.from_dict(part, {(0, 0): ScaledIdentity(0.5), (1, 0): Affine([[2.0]])})
    params = ParamVector.pack(m, cells=[], scales=[(0, 0)])
    logits, tape = forward_unrolled(m, params, StateBatch(part, np.array([[1.0], [0.0]])), 3)
    # logit = 2 * s^2 * x, d/ds = 4 s x
    assert logits.tolist() == [[0.5]]
    assert backward(tape, np.ones((1, 1))).values.tolist() == [2.0]


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(8)
    m = random_small_map(rng, density=1.0)
    p = ParamVector.pack(m)
    assert p.unpack(m) == m
    shifted = p.with_values(p.values + 1.0).unpack(m)
    assert ParamVector.pack(shifted).values.tolist() == (p.values + 1.0).tolist()
    with pytest.raises(ValueError):
        p.with_values(np.zeros(len(p) + 1))
    with pytest.raises(ValueError):
        ParamVector.pack(make_mlp_map(random_mlp_spec(rng)), cells=[(0, 1)])


def test_loss_and_accuracy():
    logits = np.zeros((10, 4))
    assert loss_xent(logits, [0, 3, 9, 5]) == pytest.approx(math.log(10), abs=1e-12)
    huge = np.zeros((10, 1))
    huge[2] = 1e4
    assert loss_xent(huge, [2]) == pytest.approx(0.0, abs=1e-12)
    assert accuracy(np.arange(10, 0, -1, dtype=float)[:, None] - 8, [0]) == 1.0
    assert accuracy(np.zeros((10, 1)), [0]) == 1.0  # ties go to class 0
    with pytest.raises(ValueError):
        loss_xent(logits, [0, 1, 2, 10])
    with pytest.raises(ValueError):
        accuracy(logits, [-1, 0, 0, 0])


def test_xent_gradient():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((10, 3))
    y = [4, 0, 7]
    _, g = loss_xent(z, y, return_grad=True)
    h = 1e-6
    fd = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        fd[idx] = (loss_xent(zp, y) - loss_xent(zm, y)) / (2 * h)
    assert np.allclose(g, fd, atol=1e-8)


def test_adam_first_step_and_determinism():
    p, s = adam_step(np.array([1.0]), np.array([1.0]), AdamState.zeros(1))
    assert p[0] == pytest.approx(1.0 - 1e-3, abs=1e-10) and s.t == 1
    same, _ = adam_step(np.array([1.0]), np.array([1.0]), AdamState.zeros(1))
    assert same.tobytes() == p.tobytes()
    q, _ = adam_step(np.array([2.0, -1.0]), np.zeros(2), AdamState.zeros(2))
    assert q.tolist() == [2.0, -1.0]
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2))
