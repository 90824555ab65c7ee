import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seq2d.blockmap import Affine, StateVector, iterate
from seq2d.checks import random_linear_chain
from seq2d.constructors import (
    make_above_map,
    make_diag_map,
    make_epsilon_map,
    make_mlp_map,
    make_skip_map,
    make_superdiag_map,
)
from seq2d.dynamics import (
    NonFiniteTrajectoryError,
    classify_impulse,
    closed_form_diag,
    closed_form_superdiag,
    epsilon_decay_check,
    find_fixed_point,
    q_invariance_check,
)

from conftest import e0


def lin(x):
    return Affine([[float(x)]])


F = (lin(2), lin(3), lin(5))


def test_closed_form_diag_scalars():
    v = closed_form_diag(*F, lin(0.5), [1.0], 4)
    assert v.block(1).tolist() == [3.75]
    assert v.block(2).tolist() == [10.5]
    assert v.block(3).tolist() == [45.0]
    m = make_diag_map(*F, lin(0.5))
    assert iterate(m, e0(m, 1.0), 4)[-1] == v


def test_closed_form_superdiag_scalars():
    assert closed_form_superdiag(*F, lin(0.5), [1.0], 5).block(1).tolist() == [9.5]
    v4 = closed_form_superdiag(*F, lin(0.5), [1.0], 4)
    assert v4.block(1).tolist() == [5.0] and v4.block(2).tolist() == [15.0]
    with pytest.raises(ValueError):
        closed_form_superdiag(*F, lin(0.5), [1.0], 2)
    with pytest.raises(ValueError):
        closed_form_diag(Affine([[1.0]], None, "relu"), F[1], F[2], lin(0.5), [1.0], 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 20))
def test_closed_forms_match_iteration(seed, k):
    rng = np.random.default_rng(seed)
    (f1, f2, f3), d = random_linear_chain(rng)
    s_diag = Affine(0.6 * rng.standard_normal((d[1], d[1])))
    s_up = Affine(0.6 * rng.standard_normal((d[1], d[2])))
    h0 = rng.standard_normal(d[0])
    for build, closed, s in ((make_diag_map, closed_form_diag, s_diag),
                             (make_superdiag_map, closed_form_superdiag, s_up)):
        m = build(f1, f2, f3, s)
        got = iterate(m, e0(m, h0), k)[-1].data
        want = closed(f1, f2, f3, s, h0, k).data
        assert np.max(np.abs(got - want)) <= 1e-10 * max(1.0, np.max(np.abs(want)))


def test_diag_converges_to_neumann_limit():
    rng = np.random.default_rng(4)
    s = Affine(0.3 * rng.standard_normal((3, 3)) / np.sqrt(3))
    f1 = Affine(rng.standard_normal((3, 2)))
    h0 = rng.standard_normal(2)
    m = make_diag_map(f1, Affine(np.eye(3)), Affine(np.eye(3)), s)
    report = find_fixed_point(m, e0(m, h0), 400)
    assert report.reached
    limit = np.linalg.solve(np.eye(3) - s.weight, f1.weight @ h0)
    v = iterate(m, e0(m, h0), report.at_iteration)[-1]
    assert np.allclose(v.block(1), limit, atol=1e-10)


def test_fixed_point_mlp_and_identity_corner(spec235):
    m = make_mlp_map(spec235)
    r = find_fixed_point(m, e0(m, 1.0))
    assert r.reached and r.at_iteration == 4 and r.residual == 0.0
    inf = make_mlp_map(spec235, True)
    r = find_fixed_point(inf, e0(inf, 1.0))
    assert r.reached and r.at_iteration == 3
    assert r.residuals[:3] == [2.0, 6.0, 30.0]


def test_fixed_point_failure_and_errors():
    m = make_diag_map(*F, lin(1.0))
    r = find_fixed_point(m, e0(m, 1.0), 20)
    assert not r.reached and r.at_iteration == 20 and len(r.residuals) == 21
    with pytest.raises(ValueError):
        find_fixed_point(m, e0(m, 1.0), 0)
    with pytest.raises(ValueError):
        find_fixed_point(m, e0(m, 1.0), tol=0)
    blow = make_diag_map(*F, lin(1e200))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteTrajectoryError):
        find_fixed_point(blow, e0(blow, 1.0), 10)


def test_impulse_classes(spec235):
    m = make_mlp_map(spec235)
    c = classify_impulse(m, [e0(m, 1.0), e0(m, 2.0)])
    assert c.kind == "finite" and c.agree_from == 4
    inf = make_mlp_map(spec235, True)
    assert classify_impulse(inf, [e0(inf, 1.0), e0(inf, 2.0)]).kind == "infinite"
    half = make_epsilon_map(spec235, 0.5)
    c = classify_impulse(half, [e0(half, 1.0), e0(half, 2.0)], horizon=30)
    assert c.kind == "asymptotically_finite"
    assert c.decay_ratio == pytest.approx(0.5, rel=1e-6)


def test_impulse_probe_validation(spec235):
    m = make_mlp_map(spec235)
    with pytest.raises(ValueError):
        classify_impulse(m, [e0(m, 1.0)])
    other = StateVector.from_blocks([[1.0], [1.0], [0.0], [0.0]])
    with pytest.raises(ValueError):
        classify_impulse(m, [e0(m, 1.0), other])


def test_q_invariance(spec235):
    for m in (make_mlp_map(spec235), make_mlp_map(spec235, True),
              make_skip_map(spec235, lin(7), 0.3)):
        ok, dev = q_invariance_check(m, [1.3])
        assert ok and dev <= 1e-12
    diag = make_diag_map(*F, lin(0.5))
    ok, dev = q_invariance_check(diag, [1.3])
    assert not ok and dev > 1e-6
    with pytest.raises(ValueError):
        q_invariance_check(make_mlp_map(spec235), [1.0], k=2)


def test_above_map_residual_and_q_dependence(spec235):
    m = make_above_map(spec235, lin(0.7))
    v4 = iterate(m, e0(m, 1.0), 4)[-1]
    assert np.max(np.abs(iterate(m, v4, 1)[-1].data - v4.data)) > 1e-6
    q = StateVector.from_blocks([[1.0], [0.0], [2.0], [0.0]])
    assert np.max(np.abs(iterate(m, q, 4)[-1].data - v4.data)) > 1e-6


@pytest.mark.parametrize("eps", [0.0, 0.25, 0.5, 1.0])
def test_epsilon_decay(spec235, eps):
    for k in range(21):
        assert epsilon_decay_check(spec235, eps, [1.7], k)
    with pytest.raises(ValueError):
        epsilon_decay_check(spec235, -0.1, [1.0], 3)
