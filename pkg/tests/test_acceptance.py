"""The twelve acceptance criteria, each at its stated tolerance.

A pass/fail line per criterion is printed in the pytest terminal summary.
Criteria 11 and 12 train the desk-scale comparison twice (about 90 s).
"""
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from seq2d.blockmap import Affine, StateVector, iterate
from seq2d.checks import _gradient_instance, gradient_relative_error, random_linear_chain
from seq2d.cli import main
from seq2d.constructors import (
    MlpLayerSpec,
    RnnSpec,
    make_above_map,
    make_diag_map,
    make_epsilon_map,
    make_mlp_map,
    make_rnn_map,
    make_skip_map,
    make_superdiag_map,
    random_mlp_spec,
)
from seq2d.dynamics import (
    classify_impulse,
    closed_form_diag,
    closed_form_superdiag,
    epsilon_decay_check,
    find_fixed_point,
    q_invariance_check,
)

from conftest import ACCEPTANCE, e0

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


@contextmanager
def criterion(n, title):
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        ACCEPTANCE[n] = (title, False, f"{type(exc).__name__}: {exc}".splitlines()[0][:200])
        raise
    ACCEPTANCE[n] = (title, True, info["detail"])


def rel(got, want):
    return float(np.max(np.abs(got - want))) / max(1.0, float(np.max(np.abs(want))))


def test_01_mlp_iteration_equivalence():
    with criterion(1, "MLP as iterated map") as info:
        rng = np.random.default_rng(101)
        start = time.perf_counter()
        worst = 0.0
        for _ in range(1000):
            spec = random_mlp_spec(rng, max_dim=8, max_layers=5)
            h0 = rng.standard_normal(spec.dims[0])
            m = make_mlp_map(spec)
            got = iterate(m, e0(m, h0), spec.n_layers)[-1].block(-1)
            worst = max(worst, rel(got, spec.forward(h0)))
        secs = time.perf_counter() - start
        info["detail"] = f"1000 specs, max rel err {worst:.1e}, {secs:.2f}s"
        assert worst <= 1e-12
        assert secs < 5.0


def test_02_rnn_lifting_equivalence():
    with criterion(2, "RNN lifting") as info:
        rng = np.random.default_rng(102)
        start = time.perf_counter()
        worst = 0.0
        for _ in range(1000):
            n, mdim, T = (int(x) for x in rng.integers(1, 5, size=3))
            spec = RnnSpec(rng.standard_normal((n, mdim)), rng.standard_normal((n, n)),
                           rng.standard_normal(n), [rng.standard_normal(mdim) for _ in range(T)],
                           str(rng.choice(["tanh", "relu", "identity"])))
            h0 = rng.standard_normal(n)
            m = make_rnn_map(spec)
            got = iterate(m, e0(m, h0), T)[-1].block(-1)
            worst = max(worst, rel(got, spec.recurrence(h0)))
        secs = time.perf_counter() - start
        info["detail"] = f"1000 specs, max rel err {worst:.1e}, {secs:.2f}s"
        assert worst <= 1e-12
        assert secs < 5.0


def test_03_finite_impulse_fixed_point():
    with criterion(3, "finite impulse and fixed point, zero corner") as info:
        rng = np.random.default_rng(103)
        for _ in range(300):
            spec = random_mlp_spec(rng)
            m = make_mlp_map(spec)
            T = spec.n_layers
            a = iterate(m, e0(m, rng.standard_normal(spec.dims[0])), T + 2)
            b = iterate(m, e0(m, rng.standard_normal(spec.dims[0])), T + 2)
            assert np.array_equal(a[T + 1].data, b[T + 1].data)
            assert np.array_equal(a[T + 2].data, a[T + 1].data)
        info["detail"] = "300 maps: iterate T+1 exact-equal across h0, T+2 == T+1"


def test_04_identity_corner_fixed_point():
    with criterion(4, "identity corner fixed point at k=T") as info:
        rng = np.random.default_rng(104)
        for _ in range(300):
            spec = random_mlp_spec(rng)
            m = make_mlp_map(spec, identity_corner=True)
            T = spec.n_layers
            h0, h1 = rng.standard_normal((2, spec.dims[0]))
            a = iterate(m, e0(m, h0), T + 1)
            assert a[T + 1] == a[T]
            # a dead relu layer can make the state stationary before T
            assert find_fixed_point(m, e0(m, h0)).at_iteration <= T
            b = iterate(m, e0(m, h1), T)
            assert not np.array_equal(a[T].data, b[T].data)
        info["detail"] = "300 maps: fixed at k=T exactly, states differ for distinct h0"


def test_05_q_invariance():
    with criterion(5, "q-invariance and diagonal counterexample") as info:
        rng = np.random.default_rng(105)
        worst = 0.0
        for _ in range(20):
            spec = random_mlp_spec(rng, max_layers=4)
            h0 = rng.standard_normal(spec.dims[0])
            S = Affine(rng.standard_normal((spec.dims[-1], spec.dims[0])))
            maps = [make_mlp_map(spec), make_mlp_map(spec, True)]
            if spec.n_layers >= 2:
                maps.append(make_skip_map(spec, S, float(rng.uniform(0, 1))))
            for m in maps:
                ok, dev = q_invariance_check(m, h0, q_samples=100, seed=int(rng.integers(1e9)))
                worst = max(worst, dev)
        diag = make_diag_map(Affine([[2.0]]), Affine([[3.0]]), Affine([[5.0]]), Affine([[0.5]]))
        _, diag_dev = q_invariance_check(diag, [1.0], 100, 3, region="full")
        info["detail"] = f"max deviation {worst:.1e}; diagonal S deviates by {diag_dev:.3g}"
        assert worst <= 1e-12
        assert diag_dev > 1e-6


def test_06_above_diagonal_not_fixed():
    with criterion(6, "above-diagonal S is not a fixed point") as info:
        rng = np.random.default_rng(106)
        smallest_res = smallest_q = np.inf
        for _ in range(50):
            f = [Affine([[float(x)]]) for x in rng.uniform(0.5, 2.0, size=3)]
            spec = MlpLayerSpec([1, 1, 1, 1], [c.weight for c in f], act="identity")
            s = Affine([[float(rng.uniform(0.2, 1.5))]])
            m = make_above_map(spec, s)
            v4 = iterate(m, e0(m, 1.0), 4)[-1]
            residual = float(np.max(np.abs(iterate(m, v4, 1)[-1].data - v4.data)))
            q2 = StateVector.from_blocks([[1.0], [0.0], [float(rng.uniform(0.5, 2))], [0.0]])
            shift = float(np.max(np.abs(iterate(m, q2, 4)[-1].data - v4.data)))
            smallest_res, smallest_q = min(smallest_res, residual), min(smallest_q, shift)
        info["detail"] = (f"min residual at k=4 {smallest_res:.3g}, "
                          f"min q2 effect {smallest_q:.3g}")
        assert smallest_res > 1e-6
        assert smallest_q > 1e-6


def test_07_epsilon_continuum():
    with criterion(7, "epsilon continuum") as info:
        rng = np.random.default_rng(107)
        for _ in range(10):
            spec = random_mlp_spec(rng, max_layers=3)
            h0 = rng.standard_normal(spec.dims[0])
            for eps in (0.0, 0.25, 0.5, 1.0):
                for k in range(21):
                    assert epsilon_decay_check(spec, eps, h0, k)
            one, inf = make_epsilon_map(spec, 1.0), make_mlp_map(spec, True)
            zero, fin = make_epsilon_map(spec, 0.0), make_mlp_map(spec)
            assert one == inf
            for k in range(spec.n_layers + 3):
                assert iterate(zero, e0(zero, h0), k)[-1] == iterate(fin, e0(fin, h0), k)[-1]
            probes = [e0(zero, h0), e0(zero, h0 + 1.0)]
            assert classify_impulse(zero, probes).kind == "finite"
        info["detail"] = "eps^k h0 to 1e-12 for k <= 20; endpoints reproduce both maps"


def test_08_skip_connection():
    with criterion(8, "skip connection value and eta limit") as info:
        rng = np.random.default_rng(108)
        worst, worst_lin = 0.0, 0.0
        for _ in range(100):
            spec = random_mlp_spec(rng, max_layers=3)
            if spec.n_layers < 2:
                continue
            S = Affine(rng.standard_normal((spec.dims[-1], spec.dims[0])),
                       rng.standard_normal(spec.dims[-1]))
            h0 = rng.standard_normal(spec.dims[0])
            T = spec.n_layers
            eta = float(rng.uniform(0, 2))
            m = make_skip_map(spec, S, eta)
            traj = iterate(m, e0(m, h0), T + 1)
            want = eta * S(h0, spec.dims[-1]) + spec.forward(h0)
            worst = max(worst, rel(traj[T].block(-1), want))
            assert rel(traj[T + 1].data, traj[T].data) <= 1e-12
            inf = make_mlp_map(spec, True)
            base = iterate(inf, e0(inf, h0), T + 1)
            gaps = []
            for e in (1e-1, 1e-2, 1e-3):
                sk = make_skip_map(spec, S, e)
                tr = iterate(sk, e0(sk, h0), T + 1)
                gaps.append(max(float(np.max(np.abs(a.data - b.data))) for a, b in zip(tr, base)))
            if gaps[0] > 0:
                worst_lin = max(worst_lin, abs(gaps[0] / gaps[1] - 10), abs(gaps[1] / gaps[2] - 10))
        info["detail"] = f"max rel err {worst:.1e}; gap ratio per decade off 10 by {worst_lin:.1e}"
        assert worst <= 1e-12
        assert worst_lin < 1e-6


def test_09_closed_forms():
    with criterion(9, "closed-form oracles") as info:
        rng = np.random.default_rng(109)
        worst = 0.0
        for _ in range(200):
            f, d = random_linear_chain(rng)
            s_diag = Affine(0.6 * rng.standard_normal((d[1], d[1])))
            s_sup = Affine(0.6 * rng.standard_normal((d[1], d[2])))
            h0 = rng.standard_normal(d[0])
            diag, sup = make_diag_map(*f, s_diag), make_superdiag_map(*f, s_sup)
            td, ts = iterate(diag, e0(diag, h0), 20), iterate(sup, e0(sup, h0), 20)
            for k in range(3, 21):
                worst = max(worst, rel(td[k].data, closed_form_diag(*f, s_diag, h0, k).data),
                            rel(ts[k].data, closed_form_superdiag(*f, s_sup, h0, k).data))
        lin = [Affine([[x]]) for x in (2.0, 3.0, 5.0, 0.5)]
        diag4 = closed_form_diag(*lin, [1.0], 4).block(1)[0]
        sup5 = closed_form_superdiag(*lin, [1.0], 5).block(1)[0]
        info["detail"] = f"max rel err {worst:.1e}; spot values {diag4}, {sup5}"
        assert worst <= 1e-10
        assert diag4 == 3.75 and sup5 == 9.5


def test_10_gradients():
    with criterion(10, "reverse-mode gradients") as info:
        rng = np.random.default_rng(110)
        start = time.perf_counter()
        worst = max(gradient_relative_error(*_gradient_instance(rng)) for _ in range(200))
        secs = time.perf_counter() - start
        info["detail"] = f"200 instances, max rel err {worst:.1e}, {secs:.2f}s"
        assert worst <= 1e-5
        assert secs < 30.0


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    out = []
    for name in ("first", "second"):
        d = tmp_path_factory.mktemp(name)
        start = time.perf_counter()
        code = main(["compare", str(DESK), "-o", str(d)])
        out.append((code, d, time.perf_counter() - start))
    return out


def test_11_sparsity_experiment(desk_runs):
    with criterion(11, "layered vs random masks, desk scale") as info:
        code, d, secs = desk_runs[0]
        assert code == 0
        summary = json.loads((d / "summary.json").read_text())
        lay, rnd = summary["models"]["layered"], summary["models"]["random"]
        accs = lay["final_accuracy"] + rnd["final_accuracy"]
        info["detail"] = (f"layered mean {lay['mean']:.4f}, random mean {rnd['mean']:.4f}, "
                          f"|delta| {summary['mean_delta']:.4f}, min run {min(accs):.3f}, "
                          f"{secs:.0f}s")
        assert lay["n"] == 3 and rnd["n"] == 5
        tiles = summary["trainable"]["layered"]["tiles"]
        assert all(r["tiles"] == tiles for r in summary["trainable"]["random"])
        assert min(accs) >= 0.85
        assert summary["mean_delta"] <= 0.03
        assert secs < 15 * 60


def test_12_determinism(desk_runs):
    with criterion(12, "bit-identical repeat of criterion 11") as info:
        (c1, d1, _), (c2, d2, _) = desk_runs
        assert c1 == c2 == 0
        a, b = (d1 / "log.csv").read_bytes(), (d2 / "log.csv").read_bytes()
        info["detail"] = f"log.csv {len(a)} bytes, identical={a == b}"
        assert a == b
        assert (d1 / "summary.json").read_bytes() == (d2 / "summary.json").read_bytes()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
