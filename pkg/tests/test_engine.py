import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from procshadow import engine, fcs, process as pr, qcore
from procshadow import shadows as sh
from procshadow.engine import Circuit

seeds = st.integers(0, 2**32 - 1)


def random_circuit(k, rng, de=2):
    us = [qcore.haar_unitary(2 * de, rng) for _ in range(k)]
    rho = np.kron(qcore.random_density(2, rng), qcore.random_density(de, rng))
    return Circuit(us, rho)


def test_circuit_validation():
    with pytest.raises(ValueError):
        Circuit([np.eye(4)], np.eye(3) / 3)
    with pytest.raises(ValueError):
        Circuit([np.eye(8)], np.eye(4) / 4)
    c = Circuit([np.eye(4)] * 3, np.eye(4) / 4)
    assert (c.k, c.d_env) == (3, 2)


@settings(max_examples=15)
@given(seeds)
def test_choi_to_kraus_round_trip(seed):
    r = np.random.default_rng(seed)
    c = qcore.random_density(4, r) * 2
    ks = engine.choi_to_kraus(c, 2, 2)
    # Choi with the out leg first: sum_r vec(K_r) vec(K_r)^dag
    rebuilt = sum(np.outer(k.reshape(-1), k.reshape(-1).conj()) for k in ks)
    assert np.allclose(rebuilt, c, atol=1e-10)


def test_zero_shots():
    c = random_circuit(2, np.random.default_rng(0))
    rec = engine.sample_records(c, sh.pauli_frame(), 0, 1)
    assert rec.n == 0 and rec.settings.shape == (0, 2)


def test_thread_count_does_not_change_records():
    c = random_circuit(3, np.random.default_rng(2))
    f = sh.pauli_frame()
    a = engine.sample_records(c, f, 20_000, 9, threads=1, chunk=4096)
    b = engine.sample_records(c, f, 20_000, 9, threads=4, chunk=4096)
    for x, y in ((a.settings, b.settings), (a.outcomes, b.outcomes),
                 (a.terminal_settings, b.terminal_settings), (a.terminal_outcomes, b.terminal_outcomes)):
        assert np.array_equal(x, y)
    c2 = engine.sample_records(c, f, 20_000, 10, threads=1, chunk=4096)
    assert not np.array_equal(a.outcomes, c2.outcomes)


def test_sampled_distribution_matches_exact():
    rng = np.random.default_rng(3)
    c = random_circuit(2, rng)
    f = sh.pauli_frame()
    settings_ = [4, 11]
    rec = engine.sample_records(c, f, 1_000_000, 5, threads=4, settings=settings_, terminal_setting=0)
    exact = engine.exact_distribution(c, f, settings_, (0, 1))
    idx = np.ravel_multi_index(rec.outcomes.T, exact.shape)
    emp = np.bincount(idx, minlength=exact.size).reshape(exact.shape) / rec.n
    assert exact.sum() == pytest.approx(1, abs=1e-12)
    assert 0.5 * np.abs(emp - exact).sum() <= 5e-3


def test_exact_distribution_matches_process_tensor():
    rng = np.random.default_rng(4)
    c = random_circuit(3, rng)
    pt = c.process_tensor()
    f = sh.pauli_frame()
    s = [2, 7, 15]
    dist = engine.exact_distribution(c, f, s, (1, 2))
    for a in range(2):
        for b in range(2):
            ctrl = pr.ControlSequence([f.elements[s[0]].sum(axis=0), f.elements[s[1]][a], f.elements[s[2]][b]],
                                      np.eye(2))
            assert dist[a, b] == pytest.approx(pr.act(pt, ctrl), abs=1e-10)


def test_exact_window_marginals_match_dense():
    rng = np.random.default_rng(5)
    c = random_circuit(4, rng)
    pt = c.process_tensor()
    for ell in (1, 2, 3):
        ref = fcs.exact_marginals(pt, ell).marginals
        for w, m in zip(engine.exact_window_marginals(c, ell), ref, strict=True):
            assert w.offset == m.offset
            assert np.allclose(w.choi, m.choi, atol=1e-10)


def test_sample_snapshots_statistics_match_exact_shadow():
    rng = np.random.default_rng(6)
    c = random_circuit(2, rng, de=1)
    f = sh.pauli_frame(("0", "1", "+", "i+"))
    rec = engine.sample_records(c, f, 200_000, 8, threads=2)
    exact = sh.exact_shadow(c.process_tensor(), f)
    est = sh.marginal_estimate(rec, ["o2", "o1"])[0]
    ref = sh.marginal_estimate(exact, ["o2", "o1"])[0]
    assert np.abs(est - ref).max() <= 0.05
