import numpy as np
import pytest
from hypothesis import given, strategies as st

from procshadow import channels as ch
from procshadow import qcore

X = qcore.pauli("X")
P0, P1 = qcore.dm(qcore.ket("0")), qcore.dm(qcore.ket("1"))
seeds = st.integers(0, 2**32 - 1)


def amplitude_damping(g):
    return [np.array([[1, 0], [0, np.sqrt(1 - g)]]), np.array([[0, np.sqrt(g)], [0, 0]])]


def test_choi_from_unitary_identity():
    c = ch.choi_from_unitary(np.eye(2))
    assert np.allclose(c.matrix, qcore.bell())
    assert np.trace(c.matrix).real == pytest.approx(2)
    assert c.trace_class == "CPTP"


def test_depolarizing_kraus_choi():
    ks = [0.5 * qcore.pauli(p) for p in "IXYZ"]
    assert np.allclose(ch.choi_from_kraus(ks).matrix, np.eye(4) / 2)


def test_choi_of_x():
    c = ch.choi_from_unitary(X)
    assert np.linalg.matrix_rank(c.matrix) == 1
    assert np.trace(c.matrix).real == pytest.approx(2)
    assert np.allclose(ch.apply_choi(c, P0), P1)


def test_non_unitary_rejected():
    with pytest.raises(ValueError):
        ch.choi_from_unitary(np.diag([1.0, 0.5]))
    with pytest.raises(ValueError):
        ch.choi_from_kraus([np.eye(2), np.eye(2)])


def test_apply_depolarizing(rng):
    rho = qcore.random_density(2, rng)
    assert np.allclose(ch.apply_choi(ch.depolarizing(1.0), rho), np.eye(2) / 2)
    with pytest.raises(ValueError):
        ch.apply_choi(ch.depolarizing(1.0), np.eye(4) / 4)


def _brute_force_probability(u, rho_a, eff, rho):
    big = u @ np.kron(rho, rho_a) @ u.conj().T
    return np.trace(big @ np.kron(np.eye(2), eff)).real


def test_cptni_element_probability(rng):
    u = qcore.haar_unitary(4, rng)
    inst = ch.stinespring_instrument(u, P0, [P0, P1])
    rho = qcore.random_density(2, rng)
    for x, eff in enumerate([P0, P1]):
        p = np.trace(ch.apply_choi(inst[x], rho)).real
        assert 0 <= p <= 1
        assert p == pytest.approx(_brute_force_probability(u, P0, eff, rho), abs=1e-12)
        assert inst[x].trace_class in ("CPTNI", "CPTP")


def test_stinespring_identity():
    inst = ch.stinespring_instrument(np.eye(4), P0, [P0, P1])
    assert np.allclose(inst[0].matrix, qcore.bell())
    assert np.allclose(inst[1].matrix, 0)


def test_stinespring_swap():
    inst = ch.stinespring_instrument(qcore.swap(), P0, [P0, P1])
    # outcome 0 keeps the ancilla's |0> on S and weights by <0|rho|0>
    assert np.allclose(inst[0].matrix, ch.measure_prepare(P0, P0).matrix)
    assert np.allclose(inst[1].matrix, ch.measure_prepare(P1, P0).matrix)


def test_invalid_povm_rejected():
    with pytest.raises(ValueError):
        ch.stinespring_instrument(np.eye(4), P0, [P0, P0])


def test_ptm_identity_and_diagnostics():
    r = ch.ptm_from_choi(ch.choi_from_unitary(np.eye(2)))
    assert np.allclose(r, np.eye(4))
    assert np.allclose(ch.ptm_from_choi(ch.choi_from_unitary(np.eye(2)), normalized=False), 2 * np.eye(4))
    d = ch.diagnostics(ch.choi_from_unitary(qcore.h()))
    assert d["unitality_defect"] == pytest.approx(0, abs=1e-12)
    assert d["trace_defect"] == pytest.approx(0, abs=1e-12)


def test_amplitude_damping_diagnostics():
    d = ch.diagnostics(ch.choi_from_kraus(amplitude_damping(1.0)))
    assert d["unitality_defect"] > 0.5
    assert d["trace_defect"] == pytest.approx(0, abs=1e-12)


def test_trace_decreasing_diagnostics():
    d = ch.diagnostics(ch.measure_prepare(P0, P0))
    assert d["trace_defect"] == pytest.approx(1)


@given(seeds)
def test_unitary_round_trip(seed):
    r = np.random.default_rng(seed)
    u, rho = qcore.haar_unitary(2, r), qcore.random_density(2, r)
    assert np.allclose(ch.apply_choi(ch.choi_from_unitary(u), rho), u @ rho @ u.conj().T, atol=1e-10)


@given(seeds)
def test_composition(seed):
    r = np.random.default_rng(seed)
    a = ch.choi_from_unitary(qcore.haar_unitary(2, r))
    b = ch.choi_from_kraus(amplitude_damping(r.uniform()))
    rho = qcore.random_density(2, r)
    assert np.allclose(ch.apply_choi(ch.compose(b, a), rho), b.apply(a.apply(rho)), atol=1e-9)
    assert np.allclose(ch.ptm_from_choi(ch.compose(b, a)), ch.ptm_from_choi(b) @ ch.ptm_from_choi(a), atol=1e-9)


@given(seeds)
def test_instrument_completeness(seed):
    r = np.random.default_rng(seed)
    u = qcore.haar_unitary(4, r)
    v = qcore.haar_unitary(2, r)
    povm = [v @ P0 @ v.conj().T, v @ P1 @ v.conj().T]
    inst = ch.stinespring_instrument(u, qcore.random_density(2, r), povm)
    p = inst.probabilities(qcore.random_density(2, r))
    assert np.all(p >= -1e-9)
    assert p.sum() == pytest.approx(1, abs=1e-9)
    assert inst.total().trace_class == "CPTP"
