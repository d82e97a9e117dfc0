import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

from procshadow import channels as ch
from procshadow import instruments as ins
from procshadow import qcore
from procshadow import shadows as sh

angles = st.floats(0, 2 * np.pi)
ZPOVM = [qcore.dm(qcore.ket("0")), qcore.dm(qcore.ket("1"))]
IPLUS = qcore.dm(qcore.ket("i+"))


@pytest.fixture(scope="module")
def ci():
    return ins.characterize()


@pytest.fixture(scope="module")
def ci0():
    return ins.characterize(ins.BootstrapSpec(gamma=0.0))


def oracle(theta, phi, lam, gamma=np.pi / 4):
    return ch.stinespring_instrument(ins.u_w(theta, phi, lam, gamma), IPLUS, ZPOVM, ancilla_first=True)


def test_u_w_examples(rng):
    t, p, l = rng.uniform(0, 2 * np.pi, 3)
    assert np.allclose(ins.u_w(t, p, l, 0), np.kron(qcore.f(), qcore.w(t, p, l)))
    assert np.allclose(ins.u_w(0, 0, 0, 0), np.kron(qcore.f(), np.eye(2)))
    assert qcore.is_unitary(ins.u_w(t, p, l, 0.7), 1e-12)
    v = expm(-1j * np.pi / 8 * np.kron(qcore.pauli("X"), qcore.pauli("Z")))
    assert np.allclose(ins.u_w(0, 0, 0, np.pi / 4), v @ np.kron(qcore.f(), np.eye(2)) @ v, atol=1e-12)


def test_default_spec():
    spec = ins.BootstrapSpec()
    assert np.allclose(qcore.dm(spec.ancilla_init), IPLUS)
    labels = ("+", "i+", "0", "1")
    assert np.allclose(spec.prep_states(), [qcore.dm(qcore.ket(s)) for s in labels])


def test_rank_deficient_preparations():
    spec = ins.BootstrapSpec(preparations=[np.eye(2)] * 4)
    with pytest.raises(ins.CharacterizationError):
        ins.characterize(spec)


def test_decoupled_elements(ci0, rng):
    # gamma = 0: the ancilla reads |i+> in Z with probability 1/2 and w acts unperturbed
    t, p, l = rng.uniform(0, 2 * np.pi, 3)
    wc = ch.choi_from_unitary(qcore.w(t, p, l)).matrix
    for x in range(2):
        assert np.allclose(ins.instrument_choi(ci0, t, p, l, x).matrix, wc / 2, atol=1e-10)
    rho = qcore.random_density(2, rng)
    assert np.trace(ins.instrument_choi(ci0, t, p, l, 0).apply(rho)).real == pytest.approx(0.5)


def test_identity_setting_probabilities(ci, rng):
    rho = qcore.random_density(2, rng)
    ref = oracle(0, 0, 0).probabilities(rho)
    got = [np.trace(ins.instrument_choi(ci, 0, 0, 0, x).apply(rho)).real for x in range(2)]
    assert np.allclose(got, ref, atol=1e-10)


def test_matches_stinespring_oracle(ci, rng):
    for _ in range(50):
        t, p, l = rng.uniform(0, 2 * np.pi, 3)
        ref = oracle(t, p, l)
        for x in range(2):
            assert np.allclose(ins.instrument_choi(ci, t, p, l, x).matrix, ref[x].matrix, atol=1e-8)


def test_element_sums_cptp(ci, rng):
    for _ in range(100):
        t, p, l = rng.uniform(0, 2 * np.pi, 3)
        tot = ins.instrument_choi(ci, t, p, l, 0) + ins.instrument_choi(ci, t, p, l, 1)
        assert ch.classify(tot.matrix, 2, 2) == "CPTP"
        probs = [np.trace(ins.instrument_choi(ci, t, p, l, x).apply(np.eye(2) / 2)).real for x in range(2)]
        assert sum(probs) == pytest.approx(1)


def test_held_out_predictions(ci, rng):
    for _ in range(100):
        t, p, l = rng.uniform(0, 2 * np.pi, 3)
        pred = ci.predicted_outputs(t, p, l)
        for i, rho in enumerate(ci.prep_states):
            direct = ins._sa_output(ci.spec, qcore.w(t, p, l), rho).reshape(2, 2, 2, 2)
            for x in range(2):
                assert np.allclose(pred[i, x], direct[x, :, x, :], atol=1e-8)


def test_kraus_ops_match(ci, rng):
    t, p, l = rng.uniform(0, 2 * np.pi, 3)
    ks = ins.kraus_ops(t, p, l, np.pi / 4)
    for x in range(2):
        assert np.allclose(ch.choi_from_kraus([ks[x]]).matrix, ins.instrument_choi(ci, t, p, l, x).matrix,
                           atol=1e-8)


def test_printed_forms_at_zero(ci):
    ref = ins.printed_ptm(0, 0, 0)
    assert ref["z0"] == pytest.approx(0.5)
    assert ref["0z"] == pytest.approx(0.5)
    for key in ("x0", "y0", "0x", "0y"):
        assert ref[key] == pytest.approx(0, abs=1e-15)
    assert max(ins.ptm_check(ci, 0, 0, 0).values()) <= 1e-8


def test_unitary_only_rank(ci0):
    assert ins.span_rank(ci0) <= 10
    with pytest.raises(ins.ICBasisError) as err:
        ins.ic_basis(ci0)
    assert err.value.rank <= 10


def test_ic_basis(ci):
    assert ins.span_rank(ci) == 16
    basis = ins.ic_basis(ci)
    assert len(basis.params) == 16
    assert basis.sigma_min > 1e-3
    assert np.isfinite(basis.condition_number)
    frame = basis.frame(ci)
    assert frame.duality_defect() <= 1e-8
    assert frame.rank() == 16


def test_clifford_frame(ci):
    assert len(ins.clifford_group()) == 24
    frame = ins.clifford_frame(ci)
    assert frame.n_settings == 24
    assert frame.rank() == 16
    assert frame.duality_defect() <= 1e-8
    man = ins.frame_manifest(frame)
    assert man["rank"] == 16
    assert len(man["params"]) == 24


def test_bootstrap_shadow_norm_penalty(ci):
    # a Z on the prepared state costs at least as much as with the ideal Pauli ensemble
    z = qcore.pauli("Z")
    boot = sh.leg_norm_sq(ins.clifford_frame(ci), z, "out", grid=2000)
    ideal = sh.leg_norm_sq(sh.pauli_frame(), z, "out", grid=2000)
    assert np.isfinite(boot)
    assert boot >= ideal - 1e-6


def test_non_unitality_witness(ci, rng):
    found = False
    for t, p, l in ins.default_grid():
        for x in range(2):
            d = ch.diagnostics(ins.instrument_choi(ci, t, p, l, x))
            if d["unitality_defect"] > 0.1 and d["trace_defect"] > 0.1:
                found = True
    assert found


def test_noisy_characterization_stays_physical():
    ci = ins.characterize(ins.BootstrapSpec(noise=0.02))
    tot = ins.instrument_choi(ci, 0.3, 1.0, 2.0, 0) + ins.instrument_choi(ci, 0.3, 1.0, 2.0, 1)
    assert ch.classify(tot.matrix, 2, 2) == "CPTP"


@given(angles, angles, angles)
def test_deferred_measurement(t, p, l):
    ci = _CI
    rho = qcore.random_density(2, np.random.default_rng(int(1e6 * t) % 2**32))
    tot = sum(ins.instrument_choi(ci, t, p, l, x).apply(rho) for x in range(2))
    u = ins.u_w(t, p, l, np.pi / 4)
    big = u @ np.kron(IPLUS, rho) @ u.conj().T
    ref = np.einsum("asat->st", big.reshape(2, 2, 2, 2))
    assert np.allclose(tot, ref, atol=1e-9)


_CI = ins.characterize()
