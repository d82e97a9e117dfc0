import numpy as np
import pytest

from procshadow import fcs, io, qcore
from procshadow import scenarios as sc
from procshadow import studies


def cfg(**kw):
    return sc.validate({"seed": 3, **kw})


def test_two_qubit_chain_exact_reconstruction():
    c = cfg(qubits=2, steps=5, ell=2, exact=True)
    circuit = sc.build_circuit(c)
    mpo = studies.stitch(c, studies.estimate_marginals(c, circuit, None))
    err = np.linalg.norm(fcs.reconstruct_dense(mpo).choi - circuit.process_tensor().choi)
    assert err <= 1e-6


def test_zero_coupling_idle_metrics(tmp_path):
    c = cfg(qubits=3, steps=4, ell=2, alpha_max=0.0, exact=True)
    studies.run_spin_chain(c, tmp_path)
    rows = io.read_csv(tmp_path / "idle_metrics.csv")
    purity = [float(r["value"]) for r in rows if r["metric"] == "purity_rho1"]
    td = [float(r["value"]) for r in rows if r["metric"] == "trace_distance"]
    assert len(purity) == 4
    assert np.allclose(purity, 1, atol=1e-8)
    assert np.allclose(td, 1 / np.sqrt(2), atol=1e-8)
    assert not studies.has_revival(purity)


def test_has_revival():
    assert studies.has_revival([1, 0.8, 0.9])
    assert not studies.has_revival([1, 0.9, 0.9, 0.8])
    assert not studies.has_revival([0.5, 0.6, 0.7])


def test_output_states_match_dense(rng):
    c = cfg(qubits=2, steps=3, ell=2, exact=True, scenario="custom_unitaries")
    circuit = sc.build_circuit(c)
    mpo = studies.stitch(c, studies.estimate_marginals(c, circuit, None))
    rho = qcore.random_density(2, rng)
    states = studies.output_states(mpo, rho)
    # preparing rho replaces the system and keeps the environment
    env = np.einsum("aiaj->ij", circuit.rho0.reshape(2, 2, 2, 2))
    full = np.kron(rho, env)
    for j, state in enumerate(states, start=1):
        r = full
        for u in circuit.u_steps[:j]:
            r = u @ r @ u.conj().T
        ref = np.trace(r.reshape(2, 2, 2, 2), axis1=1, axis2=3)
        assert np.allclose(state, ref, atol=1e-8)


def test_window_metrics_markov_vanish():
    c = cfg(qubits=3, steps=4, ell=2, alpha_max=0.0, exact=True)
    circuit = sc.build_circuit(c)
    ms = studies.estimate_marginals(c, circuit, None)
    for row in studies.window_metrics(ms.marginals):
        assert abs(row["value"]) <= 1e-8


def test_pair_statistics_product_is_zero(rng):
    a, b = (qcore.random_density(4, rng) * 2 for _ in range(2))
    stats = studies.pair_statistics(np.kron(a, b), 0, 2)
    assert all(abs(v) <= 1e-10 for v in stats.values())


def test_pair_legs_order():
    assert studies.pair_legs(3, 1) == ["o4", "i4", "o2", "i2"]
    assert studies.pair_legs(1, 3) == studies.pair_legs(3, 1)


def test_exact_correlated_noise_shared_env():
    c = cfg(scenario="custom_unitaries", qubits=2, steps=2, ell=1, coupling="partial_swap",
            theta=np.pi / 2, local_rotations=False, env_state="+")
    pt = sc.build_circuit(c).process_tensor()
    stats = studies.dense_pair_statistics(pt, 0, 1)
    markov = studies.dense_pair_statistics(sc.build_circuit(sc.markov_floor(c)).process_tensor(), 0, 1)
    assert stats["trace_distance"] > 0.1
    assert all(abs(v) <= 1e-10 for v in markov.values())


def test_exact_validation_is_perfect():
    c = cfg(scenario="custom_unitaries", qubits=2, steps=4, ell=2, exact=True, frame="pauli")
    circuit = sc.build_circuit(c)
    mpo = studies.stitch(c, studies.estimate_marginals(c, circuit, None))
    rows = studies.validation_table(mpo, circuit, sc.make_frame(c), 3, 0, 4, c.seed)
    assert len(rows) == 3 * (4 + 3 + 2 + 1)
    assert all(r["fidelity"] == pytest.approx(1, abs=1e-6) for r in rows)


def test_short_marginals_validate_better():
    c = cfg(qubits=3, steps=6, ell=2, shots=200_000, mle_iters=0, frame="pauli",
            validation={"sequences": 8, "shots": 4096, "max_length": 5})
    circuit = sc.build_circuit(c)
    frame = sc.make_frame(c)
    shadow = studies.acquire(c, circuit, frame, threads=4)
    mpo = studies.stitch(c, studies.estimate_marginals(c, circuit, shadow, threads=4))
    med = studies.median_by_length(studies.validation_table(mpo, circuit, frame, 8, 4096, 5, c.seed, 4))
    assert med[1] >= med[5]


def test_distribution_tables_normalized(tmp_path):
    c = cfg(qubits=2, steps=3, ell=2, exact=True, frame="pauli")
    studies.run_spin_chain(c, tmp_path)
    mpo = io.load_mpo(tmp_path / "mpo.pso")
    frame = sc.make_frame(c)
    for settings, _ in studies.random_sequences(frame, 3, 4, 0):
        p = fcs.contract_probability(mpo, [frame.elements[s] for s in settings])
        assert p.sum() == pytest.approx(1, abs=1e-9)


def test_run_validation_rejects_wrong_length(tmp_path):
    c = cfg(qubits=2, steps=3, ell=2, exact=True)
    circuit = sc.build_circuit(c)
    mpo = studies.stitch(c, studies.estimate_marginals(c, circuit, None))
    with pytest.raises(ValueError):
        studies.run_validation(cfg(qubits=2, steps=4, ell=2, exact=True), mpo, tmp_path)


def test_timer_accumulates():
    t = studies.Timer()
    for _ in range(2):
        with t("a"):
            pass
    assert set(t.stages) == {"a"} and t.stages["a"] >= 0


def test_clean_projects_onto_states(rng):
    good = qcore.random_density(2, rng)
    assert np.allclose(studies._clean(2 * good), good)
    bad = np.diag([1.4, -0.4])
    assert np.allclose(studies._clean(bad), np.diag([1.0, 0.0]))
    h = qcore.random_hermitian(2, rng) + 2 * np.eye(2)
    c = studies._clean(h)
    assert np.trace(c).real == pytest.approx(1) and np.linalg.eigvalsh(c).min() >= -1e-12
