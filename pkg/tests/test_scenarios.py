import numpy as np
import pytest
import yaml

from procshadow import qcore
from procshadow import scenarios as sc
from procshadow.scenarios import ConfigError


def test_defaults_need_a_seed():
    with pytest.raises(ConfigError) as err:
        sc.validate({})
    assert err.value.field == "seed"
    cfg = sc.validate({"seed": 3})
    assert cfg.qubits == 2 and cfg.validation.shots == 16384


@pytest.mark.parametrize("patch, field", [
    ({"bogus": 1}, "bogus"),
    ({"version": 2}, "version"),
    ({"scenario": "lattice"}, "scenario"),
    ({"qubits": 1}, "qubits"),
    ({"qubits": 11}, "qubits"),
    ({"qubits": 2.5}, "qubits"),
    ({"steps": 0}, "steps"),
    ({"shots": -1}, "shots"),
    ({"ell": 5, "steps": 4}, "ell"),
    ({"frame": "sic"}, "frame"),
    ({"coupling": "cnot"}, "coupling"),
    ({"exact": "yes"}, "exact"),
    ({"env_state": "0x"}, "env_state"),
    ({"qubits": 3, "env_state": "011"}, "env_state"),
    ({"coupled_steps": [9]}, "coupled_steps"),
    ({"alpha_max": -0.1}, "alpha_max"),
    ({"junction_cutoff": "small"}, "junction_cutoff"),
    ({"validation": {"sequences": 0}}, "validation.sequences"),
    ({"validation": {"extra": 1}}, "validation.extra"),
    ({"validation": 3}, "validation"),
])
def test_field_errors(patch, field):
    with pytest.raises(ConfigError) as err:
        sc.validate({"seed": 1, **patch})
    assert err.value.field == field


def test_state_labels_broadcast():
    cfg = sc.validate({"seed": 1, "qubits": 4, "env_state": "+"})
    assert cfg.env_state == "+++"


def test_load_config_overrides(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump({"seed": 1, "steps": 3, "ell": 2}))
    cfg = sc.load_config(p, {"seed": 7, "output": None})
    assert cfg.seed == 7 and cfg.steps == 3 and cfg.output == "out"
    (tmp_path / "bad.yaml").write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        sc.load_config(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n")
    with pytest.raises(ConfigError):
        sc.load_config(tmp_path / "list.yaml")
    with pytest.raises(ConfigError):
        sc.load_config(tmp_path / "missing.yaml")


def test_digest_tracks_content():
    a = sc.validate({"seed": 1})
    assert a.digest() == sc.validate({"seed": 1}).digest()
    assert a.digest() != sc.validate({"seed": 2}).digest()


def test_exchange_gate():
    u = sc.exchange(0.3)
    assert np.allclose(u @ u.conj().T, np.eye(4))
    # XX+YY+ZZ = 2 SWAP - I
    assert np.allclose(u, np.exp(0.3j) * sc.partial_swap(0.6))
    assert np.allclose(sc.exchange(0.0), np.eye(4))


def test_spin_chain_circuit():
    cfg = sc.validate({"seed": 4, "qubits": 3, "steps": 5, "env_state": "10"})
    c = sc.build_circuit(cfg)
    assert c.k == 5 and c.d_env == 4
    assert np.array(c.meta["alphas"]).shape == (5, 2)
    assert np.array(c.meta["alphas"]).max() <= np.pi / 4
    assert np.allclose(np.diag(c.rho0)[0b010], 1)
    again = sc.build_circuit(cfg)
    assert all(np.array_equal(a, b) for a, b in zip(c.u_steps, again.u_steps))


def test_alpha_zero_is_identity():
    cfg = sc.validate({"seed": 4, "qubits": 3, "steps": 3, "alpha_max": 0.0})
    assert all(np.allclose(u, np.eye(8)) for u in sc.build_circuit(cfg).u_steps)


def test_custom_couplings():
    cfg = sc.validate({"seed": 2, "scenario": "custom_unitaries", "steps": 3, "coupling": "controlled_phase",
                       "theta": np.pi / 2, "local_rotations": False, "coupled_steps": [1]})
    c = sc.build_circuit(cfg)
    assert np.allclose(c.u_steps[0], np.eye(4))
    assert np.allclose(c.u_steps[1], np.diag([1, 1, 1, 1j]))
    local = sc.build_circuit(sc.markov_floor(cfg))
    for u in local.u_steps:
        # no coupling: a product with the identity on the environment
        assert np.allclose(u, np.kron(u[::2, ::2], np.eye(2)))


def test_idle_neighbors_unitary():
    cfg = sc.validate({"seed": 2, "scenario": "idle_neighbors", "qubits": 4, "steps": 2, "ell": 1})
    for u in sc.build_circuit(cfg).u_steps:
        assert np.allclose(u @ u.conj().T, np.eye(16), atol=1e-10)


def test_markov_floor():
    cfg = sc.validate({"seed": 1})
    assert sc.markov_floor(cfg).alpha_max == 0.0
    other = sc.validate({"seed": 1, "scenario": "idle_neighbors"})
    assert sc.markov_floor(other).coupling == "local"


@pytest.mark.parametrize("name", sc.FRAMES)
def test_frame_ids_round_trip(name):
    f = sc.make_frame(sc.validate({"seed": 1, "frame": name}))
    g = sc.frame_from_id(f.frame_id)
    assert g.frame_id == f.frame_id
    assert np.allclose(g.elements, f.elements)


def test_unknown_frame_id():
    with pytest.raises(ValueError):
        sc.frame_from_id("sic-povm")


def test_initial_state_is_pure_product():
    cfg = sc.validate({"seed": 1, "qubits": 3, "system_state": "+", "env_state": "01"})
    rho = sc.build_circuit(cfg).rho0
    ref = qcore.dm(np.kron(qcore.ket("+"), np.kron(qcore.ket("0"), qcore.ket("1"))))
    assert np.allclose(rho, ref)
