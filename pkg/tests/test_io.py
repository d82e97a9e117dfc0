import json

import numpy as np
import pytest

from procshadow import engine, fcs, io, process as pr, qcore
from procshadow import shadows as sh
from procshadow.io import FormatError


def random_pt(k, rng):
    us = [qcore.haar_unitary(4, rng) for _ in range(k)]
    return pr.simulate_process(us, np.kron(qcore.random_density(2, rng), qcore.random_density(2, rng)), k)


def test_container_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.int32).reshape(2, 3), "b": np.array([1 + 2j, 3j]),
              "s": np.float64(2.5)}
    io.write_container(tmp_path / "c.bin", arrays, {"kind": "test", "x": [1, 2]})
    got, meta = io.read_container(tmp_path / "c.bin")
    assert meta == {"kind": "test", "x": [1, 2]}
    for k, v in arrays.items():
        assert got[k].dtype == np.asarray(v).dtype
        assert np.array_equal(got[k], v)


def test_container_layout(tmp_path):
    io.write_container(tmp_path / "c.bin", {"a": np.array([1.0])}, {"kind": "x"})
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:4] == b"PSHD"
    assert int.from_bytes(raw[4:8], "little") == io.FORMAT_VERSION
    hlen = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12:12 + hlen])
    assert header["arrays"][0]["shape"] == [1]
    assert len(raw) == 12 + hlen + 8


def test_bad_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(FormatError):
        io.read_container(tmp_path / "junk")
    io.write_container(tmp_path / "c.bin", {}, {"kind": "mpo"})
    raw = bytearray((tmp_path / "c.bin").read_bytes())
    raw[4] = 9
    (tmp_path / "v.bin").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        io.read_container(tmp_path / "v.bin")
    with pytest.raises(FormatError):
        io.load_process(tmp_path / "c.bin")


def test_process_round_trip(tmp_path, rng):
    pt = random_pt(2, rng)
    io.save_process(tmp_path / "p.bin", pt)
    back = io.load_process(tmp_path / "p.bin")
    assert (back.k, back.d) == (2, 2)
    assert np.array_equal(back.choi, pt.choi)


@pytest.mark.parametrize("n", [0, 1, 500])
def test_shadow_round_trip(tmp_path, n):
    c = engine.Circuit([qcore.haar_unitary(4, np.random.default_rng(1))] * 2, np.eye(4) / 4)
    rec = engine.sample_records(c, sh.pauli_frame(), n, 3)
    for save, load, name in ((io.save_shadow, io.load_shadow, "s.psr"),
                             (io.save_shadow_jsonl, io.load_shadow_jsonl, "s.jsonl")):
        save(tmp_path / name, rec)
        back = load(tmp_path / name)
        assert back.n == n and back.k == 2 and back.seed == 3
        assert back.frame.frame_id == rec.frame.frame_id
        for a, b in ((rec.settings, back.settings), (rec.outcomes, back.outcomes),
                     (rec.terminal_settings, back.terminal_settings),
                     (rec.terminal_outcomes, back.terminal_outcomes)):
            assert np.array_equal(a, b)


def test_shadow_records_are_uint16(tmp_path):
    c = engine.Circuit([np.eye(4)], np.eye(4) / 4)
    io.save_shadow(tmp_path / "s.psr", engine.sample_records(c, sh.pauli_frame(), 10, 0))
    arrays, meta = io.read_container(tmp_path / "s.psr")
    assert arrays["records"].dtype == np.uint16 and arrays["records"].shape == (10, 4)
    assert meta["columns"] == ["s0", "x0", "s_term", "x_term"]


def test_exact_shadow_round_trip(tmp_path, rng):
    shadow = sh.exact_shadow(random_pt(1, rng), sh.pauli_frame())
    io.save_shadow(tmp_path / "e.psr", shadow)
    back = io.load_shadow(tmp_path / "e.psr")
    assert back.exact and np.array_equal(back.probabilities, shadow.probabilities)


def test_shadow_frame_mismatch(tmp_path):
    c = engine.Circuit([np.eye(4)], np.eye(4) / 4)
    io.save_shadow(tmp_path / "s.psr", engine.sample_records(c, sh.pauli_frame(), 10, 0))
    with pytest.raises(FormatError):
        io.load_shadow(tmp_path / "s.psr", sh.pauli_frame(("0", "1", "+", "i+")))


def test_marginals_and_mpo_round_trip(tmp_path, rng):
    pt = random_pt(3, rng)
    ms = fcs.exact_marginals(pt, 2)
    io.save_marginals(tmp_path / "m.psm", ms)
    back = io.load_marginals(tmp_path / "m.psm")
    assert (back.ell, back.k) == (2, 3)
    for a, b in zip(ms.marginals, back.marginals):
        assert a.offset == b.offset and np.array_equal(a.choi, b.choi)
    mpo = fcs.assemble_mpo(fcs.build_E(back), 3, 2)
    io.save_mpo(tmp_path / "m.pso", mpo)
    loaded = io.load_mpo(tmp_path / "m.pso")
    assert loaded.bond_dims == mpo.bond_dims
    assert np.array_equal(fcs.reconstruct_dense(loaded).choi, fcs.reconstruct_dense(mpo).choi)


def test_json_and_csv(tmp_path):
    io.write_json(tmp_path / "a.json", {"b": np.float64(0.5), "a": np.arange(2)})
    assert json.loads((tmp_path / "a.json").read_text()) == {"a": [0, 1], "b": 0.5}
    with pytest.raises(TypeError):
        io.write_json(tmp_path / "x.json", {"o": object()})
    io.write_csv(tmp_path / "t.csv", [{"x": 1, "y": 1 / 3}], ["x", "y"])
    assert io.read_csv(tmp_path / "t.csv") == [{"x": "1", "y": "0.333333333333"}]


def test_saves_are_deterministic(tmp_path, rng):
    ms = fcs.exact_marginals(random_pt(2, rng), 1)
    io.save_marginals(tmp_path / "a", ms)
    io.save_marginals(tmp_path / "b", ms)
    assert io.sha256(tmp_path / "a") == io.sha256(tmp_path / "b")
