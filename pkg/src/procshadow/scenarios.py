"""Scenario configuration and circuit construction for the batch studies."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import yaml
from scipy.linalg import expm

from .engine import Circuit
from .qcore import dm, haar_unitary, ket, pauli, swap, w
from .shadows import InstrumentFrame, pauli_frame

CONFIG_VERSION = 1
KINDS = ("spin_chain", "idle_neighbors", "custom_unitaries")
COUPLINGS = ("partial_swap", "controlled_phase", "local", "identity")
FRAMES = ("pauli", "pauli-minimal", "bootstrap")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


@dataclass
class ValidationConfig:
    sequences: int = 20
    shots: int = 16384
    max_length: int = 5


@dataclass
class ScenarioConfig:
    scenario: str = "spin_chain"
    qubits: int = 2
    steps: int = 4
    alpha_max: float = np.pi / 4
    env_state: str = "0"
    system_state: str = "0"
    frame: str = "bootstrap"
    gamma: float = np.pi / 4
    shots: int = 100000
    exact: bool = False
    seed: int | None = None
    ell: int = 3
    crosstalk: float = 0.3
    coupling: str = "partial_swap"
    theta: float = np.pi / 4
    coupled_steps: list | None = None
    local_rotations: bool = True
    mle_iters: int = 200
    junction_cutoff: float = 1e-6
    min_rank: int = 1
    max_negativity: float = 10.0
    bootstrap: int = 30
    output: str = "out"
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def d_env(self) -> int:
        return 2 ** (self.qubits - 1)


def _positive_int(data: dict, key: str, allow_zero: bool = False) -> None:
    v = data[key]
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
        raise ConfigError(key, f"expected an integer, got {v!r}")
    if v < 0 or (v == 0 and not allow_zero):
        raise ConfigError(key, f"must be {'nonnegative' if allow_zero else 'positive'}, got {v}")


def _number(data: dict, key: str, lo: float | None = None) -> None:
    v = data[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, f"expected a number, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(key, f"must be at least {lo}, got {v}")


def _state_label(key: str, label: str, n: int) -> str:
    if not isinstance(label, str) or not label:
        raise ConfigError(key, "expected a string of basis labels")
    if len(label) == 1:
        label = label * n
    if len(label) != n or any(c not in "01+-" for c in label):
        raise ConfigError(key, f"needs {n} characters from '01+-', got {label!r}")
    return label


def validate(data: dict) -> ScenarioConfig:
    """Field-level validation of a parsed config mapping."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown field")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {version!r}")
    if data.get("seed") is None:
        raise ConfigError("seed", "a seed is required for reproducibility")
    merged = {**ScenarioConfig().to_dict(), **data}
    merged.pop("validation")
    if merged["scenario"] not in KINDS:
        raise ConfigError("scenario", f"must be one of {KINDS}")
    for key in ("qubits", "steps", "ell", "min_rank", "bootstrap"):
        _positive_int(merged, key)
    for key in ("shots", "mle_iters"):
        _positive_int(merged, key, allow_zero=True)
    _positive_int(merged, "seed", allow_zero=True)
    for key, lo in (("alpha_max", 0.0), ("gamma", None), ("crosstalk", None), ("theta", None),
                    ("junction_cutoff", 0.0), ("max_negativity", 0.0)):
        _number(merged, key, lo)
    if merged["qubits"] < 2:
        raise ConfigError("qubits", "needs the system and at least one environment qubit")
    if merged["qubits"] > 10:
        raise ConfigError("qubits", "state vectors beyond 10 qubits are out of scope")
    if merged["ell"] > merged["steps"]:
        raise ConfigError("ell", f"window length {merged['ell']} exceeds steps {merged['steps']}")
    if merged["frame"] not in FRAMES:
        raise ConfigError("frame", f"must be one of {FRAMES}")
    if merged["coupling"] not in COUPLINGS:
        raise ConfigError("coupling", f"must be one of {COUPLINGS}")
    for key in ("exact", "local_rotations"):
        if not isinstance(merged[key], bool):
            raise ConfigError(key, "expected true or false")
    merged["env_state"] = _state_label("env_state", merged["env_state"], merged["qubits"] - 1)
    merged["system_state"] = _state_label("system_state", merged["system_state"], 1)
    cs = merged["coupled_steps"]
    if cs is not None:
        if not isinstance(cs, list) or any(not isinstance(j, int) or not 0 <= j < merged["steps"] for j in cs):
            raise ConfigError("coupled_steps", f"expected a list of step indices in 0..{merged['steps'] - 1}")
    if not isinstance(merged["output"], str):
        raise ConfigError("output", "expected a directory path")
    val = data.get("validation", {}) or {}
    if not isinstance(val, dict):
        raise ConfigError("validation", "expected a mapping")
    for key in val:
        if key not in {f.name for f in dataclasses.fields(ValidationConfig)}:
            raise ConfigError(f"validation.{key}", "unknown field")
    vmerged = {**dataclasses.asdict(ValidationConfig()), **val}
    for key in ("sequences", "max_length"):
        try:
            _positive_int(vmerged, key)
        except ConfigError as e:
            raise ConfigError(f"validation.{key}", str(e).split(": ", 1)[1]) from None
    try:
        _positive_int(vmerged, "shots", allow_zero=True)
    except ConfigError as e:
        raise ConfigError("validation.shots", str(e).split(": ", 1)[1]) from None
    floats = ("alpha_max", "gamma", "crosstalk", "theta", "junction_cutoff", "max_negativity")
    for key in floats:
        merged[key] = float(merged[key])
    return ScenarioConfig(**merged, validation=ValidationConfig(**vmerged))


def load_config(path, overrides: dict | None = None) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as e:
        raise ConfigError("--config", f"cannot read {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError("--config", f"not valid YAML: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate(data)


# circuits

def _embed(gate: np.ndarray, first: int, n: int) -> np.ndarray:
    """A gate on qubits ``first .. first+m-1`` of an n-qubit register."""
    m = int(round(np.log2(gate.shape[0])))
    return np.kron(np.kron(np.eye(2 ** first), gate), np.eye(2 ** (n - first - m)))


def exchange(alpha: float) -> np.ndarray:
    """``exp(-i alpha (XX + YY + ZZ))`` on two qubits."""
    h = sum(np.kron(pauli(c), pauli(c)) for c in "XYZ")
    return expm(-1j * alpha * h)


def partial_swap(theta: float) -> np.ndarray:
    return expm(-1j * theta * swap())


def controlled_phase(theta: float) -> np.ndarray:
    return np.diag([1, 1, 1, np.exp(1j * theta)])


def _rng(cfg: ScenarioConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, stream]))


def _initial_state(cfg: ScenarioConfig) -> np.ndarray:
    v = ket(cfg.system_state)
    for c in cfg.env_state:
        v = np.kron(v, ket(c))
    return dm(v)


def spin_chain_unitaries(cfg: ScenarioConfig) -> tuple:
    rng = _rng(cfg, 1)
    n = cfg.qubits
    alphas = rng.uniform(0.0, cfg.alpha_max, size=(cfg.steps, n - 1))
    steps = []
    for row in alphas:
        u = np.eye(2 ** n, dtype=complex)
        for b, a in enumerate(row):
            u = _embed(exchange(a), b, n) @ u
        steps.append(u)
    return steps, {"alphas": alphas.tolist()}


def idle_neighbor_unitaries(cfg: ScenarioConfig) -> tuple:
    """Random two-qubit gates on environment pairs plus ZZ crosstalk onto the idle system."""
    rng = _rng(cfg, 2)
    n = cfg.qubits
    zz = expm(-1j * cfg.crosstalk * np.kron(pauli("Z"), pauli("Z")))
    steps = []
    for _ in range(cfg.steps):
        u = _embed(zz, 0, n)
        q = 1
        while q < n:
            g = haar_unitary(4, rng) if q + 1 < n else haar_unitary(2, rng)
            u = _embed(g, q, n) @ u
            q += 2
        steps.append(u)
    return steps, {"ensemble": "haar-qr-ginibre", "crosstalk": cfg.crosstalk}


def custom_unitaries(cfg: ScenarioConfig) -> tuple:
    """Random system rotations (``local_rotations``) plus an optional coupling to the
    first environment qubit.

    ``partial_swap`` and ``controlled_phase`` share one environment qubit across the
    coupled steps; ``local`` and ``identity`` never touch the environment, so the
    process is Markov.
    """
    rng = _rng(cfg, 3)
    n = cfg.qubits
    coupled = set(range(cfg.steps) if cfg.coupled_steps is None else cfg.coupled_steps)
    steps, angles = [], []
    for j in range(cfg.steps):
        u = np.eye(2 ** n, dtype=complex)
        a = [0.0, 0.0, 0.0]
        if cfg.local_rotations and cfg.coupling != "identity":
            a = rng.uniform(0, 2 * np.pi, size=3).tolist()
            u = _embed(w(*a), 0, n)
        angles.append(a)
        if j in coupled and cfg.coupling in ("partial_swap", "controlled_phase"):
            gate = partial_swap if cfg.coupling == "partial_swap" else controlled_phase
            u = _embed(gate(cfg.theta), 0, n) @ u
        steps.append(u)
    return steps, {"local_angles": angles, "coupled_steps": sorted(coupled)}


def build_circuit(cfg: ScenarioConfig) -> Circuit:
    build = {"spin_chain": spin_chain_unitaries, "idle_neighbors": idle_neighbor_unitaries,
             "custom_unitaries": custom_unitaries}[cfg.scenario]
    steps, meta = build(cfg)
    return Circuit(steps, _initial_state(cfg), 2, meta)


def markov_floor(cfg: ScenarioConfig) -> ScenarioConfig:
    """The same run with the coupling switched off."""
    if cfg.scenario == "spin_chain":
        return dataclasses.replace(cfg, alpha_max=0.0)
    return dataclasses.replace(cfg, scenario="custom_unitaries", coupling="local")


# frames

@lru_cache(maxsize=8)
def bootstrap_frame(gamma: float) -> InstrumentFrame:
    from .instruments import BootstrapSpec, characterize, clifford_frame
    return clifford_frame(characterize(BootstrapSpec(gamma=gamma)))


def make_frame(cfg: ScenarioConfig) -> InstrumentFrame:
    if cfg.frame == "pauli":
        return pauli_frame()
    if cfg.frame == "pauli-minimal":
        return pauli_frame(("0", "1", "+", "i+"))
    return bootstrap_frame(cfg.gamma)


def frame_from_id(frame_id: str) -> InstrumentFrame:
    """Rebuild a frame from the identifier stored in record headers."""
    if frame_id == "pauli-mp":
        return pauli_frame()
    if frame_id.startswith("pauli-mp-"):
        return pauli_frame(tuple(re.findall(r"i[+-]|[01+-]", frame_id[len("pauli-mp-"):])))
    if frame_id.startswith("bootstrap-clifford-g"):
        return bootstrap_frame(float(frame_id[len("bootstrap-clifford-g"):]))
    raise ValueError(f"unknown frame id {frame_id!r}")
