"""Ancilla-mediated instruments built from one system unitary and two cross-resonance pulses.

The system S meets an ancilla A prepared in ``|i+>``; the sequence
``V_gamma (F (x) w) V_gamma`` acts on A (x) S and the ancilla is read out in the Z
basis. Characterization follows the restricted-tomography route: ten unitary
settings times four preparations fix every element linearly in the Choi of ``w``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channels import ChoiOperator, choi_from_unitary, make_choi, ptm_from_choi
from .qcore import PAULI, dm, f, h, pauli, v_gamma, w, w_params
from .shadows import InstrumentFrame, build_duals

HALF_PI = np.pi / 2

# Fixed unitary basis for restricted tomography; the channel Chois of these
# rotations span the ten-dimensional unitary-accessible subspace.
UNITARY_BASIS = (
    (0.0, 0.0, 0.0), (0.0, 0.0, HALF_PI), (0.0, 0.0, np.pi),
    (HALF_PI, 0.0, 0.0), (HALF_PI, 0.0, HALF_PI), (HALF_PI, 0.0, np.pi),
    (HALF_PI, HALF_PI, 0.0), (HALF_PI, HALF_PI, HALF_PI), (HALF_PI, HALF_PI, np.pi),
    (HALF_PI, np.pi, 0.0),
)


class CharacterizationError(ValueError):
    pass


class ICBasisError(ValueError):
    def __init__(self, msg: str, rank: int, sigma_min: float):
        super().__init__(msg)
        self.rank = rank
        self.sigma_min = sigma_min


def _default_preps():
    return [h(), f() @ h(), np.eye(2, dtype=complex), PAULI["X"].copy()]


@dataclass
class BootstrapSpec:
    gamma: float = np.pi / 4
    ancilla_init: np.ndarray = field(default_factory=lambda: f() @ h() @ np.array([1, 0], dtype=complex))
    preparations: list = field(default_factory=_default_preps)
    measurement: np.ndarray = field(default_factory=lambda: np.array([dm([1, 0]), dm([0, 1])]))
    noise: float = 0.0

    def prep_states(self) -> np.ndarray:
        zero = dm([1, 0])
        return np.array([_depolarize(u @ zero @ u.conj().T, self.noise) for u in self.preparations])

    def validate(self) -> None:
        st = np.array([u @ dm([1, 0]) @ u.conj().T for u in self.preparations])
        if np.linalg.matrix_rank(st.reshape(len(st), -1), 1e-8) < 4:
            raise CharacterizationError("preparation set does not span the qubit state space")


def u_w(theta: float, phi: float, lam: float, gamma: float) -> np.ndarray:
    """Instrument unitary on A (x) S."""
    v = v_gamma(gamma)
    return v @ np.kron(f(), w(theta, phi, lam)) @ v


def _depolarize(rho: np.ndarray, p: float) -> np.ndarray:
    if p == 0:
        return rho
    return (1 - p) * rho + p * np.trace(rho) * np.eye(rho.shape[0]) / rho.shape[0]


def _depolarize_each(rho_as: np.ndarray, p: float) -> np.ndarray:
    """Independent single-qubit depolarizing on A and S."""
    if p == 0:
        return rho_as
    t = rho_as.reshape(2, 2, 2, 2)
    tr_a = np.einsum("asat->st", t)
    t = (1 - p) * t + p * np.einsum("ab,st->asbt", np.eye(2) / 2, tr_a)
    tr_s = np.einsum("asbs->ab", t)
    t = (1 - p) * t + p * np.einsum("ab,st->asbt", tr_s, np.eye(2) / 2)
    return t.reshape(4, 4)


def _sa_output(spec: BootstrapSpec, wmat: np.ndarray, rho_s: np.ndarray) -> np.ndarray:
    """Post-measurement SA state sum_x |x><x| (x) rho'_{S|x} from a direct simulation."""
    v = v_gamma(spec.gamma)
    rho_a = dm(spec.ancilla_init)
    rho = np.kron(rho_a, rho_s)
    rho = _depolarize_each(v @ rho @ v.conj().T, spec.noise)
    g = np.kron(f(), wmat)
    rho = _depolarize_each(g @ rho @ g.conj().T, spec.noise)
    rho = _depolarize_each(v @ rho @ v.conj().T, spec.noise)
    t = rho.reshape(2, 2, 2, 2)
    out = np.zeros((4, 4), dtype=complex)
    for x, eff in enumerate(spec.measurement):
        blk = np.einsum("ba,asbt->st", eff, t)
        out += np.kron(dm(np.eye(2)[x]), blk)
    return out


def _tomograph(rho: np.ndarray) -> np.ndarray:
    """Reconstruct a two-qubit state from its 16 Pauli expectation values."""
    out = np.zeros_like(rho)
    for a in "IXYZ":
        for b in "IXYZ":
            p = pauli(a + b)
            out += np.trace(p @ rho) * p / 4
    return out


@dataclass(frozen=True)
class CharacterizedInstrument:
    spec: BootstrapSpec
    basis_params: tuple
    basis_chois: np.ndarray
    outputs: np.ndarray
    prep_states: np.ndarray
    prep_duals: np.ndarray

    def coefficients(self, theta: float, phi: float, lam: float) -> np.ndarray:
        target = choi_from_unitary(w(theta, phi, lam)).matrix.reshape(-1)
        a = self.basis_chois.reshape(len(self.basis_chois), -1).T
        c, *_ = np.linalg.lstsq(a, target, rcond=None)
        return c

    def predicted_outputs(self, theta: float, phi: float, lam: float) -> np.ndarray:
        """rho'_{i|x} for every preparation i and outcome x, shape (n_prep, n_out, 2, 2)."""
        c = self.coefficients(theta, phi, lam)
        return np.einsum("b,bixst->ixst", c, self.outputs)


def characterize(spec: BootstrapSpec | None = None) -> CharacterizedInstrument:
    spec = BootstrapSpec() if spec is None else spec
    spec.validate()
    preps = spec.prep_states()
    duals = build_duals(preps)
    nx = len(spec.measurement)
    chois, outs = [], []
    for params in UNITARY_BASIS:
        wm = w(*params)
        chois.append(choi_from_unitary(wm).matrix)
        row = []
        for rho in preps:
            sa = _tomograph(_sa_output(spec, wm, rho)).reshape(nx, 2, nx, 2)
            row.append([sa[x, :, x, :] for x in range(nx)])
        outs.append(row)
    chois = np.array(chois)
    if np.linalg.matrix_rank(chois.reshape(len(chois), -1), 1e-9) < 10:
        raise CharacterizationError("unitary basis does not span the unitary-accessible subspace")
    return CharacterizedInstrument(spec, UNITARY_BASIS, chois, np.array(outs), preps, duals)


def instrument_choi(ci: CharacterizedInstrument, theta: float, phi: float, lam: float, x: int) -> ChoiOperator:
    outs = ci.predicted_outputs(theta, phi, lam)[:, x]
    mat = sum(np.kron(outs[i], ci.prep_duals[i]) for i in range(len(outs)))
    return make_choi(mat, 2)


def kraus_ops(theta: float, phi: float, lam: float, gamma: float, ancilla=None) -> np.ndarray:
    """Ideal Kraus operators <x|_A u_w |a0>_A, shape (2, 2, 2)."""
    a0 = f() @ h() @ np.array([1, 0], dtype=complex) if ancilla is None else np.asarray(ancilla)
    u = u_w(theta, phi, lam, gamma).reshape(2, 2, 2, 2)
    return np.stack([np.einsum("sbt,b->st", u[x], a0) for x in range(2)])


PRINTED_ENTRIES = ("x0", "y0", "z0", "0x", "0y", "0z")


def printed_ptm(theta: float, phi: float, lam: float) -> dict:
    t, p, l = theta, phi, lam
    s4, c4 = np.sin(t / 4), np.cos(t / 4)
    return {
        "x0": np.sqrt(2) / 2 * np.cos(p) * np.sin(t) - 2 * c4 * s4 ** 3 * np.sin(p),
        "y0": 0.25 * np.cos(p) * (2 * np.sin(t / 2) - np.sin(t)) + np.sqrt(2) / 2 * np.sin(t) * np.sin(p),
        "z0": (-1 + 5 * np.cos(t)) / 8,
        "0x": np.sin(t / 2) * (np.sqrt(2) * np.cos(l) * s4 ** 2 + c4 ** 2 * np.sin(l)),
        "0y": 0.5 * np.sin(t / 2) * ((1 + np.cos(t / 2)) * np.cos(l) - np.sqrt(2) * (1 - np.cos(t / 2)) * np.sin(l)),
        "0z": (3 + np.cos(t)) / 8,
    }


_PTM_INDEX = {"0": 0, "x": 1, "y": 2, "z": 3}


def ptm_check(ci: CharacterizedInstrument, theta: float, phi: float, lam: float,
              normalized: bool = False) -> dict:
    """Per-entry absolute deviation of the outcome-0 PTM from the closed forms.

    The closed forms use R_ij = Tr[P_i A(P_j)] without a 1/d factor, hence the
    default ``normalized=False``.
    """
    r = ptm_from_choi(instrument_choi(ci, theta, phi, lam, 0), normalized=normalized)
    ref = printed_ptm(theta, phi, lam)
    return {key: float(abs(r[_PTM_INDEX[key[0]], _PTM_INDEX[key[1]]] - ref[key])) for key in PRINTED_ENTRIES}


def clifford_group() -> list:
    """The 24 single-qubit Cliffords modulo phase, in a fixed generation order."""
    gens = [h(), f()]
    found = [np.eye(2, dtype=complex)]

    def known(u):
        for v in found:
            if abs(abs(np.trace(v.conj().T @ u)) - 2) < 1e-9:
                return True
        return False

    frontier = list(found)
    while frontier:
        nxt = []
        for u in frontier:
            for g in gens:
                cand = g @ u
                if not known(cand):
                    found.append(cand)
                    nxt.append(cand)
        frontier = nxt
    return found


@dataclass(frozen=True)
class ICBasis:
    params: tuple
    chois: np.ndarray
    sigma_min: float
    condition_number: float

    def frame(self, ci: CharacterizedInstrument) -> InstrumentFrame:
        triples = list(dict.fromkeys(tuple(p[:3]) for p in self.params))
        return instrument_frame(ci, triples)


def _element_matrix(ci: CharacterizedInstrument, params: Sequence[tuple]) -> np.ndarray:
    return np.array([[instrument_choi(ci, *p, x).matrix for x in range(2)] for p in params])


def default_grid() -> list:
    thetas = np.linspace(0, np.pi, 5)
    angles = np.arange(8) * np.pi / 4
    return [(t, p, l) for t in thetas for p in angles for l in angles]


def _sigma_min(rows: np.ndarray, picks: list, size: int) -> float:
    s = np.linalg.svd(rows[picks], compute_uv=False)
    return float(s[size - 1]) if len(s) >= size else 0.0


def ic_basis(ci: CharacterizedInstrument, target_size: int = 16, grid=None, threshold: float = 1e-3,
             sweeps: int = 20) -> ICBasis:
    """Choose ``target_size`` instrument elements (triple, outcome) with good conditioning.

    Elements are picked individually: each outcome's elements depend linearly on
    the Choi of ``w`` and so span at most ten dimensions, which caps any set that
    takes both outcomes of eight triples at rank 14. A greedy pass maximizes the
    log-volume of the stacked rows; swap sweeps then raise the smallest singular value.
    """
    grid = default_grid() if grid is None else list(grid)
    rows = _element_matrix(ci, grid).reshape(len(grid) * 2, -1)
    chosen = []
    for _ in range(target_size):
        best, best_val = None, -np.inf
        for g in range(len(rows)):
            if g in chosen:
                continue
            s = np.linalg.svd(rows[chosen + [g]], compute_uv=False)
            val = float(np.sum(np.log(s + 1e-12)))
            if val > best_val + 1e-12:
                best, best_val = g, val
        chosen.append(best)
    current = _sigma_min(rows, chosen, target_size)
    for _ in range(sweeps):
        improved = False
        for slot in range(target_size):
            for g in range(len(rows)):
                if g in chosen:
                    continue
                trial = chosen[:slot] + [g] + chosen[slot + 1:]
                val = _sigma_min(rows, trial, target_size)
                if val > current * (1 + 1e-9) + 1e-15:
                    chosen, current, improved = trial, val, True
        if not improved:
            break
    s = np.linalg.svd(rows[chosen], compute_uv=False)
    rank = int(np.sum(s > 1e-9 * s[0]))
    if rank < target_size or current < threshold:
        raise ICBasisError(f"IC basis search reached rank {rank} (smallest singular value {current:.3g})",
                           rank, current)
    params = tuple(tuple(float(a) for a in grid[g // 2]) + (g % 2,) for g in chosen)
    return ICBasis(params, rows[chosen].reshape(-1, 4, 4), current, float(s[0] / s[-1]))


def span_rank(ci: CharacterizedInstrument, grid=None, tol: float = 1e-9) -> int:
    grid = default_grid() if grid is None else list(grid)
    els = _element_matrix(ci, grid).reshape(-1, 16)
    s = np.linalg.svd(els, compute_uv=False)
    return int(np.sum(s > tol * s[0]))


def instrument_frame(ci: CharacterizedInstrument, settings: Sequence[tuple], frame_id: str | None = None,
                     weights=None) -> InstrumentFrame:
    """Frame whose settings are parameter triples; the terminal POVM is the same instrument's effects."""
    els = _element_matrix(ci, settings)
    t = els.reshape(len(settings), 2, 2, 2, 2, 2)
    # effect E with Tr[E rho] = Tr[A(rho)]: E = (Tr_out C)^T
    effects = np.einsum("nxaiaj->nxji", t)
    kr = None
    if ci.spec.noise == 0:
        kr = np.array([kraus_ops(*p, ci.spec.gamma, ci.spec.ancilla_init) for p in settings])
    fid = frame_id or f"bootstrap-g{ci.spec.gamma:.6f}-n{len(settings)}"
    return InstrumentFrame(els, effects, weights, weights, kraus=kr, terminal_kraus=kr, frame_id=fid,
                           params=[tuple(map(float, p)) for p in settings])


def clifford_frame(ci: CharacterizedInstrument) -> InstrumentFrame:
    """The bootstrapped shadow ensemble: a uniformly random Clifford between the two pulses."""
    return instrument_frame(ci, [w_params(c) for c in clifford_group()],
                            frame_id=f"bootstrap-clifford-g{ci.spec.gamma:.6f}")


def frame_manifest(frame: InstrumentFrame) -> dict:
    """JSON-ready summary: parameters, conditioning and per-element PTM."""
    flat = frame.flat_elements.reshape(len(frame.flat_elements), -1)
    s = np.linalg.svd(flat, compute_uv=False)
    rank = int(np.sum(s > 1e-9 * s[0]))
    ptms = [ptm_from_choi(make_choi(m, 2)).round(12).tolist() for m in frame.flat_elements]
    return {
        "frame_id": frame.frame_id,
        "params": [list(p) for p in frame.params],
        "rank": rank,
        "condition_number": float(s[0] / s[rank - 1]),
        "duality_defect": frame.duality_defect(),
        "ptm": ptms,
    }
