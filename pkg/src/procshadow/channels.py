"""Choi operators, instruments and Pauli transfer matrices.

Choi convention: unnormalized, output leg first,
``C = sum_ij E(|i><j|) (x) |i><j|`` so that ``E(rho) = Tr_in[(I (x) rho^T) C]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .qcore import LegShape, PAULI, hermitize, is_unitary, partial_trace

CP_TOL = 1e-9
TP_TOL = 1e-8


@dataclass(frozen=True)
class ChoiOperator:
    matrix: np.ndarray
    dim_in: int
    dim_out: int
    trace_class: str = field(default="unchecked")

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (self.dim_in * self.dim_out,) * 2:
            raise ValueError(f"Choi matrix shape {m.shape} does not match dims {self.dim_out}x{self.dim_in}")
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self) -> LegShape:
        return LegShape((self.dim_out, self.dim_in), ("out", "in"))

    def input_marginal(self) -> np.ndarray:
        return partial_trace(self.matrix, self.shape, ["in"])

    def apply(self, rho: np.ndarray) -> np.ndarray:
        return apply_choi(self, rho)

    def __add__(self, other: "ChoiOperator") -> "ChoiOperator":
        return ChoiOperator(self.matrix + other.matrix, self.dim_in, self.dim_out)


def classify(matrix: np.ndarray, dim_in: int, dim_out: int) -> str:
    """Return ``CPTP``, ``CPTNI`` or ``unchecked`` for a Choi matrix."""
    m = np.asarray(matrix)
    if np.max(np.abs(m - m.conj().T)) > CP_TOL:
        return "unchecked"
    if np.linalg.eigvalsh(0.5 * (m + m.conj().T)).min() < -CP_TOL:
        return "unchecked"
    marg = partial_trace(m, LegShape((dim_out, dim_in), ("out", "in")), ["in"])
    if np.max(np.abs(marg - np.eye(dim_in))) <= TP_TOL:
        return "CPTP"
    if np.linalg.eigvalsh(hermitize(np.eye(dim_in) - marg)).min() >= -TP_TOL:
        return "CPTNI"
    return "unchecked"


def make_choi(matrix: np.ndarray, dim_in: int, dim_out: int | None = None) -> ChoiOperator:
    dim_out = dim_in if dim_out is None else dim_out
    return ChoiOperator(matrix, dim_in, dim_out, classify(matrix, dim_in, dim_out))


def choi_from_kraus(ks: Sequence[np.ndarray]) -> ChoiOperator:
    ks = [np.asarray(k, dtype=complex) for k in ks]
    dout, din = ks[0].shape
    tot = sum(k.conj().T @ k for k in ks)
    if np.linalg.eigvalsh(hermitize(np.eye(din) - tot, 1e-8)).min() < -TP_TOL:
        raise ValueError("Kraus operators are not trace non-increasing")
    vecs = np.array([k.reshape(-1) for k in ks])
    return make_choi(vecs.T @ vecs.conj(), din, dout)


def choi_from_unitary(u: np.ndarray) -> ChoiOperator:
    u = np.asarray(u, dtype=complex)
    if not is_unitary(u):
        raise ValueError("matrix is not unitary")
    return choi_from_kraus([u])


def choi_from_function(fn, dim_in: int, dim_out: int | None = None) -> ChoiOperator:
    """Choi matrix of a linear map given as a Python callable."""
    dim_out = dim_in if dim_out is None else dim_out
    c = np.zeros((dim_out, dim_in, dim_out, dim_in), dtype=complex)
    for i in range(dim_in):
        for j in range(dim_in):
            e = np.zeros((dim_in, dim_in), dtype=complex)
            e[i, j] = 1
            c[:, i, :, j] = fn(e)
    return make_choi(c.reshape(dim_out * dim_in, dim_out * dim_in), dim_in, dim_out)


def apply_choi(c: ChoiOperator, rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho)
    if rho.shape != (c.dim_in, c.dim_in):
        raise ValueError(f"state of shape {rho.shape} does not match input dimension {c.dim_in}")
    t = c.matrix.reshape(c.dim_out, c.dim_in, c.dim_out, c.dim_in)
    return np.einsum("aibj,ij->ab", t, rho)


def compose(second: ChoiOperator, first: ChoiOperator) -> ChoiOperator:
    """Choi of ``second o first``."""
    if first.dim_out != second.dim_in:
        raise ValueError("dimension mismatch in composition")
    return choi_from_function(lambda e: apply_choi(second, apply_choi(first, e)), first.dim_in, second.dim_out)


def depolarizing(p: float, d: int = 2) -> ChoiOperator:
    """rho -> (1-p) rho + p Tr[rho] I/d."""
    return choi_from_function(lambda e: (1 - p) * e + p * np.trace(e) * np.eye(d) / d, d)


def replacement(sigma: np.ndarray) -> ChoiOperator:
    d = sigma.shape[0]
    return choi_from_function(lambda e: np.trace(e) * sigma, d)


def measure_prepare(effect: np.ndarray, sigma: np.ndarray) -> ChoiOperator:
    """rho -> Tr[effect rho] sigma, Choi ``sigma (x) effect^T``."""
    return make_choi(np.kron(sigma, np.asarray(effect).T), effect.shape[0], sigma.shape[0])


@dataclass(frozen=True)
class Instrument:
    elements: tuple

    def __post_init__(self):
        els = tuple(self.elements)
        object.__setattr__(self, "elements", els)
        tot = sum(e.matrix for e in els)
        if classify(tot, els[0].dim_in, els[0].dim_out) != "CPTP":
            raise ValueError("instrument elements do not sum to a CPTP map")

    def __len__(self):
        return len(self.elements)

    def __getitem__(self, x):
        return self.elements[x]

    def total(self) -> ChoiOperator:
        return make_choi(sum(e.matrix for e in self.elements), self.elements[0].dim_in, self.elements[0].dim_out)

    def probabilities(self, rho: np.ndarray) -> np.ndarray:
        return np.array([np.trace(apply_choi(e, rho)).real for e in self.elements])


def _check_povm(povm: Sequence[np.ndarray]) -> None:
    d = povm[0].shape[0]
    for e in povm:
        if np.linalg.eigvalsh(hermitize(e, 1e-8)).min() < -CP_TOL:
            raise ValueError("POVM element is not positive")
    if np.max(np.abs(sum(povm) - np.eye(d))) > TP_TOL:
        raise ValueError("POVM elements do not sum to identity")


def stinespring_instrument(u: np.ndarray, rho_a: np.ndarray, povm_a: Sequence[np.ndarray],
                           ancilla_first: bool = False) -> Instrument:
    """Instrument of a system-ancilla unitary followed by an ancilla POVM.

    ``u`` acts on S (x) A by default, on A (x) S when ``ancilla_first``.
    """
    u = np.asarray(u, dtype=complex)
    rho_a = np.asarray(rho_a, dtype=complex)
    povm_a = [np.asarray(e, dtype=complex) for e in povm_a]
    _check_povm(povm_a)
    if not is_unitary(u):
        raise ValueError("u is not unitary")
    da = rho_a.shape[0]
    ds = u.shape[0] // da

    def element(eff):
        def fn(x):
            if ancilla_first:
                big = u @ np.kron(rho_a, x) @ u.conj().T
                t = big.reshape(da, ds, da, ds)
                return np.einsum("ba,asbt->st", eff, t)
            big = u @ np.kron(x, rho_a) @ u.conj().T
            t = big.reshape(ds, da, ds, da)
            return np.einsum("ba,satb->st", eff, t)
        return choi_from_function(fn, ds)

    return Instrument(tuple(element(e) for e in povm_a))


_PTM_ORDER = "IXYZ"


def ptm_from_choi(c: ChoiOperator, normalized: bool = True) -> np.ndarray:
    """Pauli transfer matrix R_ij = Tr[P_i E(P_j)] (divided by 2 when ``normalized``)."""
    if c.dim_in != 2 or c.dim_out != 2:
        raise ValueError("PTM is defined here for single-qubit maps")
    r = np.empty((4, 4))
    for i, a in enumerate(_PTM_ORDER):
        for j, b in enumerate(_PTM_ORDER):
            val = np.trace(np.kron(PAULI[a], PAULI[b].T) @ c.matrix)
            r[i, j] = val.real
    return r / 2 if normalized else r


def diagnostics(c: ChoiOperator) -> dict:
    d = c.dim_in
    out = apply_choi(c, np.eye(d) / d)
    ref = np.trace(out) * np.eye(c.dim_out) / c.dim_out
    unital = float(np.sum(np.abs(np.linalg.eigvalsh(hermitize(out - ref, 1e-8)))))
    trace = float(np.linalg.norm(c.input_marginal() - np.eye(d), 2))
    return {"unitality_defect": unital, "trace_defect": trace}
