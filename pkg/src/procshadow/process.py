"""Process tensors: construction, action on control sequences, causality and memory measures.

Legs are ordered descending in time, ``(o_k, i_k, o_{k-1}, ..., i_1, o_0)``.
Slot ``j`` is the adjacent pair ``(i_{j+1}, o_j)`` that holds the control applied
at time ``j``; pairing a control Choi with its slot is an elementwise contraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channels import ChoiOperator, classify, make_choi
from .qcore import LegShape, hermitize, negativity, partial_trace, qmi

DENSE_CAP = 5


class DenseCapError(ValueError):
    """Raised when a dense process tensor would exceed the configured step cap."""


def leg_labels(k: int, offset: int = 0) -> tuple:
    labels = [f"o{offset + k}"]
    for j in range(offset + k, offset, -1):
        labels += [f"i{j}", f"o{j - 1}"]
    return tuple(labels)


@dataclass(frozen=True)
class ProcessTensor:
    choi: np.ndarray
    k: int
    d: int = 2
    offset: int = 0

    def __post_init__(self):
        m = np.asarray(self.choi, dtype=complex)
        n = self.d ** (2 * self.k + 1)
        if m.shape != (n, n):
            raise ValueError(f"Choi of shape {m.shape} does not fit k={self.k}, d={self.d}")
        object.__setattr__(self, "choi", m)

    @property
    def labels(self) -> tuple:
        return leg_labels(self.k, self.offset)

    @property
    def shape(self) -> LegShape:
        return LegShape.uniform(self.labels, self.d)

    def normalized(self) -> np.ndarray:
        return self.choi / self.d ** self.k

    def check(self, psd_tol: float = 1e-9, causal_tol: float = 1e-8) -> None:
        ev = np.linalg.eigvalsh(hermitize(self.choi))
        if ev.min() < -psd_tol:
            raise ValueError(f"process tensor not PSD (min eigenvalue {ev.min():.3g})")
        tr = np.trace(self.choi).real
        if abs(tr - self.d ** self.k) > 1e-8 * self.d ** self.k:
            raise ValueError(f"trace {tr:.6g} differs from d^k")
        worst = max(causality_defect(self), default=0.0)
        if worst > causal_tol:
            raise ValueError(f"containment violated by {worst:.3g}")


@dataclass(frozen=True)
class Fragment:
    """An operator on a subset of process legs."""

    matrix: np.ndarray
    shape: LegShape


@dataclass
class ControlSequence:
    steps: list
    terminal: np.ndarray | None = None

    def matrices(self, d: int) -> list:
        out = []
        for s in self.steps:
            m = s.matrix if isinstance(s, ChoiOperator) else np.asarray(s, dtype=complex)
            if m.shape != (d * d, d * d):
                raise ValueError(f"control of shape {m.shape} does not match local dimension {d}")
            out.append(m)
        return out


# construction

def simulate_process(u_steps, rho_se0: np.ndarray, k: int, d: int = 2,
                     dense_cap: int = DENSE_CAP) -> ProcessTensor:
    """Choi state of a system-environment evolution via Bell pairs swapped in at each step.

    ``u_steps`` is one unitary on S (x) E (system first) or a list of ``k`` of them;
    ``u_steps[j]`` acts between the controls at times ``j`` and ``j+1``.
    """
    if k > dense_cap:
        raise DenseCapError(f"k={k} exceeds the dense cap {dense_cap}; use the fcs module for longer processes")
    if k < 0:
        raise ValueError("k must be nonnegative")
    rho_se0 = np.asarray(rho_se0, dtype=complex)
    dse = rho_se0.shape[0]
    if dse % d:
        raise ValueError("initial state dimension is not a multiple of d")
    de = dse // d
    if isinstance(u_steps, np.ndarray) and u_steps.ndim == 2:
        u_steps = [u_steps] * k
    u_steps = [np.asarray(u, dtype=complex) for u in u_steps]
    if len(u_steps) != k:
        raise ValueError(f"expected {k} step unitaries, got {len(u_steps)}")
    for u in u_steps:
        if u.shape != (dse, dse):
            raise ValueError("step unitary does not act on S (x) E")

    ev, vec = np.linalg.eigh(hermitize(rho_se0))
    keep = ev > 1e-14
    # columns are purification components, weighted by sqrt(p)
    psi = (vec[:, keep] * np.sqrt(ev[keep])).T.reshape(-1, d, de)
    eye = np.eye(d, dtype=complex)
    for u in u_steps:
        # current S becomes o_j; fresh Bell pair (i_{j+1}, S') with S' entering the dynamics
        psi = np.einsum("c...se,it->c...site", psi, eye)
        sh = psi.shape
        psi = psi.reshape(-1, dse) @ u.T
        psi = psi.reshape(sh)
    n = 2 * k + 1
    # axes: component, o_0, i_1, o_1, ..., i_k, o_k, E; reverse legs into descending order
    psi = psi.transpose([0] + list(range(n, 0, -1)) + [n + 1])
    mat = psi.reshape(psi.shape[0], d ** n, de)
    choi = np.einsum("cae,cbe->ab", mat, mat.conj())
    return ProcessTensor(choi, k, d)


def markov_product(channels: Sequence[ChoiOperator], rho0: np.ndarray) -> ProcessTensor:
    d = rho0.shape[0]
    out = np.asarray(rho0, dtype=complex)
    for c in channels:
        if classify(c.matrix, c.dim_in, c.dim_out) != "CPTP":
            raise ValueError("Markov product requires CPTP channels")
        out = np.kron(c.matrix, out)
    return ProcessTensor(out, len(channels), d)


# contraction

def pair_last_slot(m: np.ndarray, a: np.ndarray, q: int) -> np.ndarray:
    """Contract the trailing q-dimensional leg group of ``m`` elementwise with ``a``."""
    r = m.shape[0] // q
    return np.einsum("xayb,ab->xy", m.reshape(r, q, r, q), a, optimize=True)


def act(pt: ProcessTensor, seq: ControlSequence):
    """Final state (no terminal) or Born probability (with terminal effect)."""
    mats = seq.matrices(pt.d)
    if len(mats) != pt.k:
        raise ValueError(f"sequence has {len(mats)} steps, process has {pt.k}")
    q = pt.d * pt.d
    m = pt.choi
    for a in mats:
        m = pair_last_slot(m, a, q)
    if seq.terminal is None:
        return m
    return float(np.real(np.trace(m @ np.asarray(seq.terminal))))


def identity_channel(d: int = 2) -> ChoiOperator:
    v = np.eye(d, dtype=complex).reshape(-1)
    return ChoiOperator(np.outer(v, v), d, d, "CPTP")


# causality

def _trace_leading(m: np.ndarray, lead: int) -> np.ndarray:
    r = m.shape[0] // lead
    return np.einsum("axay->xy", m.reshape(lead, r, lead, r))


def causality_defects(m: np.ndarray, k: int, d: int = 2) -> list:
    """Frobenius containment residuals, listed for steps 1..k."""
    out = []
    x = np.asarray(m)
    for _ in range(k):
        t = _trace_leading(x, d)
        y = _trace_leading(t, d) / d
        out.append(float(np.linalg.norm(t - np.kron(np.eye(d), y))))
        x = y
    return out[::-1]


def causality_defect(pt: ProcessTensor) -> list:
    return causality_defects(pt.choi, pt.k, pt.d)


def project_causal(m: np.ndarray, k: int, d: int = 2) -> np.ndarray:
    """Frobenius-orthogonal projection onto the affine set of causal operators with trace d^k."""
    m = np.asarray(m, dtype=complex)
    n = m.shape[0]
    out = m.copy()
    for j in range(1, k + 1):
        lead = d ** (2 * (k - j) + 1)
        ra = _trace_leading(m, lead)
        rb = _trace_leading(ra, d)
        _add_blocks(out, -ra / lead)
        _add_blocks(out, rb / (lead * d))
    out[np.diag_indices(n)] += (d ** k - np.trace(out)) / n
    return out


def _add_blocks(m: np.ndarray, block: np.ndarray) -> None:
    """In place ``m += I (x) block``."""
    r = block.shape[0]
    lead = m.shape[0] // r
    t = m.reshape(lead, r, lead, r)
    idx = np.arange(lead)
    t[idx, :, idx, :] += block


# marginals

def marginal(pt: ProcessTensor, keep_legs: Sequence[str]):
    """Partial trace onto ``keep_legs``, renormalized by d per traced input leg.

    A single step pair ``(o_j, i_j)`` comes back as a :class:`ChoiOperator`.
    """
    shape = pt.shape
    keep = set(keep_legs)
    shape.indices(keep)
    traced_inputs = sum(1 for l in shape.labels if l.startswith("i") and l not in keep)
    mat = partial_trace(pt.choi, shape, keep) / pt.d ** traced_inputs
    sub = shape.select(keep)
    if len(sub.labels) == 2 and sub.labels[0].startswith("o") and sub.labels[1].startswith("i") \
            and sub.labels[0][1:] == sub.labels[1][1:]:
        return make_choi(mat, pt.d)
    return Fragment(mat, sub)


def window(pt: ProcessTensor, top: int, length: int) -> ProcessTensor:
    """Contiguous marginal Upsilon_{top:top-length} as a process tensor."""
    lo = top - length
    if lo < 0 or top > pt.k:
        raise ValueError("window outside the process")
    frag = marginal(pt, leg_labels(length, lo))
    mat = frag.matrix if isinstance(frag, Fragment) else frag.matrix
    return ProcessTensor(mat, length, pt.d, lo)


# memory witnesses

@dataclass(frozen=True)
class BreakPast:
    steps: list
    effect: np.ndarray


@dataclass(frozen=True)
class BreakFuture:
    prep: np.ndarray
    steps: list = field(default_factory=list)
    terminal: np.ndarray | None = None


def causal_break_test(pt: ProcessTensor, future: BreakFuture, past_x: BreakPast, past_xp: BreakPast) -> dict:
    """Conditional future probabilities for two pasts separated by a causal break."""
    d = pt.d
    term = np.eye(d) if future.terminal is None else np.asarray(future.terminal)

    def conditional(past: BreakPast) -> float:
        j = len(past.steps)
        if j + 1 + len(future.steps) != pt.k:
            raise ValueError("past and future lengths do not add up to k")
        brk = np.kron(np.asarray(future.prep), np.asarray(past.effect).T)
        joint = act(pt, ControlSequence(list(past.steps) + [brk] + list(future.steps), term))
        rest = [identity_channel(d)] * len(future.steps)
        brk0 = np.kron(np.eye(d) / d, np.asarray(past.effect).T)
        px = act(pt, ControlSequence(list(past.steps) + [brk0] + rest, np.eye(d)))
        if px < 1e-12:
            raise ValueError("past has vanishing probability")
        return joint / px

    lhs, rhs = conditional(past_x), conditional(past_xp)
    return {"lhs": lhs, "rhs": rhs, "gap": abs(lhs - rhs)}


def nm_measures(op, cut: Sequence[str], shape: LegShape | None = None) -> dict:
    """Negativity and mutual information (bits) across ``cut`` of the unit-trace operator."""
    if isinstance(op, (ProcessTensor, Fragment)):
        mat, shape = op.choi if isinstance(op, ProcessTensor) else op.matrix, op.shape
    else:
        mat = np.asarray(op)
    rho = hermitize(mat / np.trace(mat).real, 1e-8)
    ev, vec = np.linalg.eigh(rho)
    if ev.min() < 0:
        rho = (vec * np.clip(ev, 0, None)) @ vec.conj().T
        rho /= np.trace(rho).real
    return {"negativity": negativity(rho, shape, cut), "qmi": qmi(rho, shape, cut)}


def middle_cut(labels: Sequence[str]) -> list:
    """Future half of a window's legs, split at the slot boundary nearest the middle."""
    n = len(labels)
    k = (n - 1) // 2
    return list(labels[: 2 * ((k + 1) // 2)])


def born_tensor(choi: np.ndarray, k: int, d: int, step_elements: Sequence[np.ndarray],
                terminal: np.ndarray) -> np.ndarray:
    """Born probabilities for every combination of basis elements.

    ``step_elements[j]`` stacks the Choi matrices tried at time ``j`` with shape
    ``(n_j, d^2, d^2)``; ``terminal`` stacks effects ``(n_t, d, d)``. The result has
    axes ``(terminal, step k-1, ..., step 0)``.
    """
    q = d * d
    m = np.asarray(choi).reshape(1, d * q ** k, d * q ** k)
    counts = []
    for j in range(k):
        els = np.asarray(step_elements[j])
        r = m.shape[1] // q
        m = np.einsum("cxayb,nab->cnxy", m.reshape(m.shape[0], r, q, r, q), els, optimize=True)
        m = m.reshape(-1, r, r)
        counts.append(els.shape[0])
    t = np.einsum("cab,nba->nc", m, np.asarray(terminal), optimize=True).real
    # the flattened index has step 0 as its slowest axis
    t = t.reshape([t.shape[0]] + counts)
    return t.transpose([0] + list(range(k, 0, -1)))
