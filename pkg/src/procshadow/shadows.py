"""Temporal classical shadows over arbitrary instrument ensembles.

A frame holds, for every time step, a set of instrument elements grouped by
setting (the randomly drawn control) and outcome, plus a terminal POVM. Duals
are canonical duals of the setting-weighted frame, so dividing a dual by the
probability of its setting gives an unbiased single-shot snapshot.

Snapshots are stored as integer records and never expanded into dense
operators; estimation contracts slot by slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .process import ProcessTensor, born_tensor, leg_labels
from .qcore import DEFAULT_CUTOFF, LegShape, dm, ket, kron


class FrameError(ValueError):
    """Raised for degenerate frames or inconsistent shadow records."""


def build_duals(basis, weights=None, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """Duals with ``sum_{ab} B_mu[a,b] Delta_nu[a,b] = delta`` on the span of the basis.

    ``weights`` (one per element) select the weighted canonical dual; the
    reconstruction ``sum_mu <B_mu, X> Delta_mu`` is the orthogonal projection of
    ``X`` onto the span of the (conjugated) basis for any weights.
    """
    b = np.asarray(basis, dtype=complex)
    n = b.shape[0]
    a = b.reshape(n, -1)
    if not np.any(np.abs(a) > 0):
        raise FrameError("basis is identically zero")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise FrameError("dual weights must be positive")
    sw = np.sqrt(w)
    ap = np.linalg.pinv(sw[:, None] * a, rcond=cutoff)
    return (ap * sw[None, :]).T.reshape(b.shape)


def duality_matrix(basis, duals) -> np.ndarray:
    """G[mu, nu] = Tr[B_mu Delta_nu^T]; the identity for independent bases."""
    b = np.asarray(basis).reshape(len(basis), -1)
    dd = np.asarray(duals).reshape(len(duals), -1)
    return b @ dd.T


def duality_defect(basis, duals) -> float:
    """Largest violation of duality on the span of ``basis``."""
    a = np.asarray(basis).reshape(len(basis), -1)
    g = duality_matrix(basis, duals)
    return float(np.max(np.abs(g @ a - a)))


def _pauli_projectors():
    bases = [("+", "-"), ("i+", "i-"), ("0", "1")]
    return np.array([[dm(ket(s)) for s in pair] for pair in bases])


@dataclass
class InstrumentFrame:
    """Per-step instrument elements ``(settings, outcomes, d^2, d^2)`` and a terminal POVM ``(settings, outcomes, d, d)``."""

    elements: np.ndarray
    terminal: np.ndarray
    weights: np.ndarray | None = None
    terminal_weights: np.ndarray | None = None
    kraus: np.ndarray | None = None
    terminal_kraus: np.ndarray | None = None
    frame_id: str = "custom"
    cutoff: float = DEFAULT_CUTOFF
    params: list = field(default_factory=list)

    def __post_init__(self):
        self.elements = np.asarray(self.elements, dtype=complex)
        self.terminal = np.asarray(self.terminal, dtype=complex)
        ns, nt = self.elements.shape[0], self.terminal.shape[0]
        self.weights = np.full(ns, 1 / ns) if self.weights is None else np.asarray(self.weights, float)
        self.terminal_weights = (np.full(nt, 1 / nt) if self.terminal_weights is None
                                 else np.asarray(self.terminal_weights, float))
        for w in (self.weights, self.terminal_weights):
            if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
                raise FrameError("sampling weights must be nonnegative and sum to 1")

    @property
    def d(self) -> int:
        return self.terminal.shape[-1]

    @property
    def n_settings(self) -> int:
        return self.elements.shape[0]

    @property
    def n_outcomes(self) -> int:
        return self.elements.shape[1]

    @property
    def n_terminal_settings(self) -> int:
        return self.terminal.shape[0]

    @property
    def n_terminal_outcomes(self) -> int:
        return self.terminal.shape[1]

    @property
    def flat_elements(self) -> np.ndarray:
        q = self.d ** 2
        return self.elements.reshape(-1, q, q)

    @property
    def flat_terminal(self) -> np.ndarray:
        return self.terminal.reshape(-1, self.d, self.d)

    @cached_property
    def duals(self) -> np.ndarray:
        w = np.repeat(self.weights, self.n_outcomes)
        return build_duals(self.flat_elements, w, self.cutoff)

    @cached_property
    def terminal_duals(self) -> np.ndarray:
        w = np.repeat(self.terminal_weights, self.n_terminal_outcomes)
        return build_duals(self.flat_terminal.transpose(0, 2, 1), w, self.cutoff)

    @cached_property
    def snapshots(self) -> np.ndarray:
        """Per-element single-shot operators on a slot ``(i_{j+1}, o_j)``."""
        w = np.repeat(self.weights, self.n_outcomes)
        return self.duals / w[:, None, None]

    @cached_property
    def terminal_snapshots(self) -> np.ndarray:
        w = np.repeat(self.terminal_weights, self.n_terminal_outcomes)
        return self.terminal_duals / w[:, None, None]

    def duality_defect(self) -> float:
        return max(duality_defect(self.flat_elements, self.duals),
                   duality_defect(self.flat_terminal.transpose(0, 2, 1), self.terminal_duals))

    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.flat_elements.reshape(len(self.flat_elements), -1)))


def pauli_frame(states=("0", "1", "+", "-", "i+", "i-")) -> InstrumentFrame:
    """Random Pauli-basis measurement followed by a random stabilizer-state preparation."""
    proj = _pauli_projectors()
    frame_id = "pauli-mp" if len(states) == 6 else "pauli-mp-" + "".join(states)
    states = [ket(s) for s in states]
    els, kr = [], []
    for s in states:
        for b in range(3):
            els.append([np.kron(dm(s), proj[b, x].T) for x in range(2)])
            kr.append([np.outer(s, _basis_vec(b, x).conj()) for x in range(2)])
    return InstrumentFrame(np.array(els), proj, kraus=np.array(kr), terminal_kraus=proj.copy(),
                           frame_id=frame_id)


def _basis_vec(b: int, x: int) -> np.ndarray:
    return ket([("+", "-"), ("i+", "i-"), ("0", "1")][b][x])


def state_frame(labels=("0", "1", "+", "i+")) -> np.ndarray:
    return np.array([dm(ket(l)) for l in labels])


# snapshot records

@dataclass
class ShadowSet:
    """Outcome records of a temporal shadow; arrays are indexed ``[shot, time]``.

    In exact mode ``probabilities`` replaces the records: it is the joint weight
    of every (terminal element, step k-1 element, ..., step 0 element) tuple.
    """

    frame: InstrumentFrame
    k: int
    settings: np.ndarray | None = None
    outcomes: np.ndarray | None = None
    terminal_settings: np.ndarray | None = None
    terminal_outcomes: np.ndarray | None = None
    seed: int | None = None
    probabilities: np.ndarray | None = None

    def __post_init__(self):
        if self.probabilities is None:
            n = 0 if self.settings is None else len(self.settings)
            empty = np.zeros((n, self.k), dtype=np.int64)
            self.settings = empty if self.settings is None else np.asarray(self.settings, np.int64).reshape(n, self.k)
            self.outcomes = empty if self.outcomes is None else np.asarray(self.outcomes, np.int64).reshape(n, self.k)
            self.terminal_settings = np.asarray(self.terminal_settings if self.terminal_settings is not None
                                                else np.zeros(n), np.int64)
            self.terminal_outcomes = np.asarray(self.terminal_outcomes if self.terminal_outcomes is not None
                                                else np.zeros(n), np.int64)
            f = self.frame
            if n and (self.settings.max() >= f.n_settings or self.outcomes.max() >= f.n_outcomes
                      or self.terminal_settings.max() >= f.n_terminal_settings
                      or self.terminal_outcomes.max() >= f.n_terminal_outcomes
                      or min(self.settings.min(), self.outcomes.min(),
                             self.terminal_settings.min(), self.terminal_outcomes.min()) < 0):
                raise FrameError("record index outside the frame alphabet")

    @property
    def exact(self) -> bool:
        return self.probabilities is not None

    @property
    def n(self) -> int:
        return 0 if self.exact else len(self.settings)

    @property
    def d(self) -> int:
        return self.frame.d

    @property
    def labels(self) -> tuple:
        return leg_labels(self.k)

    def element_indices(self) -> tuple:
        """(terminal element index, step element index per time) for every record."""
        f = self.frame
        return (self.terminal_settings * f.n_terminal_outcomes + self.terminal_outcomes,
                self.settings * f.n_outcomes + self.outcomes)

    def subset(self, idx) -> "ShadowSet":
        return ShadowSet(self.frame, self.k, self.settings[idx], self.outcomes[idx],
                         self.terminal_settings[idx], self.terminal_outcomes[idx], self.seed)


def exact_shadow(pt: ProcessTensor, frame: InstrumentFrame) -> ShadowSet:
    """Infinite-shot shadow: joint element weights from the Born rule."""
    p = _setting_weighted_born(pt, frame)
    return ShadowSet(frame, pt.k, probabilities=p)


def _setting_weighted_born(pt: ProcessTensor, frame: InstrumentFrame) -> np.ndarray:
    p = born_tensor(pt.choi, pt.k, pt.d, [frame.flat_elements] * pt.k, frame.flat_terminal)
    if p.min() < -1e-9:
        raise FrameError(f"negative Born probability {p.min():.3g}")
    wt = np.repeat(frame.terminal_weights, frame.n_terminal_outcomes)
    ws = np.repeat(frame.weights, frame.n_outcomes)
    p = np.clip(p, 0, None) * wt.reshape([-1] + [1] * pt.k)
    for ax in range(1, pt.k + 1):
        p = p * ws.reshape([1] * ax + [-1] + [1] * (pt.k - ax))
    return p


def sample_snapshots(pt: ProcessTensor, frame: InstrumentFrame, n: int, rng: np.random.Generator,
                     seed: int | None = None) -> ShadowSet:
    """Draw ``n`` records from the exact joint distribution of a dense process."""
    k, f = pt.k, frame
    p = born_tensor(pt.choi, k, pt.d, [f.flat_elements] * k, f.flat_terminal)
    if p.min() < -1e-9:
        raise FrameError(f"negative Born probability {p.min():.3g}")
    p = np.clip(p, 0, None)
    shape = [f.n_terminal_settings, f.n_terminal_outcomes] + [f.n_settings, f.n_outcomes] * k
    p = p.reshape(shape)
    set_axes = list(range(0, 2 * k + 2, 2))
    out_axes = list(range(1, 2 * k + 2, 2))
    table = p.transpose(set_axes + out_axes).reshape(
        f.n_terminal_settings * f.n_settings ** k, f.n_terminal_outcomes * f.n_outcomes ** k)
    table = table / table.sum(axis=1, keepdims=True)
    sw = f.terminal_weights
    for _ in range(k):
        sw = np.outer(sw, f.weights).ravel()
    rows = rng.choice(len(sw), size=n, p=sw)
    cdf = np.cumsum(table, axis=1)
    u = rng.random(n) * cdf[rows, -1]
    cols = np.minimum((u[:, None] > cdf[rows]).sum(axis=1), table.shape[1] - 1)
    sets = np.array(np.unravel_index(rows, [f.n_terminal_settings] + [f.n_settings] * k)).T
    outs = np.array(np.unravel_index(cols, [f.n_terminal_outcomes] + [f.n_outcomes] * k)).T
    # columns run (terminal, k-1, ..., 0); records store time order
    return ShadowSet(frame, k, sets[:, :0:-1], outs[:, :0:-1], sets[:, 0], outs[:, 0], seed)


# estimation

def _slot_tables(shadow: ShadowSet, obs: Mapping[str, np.ndarray]) -> tuple:
    """Per-slot value tables Tr[O_slot S_e]/d and the terminal table."""
    d, k = shadow.d, shadow.k
    known = set(shadow.labels)
    for leg in obs:
        if leg not in known:
            raise FrameError(f"unknown leg {leg!r}")
    eye = np.eye(d)
    f = shadow.frame
    tables = []
    for j in range(k):
        op = np.kron(obs.get(f"i{j + 1}", eye), obs.get(f"o{j}", eye))
        tables.append(np.einsum("ab,nba->n", op, f.snapshots).real / d)
    top = obs.get(f"o{k}", eye)
    term = np.einsum("ab,nba->n", top, f.terminal_snapshots).real
    return term, tables


def snapshot_values(shadow: ShadowSet, obs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Single-shot estimates of Tr[O Upsilon]/d^k for every record."""
    term, tables = _slot_tables(shadow, obs)
    et, es = shadow.element_indices()
    vals = term[et]
    for j, t in enumerate(tables):
        vals = vals * t[es[:, j]]
    return vals


def median_of_means(values: np.ndarray, n_groups: int) -> float:
    values = np.asarray(values)
    if n_groups < 1 or n_groups > len(values):
        raise FrameError(f"cannot form {n_groups} groups from {len(values)} snapshots")
    size = len(values) // n_groups
    means = values[: size * n_groups].reshape(n_groups, size).mean(axis=1)
    return float(np.sort(means)[(n_groups - 1) // 2])


def estimate_observable(shadow: ShadowSet, obs: Mapping[str, np.ndarray], n_groups: int = 1) -> float:
    """Median-of-means estimate of the normalized expectation Tr[O Upsilon]/d^k.

    ``obs`` maps leg labels to single-leg operators; absent legs carry identity.
    """
    if shadow.exact:
        term, tables = _slot_tables(shadow, obs)
        out = np.tensordot(shadow.probabilities, term, axes=([0], [0]))
        for t in tables[::-1]:
            out = np.tensordot(out, t, axes=([0], [0]))
        return float(out)
    return median_of_means(snapshot_values(shadow, obs), n_groups)


def element_weights(shadow: ShadowSet) -> np.ndarray:
    """Dense joint weight tensor over (terminal element, step k-1, ..., step 0), summing to 1."""
    if shadow.exact:
        return shadow.probabilities
    f = shadow.frame
    et, es = shadow.element_indices()
    dims = [f.n_terminal_settings * f.n_terminal_outcomes] + [f.n_settings * f.n_outcomes] * shadow.k
    flat = np.ravel_multi_index([et] + [es[:, j] for j in range(shadow.k - 1, -1, -1)], dims)
    return np.bincount(flat, minlength=int(np.prod(dims))).reshape(dims) / max(shadow.n, 1)


def marginal_estimate(shadow: ShadowSet, keep_legs: Sequence[str]):
    """Linear-inversion estimate of the marginal on ``keep_legs``.

    Follows the process-module convention: traced input legs contribute a
    factor 1/d each. Returns ``(matrix, LegShape)``.
    """
    d, k = shadow.d, shadow.k
    labels = shadow.labels
    keep = [l for l in labels if l in set(keep_legs)]
    if len(keep) != len(set(keep_legs)):
        raise FrameError("unknown legs in marginal request")
    f = shadow.frame
    q = d * d
    # factors per slot: terminal first, then steps k-1 .. 0
    groups = [(f"o{k}",)] + [(f"i{j + 1}", f"o{j}") for j in range(k - 1, -1, -1)]
    snaps = [f.terminal_snapshots] + [f.snapshots] * k
    kept_axes, factors, scalars = [], [], []
    for ax, (legs, s) in enumerate(zip(groups, snaps)):
        present = [l in keep for l in legs]
        if not any(present):
            scalars.append((ax, np.einsum("naa->n", s).real))
            continue
        if all(present):
            factors.append(s)
        else:
            t = s.reshape(-1, d, d, d, d)
            factors.append(np.einsum("naxbx->nab", t) if present[0] else np.einsum("nxaxb->nab", t))
        kept_axes.append(ax)
    w = _reduced_weights(shadow, kept_axes, scalars)
    n_in = sum(1 for l in labels if l.startswith("i") and l not in keep)
    out = _contract_factors(w, factors) / d ** n_in
    return out, LegShape.uniform(keep, d)


def _reduced_weights(shadow: ShadowSet, kept_axes: list, scalars: list) -> np.ndarray:
    if shadow.exact:
        w = shadow.probabilities
        for ax, s in sorted(scalars, reverse=True):
            w = np.tensordot(w, s, axes=([ax], [0]))
        return w
    f = shadow.frame
    et, es = shadow.element_indices()
    cols = [et] + [es[:, j] for j in range(shadow.k - 1, -1, -1)]
    dims = [f.n_terminal_settings * f.n_terminal_outcomes] + [f.n_settings * f.n_outcomes] * shadow.k
    weight = np.ones(shadow.n)
    for ax, s in scalars:
        weight = weight * s[cols[ax]]
    kd = [dims[a] for a in kept_axes]
    if not kept_axes:
        return np.array(weight.sum() / max(shadow.n, 1))
    flat = np.ravel_multi_index([cols[a] for a in kept_axes], kd)
    return np.bincount(flat, weights=weight, minlength=int(np.prod(kd))).reshape(kd) / max(shadow.n, 1)


def _contract_factors(w: np.ndarray, factors: list) -> np.ndarray:
    """Contract ``w`` (one axis per factor) with per-element matrices into one operator."""
    if not factors:
        return np.array([[complex(w)]])
    t = np.asarray(w, dtype=complex)
    rdims, cdims = [], []
    for fac in factors[::-1]:
        t = np.tensordot(t, fac, axes=([len(factors) - 1 - len(rdims)], [0]))
        rdims.insert(0, fac.shape[1])
        cdims.insert(0, fac.shape[2])
    # axes now: (r_last, c_last, ..., r_first, c_first) appended in reverse order
    n = len(factors)
    order_r = [2 * (n - 1 - i) for i in range(n)]
    order_c = [2 * (n - 1 - i) + 1 for i in range(n)]
    t = t.transpose(order_r + order_c)
    dim = int(np.prod(rdims))
    return t.reshape(dim, dim)


# planning and norms

def plan(m: int, eps: float, delta: float, max_sq_shadow_norm: float, force_odd: bool = True) -> dict:
    """Group count K and group size N for median-of-means estimation."""
    if not (0 < eps < 1 and 0 < delta < 1):
        raise ValueError("eps and delta must lie in (0, 1)")
    k = max(1, math.ceil(2 * math.log(2 * m / delta)))
    if force_odd and k % 2 == 0:
        k += 1
    n = max(1, math.ceil(34 / eps ** 2 * max_sq_shadow_norm))
    return {"K": k, "N": n}


def pauli_inverse_map(op: np.ndarray) -> np.ndarray:
    """Inverse of the single-qubit Pauli-measurement channel, X -> 3X - Tr[X] I, applied per qubit."""
    op = np.asarray(op, dtype=complex)
    n = int(round(math.log2(op.shape[0])))
    t = op.reshape((2,) * (2 * n))
    for leg in range(n):
        tr = np.trace(t, axis1=leg, axis2=n + leg)
        t = 3 * t - np.expand_dims(np.expand_dims(tr, leg), n + leg) * _eye_on(n, leg)
    return t.reshape(op.shape)


def _eye_on(n: int, leg: int) -> np.ndarray:
    shape = [1] * (2 * n)
    shape[leg] = shape[n + leg] = 2
    return np.eye(2).reshape(shape)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (3 - np.sqrt(5)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _bloch_state(v) -> np.ndarray:
    x, y, z = v
    return 0.5 * np.array([[1 + z, x - 1j * y], [x + 1j * y, 1 - z]])


def slot_norm_sq(frame: InstrumentFrame, op: np.ndarray, terminal: bool = False,
                 grid: int = 10_000, refine: bool = True) -> float:
    """Squared shadow norm of a one-slot observable, maximized over input states.

    For a step slot ``op`` acts on ``(i_{j+1}, o_j)``; for the terminal it acts on
    ``o_k``. The traceless part is used, and values are normalized per slot so the
    identity has norm 1.
    """
    d = frame.d
    op = np.asarray(op, dtype=complex)
    if terminal:
        op0 = op - np.trace(op) / d * np.eye(d)
        vals = np.einsum("ab,nba->n", op0, frame.terminal_snapshots).real
        effects = frame.flat_terminal
        w = np.repeat(frame.terminal_weights, frame.n_terminal_outcomes)
        # p(e|sigma) = w Tr[sigma Pi]
        lin = np.einsum("n,nab->ba", w * vals ** 2, effects)
    else:
        op0 = op - np.trace(op) / (d * d) * np.eye(d * d)
        if np.allclose(op, np.trace(op) / (d * d) * np.eye(d * d)):
            return 1.0 if abs(np.trace(op)) > 0 else 0.0
        vals = np.einsum("ab,nba->n", op0, frame.snapshots).real / d
        w = np.repeat(frame.weights, frame.n_outcomes)
        el = frame.flat_elements.reshape(-1, d, d, d, d)
        # Tr[A_e(sigma)] = sum_ij sigma_ij sum_a C[(a,i),(a,j)]
        lin = np.einsum("n,naiaj->ij", w * vals ** 2, el)
    if terminal and np.allclose(op0, 0):
        return 1.0 if abs(np.trace(op)) > 0 else 0.0

    def value(v):
        return float(np.real(np.sum(_bloch_state(v) * lin)))

    pts = fibonacci_sphere(grid)
    best = max(pts, key=value)
    if refine:
        from scipy.optimize import minimize

        def neg(x):
            th, ph = x
            return -value((np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)))

        x0 = (np.arccos(np.clip(best[2], -1, 1)), np.arctan2(best[1], best[0]))
        res = minimize(neg, x0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12})
        return max(-res.fun, value(best))
    return value(best)


def leg_norm_sq(frame: InstrumentFrame, op: np.ndarray, leg: str, **kw) -> float:
    """Squared shadow norm of a single-leg operator on ``"out"``, ``"in"`` or ``"terminal"``."""
    d = frame.d
    if leg == "terminal":
        return slot_norm_sq(frame, op, terminal=True, **kw)
    full = np.kron(np.eye(d), op) if leg == "out" else np.kron(op, np.eye(d))
    return slot_norm_sq(frame, full, **kw)


def shadow_norm(frame: InstrumentFrame, obs: Mapping[str, np.ndarray], k: int, **kw) -> float:
    """Product of per-slot shadow norms for a per-leg observable."""
    d = frame.d
    eye = np.eye(d)
    total = slot_norm_sq(frame, obs.get(f"o{k}", eye), terminal=True, **kw)
    for j in range(k):
        op = kron(obs.get(f"i{j + 1}", eye), obs.get(f"o{j}", eye))
        total *= slot_norm_sq(frame, op, **kw)
    return math.sqrt(total)


class TemporalShadow(BaseEstimator):
    """Estimator wrapper: ``fit`` on a :class:`ShadowSet`, ``predict`` observables."""

    def __init__(self, n_groups: int = 1):
        self.n_groups = n_groups

    def fit(self, X: ShadowSet, y=None):
        if not isinstance(X, ShadowSet):
            raise TypeError("TemporalShadow.fit expects a ShadowSet")
        self.shadow_ = X
        return self

    def predict(self, observables: Sequence[Mapping[str, np.ndarray]]) -> np.ndarray:
        return np.array([estimate_observable(self.shadow_, o, self.n_groups) for o in observables])

    def marginal(self, legs: Sequence[str]):
        return marginal_estimate(self.shadow_, legs)
