"""Finitely correlated processes: window marginals stitched into a matrix product operator.

The MPO has one site per process leg, in leg order ``(o_k, i_k, ..., i_1, o_0)``.
Each core has shape ``(left bond, d, d, right bond)``; the two middle indices are
the row and column index of that leg. Windows of ``l`` steps, shifted by one
time slot, are glued through pseudoinverses of their overlaps. Each overlap is cut
between an input leg and the output leg just below it, where only the
environment carries correlations, so an environment of dimension ``d_E`` needs
bond ``d_E^2``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import mle
from .process import DENSE_CAP, DenseCapError, Fragment, ProcessTensor, leg_labels, marginal, window
from .qcore import LegShape, partial_trace

JUNCTION_CUTOFF = 1e-6
SPLIT_CUTOFF = 1e-13


class ConditioningError(RuntimeError):
    """A junction or window is too poorly conditioned to invert."""

    def __init__(self, msg: str, where=None, report=None):
        super().__init__(msg)
        self.where = where
        self.report = report


@dataclass
class MarginalSet:
    """Windows ``Upsilon_{l:0}, Upsilon_{l+1:1}, ..., Upsilon_{k:k-l}`` in that order."""

    ell: int
    k: int
    marginals: list
    d: int = 2

    def __post_init__(self):
        if not 1 <= self.ell <= self.k:
            raise ValueError("window length must lie in 1..k")
        if len(self.marginals) != self.k - self.ell + 1:
            raise ValueError(f"expected {self.k - self.ell + 1} windows, got {len(self.marginals)}")
        for s, m in enumerate(self.marginals):
            if m.k != self.ell or m.offset != s:
                raise ValueError(f"window {s} has the wrong legs {m.labels}")

    def consistency_defects(self) -> list:
        """Frobenius disagreement of neighbouring windows on their shared steps."""
        out = []
        for a, b in zip(self.marginals, self.marginals[1:]):
            common = [l for l in b.labels[2:]]
            out.append(float(np.linalg.norm(marginal(a, common).matrix - marginal(b, common).matrix)))
        return out


def exact_marginals(pt: ProcessTensor, ell: int) -> MarginalSet:
    return MarginalSet(ell, pt.k, [window(pt, s + ell, ell) for s in range(pt.k - ell + 1)], pt.d)


def _window_legs(k: int, ell: int, s: int) -> tuple:
    return leg_labels(ell, s)


def _fit_window(shadow, s: int, ell: int, frame, max_iters: int, max_negativity: float):
    from .shadows import marginal_estimate
    d = shadow.d
    legs = _window_legs(shadow.k, ell, s)
    est, _ = marginal_estimate(shadow, legs)
    est = 0.5 * (est + est.conj().T)
    ev = np.linalg.eigvalsh(est)
    neg = float(-ev[ev < 0].sum() / max(ev.sum(), 1e-300))
    if shadow.exact:
        return mle.project_physical(est, ell, d, offset=s), neg, None
    if neg > max_negativity:
        return None, neg, None
    problem = mle.counts_from_estimate(est, frame, ell, shadow.n, d, offset=s)
    res = mle.fit(problem, max_iters=max_iters)
    return res.estimate, neg, res


def marginals_from_shadow(shadow, ell: int, max_iters: int = 200, max_negativity: float = 10.0,
                          n_jobs: int = 1, frame=None, logs: dict | None = None) -> MarginalSet:
    """Physical window marginals: linear inversion per window, then maximum likelihood.

    Sampled shadows are refit against virtual counts that the linear-inversion
    estimate assigns to a minimal measure-prepare basis. Exact shadows are only
    projected, since the estimate is already physical. ``logs``, when given,
    receives each window's likelihood trace.
    """
    from .shadows import pauli_frame
    if not shadow.exact and shadow.n == 0:
        raise ConditioningError("shadow has no records", where=0)
    if frame is None:
        frame = pauli_frame(("0", "1", "+", "i+"))
    starts = range(shadow.k - ell + 1)
    with ThreadPoolExecutor(max_workers=max(1, n_jobs)) as pool:
        fits = list(pool.map(lambda s: _fit_window(shadow, s, ell, frame, max_iters, max_negativity), starts))
    worst = int(np.argmax([f[1] for f in fits]))
    if any(f[0] is None for f in fits):
        raise ConditioningError(
            f"too few shots: window {worst} linear-inversion estimate has negative weight {fits[worst][1]:.3g}",
            where=worst)
    if logs is not None:
        for s, f in zip(starts, fits):
            logs[f"window_{s}"] = {"negative_weight": f[1], "converged": f[2].converged if f[2] else True,
                                   "trace": f[2].trace if f[2] else []}
    return MarginalSet(ell, shadow.k, [f[0] for f in fits], shadow.d)


def _trace_to(frag: Fragment, keep: Sequence[str], d: int) -> Fragment:
    """Partial trace of a fragment, dividing by d per traced input leg."""
    n_in = sum(1 for l in frag.shape.labels if l.startswith("i") and l not in keep)
    keep = [l for l in frag.shape.labels if l in set(keep)]
    return Fragment(partial_trace(frag.matrix, frag.shape, keep) / d ** n_in, frag.shape.select(keep))


def _pad(frag: Fragment, leg: str, d: int) -> Fragment:
    return Fragment(np.kron(np.eye(d), frag.matrix), LegShape.uniform((leg,) + frag.shape.labels, d))


def build_E(ms: MarginalSet) -> list:
    """Alternating window marginals and identity-padded traced marginals, latest first.

    Entry ``2m`` is ``Upsilon_{j:j-l}`` and entry ``2m+1`` is
    ``I_{i_j} (x) Tr_{o_{j-l-1}}[Upsilon_{j-1:j-l-1}]``, with ``j = k - m``.
    """
    d = ms.d
    wins = [Fragment(w.choi, w.shape) for w in ms.marginals[::-1]]
    out = []
    for m, w in enumerate(wins):
        out.append(w)
        if m + 1 < len(wins):
            nxt = wins[m + 1]
            traced = _trace_to(nxt, nxt.shape.labels[:-1], d)
            out.append(_pad(traced, w.shape.labels[1], d))
    return out


def _vectorize(m: np.ndarray, n: int, d: int) -> np.ndarray:
    """Operator on ``n`` legs -> tensor with one ``d*d`` index per leg."""
    t = m.reshape((d,) * (2 * n))
    order = [x for i in range(n) for x in (i, n + i)]
    return t.transpose(order).reshape((d * d,) * n)


def _devectorize(t: np.ndarray, n: int, d: int) -> np.ndarray:
    t = t.reshape((d,) * (2 * n))
    order = [2 * i for i in range(n)] + [2 * i + 1 for i in range(n)]
    return t.transpose(order).reshape(d ** n, d ** n)


def _split(block: np.ndarray, n_sites: int, q: int, cutoff: float, left_bond: int, right_bond: int) -> list:
    """Split a ``(left, q^n, right)`` block into per-site cores by successive SVDs."""
    cores = []
    rest = block.reshape(left_bond, -1)
    bond = left_bond
    for i in range(n_sites - 1):
        rest = rest.reshape(bond * q, -1)
        u, s, vh = np.linalg.svd(rest, full_matrices=False)
        keep = max(1, int(np.sum(s > cutoff * s[0]))) if s[0] > 0 else 1
        cores.append(u[:, :keep].reshape(bond, q, keep))
        rest = s[:keep, None] * vh[:keep]
        bond = keep
    cores.append(rest.reshape(bond, q, right_bond))
    return cores


@dataclass
class MpoProcess:
    cores: list
    k: int
    ell: int
    d: int = 2
    junctions: list = field(default_factory=list)

    @property
    def labels(self) -> tuple:
        return leg_labels(self.k)

    @property
    def bond_dims(self) -> list:
        return [c.shape[-1] for c in self.cores[:-1]]

    def trace(self) -> float:
        env = np.ones(1)
        eye = np.eye(self.d)
        for c in self.cores:
            env = env @ np.einsum("labr,ab->lr", c, eye)
        return float(np.real(env[0]))

    def summary(self) -> dict:
        return {"k": self.k, "ell": self.ell, "d": self.d, "bond_dims": self.bond_dims,
                "junctions": self.junctions}


def _raw(frag: Fragment, k: int, d: int) -> np.ndarray:
    n_in = sum(1 for l in frag.shape.labels if l.startswith("i"))
    n = len(frag.shape.labels)
    return _vectorize(frag.matrix * d ** (k - n_in), n, d)


def _overlap_split(ell: int) -> int:
    """Legs on the later side of the overlap cut.

    The overlap runs ``i_j, o_{j-1}, ..., o_{j-l}``. Cutting between an input and the
    output just below it only severs the environment, so among those cuts take the
    most balanced one.
    """
    return 1 + 2 * (ell // 2)


def assemble_mpo(E: Sequence[Fragment], k: int, ell: int, d: int = 2, cutoff: float = JUNCTION_CUTOFF,
                 min_rank: int = 1, verify_tol: float | None = None) -> MpoProcess:
    """Glue the E set into an MPO through SVD pseudoinverses of the window overlaps.

    Consecutive windows are shifted by one time slot. Window ``s >= 1`` is the
    marginal of entry ``2s`` padded with the identity on the input leg above it;
    their shared ``2l`` legs come from entry ``2s-1`` with its last input traced.
    With ``verify_tol`` set, an MPO whose window marginals stray further than that
    from the inputs is refused, which catches overlaps that hide part of the bond.
    """
    q = d * d
    if len(E) != 2 * (k - ell) + 1:
        raise ValueError(f"E has {len(E)} entries, expected {2 * (k - ell) + 1}")
    n_w = k - ell + 1
    wins = [_raw(E[0], k, d)]
    for s in range(1, n_w):
        wins.append(_raw(_pad(E[2 * s], E[2 * s - 1].shape.labels[0], d), k, d))
    n = 2 * ell + 1
    if n_w == 1:
        cores = _split(wins[0].reshape(1, -1, 1), n, q, SPLIT_CUTOFF, 1, 1)
        return MpoProcess([c.reshape(c.shape[0], d, d, c.shape[-1]) for c in cores], k, ell, d, [])
    na = _overlap_split(ell)
    nb = 2 * ell - na
    lefts, rights, report = [], [], []
    for s in range(n_w - 1):
        ov = E[2 * s + 1]
        legs = ov.shape.labels[:-1]
        o = _raw(_trace_to(ov, legs, d), k, d).reshape(q ** na, q ** nb)
        u, sv, vh = np.linalg.svd(o)
        smax = float(sv[0])
        r = int(np.sum(sv > cutoff * smax)) if smax > 0 else 0
        entry = {"junction": s, "cut": f"{legs[na - 1]}|{legs[na]}", "rank": r,
                 "sigma_max": smax, "sigma_min_kept": float(sv[r - 1]) if r else 0.0,
                 "sigma_next": float(sv[r]) if r < len(sv) else 0.0}
        report.append(entry)
        if r < min_rank:
            raise ConditioningError(f"junction {s} at {entry['cut']} retains rank {r} below {min_rank}",
                                    where=s, report=report)
        lefts.append(u[:, :r].conj().T / sv[:r, None])  # S^-1 U^dag
        rights.append(vh[:r].conj().T)  # V
    first = wins[0].reshape(-1, q ** nb) @ rights[0]
    cores = _split(first.reshape(1, -1, first.shape[1]), 1 + na, q, SPLIT_CUTOFF, 1, first.shape[1])
    for s in range(1, n_w - 1):
        w = wins[s].reshape(q ** na, q * q, q ** nb)
        mid = np.einsum("ra,axb,bs->rxs", lefts[s - 1], w, rights[s], optimize=True)
        cores += _split(mid, 2, q, SPLIT_CUTOFF, mid.shape[0], mid.shape[-1])
    last = lefts[-1] @ wins[-1].reshape(q ** na, -1)
    cores += _split(last, n + 1 - na, q, SPLIT_CUTOFF, last.shape[0], 1)
    cores = [c.reshape(c.shape[0], d, d, c.shape[-1]) for c in cores]
    mpo = MpoProcess(cores, k, ell, d, report)
    if verify_tol is not None:
        errs = window_errors(mpo, E)
        worst = int(np.argmax(errs))
        if errs[worst] > verify_tol:
            raise ConditioningError(f"window {worst} is reproduced only to {errs[worst]:.3g}; "
                                    "the overlaps do not resolve the memory", where=worst, report=report)
    return mpo


def _slot_transfer(c1: np.ndarray, c2: np.ndarray, elements: np.ndarray, d: int) -> np.ndarray:
    a = elements.reshape(-1, d, d, d, d)
    return np.einsum("lacm,mbdr,nabcd->nlr", c1, c2, a, optimize=True)


def contract_probability(mpo: MpoProcess, seq: Sequence, window: tuple | None = None,
                         terminal: np.ndarray | None = None):
    """Outcome probabilities of the window slots under a sequence of instruments.

    ``seq[j]`` is either one Choi matrix ``(d^2, d^2)`` or a stack of instrument
    elements ``(n, d^2, d^2)`` for the control at time ``j``. Slots before the window
    are summed over outcomes, slots after it are replaced by the identity (causality
    makes them irrelevant). ``terminal`` optionally stacks effects on ``o_k``; it is
    kept only when the window reaches the last slot. The result has one axis per
    stacked window slot in time order, the terminal last.
    """
    d, k = mpo.d, mpo.k
    q = d * d
    if len(seq) != k:
        raise ValueError(f"sequence has {len(seq)} steps, process has {k}")
    start, stop = (0, k - 1) if window is None else window
    if not 0 <= start <= stop <= k - 1:
        raise ValueError("window outside the process")
    mats = []
    for s in seq:
        s = np.asarray(s, dtype=complex)
        if s.shape[-2:] != (q, q):
            raise ValueError(f"control of shape {s.shape} does not match local dimension {d}")
        mats.append(s)
    use_terminal = terminal is not None and stop == k - 1
    c0 = mpo.cores[0][0]
    if use_terminal:
        env = np.einsum("abr,nba->nr", c0, np.asarray(terminal, dtype=complex))
        axes = [True]
    else:
        env = np.einsum("aar->r", c0)[None]
        axes = [False]
    for j in range(k - 1, -1, -1):
        c1, c2 = mpo.cores[2 * (k - j) - 1], mpo.cores[2 * (k - j)]
        a = mats[j]
        if j > stop:
            t = _slot_transfer(c1, c2, np.eye(q)[None] / d, d)
            stacked = False
        elif j < start:
            t = _slot_transfer(c1, c2, (a.sum(axis=0) if a.ndim == 3 else a)[None], d)
            stacked = False
        else:
            stacked = a.ndim == 3
            t = _slot_transfer(c1, c2, a if stacked else a[None], d)
        if stacked:
            env = np.einsum("...l,nlr->...nr", env, t)
        else:
            env = np.einsum("...l,lr->...r", env, t[0])
        axes.append(stacked)
    out = env[..., 0]
    if not axes[0]:
        out = out[0]
    kept = [i for i, flag in enumerate(axes) if flag]
    # axes run terminal, k-1, ..., 0; reverse to time order with the terminal last
    if kept:
        n_ax = out.ndim
        has_t = axes[0]
        order = list(range(n_ax - 1, 0, -1)) + [0] if has_t else list(range(n_ax - 1, -1, -1))
        out = out.transpose(order)
    return np.real(out) if np.ndim(out) else float(np.real(out))


def mpo_marginal(mpo: MpoProcess, keep_legs: Sequence[str]) -> Fragment:
    """Dense marginal of the MPO on a few legs, same normalization as :func:`process.marginal`."""
    d, q = mpo.d, mpo.d ** 2
    labels = mpo.labels
    keep = set(keep_legs)
    if not keep <= set(labels):
        raise ValueError("unknown legs requested")
    eye = np.eye(d)
    t = np.ones((1, 1))
    n_keep = 0
    for label, c in zip(labels, mpo.cores):
        if label in keep:
            t = np.tensordot(t, c.reshape(c.shape[0], q, c.shape[-1]), axes=([-1], [0]))
            t = t.reshape(-1, c.shape[-1])
            n_keep += 1
        else:
            t = t @ np.einsum("labr,ab->lr", c, eye)
    n_in = sum(1 for l in labels if l.startswith("i") and l not in keep)
    order = [l for l in labels if l in keep]
    mat = _devectorize(t.reshape((q,) * n_keep), n_keep, d) / d ** n_in
    return Fragment(mat, LegShape.uniform(order, d))


def window_errors(mpo: MpoProcess, E: Sequence[Fragment]) -> list:
    """Frobenius mismatch between the MPO's window marginals and the input windows."""
    return [float(np.linalg.norm(mpo_marginal(mpo, w.shape.labels).matrix - w.matrix)) for w in E[::2]]


def reconstruct_dense(mpo: MpoProcess, dense_cap: int = DENSE_CAP, physical: bool = False) -> ProcessTensor:
    if mpo.k > dense_cap:
        raise DenseCapError(f"k={mpo.k} exceeds the dense cap {dense_cap}")
    q = mpo.d ** 2
    t = np.ones((1, 1))
    for c in mpo.cores:
        t = np.tensordot(t, c.reshape(c.shape[0], q, c.shape[-1]), axes=([-1], [0]))
    n = 2 * mpo.k + 1
    mat = _devectorize(t.reshape((q,) * n), n, mpo.d)
    mat = 0.5 * (mat + mat.conj().T)
    if physical:
        return mle.project_physical(mat, mpo.k, mpo.d)
    return ProcessTensor(mat, mpo.k, mpo.d)


class FiniteCorrelatedProcess(BaseEstimator):
    """Window marginals from a shadow, stitched into an MPO."""

    def __init__(self, ell: int = 3, cutoff: float = JUNCTION_CUTOFF, min_rank: int = 1,
                 max_iters: int = 200, n_jobs: int = 1, verify_tol: float | None = None):
        self.ell = ell
        self.cutoff = cutoff
        self.verify_tol = verify_tol
        self.min_rank = min_rank
        self.max_iters = max_iters
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        ms = X if isinstance(X, MarginalSet) else marginals_from_shadow(
            X, self.ell, max_iters=self.max_iters, n_jobs=self.n_jobs)
        self.marginals_ = ms
        self.mpo_ = assemble_mpo(build_E(ms), ms.k, ms.ell, ms.d, self.cutoff, self.min_rank, self.verify_tol)
        return self

    def predict_proba(self, seq: Sequence, window: tuple | None = None, terminal=None):
        return contract_probability(self.mpo_, seq, window, terminal)
