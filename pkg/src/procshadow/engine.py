"""Shot-level simulation of system-environment circuits probed by instrument frames.

Each shot carries a state vector of the system (first factor) and its environment.
At every time slot the frame's instrument acts on the system through Kraus
operators; the recorded outcome is drawn from the Born rule and the state is
renormalized, which is the state-vector analog of a mid-circuit measurement
followed by an ancilla reset. Shots are split into fixed-size chunks with
independent child seeds, so records do not depend on the number of threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .process import ProcessTensor, simulate_process
from .shadows import InstrumentFrame, ShadowSet

CHUNK = 8192


@dataclass
class Circuit:
    """Step unitaries on S (x) E, system first; ``u_steps[j]`` acts after the control at time ``j``."""

    u_steps: list
    rho0: np.ndarray
    d: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u_steps = [np.asarray(u, dtype=complex) for u in self.u_steps]
        self.rho0 = np.asarray(self.rho0, dtype=complex)
        n = self.rho0.shape[0]
        if n % self.d:
            raise ValueError("initial state dimension is not a multiple of d")
        for u in self.u_steps:
            if u.shape != (n, n):
                raise ValueError("step unitary does not match the initial state")

    @property
    def k(self) -> int:
        return len(self.u_steps)

    @property
    def d_env(self) -> int:
        return self.rho0.shape[0] // self.d

    def process_tensor(self) -> ProcessTensor:
        return simulate_process(self.u_steps, self.rho0, self.k, self.d)


def choi_to_kraus(c: np.ndarray, d_in: int, d_out: int, tol: float = 1e-12) -> np.ndarray:
    """Kraus operators ``(r, d_out, d_in)`` of a CP map from its Choi matrix."""
    w, v = np.linalg.eigh(0.5 * (c + c.conj().T))
    keep = w > tol * max(w.max(), 1e-300)
    ks = (v[:, keep] * np.sqrt(w[keep])).T.reshape(-1, d_out, d_in)
    return ks if len(ks) else np.zeros((1, d_out, d_in), dtype=complex)


def element_kraus(frame: InstrumentFrame) -> np.ndarray:
    """Kraus stack ``(settings, outcomes, r, d, d)``, zero-padded to a common rank."""
    d = frame.d
    if frame.kraus is not None:
        kr = np.asarray(frame.kraus, dtype=complex)
        return kr[:, :, None] if kr.ndim == 4 else kr
    lists = [[choi_to_kraus(e, d, d) for e in row] for row in frame.elements]
    r = max(k.shape[0] for row in lists for k in row)
    out = np.zeros(frame.elements.shape[:2] + (r, d, d), dtype=complex)
    for s, row in enumerate(lists):
        for x, ks in enumerate(row):
            out[s, x, : len(ks)] = ks
    return out


def terminal_kraus(frame: InstrumentFrame) -> np.ndarray:
    d = frame.d
    if frame.terminal_kraus is not None:
        kr = np.asarray(frame.terminal_kraus, dtype=complex)
        if kr.ndim == 4 and kr.shape[-2:] == (d, d):
            return kr[:, :, None]
        return kr
    out = np.zeros(frame.terminal.shape[:2] + (1, d, d), dtype=complex)
    for s, row in enumerate(frame.terminal):
        for x, e in enumerate(row):
            w, v = np.linalg.eigh(0.5 * (e + e.conj().T))
            out[s, x, 0] = (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T
    return out


def _draw(rng: np.random.Generator, weights: np.ndarray, n: int) -> np.ndarray:
    return np.minimum(np.searchsorted(np.cumsum(weights), rng.random(n) * weights.sum(), side="right"),
                      len(weights) - 1)


def _measure(psi: np.ndarray, kraus: np.ndarray, settings: np.ndarray, rng: np.random.Generator):
    """Apply one instrument per shot; returns (new states, outcomes)."""
    n = psi.shape[0]
    ks = kraus[settings]  # (n, X, r, d, d)
    n_x, r = ks.shape[1], ks.shape[2]
    branches = np.einsum("nxrab,nbe->nxrae", ks, psi, optimize=True)
    w = np.sum(np.abs(branches) ** 2, axis=(3, 4)).reshape(n, n_x * r)
    cdf = np.cumsum(w, axis=1)
    u = rng.random(n) * cdf[:, -1]
    idx = np.minimum((u[:, None] > cdf).sum(axis=1), n_x * r - 1)
    picked = branches.reshape(n, n_x * r, *psi.shape[1:])[np.arange(n), idx]
    norm = np.sqrt(w[np.arange(n), idx])
    return picked / norm[:, None, None], idx // r


def _initial_components(rho0: np.ndarray):
    w, v = np.linalg.eigh(0.5 * (rho0 + rho0.conj().T))
    keep = w > 1e-14
    return w[keep] / w[keep].sum(), v[:, keep].T


def _run_chunk(circuit: Circuit, kraus, tkraus, frame, n: int, seed_seq, settings, terminal_setting):
    rng = np.random.default_rng(seed_seq)
    d, de, k = circuit.d, circuit.d_env, circuit.k
    probs, comps = _initial_components(circuit.rho0)
    psi = comps[_draw(rng, probs, n)].reshape(n, d, de)
    sets = np.empty((n, k), dtype=np.int64)
    outs = np.empty((n, k), dtype=np.int64)
    for j in range(k):
        s = np.full(n, settings[j]) if settings is not None else _draw(rng, frame.weights, n)
        psi, x = _measure(psi, kraus, s, rng)
        sets[:, j], outs[:, j] = s, x
        psi = (psi.reshape(n, d * de) @ circuit.u_steps[j].T).reshape(n, d, de)
    ts = (np.full(n, terminal_setting) if terminal_setting is not None
          else _draw(rng, frame.terminal_weights, n))
    _, tx = _measure(psi, tkraus, ts, rng)
    return sets, outs, ts, tx


def sample_records(circuit: Circuit, frame: InstrumentFrame, n: int, seed: int, threads: int = 1,
                   settings=None, terminal_setting=None, chunk: int = CHUNK) -> ShadowSet:
    """Draw ``n`` outcome records; fixed ``settings`` replace the random frame draws."""
    k = circuit.k
    if n == 0:
        return ShadowSet(frame, k, np.zeros((0, k), np.int64), np.zeros((0, k), np.int64),
                         np.zeros(0, np.int64), np.zeros(0, np.int64), seed)
    kraus, tkraus = element_kraus(frame), terminal_kraus(frame)
    sizes = [min(chunk, n - i) for i in range(0, n, chunk)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    job = lambda a: _run_chunk(circuit, kraus, tkraus, frame, a[0], a[1], settings, terminal_setting)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, zip(sizes, seeds)))
    else:
        parts = [job(a) for a in zip(sizes, seeds)]
    sets, outs, ts, tx = (np.concatenate(p) for p in zip(*parts))
    return ShadowSet(frame, k, sets, outs, ts, tx, seed)


# exact propagation of density matrices

def _apply_system(rho: np.ndarray, ks: np.ndarray, d: int) -> np.ndarray:
    """``sum_r (K_r (x) I) rho (K_r (x) I)^dag`` for a stack of density matrices."""
    n = rho.shape[-1]
    de = n // d
    t = rho.reshape(rho.shape[:-2] + (d, de, d, de))
    t = np.einsum("rab,...bxcy,rdc->...axdy", ks, t, ks.conj(), optimize=True)
    return t.reshape(rho.shape)


def _depolarize_system(rho: np.ndarray, d: int) -> np.ndarray:
    n = rho.shape[-1]
    de = n // d
    env = np.einsum("...axay->...xy", rho.reshape(rho.shape[:-2] + (d, de, d, de)))
    return np.einsum("ab,...xy->...axby", np.eye(d) / d, env).reshape(rho.shape)


def exact_distribution(circuit: Circuit, frame: InstrumentFrame, settings, window: tuple) -> np.ndarray:
    """Exact outcome distribution of the slots in ``window`` (inclusive) for fixed settings.

    Earlier slots run with their outcomes discarded; later slots cannot influence it.
    """
    d = circuit.d
    kraus = element_kraus(frame)
    start, stop = window
    rho = circuit.rho0[None]
    for j in range(stop + 1):
        ks = kraus[settings[j]]
        if j < start:
            rho = _apply_system(rho, ks.reshape(-1, d, d), d)
        else:
            rho = np.stack([_apply_system(rho, ks[x], d) for x in range(ks.shape[0])], axis=1)
            rho = rho.reshape((-1,) + rho.shape[-2:])
        u = circuit.u_steps[j]
        rho = u @ rho @ u.conj().T
    n_x = kraus.shape[1]
    p = np.real(np.trace(rho, axis1=-2, axis2=-1))
    return np.clip(p, 0, None).reshape((n_x,) * (stop - start + 1))


def exact_window_marginals(circuit: Circuit, ell: int) -> list:
    """Window marginals ``Upsilon_{s+l:s}`` without building the full process tensor.

    Past slots are traced with the convention of :func:`process.marginal`, which is
    the same as running them with the completely depolarizing channel.
    """
    d, k = circuit.d, circuit.k
    rho = circuit.rho0
    out = []
    for s in range(k - ell + 1):
        pt = simulate_process(circuit.u_steps[s:s + ell], rho, ell, d)
        out.append(ProcessTensor(pt.choi, ell, d, s))
        if s < k - ell:
            u = circuit.u_steps[s]
            rho = u @ _depolarize_system(rho, d) @ u.conj().T
    return out
