"""Dense multi-leg operator algebra and single-qubit primitives.

Operators are plain ``numpy`` arrays. Leg structure travels alongside in a
:class:`LegShape`; every routine that needs to address a subsystem takes the
shape and a set of labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

HERMITIAN_GUARD = 1e-9
DEFAULT_CUTOFF = 1e-10


class LegError(ValueError):
    """Raised when a leg label is unknown or a shape is inconsistent."""


@dataclass(frozen=True)
class LegShape:
    dims: tuple
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "labels", tuple(str(l) for l in self.labels))
        if len(self.dims) != len(self.labels):
            raise LegError("dims and labels differ in length")
        if len(set(self.labels)) != len(self.labels):
            raise LegError(f"duplicate leg labels in {self.labels}")

    @classmethod
    def uniform(cls, labels: Sequence[str], d: int = 2) -> "LegShape":
        return cls((d,) * len(labels), tuple(labels))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 1

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise LegError(f"unknown leg {label!r}; have {self.labels}") from None

    def indices(self, labels: Iterable[str]) -> list:
        return [self.index(l) for l in labels]

    def select(self, labels: Iterable[str]) -> "LegShape":
        idx = sorted(self.indices(labels))
        return LegShape([self.dims[i] for i in idx], [self.labels[i] for i in idx])

    def check(self, m: np.ndarray) -> None:
        if m.shape != (self.size, self.size):
            raise LegError(f"matrix of shape {m.shape} does not match legs {self.labels}")


def kron(*ops: np.ndarray) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for op in ops:
        out = np.kron(out, op)
    return out


def _tensor(m: np.ndarray, shape: LegShape) -> np.ndarray:
    shape.check(m)
    return m.reshape(shape.dims + shape.dims)


def partial_trace(m: np.ndarray, shape: LegShape, keep: Iterable[str]) -> np.ndarray:
    """Trace out every leg not in ``keep``; kept legs retain their order."""
    keep_idx = set(shape.indices(keep))
    n = len(shape.dims)
    t = _tensor(m, shape)
    rows = list(range(n))
    cols = [i if i not in keep_idx else n + i for i in range(n)]
    out = [i for i in range(n) if i in keep_idx] + [n + i for i in range(n) if i in keep_idx]
    res = np.einsum(t, rows + cols, out)
    dk = int(np.prod([shape.dims[i] for i in sorted(keep_idx)], dtype=np.int64))
    return res.reshape(dk, dk)


def partial_transpose(m: np.ndarray, shape: LegShape, flip: Iterable[str]) -> np.ndarray:
    flip_idx = set(shape.indices(flip))
    n = len(shape.dims)
    t = _tensor(m, shape)
    axes = [n + i if i in flip_idx else i for i in range(n)]
    axes += [i if i in flip_idx else n + i for i in range(n)]
    return t.transpose(axes).reshape(m.shape)


def permute(m: np.ndarray, shape: LegShape, order: Sequence[str]) -> tuple:
    """Reorder legs; returns the permuted matrix and its new shape."""
    idx = shape.indices(order)
    if sorted(idx) != list(range(len(shape.dims))):
        raise LegError("order must be a permutation of all legs")
    n = len(idx)
    t = _tensor(m, shape).transpose(idx + [n + i for i in idx])
    new = LegShape([shape.dims[i] for i in idx], [shape.labels[i] for i in idx])
    return t.reshape(m.shape), new


def embed_identity(m: np.ndarray, shape: LegShape, full: LegShape) -> np.ndarray:
    """Place ``m`` (on a subset of ``full``'s legs) into ``full`` with identity elsewhere."""
    rest = [l for l in full.labels if l not in shape.labels]
    dr = int(np.prod([full.dims[full.index(l)] for l in rest], dtype=np.int64))
    big = np.kron(m, np.eye(dr))
    big_shape = LegShape(shape.dims + tuple(full.dims[full.index(l)] for l in rest),
                         shape.labels + tuple(rest))
    out, _ = permute(big, big_shape, full.labels)
    return out


def pseudoinverse(m: np.ndarray, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """Moore-Penrose inverse discarding singular values below ``cutoff`` times the largest."""
    if not 0 < cutoff < 1:
        raise ValueError("cutoff must lie in (0, 1)")
    m = np.asarray(m)
    if not np.any(m):
        return np.zeros(m.shape[::-1], dtype=m.dtype)
    return np.linalg.pinv(m, rcond=cutoff)


def hermitize(m: np.ndarray, tol: float = HERMITIAN_GUARD) -> np.ndarray:
    m = np.asarray(m)
    dev = np.max(np.abs(m - m.conj().T)) if m.size else 0.0
    if dev > tol * max(1.0, np.max(np.abs(m))):
        raise ValueError(f"matrix is not Hermitian (deviation {dev:.3g})")
    return 0.5 * (m + m.conj().T)


def eigvalsh(m: np.ndarray, tol: float = HERMITIAN_GUARD) -> np.ndarray:
    return np.linalg.eigvalsh(hermitize(m, tol))


def _check_state(rho: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    rho = hermitize(rho)
    tr = np.trace(rho).real
    if abs(tr - 1) > tol:
        raise ValueError(f"state has trace {tr:.6g}, expected 1")
    return rho


def trace_norm(m: np.ndarray) -> float:
    return float(np.sum(np.linalg.svd(m, compute_uv=False)))


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    rho, sigma = _check_state(rho), _check_state(sigma)
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh(rho - sigma))))


def purity(rho: np.ndarray) -> float:
    rho = _check_state(rho)
    return float(np.real(np.vdot(rho, rho)))


def hellinger_fidelity(p, q, tol: float = 1e-9) -> float:
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.shape != q.shape:
        raise ValueError("distributions differ in size")
    for v in (p, q):
        if np.any(v < -tol) or abs(v.sum() - 1) > tol:
            raise ValueError("input is not a normalized distribution")
    return float(np.sum(np.sqrt(np.clip(p, 0, None) * np.clip(q, 0, None))) ** 2)


def entropy(rho: np.ndarray) -> float:
    """Von Neumann entropy in bits."""
    ev = np.linalg.eigvalsh(hermitize(rho))
    ev = ev[ev > 1e-15]
    return float(-np.sum(ev * np.log2(ev)))


def negativity(rho: np.ndarray, shape: LegShape, cut: Iterable[str]) -> float:
    rho = _check_state(rho)
    pt = partial_transpose(rho, shape, cut)
    return max(0.0, (trace_norm(pt) - 1.0) / 2.0)


def qmi(rho: np.ndarray, shape: LegShape, cut: Iterable[str]) -> float:
    rho = _check_state(rho)
    a = [l for l in shape.labels if l in set(cut)]
    b = [l for l in shape.labels if l not in set(cut)]
    if not a or not b:
        return 0.0
    val = entropy(partial_trace(rho, shape, a)) + entropy(partial_trace(rho, shape, b)) - entropy(rho)
    return max(0.0, val)


def fidelity(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Uhlmann fidelity (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2."""
    ev, vec = np.linalg.eigh(hermitize(rho))
    sq = (vec * np.sqrt(np.clip(ev, 0, None))) @ vec.conj().T
    inner = np.linalg.eigvalsh(hermitize(sq @ hermitize(sigma) @ sq, 1e-7))
    return float(np.sum(np.sqrt(np.clip(inner, 0, None))) ** 2)


# gates

I2 = np.eye(2, dtype=complex)
PAULI = {
    "I": I2,
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def pauli(c: str) -> np.ndarray:
    """Tensor product of Paulis named by a string such as ``"XZ"``."""
    return kron(*(PAULI[ch] for ch in c.upper()))


def h() -> np.ndarray:
    return np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)


def f() -> np.ndarray:
    return np.diag([1, 1j]).astype(complex)


def w(theta: float, phi: float, lam: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -np.exp(1j * lam) * s],
                     [np.exp(1j * phi) * s, np.exp(1j * (phi + lam)) * c]], dtype=complex)


def w_params(u: np.ndarray) -> tuple:
    """Angles (theta, phi, lam) with u = e^{i alpha} w(theta, phi, lam)."""
    u = np.asarray(u, dtype=complex)
    u = u / np.sqrt(np.linalg.det(u))
    theta = 2 * np.arctan2(abs(u[1, 0]), abs(u[0, 0]))
    if abs(u[0, 0]) > 1e-12:
        u = u * np.exp(-1j * np.angle(u[0, 0]))
        if abs(u[1, 0]) > 1e-12:
            phi = np.angle(u[1, 0])
            lam = np.angle(-u[0, 1])
        else:
            phi = 0.0
            lam = np.angle(u[1, 1])
    else:
        u = u * np.exp(-1j * np.angle(u[1, 0]))
        phi = 0.0
        lam = np.angle(-u[0, 1])
    return float(theta), float(phi % (2 * np.pi)), float(lam % (2 * np.pi))


def v_gamma(gamma: float) -> np.ndarray:
    """exp(-i gamma/2 X_A Z_S) on A (first) and S (second)."""
    xz = np.kron(PAULI["X"], PAULI["Z"])
    return np.cos(gamma / 2) * np.eye(4) - 1j * np.sin(gamma / 2) * xz


def swap(d: int = 2) -> np.ndarray:
    s = np.zeros((d * d, d * d), dtype=complex)
    for a in range(d):
        for b in range(d):
            s[b * d + a, a * d + b] = 1
    return s


def bell(d: int = 2) -> np.ndarray:
    """Unnormalized |Phi+><Phi+| on two d-level legs."""
    v = np.eye(d, dtype=complex).reshape(-1)
    return np.outer(v, v)


def is_unitary(u: np.ndarray, tol: float = 1e-10) -> bool:
    u = np.asarray(u)
    return u.shape[0] == u.shape[1] and np.allclose(u.conj().T @ u, np.eye(u.shape[0]), atol=tol)


def haar_unitary(d: int, rng: np.random.Generator) -> np.ndarray:
    z = (rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    ph = np.diag(r) / np.abs(np.diag(r))
    return q * ph


def random_density(d: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    rank = d if rank is None else rank
    g = rng.standard_normal((d, rank)) + 1j * rng.standard_normal((d, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_hermitian(d: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    return (g + g.conj().T) / 2


def ket(label: str) -> np.ndarray:
    """Single-qubit state vectors by name: 0, 1, +, -, i+, i-."""
    table = {
        "0": [1, 0], "1": [0, 1],
        "+": [1 / np.sqrt(2), 1 / np.sqrt(2)], "-": [1 / np.sqrt(2), -1 / np.sqrt(2)],
        "i+": [1 / np.sqrt(2), 1j / np.sqrt(2)], "i-": [1 / np.sqrt(2), -1j / np.sqrt(2)],
    }
    return np.array(table[label], dtype=complex)


def dm(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    return np.outer(v, v.conj())
