"""Maximum-likelihood process tensor tomography by projected gradient descent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .process import ProcessTensor, born_tensor, causality_defects, project_causal
from .qcore import fidelity

FLOOR = 1e-12
HERMITIAN_TOL = 1e-8


class MleDivergence(RuntimeError):
    """Line search underflowed away from a stationary point."""

    def __init__(self, msg: str, trace: list):
        super().__init__(msg)
        self.trace = trace


@dataclass
class MleProblem:
    """Counts indexed ``(terminal, step k-1, ..., step 0)`` and the factorized basis.

    ``step_elements[j]`` has shape ``(n_j, d^2, d^2)`` and ``terminal`` has shape
    ``(n_t, d, d)``. The basis operator for an index tuple is the Kronecker product of
    the transposed terminal effect and the step elements, matching :func:`born_tensor`.
    """

    counts: np.ndarray
    step_elements: list
    terminal: np.ndarray
    d: int = 2
    initial: ProcessTensor | None = None
    offset: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        self.step_elements = [np.asarray(e, dtype=complex) for e in self.step_elements]
        self.terminal = np.asarray(self.terminal, dtype=complex)
        if not np.all(np.isfinite(self.counts)) or np.any(self.counts < 0):
            raise ValueError("counts must be finite and nonnegative")
        if not np.any(self.counts > 0):
            raise ValueError("counts are all zero")
        expect = (self.terminal.shape[0],) + tuple(e.shape[0] for e in self.step_elements[::-1])
        if self.counts.shape != expect:
            raise ValueError(f"counts shape {self.counts.shape} does not match basis {expect}")

    @property
    def k(self) -> int:
        return len(self.step_elements)

    @property
    def dim(self) -> int:
        return self.d * self.d ** (2 * self.k)


@dataclass
class MleResult:
    estimate: ProcessTensor
    log_likelihood: float
    trace: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def probabilities(m: np.ndarray, problem: MleProblem) -> np.ndarray:
    return born_tensor(m, problem.k, problem.d, problem.step_elements, problem.terminal)


def log_likelihood(m, problem: MleProblem) -> float:
    m = m.choi if isinstance(m, ProcessTensor) else m
    p = np.maximum(probabilities(m, problem), FLOOR)
    return float(-np.sum(problem.counts * np.log(p)))


def weighted_basis_sum(w: np.ndarray, problem: MleProblem) -> np.ndarray:
    """``sum_mu w_mu O_mu`` assembled leg by leg."""
    x = np.einsum("t...,tab->...ba", w, problem.terminal, optimize=True)
    for els in problem.step_elements[::-1]:
        dim = x.shape[-1]
        q = els.shape[-1]
        x = np.einsum("n...xy,nab->...xayb", x, els, optimize=True)
        x = x.reshape(x.shape[:-4] + (dim * q, dim * q))
    return x


def gradient(m, problem: MleProblem) -> np.ndarray:
    """Gradient with respect to the real inner product ``Re Tr[G^dag H]``."""
    m = m.choi if isinstance(m, ProcessTensor) else m
    p = np.maximum(probabilities(m, problem), FLOOR)
    g = -np.conj(weighted_basis_sum(problem.counts / p, problem))
    return 0.5 * (g + g.conj().T)


def lipschitz_scale(m, problem: MleProblem) -> float:
    """``sum n |O|^2 / p^2``, used to pick the first step."""
    m = m.choi if isinstance(m, ProcessTensor) else m
    p = np.maximum(probabilities(m, problem), FLOOR)
    norms = [np.sum(np.abs(problem.terminal) ** 2, axis=(1, 2))]
    norms += [np.sum(np.abs(e) ** 2, axis=(1, 2)) for e in problem.step_elements[::-1]]
    sq = norms[0]
    for n in norms[1:]:
        sq = np.multiply.outer(sq, n)
    return float(np.sum(problem.counts * sq / p ** 2))


def _psd_clip(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.maximum(w, 0)) @ v.conj().T


def project_physical(m: np.ndarray, k: int, d: int = 2, max_cycles: int = 50, tol: float = 1e-8,
                     offset: int = 0, return_info: bool = False):
    """Nearby PSD causal operator with trace d^k.

    Dykstra alternation between the PSD cone and the causal affine set, then the
    smallest admixture of the normalized identity that removes leftover negativity.
    """
    m = np.asarray(m, dtype=complex)
    if np.max(np.abs(m - m.conj().T)) > HERMITIAN_TOL * max(1.0, np.max(np.abs(m))):
        raise ValueError("project_physical needs a Hermitian input")
    m = 0.5 * (m + m.conj().T)
    n = m.shape[0]
    x = project_causal(m, k, d)
    p = np.zeros_like(m)
    q = np.zeros_like(m)
    cycles = 0
    for cycles in range(1, max_cycles + 1):
        y = _psd_clip(x + p)
        p = x + p - y
        x_new = project_causal(y + q, k, d)
        q = y + q - x_new
        step = np.linalg.norm(x_new - x)
        x = 0.5 * (x_new + x_new.conj().T)
        if step <= tol * max(1.0, np.linalg.norm(x)):
            break
    lo = np.linalg.eigvalsh(x).min()
    mix = 0.0
    if lo < 0:
        flat = d ** k / n
        mix = -lo / (flat - lo)
        x = (1 - mix) * x + mix * flat * np.eye(n)
    pt = ProcessTensor(x, k, d, offset)
    if return_info:
        return pt, {"cycles": cycles, "mix": float(mix), "causal_residual": max(causality_defects(x, k, d))}
    return pt


def _inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.real(np.vdot(a, b)))


def _line_search(x, f_ref, g, step, problem, beta, c, max_backtracks):
    """Armijo backtracking along the projected gradient path from ``x``."""
    k, d = problem.k, problem.d
    s = step
    for _ in range(max_backtracks):
        trial, info = project_physical(x - s * g, k, d, offset=problem.offset, return_info=True)
        f_new = log_likelihood(trial.choi, problem)
        if f_new <= f_ref + c * _inner(g, trial.choi - x):
            return trial.choi, f_new, s, info
        s *= beta
    return None, None, s, None


def fit(problem: MleProblem, max_iters: int = 500, step0: float | None = None, beta: float = 0.5,
        c: float = 1e-4, tol: float = 1e-10, max_backtracks: int = 60, accelerate: bool = True) -> MleResult:
    """Projected gradient descent with Armijo backtracking.

    With ``accelerate`` each iteration first tries a step from the Nesterov
    extrapolation of the last two iterates; a trial that does not lower the
    likelihood resets the momentum and falls back to a plain step, so the
    accepted sequence stays monotone.
    """
    k, d = problem.k, problem.d
    n = problem.dim
    init = problem.initial.choi if problem.initial is not None else d ** k / n * np.eye(n)
    x, info = project_physical(init, k, d, offset=problem.offset, return_info=True)
    x = x.choi
    f = log_likelihood(x, problem)
    trace = [{"iteration": 0, "f": f, "step": 0.0, **info}]
    if max_iters <= 0:
        return MleResult(ProcessTensor(x, k, d, problem.offset), f, trace, False)
    step = step0 if step0 is not None else 1.0 / max(lipschitz_scale(x, problem), 1e-300)
    base_step = step
    converged = False
    x_prev, t = x, 1.0
    for it in range(1, max_iters + 1):
        trial = None
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        if accelerate and it > 1:
            y = x + (t - 1) / t_next * (x - x_prev)
            f_y = log_likelihood(y, problem)
            trial, f_new, s, info = _line_search(y, f_y, gradient(y, problem), step, problem, beta, c,
                                                 max_backtracks)
            if trial is not None and f_new > f:
                trial = None
        if trial is None:
            t_next = 1.0
            g = gradient(x, problem)
            trial, f_new, s, info = _line_search(x, f, g, step, problem, beta, c, max_backtracks)
            if trial is not None and f_new > f:
                trial = None
            if trial is None:
                move = np.linalg.norm(project_physical(x - base_step * g, k, d).choi - x)
                if move <= 1e-6 * max(1.0, np.linalg.norm(x)) or abs(f) < 1e-300:
                    converged = True
                    break
                raise MleDivergence(f"line search underflow at iteration {it}", trace)
        decrease = f - f_new
        x_prev, x, f, t = x, trial, f_new, t_next
        trace.append({"iteration": it, "f": f, "step": s, **info})
        if decrease <= tol * max(1.0, abs(f)):
            converged = True
            break
        # grow the step only when the last search accepted it outright
        step = 2.0 * s if s >= step else s
    return MleResult(ProcessTensor(x, k, d, problem.offset), f, trace, converged)


def problem_from_probabilities(p: np.ndarray, frame, k: int, n_eff: float, d: int = 2,
                               initial: ProcessTensor | None = None, offset: int = 0) -> MleProblem:
    """Counts ``n_eff * weight * p`` for a frame's settings, from a table shaped like :func:`born_tensor`."""
    els = frame.flat_elements
    w_step = np.repeat(frame.weights, frame.n_outcomes)
    w_term = np.repeat(frame.terminal_weights, frame.n_terminal_outcomes)
    w = w_term
    for _ in range(k):
        w = np.multiply.outer(w, w_step)
    counts = n_eff * w * np.clip(p, 0, None)
    return MleProblem(counts, [els] * k, frame.flat_terminal, d, initial, offset)


def counts_from_estimate(m: np.ndarray, frame, k: int, n_eff: float, d: int = 2, offset: int = 0) -> MleProblem:
    """Virtual counts from a linear-inversion estimate, renormalized per setting sequence."""
    p = np.clip(born_tensor(m, k, d, [frame.flat_elements] * k, frame.flat_terminal), 0, None)
    shape = [frame.n_terminal_settings, frame.n_terminal_outcomes]
    for _ in range(k):
        shape += [frame.n_settings, frame.n_outcomes]
    q = p.reshape(shape)
    axes = tuple(range(1, len(shape), 2))
    tot = q.sum(axis=axes, keepdims=True)
    q = np.where(tot > 0, q / np.where(tot > 0, tot, 1), 1.0 / np.prod([shape[a] for a in axes]))
    init = project_physical(0.5 * (m + m.conj().T), k, d, offset=offset)
    return problem_from_probabilities(q.reshape(p.shape), frame, k, n_eff, d, init, offset)


def process_fidelity(a, b) -> float:
    """Uhlmann fidelity of the trace-normalized Choi states."""
    a = a.choi if isinstance(a, ProcessTensor) else np.asarray(a)
    b = b.choi if isinstance(b, ProcessTensor) else np.asarray(b)
    return fidelity(a / np.trace(a).real, b / np.trace(b).real)


class ProcessTensorMLE(BaseEstimator):
    """Projected-gradient maximum-likelihood estimator of a process tensor."""

    def __init__(self, max_iters: int = 500, step0: float | None = None, beta: float = 0.5,
                 c: float = 1e-4, tol: float = 1e-10):
        self.max_iters = max_iters
        self.step0 = step0
        self.beta = beta
        self.c = c
        self.tol = tol

    def fit(self, X: MleProblem, y=None):
        self.result_ = fit(X, self.max_iters, self.step0, self.beta, self.c, self.tol)
        self.estimate_ = self.result_.estimate
        return self

    def predict_proba(self, X: MleProblem) -> np.ndarray:
        return probabilities(self.estimate_.choi, X)

    def score(self, X: MleProblem, y=None) -> float:
        return -log_likelihood(self.estimate_.choi, X)


def problem_from_shadow(shadow, n_eff: float | None = None, initial: ProcessTensor | None = None) -> MleProblem:
    """Counts of every (terminal element, step elements) tuple in a shadow.

    Exact shadows have no shot count, so their weights are scaled by ``n_eff``.
    """
    from .shadows import element_weights
    f = shadow.frame
    scale = shadow.n if not shadow.exact else (1.0 if n_eff is None else n_eff)
    counts = element_weights(shadow) * scale
    return MleProblem(counts, [f.flat_elements] * shadow.k, f.flat_terminal, shadow.d, initial)
