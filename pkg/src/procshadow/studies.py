"""The batch studies behind the CLI: idle dynamics of a spin chain, correlated-noise
heatmaps, and cross-validation of reconstructed MPOs against fresh samples."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from . import engine, fcs, io
from .channels import replacement
from .engine import Circuit
from .fcs import MarginalSet, MpoProcess
from .process import (DENSE_CAP, Fragment, ProcessTensor, identity_channel, leg_labels, middle_cut,
                      nm_measures)
from .qcore import LegShape, dm, hellinger_fidelity, ket, partial_trace, pauli
from .scenarios import ScenarioConfig, build_circuit, make_frame
from .shadows import InstrumentFrame, ShadowSet, exact_shadow, marginal_estimate

CORRELATORS = ("ZZ", "XX", "ZX", "XZ")
METRIC_COLUMNS = ["metric", "step", "value"]
PAIR_COLUMNS = ["metric", "i", "j", "value", "sigma", "floor", "significant"]
VALIDATION_COLUMNS = ["sequence", "length", "start", "fidelity"]


class Timer:
    def __init__(self):
        self.stages = {}

    def __call__(self, name):
        timer = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = timer.stages.get(name, 0.0) + time.perf_counter() - self.t0

        return _Stage()


# shared stages

def acquire(cfg: ScenarioConfig, circuit: Circuit, frame: InstrumentFrame, threads: int = 1) -> ShadowSet:
    """Sampled records, or the exact joint weights when ``cfg.exact`` is set."""
    if cfg.exact:
        if circuit.k > DENSE_CAP:
            raise ValueError(f"exact shadows need k <= {DENSE_CAP}; use exact marginals instead")
        return exact_shadow(circuit.process_tensor(), frame)
    return engine.sample_records(circuit, frame, cfg.shots, cfg.seed, threads)


def estimate_marginals(cfg: ScenarioConfig, circuit: Circuit, shadow: ShadowSet | None,
                       threads: int = 1) -> MarginalSet:
    if shadow is None:
        wins = engine.exact_window_marginals(circuit, cfg.ell)
        return MarginalSet(cfg.ell, circuit.k, wins, circuit.d)
    return fcs.marginals_from_shadow(shadow, cfg.ell, max_iters=cfg.mle_iters,
                                     max_negativity=cfg.max_negativity, n_jobs=threads)


def stitch(cfg: ScenarioConfig, ms: MarginalSet) -> MpoProcess:
    return fcs.assemble_mpo(fcs.build_E(ms), ms.k, ms.ell, ms.d, cfg.junction_cutoff, cfg.min_rank)


# idle-dynamics metrics

def _pauli_stack(d: int = 2) -> np.ndarray:
    return np.array([pauli(c) for c in "IXYZ"])


def output_states(mpo: MpoProcess, rho: np.ndarray) -> list:
    """System states at times 1..k after preparing ``rho`` at time 0 and idling."""
    d, k = mpo.d, mpo.k
    paulis = _pauli_stack(d)
    prep = replacement(rho).matrix
    idle = identity_channel(d).matrix
    readout = np.array([np.kron(np.eye(d) / d, p.T) for p in paulis])
    states = []
    for j in range(1, k + 1):
        seq = [prep] + [idle] * (k - 1)
        if j < k:
            seq[j] = readout
            ev = _expectations(mpo, seq, (j, j))
        else:
            ev = _expectations(mpo, seq, (k - 1, k - 1), paulis)
        states.append(0.5 * np.einsum("p,pab->ab", np.asarray(ev, dtype=complex), paulis))
    return states


def _expectations(mpo, seq, window, terminal=None) -> np.ndarray:
    return np.asarray(fcs.contract_probability(mpo, seq, window, terminal), dtype=float)


def _clean(rho: np.ndarray) -> np.ndarray:
    """Nearest density matrix in Frobenius norm; MPO predictions from truncated memory can leave the state space."""
    rho = 0.5 * (rho + rho.conj().T)
    w, v = np.linalg.eigh(rho / np.trace(rho).real)
    # Euclidean projection of the spectrum onto the probability simplex
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - 1
    r = np.nonzero(u - css / np.arange(1, len(u) + 1) > 0)[0][-1]
    w = np.clip(w - css[r] / (r + 1), 0, None)
    return (v * w) @ v.conj().T


def idle_metrics(mpo: MpoProcess) -> list:
    """Purity of two initializations and their trace distance, per step."""
    rho1, rho2 = dm(ket("0")), dm(ket("i+"))
    s1, s2 = output_states(mpo, rho1), output_states(mpo, rho2)
    rows = []
    for j, (a, b) in enumerate(zip(s1, s2), start=1):
        a, b = _clean(a), _clean(b)
        rows.append({"metric": "purity_rho1", "step": j, "value": float(np.real(np.vdot(a, a)))})
        rows.append({"metric": "purity_rho2", "step": j, "value": float(np.real(np.vdot(b, b)))})
        td = 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(a - b))))
        rows.append({"metric": "trace_distance", "step": j, "value": td})
    return rows


def window_metrics(windows) -> list:
    """Negativity and mutual information across the middle of each window."""
    rows = []
    for w in windows:
        frag = w if isinstance(w, Fragment) else Fragment(w.choi, w.shape)
        cut = middle_cut(frag.shape.labels)
        nm = nm_measures(frag, cut)
        top = int(frag.shape.labels[0][1:])
        rows.append({"metric": "window_negativity", "step": top, "value": nm["negativity"]})
        rows.append({"metric": "window_qmi", "step": top, "value": nm["qmi"]})
    return rows


def mpo_windows(mpo: MpoProcess, ell: int) -> list:
    return [fcs.mpo_marginal(mpo, leg_labels(ell, s)) for s in range(mpo.k - ell + 1)]


def has_revival(values, tol: float = 1e-9) -> bool:
    """True when a decrease is later followed by an increase."""
    diffs = np.diff(np.asarray(values, dtype=float))
    fell = False
    for x in diffs:
        if x < -tol:
            fell = True
        elif x > tol and fell:
            return True
    return False


# correlated-noise statistics

def pair_legs(i: int, j: int) -> list:
    """Legs of the maps for steps i and j (step t maps ``i_{t+1}`` to ``o_{t+1}``), later step first."""
    a, b = sorted((i, j))
    return [f"o{b + 1}", f"i{b + 1}", f"o{a + 1}", f"i{a + 1}"]


def _chi_projector(c: str, d: int = 2) -> np.ndarray:
    v = pauli(c).reshape(-1)
    return np.outer(v, v.conj()) / d


def pair_statistics(mat: np.ndarray, i: int, j: int) -> dict:
    """Fig-4 style statistics of the joint map of steps ``i`` and ``j``.

    ``mat`` is the marginal on :func:`pair_legs`; it is trace-normalized here.
    Correlators use the Pauli-channel weight of each step's map, with the
    first letter on step ``i``.
    """
    d = 2
    labels = pair_legs(i, j)
    shape = LegShape.uniform(labels, d)
    rho = 0.5 * (mat + mat.conj().T)
    rho = rho / np.trace(rho).real
    later, earlier = labels[:2], labels[2:]
    r_late = partial_trace(rho, shape, later)
    r_early = partial_trace(rho, shape, earlier)
    prod = np.kron(r_late, r_early)
    out = {"negativity": nm_measures(rho, later, shape)["negativity"],
           "trace_distance": 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(rho - prod))))}
    i_late = i > j
    for name in CORRELATORS:
        p_i, p_j = _chi_projector(name[0]), _chi_projector(name[1])
        late_op, early_op = (p_i, p_j) if i_late else (p_j, p_i)
        joint = np.real(np.trace(rho @ np.kron(late_op, early_op)))
        single = np.real(np.trace(r_late @ late_op)) * np.real(np.trace(r_early @ early_op))
        out[name] = float(joint - single)
    return out


def _null_statistics(mat_boot: np.ndarray, mat_hat: np.ndarray, i: int, j: int) -> dict:
    """Statistics of a bootstrap fluctuation recentered on the product of the estimated maps."""
    labels = pair_legs(i, j)
    shape = LegShape.uniform(labels, 2)
    hat = mat_hat / np.trace(mat_hat).real
    prod = np.kron(partial_trace(hat, shape, labels[:2]), partial_trace(hat, shape, labels[2:]))
    return pair_statistics(mat_boot / np.trace(mat_boot).real - hat + prod, i, j)


def correlated_noise_table(shadow: ShadowSet, n_boot: int, seed: int, steps=None) -> list:
    """Rows for every ordered step pair; ``floor`` is mean + 3 sd of the recentered bootstrap null."""
    k = shadow.k
    steps = list(range(k)) if steps is None else list(steps)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    pairs = [(a, b) for a in steps for b in steps if a < b]
    hats = {p: marginal_estimate(shadow, pair_legs(*p))[0] for p in pairs}
    boots = {p: [] for p in pairs}
    if not shadow.exact:
        for _ in range(n_boot):
            sub = shadow.subset(rng.integers(0, shadow.n, shadow.n))
            for p in pairs:
                boots[p].append(marginal_estimate(sub, pair_legs(*p))[0])
    rows = []
    for a, b in pairs:
        for i, j in ((a, b), (b, a)):
            val = pair_statistics(hats[(a, b)], i, j)
            reps = [pair_statistics(m, i, j) for m in boots[(a, b)]]
            nulls = [_null_statistics(m, hats[(a, b)], i, j) for m in boots[(a, b)]]
            for name in val:
                v = val[name]
                sigma = float(np.std([r[name] for r in reps], ddof=1)) if len(reps) > 1 else 0.0
                nv = np.abs([r[name] for r in nulls])
                floor = float(nv.mean() + 3 * nv.std(ddof=1)) if len(nv) > 1 else 0.0
                rows.append({"metric": name, "i": i, "j": j, "value": v, "sigma": sigma,
                             "floor": floor, "significant": int(abs(v) > floor)})
    return rows


def dense_pair_statistics(pt: ProcessTensor, i: int, j: int) -> dict:
    from .process import marginal
    frag = marginal(pt, pair_legs(i, j))
    mat = frag.matrix if hasattr(frag, "matrix") else frag.choi
    return pair_statistics(mat, i, j)


# cross-validation

def random_sequences(frame: InstrumentFrame, k: int, n: int, seed: int) -> list:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    return [(rng.integers(0, frame.n_settings, k).tolist(), int(rng.integers(0, frame.n_terminal_settings)))
            for _ in range(n)]


def _normalized(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), 0, None)
    return p / p.sum()


def validation_table(mpo: MpoProcess, circuit: Circuit, frame: InstrumentFrame, n_sequences: int,
                     shots: int, max_length: int, seed: int, threads: int = 1) -> list:
    """Hellinger fidelity between MPO predictions and fresh outcomes for every window.

    ``shots=0`` compares against exact probabilities instead of samples. MPO
    predictions from noisy data may dip below zero; they are clipped and
    renormalized before the comparison.
    """
    k = mpo.k
    rows = []
    seqs = random_sequences(frame, k, n_sequences, seed)
    child = np.random.SeedSequence([seed, 6]).generate_state(n_sequences)
    for n, (settings, term) in enumerate(seqs):
        if shots:
            rec = engine.sample_records(circuit, frame, shots, int(child[n]), threads, settings, term)
        elements = [frame.elements[s] for s in settings]
        for length in range(1, min(max_length, k) + 1):
            for start in range(k - length + 1):
                stop = start + length - 1
                pred = _normalized(fcs.contract_probability(mpo, elements, (start, stop)))
                if shots:
                    idx = np.ravel_multi_index(rec.outcomes[:, start:stop + 1].T, pred.shape)
                    emp = np.bincount(idx, minlength=pred.size).reshape(pred.shape) / shots
                else:
                    emp = _normalized(engine.exact_distribution(circuit, frame, settings, (start, stop)))
                rows.append({"sequence": n, "length": length, "start": start,
                             "fidelity": hellinger_fidelity(pred, emp)})
    return rows


def median_by_length(rows: list) -> dict:
    out = {}
    for length in sorted({r["length"] for r in rows}):
        out[length] = float(np.median([r["fidelity"] for r in rows if r["length"] == length]))
    return out


# full runs

def run_spin_chain(cfg: ScenarioConfig, out: Path, threads: int = 1, timer: Timer | None = None) -> dict:
    """Records, window marginals, MPO and the idle-dynamics metric tables.

    In exact mode the window marginals come straight from the circuit and no
    record file is written.
    """
    timer = timer or Timer()
    out = Path(out)
    frame = make_frame(cfg)
    with timer("circuit"):
        circuit = build_circuit(cfg)
    files = {}
    shadow = None
    if not cfg.exact:
        with timer("sampling"):
            shadow = acquire(cfg, circuit, frame, threads)
        io.save_shadow(out / "shadow.psr", shadow)
        files["shadow"] = "shadow.psr"
    with timer("marginals"):
        ms = estimate_marginals(cfg, circuit, shadow, threads)
    io.save_marginals(out / "marginals.psm", ms)
    files["marginals"] = "marginals.psm"
    with timer("stitching"):
        mpo = stitch(cfg, ms)
    io.save_mpo(out / "mpo.pso", mpo)
    io.write_json(out / "mpo_summary.json", mpo.summary())
    files["mpo"] = "mpo.pso"
    files["mpo_summary"] = "mpo_summary.json"
    with timer("metrics"):
        rows = idle_metrics(mpo) + window_metrics(mpo_windows(mpo, cfg.ell))
    io.write_csv(out / "idle_metrics.csv", rows, METRIC_COLUMNS)
    files["metrics"] = "idle_metrics.csv"
    io.write_json(out / "scenario.json", {"circuit": circuit.meta, "frame_id": frame.frame_id})
    files["scenario"] = "scenario.json"
    return files


def run_correlated_noise(cfg: ScenarioConfig, out: Path, threads: int = 1, timer: Timer | None = None) -> dict:
    if cfg.steps < 2:
        raise ValueError("correlated noise needs at least two steps")
    timer = timer or Timer()
    out = Path(out)
    frame = make_frame(cfg)
    with timer("circuit"):
        circuit = build_circuit(cfg)
    with timer("sampling"):
        shadow = acquire(cfg, circuit, frame, threads)
    io.save_shadow(out / "shadow.psr", shadow)
    with timer("statistics"):
        rows = correlated_noise_table(shadow, cfg.bootstrap, cfg.seed)
    io.write_csv(out / "pair_statistics.csv", rows, PAIR_COLUMNS)
    files = {"shadow": "shadow.psr", "pairs": "pair_statistics.csv"}
    if circuit.k <= DENSE_CAP:
        with timer("oracle"):
            pt = circuit.process_tensor()
            oracle = []
            for i in range(circuit.k):
                for j in range(circuit.k):
                    if i != j:
                        for name, v in dense_pair_statistics(pt, i, j).items():
                            oracle.append({"metric": name, "i": i, "j": j, "value": v})
        io.write_csv(out / "pair_oracle.csv", oracle, ["metric", "i", "j", "value"])
        files["oracle"] = "pair_oracle.csv"
    io.write_json(out / "scenario.json", {"circuit": circuit.meta, "frame_id": frame.frame_id})
    files["scenario"] = "scenario.json"
    return files


def run_validation(cfg: ScenarioConfig, mpo: MpoProcess, out: Path, threads: int = 1,
                   timer: Timer | None = None) -> dict:
    timer = timer or Timer()
    out = Path(out)
    frame = make_frame(cfg)
    circuit = build_circuit(cfg)
    if mpo.k != circuit.k:
        raise ValueError(f"MPO has {mpo.k} steps but the scenario has {circuit.k}")
    v = cfg.validation
    with timer("validation"):
        rows = validation_table(mpo, circuit, frame, v.sequences, v.shots, v.max_length, cfg.seed, threads)
    io.write_csv(out / "hellinger.csv", rows, VALIDATION_COLUMNS)
    io.write_json(out / "hellinger_summary.json", {"median_by_length": median_by_length(rows)})
    return {"hellinger": "hellinger.csv", "summary": "hellinger_summary.json"}


def run_estimate(cfg: ScenarioConfig, shadow: ShadowSet, out: Path, threads: int = 1,
                 timer: Timer | None = None) -> dict:
    """Window marginals from records, each with its maximum-likelihood iteration log."""
    timer = timer or Timer()
    out = Path(out)
    logs = {}
    with timer("marginals"):
        ms = fcs.marginals_from_shadow(shadow, cfg.ell, max_iters=cfg.mle_iters,
                                       max_negativity=cfg.max_negativity, n_jobs=threads, logs=logs)
    io.save_marginals(out / "marginals.psm", ms)
    io.write_json(out / "mle_log.json", logs)
    return {"marginals": "marginals.psm", "mle_log": "mle_log.json"}


def run_fcs(cfg: ScenarioConfig, ms: MarginalSet, out: Path, timer: Timer | None = None) -> dict:
    timer = timer or Timer()
    out = Path(out)
    with timer("stitching"):
        mpo = fcs.assemble_mpo(fcs.build_E(ms), ms.k, ms.ell, ms.d, cfg.junction_cutoff, cfg.min_rank)
    io.save_mpo(out / "mpo.pso", mpo)
    io.write_json(out / "mpo_summary.json", mpo.summary())
    return {"mpo": "mpo.pso", "mpo_summary": "mpo_summary.json"}
