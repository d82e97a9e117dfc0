"""Command-line entry point: ``procshadow <subcommand> --config run.yaml [--seed N] [--threads N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, io, studies
from .fcs import ConditioningError
from .instruments import (BootstrapSpec, ICBasisError, characterize, clifford_frame, frame_manifest, ic_basis,
                          instrument_choi, span_rank)
from .scenarios import ConfigError, ScenarioConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_CONDITIONING = 0, 2, 3

log = logging.getLogger("procshadow")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML scenario config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for sampling and fits")
    common.add_argument("--out", help="output directory (overrides the config)")
    p = argparse.ArgumentParser(prog="procshadow", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("spin-chain", parents=[common], help="idle dynamics at the end of a spin chain")
    sub.add_parser("corr-noise", parents=[common], help="two-step correlated-noise statistics")
    v = sub.add_parser("validate", parents=[common], help="Hellinger cross-validation of an MPO")
    v.add_argument("--mpo", help="MPO artifact (default: <out>/mpo.pso)")
    sub.add_parser("characterize-instrument", parents=[common], help="bootstrap the ancilla instrument")
    e = sub.add_parser("estimate", parents=[common], help="records -> physical window marginals")
    e.add_argument("--shadow", required=True, help="record file written by a previous run")
    f = sub.add_parser("fcs", parents=[common], help="window marginals -> MPO")
    f.add_argument("--marginals", required=True, help="marginal-set artifact")
    return p


def _characterize(cfg: ScenarioConfig, out: Path, timer: studies.Timer) -> dict:
    with timer("characterization"):
        ci = characterize(BootstrapSpec(gamma=cfg.gamma))
        frame = clifford_frame(ci)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 8]))
        checks = []
        for _ in range(20):
            t, ph, la = rng.uniform(0, 2 * np.pi, 3)
            for x in range(2):
                checks.append({"theta": t, "phi": ph, "lam": la, "outcome": x,
                               "trace": float(np.trace(instrument_choi(ci, t, ph, la, x).matrix).real)})
        summary = {"gamma": cfg.gamma, "span_rank": span_rank(ci), "frame": frame_manifest(frame)}
        try:
            basis = ic_basis(ci)
            summary["ic_basis"] = {"params": [list(q) for q in basis.params], "sigma_min": basis.sigma_min,
                                   "condition_number": basis.condition_number}
        except ICBasisError as err:
            summary["ic_basis"] = {"error": str(err), "rank": err.rank}
    io.write_json(out / "instrument.json", summary)
    io.write_csv(out / "instrument_samples.csv", checks, ["theta", "phi", "lam", "outcome", "trace"])
    return {"instrument": "instrument.json", "samples": "instrument_samples.csv"}


def write_manifest(out: Path, cfg: ScenarioConfig, command: str, timer: studies.Timer) -> Path:
    """List every file under ``out`` with its checksum; timings are the only run-dependent entry."""
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "version": __version__,
        "timings": {k: round(v, 6) for k, v in timer.stages.items()},
        "files": [{"path": str(p.relative_to(out)), "bytes": p.stat().st_size, "sha256": io.sha256(p)}
                  for p in files],
    }
    path = out / "manifest.json"
    io.write_json(path, manifest)
    return path


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "output": args.out})
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("config error: --threads: must be positive", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    timer = studies.Timer()
    try:
        if args.command == "spin-chain":
            files = studies.run_spin_chain(cfg, out, args.threads, timer)
        elif args.command == "corr-noise":
            if cfg.steps < 2:
                raise ConfigError("steps", "correlated noise needs at least two steps")
            files = studies.run_correlated_noise(cfg, out, args.threads, timer)
        elif args.command == "validate":
            path = Path(args.mpo) if args.mpo else out / "mpo.pso"
            if not path.exists():
                raise ConfigError("--mpo", f"no MPO artifact at {path}")
            files = studies.run_validation(cfg, io.load_mpo(path), out, args.threads, timer)
        elif args.command == "characterize-instrument":
            files = _characterize(cfg, out, timer)
        elif args.command == "estimate":
            if not Path(args.shadow).exists():
                raise ConfigError("--shadow", f"no record file at {args.shadow}")
            shadow = io.load_shadow(args.shadow)
            if cfg.ell > shadow.k:
                raise ConfigError("ell", f"window length {cfg.ell} exceeds the recorded {shadow.k} steps")
            files = studies.run_estimate(cfg, shadow, out, args.threads, timer)
        else:
            if not Path(args.marginals).exists():
                raise ConfigError("--marginals", f"no marginal set at {args.marginals}")
            files = studies.run_fcs(cfg, io.load_marginals(args.marginals), out, timer)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ConditioningError as err:
        print(f"conditioning error: {err}", file=sys.stderr)
        return EXIT_CONDITIONING
    write_manifest(out, cfg, args.command, timer)
    for name, rel in files.items():
        log.info("%s: %s", name, out / rel)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
