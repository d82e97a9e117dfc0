"""Artifact formats.

Binary container layout: magic ``PSHD``, little-endian ``u32`` format version,
``u32`` header length, a UTF-8 JSON header listing every array (name, dtype,
shape, byte offset) plus free-form metadata, then the concatenated little-endian
array payload. Everything else is JSON, JSON lines or CSV.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .fcs import MarginalSet, MpoProcess
from .process import ProcessTensor
from .shadows import InstrumentFrame, ShadowSet

MAGIC = b"PSHD"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _le(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, order="C")
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def write_container(path, arrays: dict, meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, a in arrays.items():
        a = _le(np.asarray(a))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header)
        for b in blobs:
            fh.write(b)


def read_container(path) -> tuple:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path} is not a procshadow container")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    header = json.loads(data[12:12 + hlen])
    base = 12 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(data, dt, count, start).reshape(tuple(e["shape"])).astype(dt.newbyteorder("="))
    return arrays, header["meta"]


def _kind(meta: dict, kind: str, path) -> None:
    if meta.get("kind") != kind:
        raise FormatError(f"{path} holds {meta.get('kind')!r}, expected {kind!r}")


# process tensors

def save_process(path, pt: ProcessTensor) -> None:
    write_container(path, {"choi": pt.choi},
                    {"kind": "process_tensor", "k": pt.k, "d": pt.d, "offset": pt.offset,
                     "labels": list(pt.labels)})


def load_process(path) -> ProcessTensor:
    arrays, meta = read_container(path)
    _kind(meta, "process_tensor", path)
    return ProcessTensor(arrays["choi"], meta["k"], meta["d"], meta.get("offset", 0))


# shadow records

def record_columns(k: int) -> list:
    return [f"s{j}" for j in range(k)] + [f"x{j}" for j in range(k)] + ["s_term", "x_term"]


def save_shadow(path, shadow: ShadowSet) -> None:
    """Fixed-width ``uint16`` record table, one row per shot; exact shadows store weights instead."""
    meta = {"kind": "shadow", "frame_id": shadow.frame.frame_id, "k": shadow.k, "n": shadow.n,
            "seed": shadow.seed, "exact": shadow.exact, "columns": record_columns(shadow.k)}
    if shadow.exact:
        write_container(path, {"probabilities": shadow.probabilities}, meta)
        return
    rec = np.concatenate([shadow.settings, shadow.outcomes, shadow.terminal_settings[:, None],
                          shadow.terminal_outcomes[:, None]], axis=1)
    write_container(path, {"records": rec.astype(np.uint16)}, meta)


def load_shadow(path, frame: InstrumentFrame | None = None) -> ShadowSet:
    arrays, meta = read_container(path)
    _kind(meta, "shadow", path)
    if frame is None:
        from .scenarios import frame_from_id
        frame = frame_from_id(meta["frame_id"])
    elif frame.frame_id != meta["frame_id"]:
        raise FormatError(f"records were taken with frame {meta['frame_id']!r}, not {frame.frame_id!r}")
    k = meta["k"]
    if meta["exact"]:
        return ShadowSet(frame, k, seed=meta["seed"], probabilities=arrays["probabilities"])
    rec = arrays["records"].astype(np.int64).reshape(-1, 2 * k + 2)
    return ShadowSet(frame, k, rec[:, :k], rec[:, k:2 * k], rec[:, 2 * k], rec[:, 2 * k + 1], meta["seed"])


def save_shadow_jsonl(path, shadow: ShadowSet) -> None:
    """Human-readable debug form: a header line, then one object per shot."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"frame_id": shadow.frame.frame_id, "k": shadow.k, "n": shadow.n,
                             "seed": shadow.seed}, sort_keys=True) + "\n")
        for s, x, ts, tx in zip(shadow.settings.tolist(), shadow.outcomes.tolist(),
                                shadow.terminal_settings.tolist(), shadow.terminal_outcomes.tolist()):
            fh.write(json.dumps({"settings": s, "outcomes": x, "terminal": [ts, tx]}) + "\n")


def load_shadow_jsonl(path, frame: InstrumentFrame | None = None) -> ShadowSet:
    with open(path) as fh:
        head = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    if frame is None:
        from .scenarios import frame_from_id
        frame = frame_from_id(head["frame_id"])
    k = head["k"]
    if not rows:
        return ShadowSet(frame, k, seed=head["seed"])
    return ShadowSet(frame, k, [r["settings"] for r in rows], [r["outcomes"] for r in rows],
                     [r["terminal"][0] for r in rows], [r["terminal"][1] for r in rows], head["seed"])


# marginals and MPOs

def save_marginals(path, ms: MarginalSet) -> None:
    arrays = {f"window_{m.offset}": m.choi for m in ms.marginals}
    write_container(path, arrays, {"kind": "marginal_set", "ell": ms.ell, "k": ms.k, "d": ms.d})


def load_marginals(path) -> MarginalSet:
    arrays, meta = read_container(path)
    _kind(meta, "marginal_set", path)
    ell, k, d = meta["ell"], meta["k"], meta["d"]
    wins = [ProcessTensor(arrays[f"window_{s}"], ell, d, s) for s in range(k - ell + 1)]
    return MarginalSet(ell, k, wins, d)


def save_mpo(path, mpo: MpoProcess) -> None:
    arrays = {f"core_{i}": c for i, c in enumerate(mpo.cores)}
    arrays["bond_dims"] = np.array(mpo.bond_dims, dtype=np.int64)
    write_container(path, arrays, {"kind": "mpo", **mpo.summary(), "n_cores": len(mpo.cores)})


def load_mpo(path) -> MpoProcess:
    arrays, meta = read_container(path)
    _kind(meta, "mpo", path)
    cores = [arrays[f"core_{i}"] for i in range(meta["n_cores"])]
    return MpoProcess(cores, meta["k"], meta["ell"], meta["d"], meta["junctions"])


# JSON and tables

def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_csv(path, rows: list, columns: list) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        out.writeheader()
        for r in rows:
            out.writerow({c: (f"{r[c]:.12g}" if isinstance(r[c], float) else r[c]) for c in columns})


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
