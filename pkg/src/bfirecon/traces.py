"""JSON-lines traces and the results CSV.

Each trace starts with a header record holding the configuration and its
digest; every data record repeats the digest and carries a hash of its own
content, so an edited file is refused on load.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .channel import ArrayConfig
from .codec import BfiReport

RESULT_COLUMNS = ["scenario", "application", "arm", "M", "N", "B", "psi_bits", "phi_bits", "Q",
                  "packets", "trials", "successes", "ASR", "seed", "config_digest", "version"]


class TraceError(ValueError):
    """Malformed, mismatched or tampered trace."""


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _hash(record: dict) -> str:
    body = {k: v for k, v in record.items() if k != "hash"}
    return hashlib.sha256(_canon(body).encode()).hexdigest()[:16]


def _seal(record: dict) -> str:
    record = dict(record)
    record["hash"] = _hash(record)
    return _canon(record)


def digest_of(obj: dict) -> str:
    return hashlib.sha256(_canon(obj).encode()).hexdigest()[:16]


def _read(path) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise TraceError(f"cannot read {path}: {exc}") from exc
    recs = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"{path}:{n}: not JSON") from exc
        if rec.get("hash") != _hash(rec):
            raise TraceError(f"{path}:{n}: record hash mismatch (file modified?)")
        recs.append(rec)
    if not recs or recs[0].get("type") != "header":
        raise TraceError(f"{path}: missing header record")
    digest = recs[0]["digest"]
    if digest != digest_of(recs[0]["config"]):
        raise TraceError(f"{path}: header digest does not match its configuration")
    for rec in recs[1:]:
        if rec.get("digest") != digest:
            raise TraceError(f"{path}: record {rec.get('packet_id')} has a foreign config digest")
    return recs


def complex_to_pairs(a: np.ndarray) -> list:
    a = np.asarray(a, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def pairs_to_complex(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    return arr[..., 0] + 1j * arr[..., 1]


# -- CSI ---------------------------------------------------------------------


def write_csi_trace(path, config: ArrayConfig, packets, extra: dict | None = None) -> str:
    cfg = config.to_dict()
    if extra:
        cfg = {**cfg, "extra": extra}
    digest = digest_of(cfg)
    lines = [_seal({"type": "header", "config": cfg, "digest": digest})]
    for i, H in enumerate(packets):
        H = np.asarray(H)
        if H.shape != (config.K, config.N, config.M):
            raise TraceError("packet shape does not match the array configuration")
        lines.append(_seal({"packet_id": i, "digest": digest, "csi": complex_to_pairs(H)}))
    Path(path).write_text("\n".join(lines) + "\n")
    return digest


def read_csi_trace(path, expect_digest: str | None = None) -> tuple[ArrayConfig, list[np.ndarray], dict]:
    recs = _read(path)
    head = recs[0]
    if expect_digest is not None and head["digest"] != expect_digest:
        raise TraceError("CSI trace belongs to a different configuration")
    cfg = dict(head["config"])
    extra = cfg.pop("extra", {})
    config = ArrayConfig.from_dict(cfg)
    return config, [pairs_to_complex(r["csi"]) for r in recs[1:]], {"digest": head["digest"], **extra}


# -- BFI ---------------------------------------------------------------------


def write_bfi_trace(path, reports: list[BfiReport], config: dict) -> str:
    digest = digest_of(config)
    lines = [_seal({"type": "header", "config": config, "digest": digest})]
    for i, rep in enumerate(reports):
        lines.append(_seal({"packet_id": i, "digest": digest, **rep.to_dict()}))
    Path(path).write_text("\n".join(lines) + "\n")
    return digest


def read_bfi_trace(path, expect_digest: str | None = None) -> tuple[dict, list[BfiReport], str]:
    recs = _read(path)
    head = recs[0]
    if expect_digest is not None and head["digest"] != expect_digest:
        raise TraceError("BFI trace belongs to a different configuration")
    reports = [BfiReport.from_dict(r) for r in recs[1:]]
    return head["config"], reports, head["digest"]


# -- candidates and results ----------------------------------------------------


def write_candidate_dump(path, rows: list[dict]) -> None:
    """One JSON line per candidate: trial, rank, omega, loss, t_rec, verdicts."""
    with open(path, "w") as fh:
        for row in rows:
            fh.write(_canon(row) + "\n")


def format_results(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        r = dict(r)
        r["ASR"] = f"{float(r['ASR']):.4f}"
        w.writerow({k: r[k] for k in RESULT_COLUMNS})
    return buf.getvalue()


def write_results(path, rows: list[dict]) -> None:
    Path(path).write_text(format_results(rows))


def read_results(path) -> list[dict]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise TraceError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or any(c not in reader.fieldnames for c in ("scenario", "ASR", "Q")):
        raise TraceError(f"{path}: not a results CSV")
    rows = list(reader)
    for r in rows:
        try:
            float(r["ASR"])
            int(r["trials"])
            int(r["successes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceError(f"{path}: malformed row {r}") from exc
    return rows
