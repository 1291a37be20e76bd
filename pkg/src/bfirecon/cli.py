"""Command-line experiment runner.

Subcommands: simulate, encode, reconstruct, attack, report.  Settings come
from defaults, then an optional JSON config file, then command-line flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .apps import APPLICATIONS
from .channel import ScenarioConfig
from .codec import QuantConfig, encode_bfi
from .constraints import BoundSearchConfig
from .mle import SearchConfig
from .pipeline import (ARMS, PipelineConfig, arm_config, closed_form_candidate, draw_victim,
                       prepare_trial, attack_with, random_attack_baseline, run_multipacket_trial,
                       search_candidates, substream)
from .traces import (TraceError, digest_of, read_bfi_trace, read_csi_trace, read_results,
                     write_bfi_trace, write_candidate_dump, write_csi_trace, write_results)

log = logging.getLogger("bfirecon")

OUT_DIR_ENV = "BFIRECON_OUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    tx_antennas: int = 2
    rx_antennas: int = 2
    bandwidth: float = 20e6
    carrier_freq: float = 5.18e9
    distance: float = 3.0
    path_count: tuple[int, int] = (2, 3)
    snr_db: float | None = None
    psi_bits: int = 4
    phi_bits: int = 6
    application: str = "device_auth"
    q: tuple[int, ...] = (5,)
    trials: int = 20
    seed: int = 0
    ablation: bool = False
    constraints: bool = True
    refinement: bool = True
    baseline: bool = False
    packets_per_decision: int = 1
    phi_range: str = "2pi"
    tof_dist: float | None = None
    filter_slack: float = 0.02
    restarts: int = 20
    fpr_target: float = 0.05

    def __post_init__(self):
        if self.application not in APPLICATIONS:
            raise ConfigError(f"application must be one of {APPLICATIONS}")
        if self.phi_range not in ("2pi", "pi"):
            raise ConfigError("phi_range must be '2pi' or 'pi'")
        if self.trials < 1 or self.restarts < 1 or not self.q or min(self.q) < 1:
            raise ConfigError("trials, restarts and every Q must be positive")
        if self.filter_slack < 0:
            raise ConfigError("filter_slack must be non-negative")
        if self.tof_dist is not None and self.tof_dist <= 0:
            raise ConfigError("tof_dist must be positive")

    def scenario(self) -> ScenarioConfig:
        return ScenarioConfig(tx_antennas=self.tx_antennas, rx_antennas=self.rx_antennas,
                              bandwidth=self.bandwidth, carrier_freq=self.carrier_freq,
                              distance=self.distance, path_count=tuple(self.path_count),
                              snr_db=self.snr_db)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            application=self.application,
            quant=QuantConfig(self.psi_bits, self.phi_bits),
            search=SearchConfig(restarts=self.restarts, distance=self.distance),
            use_constraints=self.constraints,
            use_refinement=self.refinement,
            filter_slack=self.filter_slack,
            bound_search=BoundSearchConfig(phi_range=np.pi if self.phi_range == "pi" else 2 * np.pi),
            tof_distance=self.tof_dist,
            fpr_target=self.fpr_target,
            packets_per_decision=self.packets_per_decision,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["path_count"] = list(self.path_count)
        d["q"] = list(self.q)
        return d

    def digest(self) -> str:
        return digest_of(self.to_dict())

    @property
    def label(self) -> str:
        return f"{self.tx_antennas}x{self.rx_antennas}-{self.bandwidth / 1e6:g}MHz"


def _coerce(name: str, value):
    """Convert JSON/CLI values to the field's type."""
    if value is None:
        return None
    if name == "path_count":
        v = [int(x) for x in value]
        if len(v) != 2:
            raise ConfigError("path_count needs two integers")
        return tuple(v)
    if name == "q":
        return tuple(int(x) for x in (value if isinstance(value, (list, tuple)) else [value]))
    default = next(f.default for f in fields(ExperimentConfig) if f.name == name)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or name in ("snr_db", "tof_dist"):
        return float(value)
    return value


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise TraceError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**{k: _coerce(k, v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "bfirecon-out")
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TraceError(f"cannot create output directory {d}: {exc}") from exc
    return d


# -- subcommands -------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    d = out_dir(args)
    sc, pc = cfg.scenario(), cfg.pipeline()
    packets, reports = [], []
    for i in range(cfg.trials):
        v = draw_victim(sc, cfg.seed, i)
        H = v.packets(substream(cfg.seed, "packets", i), 1)[0]
        packets.append(H)
        reports.append(v.sniff(H, pc.quant))
    config = sc.array_config()
    meta = {"experiment": cfg.to_dict(), "experiment_digest": cfg.digest()}
    write_csi_trace(d / "csi.jsonl", config, packets, meta)
    write_bfi_trace(d / "bfi.jsonl", reports, {"array": config.to_dict(), **meta})
    log.info("wrote %d packets to %s", cfg.trials, d)
    return EXIT_OK


def cmd_encode(cfg: ExperimentConfig, args) -> int:
    d = out_dir(args)
    config, packets, meta = read_csi_trace(args.csi)
    sc = cfg.scenario()
    quant = QuantConfig(cfg.psi_bits, cfg.phi_bits)
    reports = [encode_bfi(H, quant, sc.tx_power, sc.noise_power, config.streams) for H in packets]
    write_bfi_trace(d / "bfi.jsonl", reports, {"array": config.to_dict(), "source_digest": meta["digest"]})
    return EXIT_OK


def _candidate_rows(trial: int, cands) -> list[dict]:
    rows = []
    for rank, c in enumerate(cands):
        rows.append({"trial": trial, "rank": rank, "loss": c.loss, "t_rec": c.los_delay,
                     "path_count": c.path_count, "verdicts": c.verdicts,
                     "omega": c.omega.to_dict() if c.omega is not None else None})
    return rows


def cmd_reconstruct(cfg: ExperimentConfig, args) -> int:
    from .channel import ArrayConfig
    d = out_dir(args)
    head, reports, digest = read_bfi_trace(args.bfi)
    if "array" not in head:
        raise ConfigError("BFI trace header carries no array configuration")
    config = ArrayConfig.from_dict(head["array"])
    sc = cfg.scenario()
    pc = cfg.pipeline()
    best, dump = [], []
    for i, rep in enumerate(reports):
        if config.N == 1:
            cands = [closed_form_candidate(rep, sc, pc)]
        else:
            cands = search_candidates(rep, config, sc, pc, cfg.seed, i)
        best.append(cands[0].csi)
        dump.extend(_candidate_rows(i, cands))
    write_csi_trace(d / "recon.jsonl", config, best, {"source_digest": digest})
    if args.dump_candidates:
        write_candidate_dump(d / "candidates.jsonl", dump)
    return EXIT_OK


def _trial_job(job):
    """Run one trial for every requested arm; picklable for the worker pool."""
    cfg, index, qmax, arms = job
    sc, pc = cfg.scenario(), cfg.pipeline()
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if cfg.packets_per_decision > 1:
            for a in arms:
                t = run_multipacket_trial(sc, arm_config(pc, a) if a in ARMS else pc, qmax, cfg.seed, index)
                out[a] = ([t.success_within(q) for q in cfg.q], [])
        else:
            ctx = prepare_trial(sc, pc, cfg.seed, index)
            for a in arms:
                t = attack_with(ctx, arm_config(pc, a) if a in ARMS else pc, qmax)
                out[a] = ([t.success_within(q) for q in cfg.q], _candidate_rows(index, t.candidates))
        if cfg.baseline:
            t = random_attack_baseline(sc, pc, qmax, cfg.seed, index)
            out["random"] = ([t.success_within(q) for q in cfg.q], [])
    return index, out


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    d = out_dir(args)
    if args.traces:
        _, packets, meta = read_csi_trace(Path(args.traces) / "csi.jsonl")
        if meta.get("experiment_digest") is None:
            raise ConfigError("trace was not produced by `simulate`")
        traced = ExperimentConfig(**{k: _coerce(k, v) for k, v in meta["experiment"].items()})
        if traced.scenario() != cfg.scenario() or traced.seed != cfg.seed or len(packets) < cfg.trials:
            raise ConfigError("trace does not match the attack configuration")
    if cfg.rx_antennas == 1 and any(q != 1 for q in cfg.q):
        warnings.warn("single-antenna station: Q coerced to 1", RuntimeWarning, stacklevel=2)
        cfg = replace(cfg, q=(1,))
    arms = list(ARMS) if cfg.ablation else [cfg.pipeline().arm]
    if cfg.rx_antennas == 1:
        arms = ["closed-form"]
    qmax = max(cfg.q)
    jobs = [(cfg, i, qmax, arms) for i in range(cfg.trials)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    else:
        results = [_trial_job(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    names = arms + (["random"] if cfg.baseline else [])
    rows, dump = [], []
    for a in names:
        for qi, q in enumerate(cfg.q):
            succ = sum(out[a][0][qi] for _, out in results)
            rows.append({
                "scenario": cfg.label, "application": cfg.application, "arm": a,
                "M": cfg.tx_antennas, "N": cfg.rx_antennas, "B": f"{cfg.bandwidth / 1e6:g}",
                "psi_bits": cfg.psi_bits, "phi_bits": cfg.phi_bits, "Q": q,
                "packets": cfg.packets_per_decision, "trials": cfg.trials, "successes": succ,
                "ASR": 100.0 * succ / cfg.trials, "seed": cfg.seed,
                "config_digest": cfg.digest(), "version": __version__,
            })
    for _, out in results:
        for a in arms:
            dump.extend(dict(r, arm=a) for r in out[a][1])
    write_results(d / "results.csv", rows)
    if args.dump_candidates:
        write_candidate_dump(d / "candidates.jsonl", dump)
    print((d / "results.csv").read_text(), end="")
    return EXIT_OK


SUMMARY_AXES = ("application", "arm", "M", "N", "B", "Q", "packets")


def cmd_report(cfg: ExperimentConfig | None, args) -> int:
    if not args.results:
        raise ConfigError("report needs at least one results CSV")
    rows = []
    for p in args.results:
        rows.extend(read_results(p))
    if not rows:
        raise ConfigError("results files hold no rows")
    seen = set()
    for r in rows:
        key = (r["scenario"], r.get("seed"), r.get("application"), r.get("arm"), r["Q"], r.get("packets"))
        if key in seen:
            raise ConfigError(f"duplicate row for scenario {r['scenario']} seed {r.get('seed')}")
        seen.add(key)
    groups: dict[tuple, list[int]] = {}
    for r in rows:
        k = tuple(r[a] for a in SUMMARY_AXES)
        acc = groups.setdefault(k, [0, 0])
        acc[0] += int(r["successes"])
        acc[1] += int(r["trials"])
    d = out_dir(args)
    lines = [",".join(SUMMARY_AXES + ("trials", "successes", "ASR"))]
    for k in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        s, n = groups[k]
        lines.append(",".join(map(str, k)) + f",{n},{s},{100.0 * s / n:.4f}")
    (d / "summary.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bfirecon", description="CSI reconstruction from beamforming feedback")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--trials", type=int)
        sp.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or ./bfirecon-out)")
        sp.add_argument("--tx", dest="tx_antennas", type=int)
        sp.add_argument("--rx", dest="rx_antennas", type=int)
        sp.add_argument("--bandwidth", type=float)
        sp.add_argument("--bits", nargs=2, type=int, metavar=("PSI", "PHI"))
        sp.add_argument("--phi-range", choices=["2pi", "pi"])
        sp.add_argument("--tof-dist", type=float)
        sp.add_argument("--filter-slack", type=float)
        sp.add_argument("--restarts", type=int)

    sp = sub.add_parser("simulate", help="ground-truth CSI and sniffed BFI traces")
    common(sp)
    sp = sub.add_parser("encode", help="BFI trace from a CSI trace")
    common(sp)
    sp.add_argument("csi", help="CSI trace (JSON lines)")
    sp = sub.add_parser("reconstruct", help="reconstruct CSI from a BFI trace")
    common(sp)
    sp.add_argument("bfi", help="BFI trace (JSON lines)")
    sp.add_argument("--dump-candidates", action="store_true")
    sp = sub.add_parser("attack", help="run attack trials and write results.csv")
    common(sp)
    sp.add_argument("--application", choices=APPLICATIONS)
    sp.add_argument("--q", type=int, nargs="+")
    sp.add_argument("--ablation", action="store_true", default=None)
    sp.add_argument("--no-constraints", dest="constraints", action="store_false", default=None)
    sp.add_argument("--no-refinement", dest="refinement", action="store_false", default=None)
    sp.add_argument("--baseline", action="store_true", default=None, help="add the random-CSI baseline")
    sp.add_argument("--packets", dest="packets_per_decision", type=int)
    sp.add_argument("--traces", help="directory written by `simulate`; checked against the config")
    sp.add_argument("--dump-candidates", action="store_true")
    sp.add_argument("--workers", type=int, default=1)
    sp = sub.add_parser("report", help="summarise results CSVs")
    sp.add_argument("results", nargs="*")
    sp.add_argument("--out-dir")
    return p


def _overrides(args) -> dict:
    keys = ("seed", "trials", "tx_antennas", "rx_antennas", "bandwidth", "phi_range", "tof_dist",
            "filter_slack", "restarts", "application", "q", "ablation", "constraints", "refinement",
            "baseline", "packets_per_decision")
    ov = {k: getattr(args, k, None) for k in keys}
    bits = getattr(args, "bits", None)
    if bits:
        ov["psi_bits"], ov["phi_bits"] = bits
    return ov


COMMANDS = {"simulate": cmd_simulate, "encode": cmd_encode, "reconstruct": cmd_reconstruct,
            "attack": cmd_attack, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None if args.command == "report" else load_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
