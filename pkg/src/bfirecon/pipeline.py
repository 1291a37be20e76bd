"""One attack trial end to end.

A trial draws a victim geometry, builds the verifier (enrolled profile or
legitimate key), sniffs the feedback of a fresh packet, reconstructs
candidate CSI and spends up to ``Q`` attempts.  Every random draw comes from
a named substream of the root seed, so switching a pipeline stage on or off
never changes the scenario the other stages see.
"""

from __future__ import annotations

import logging
import warnings
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .apps import APPLICATIONS, AttackTrial, AuthTarget, KeyConfig, KeyTarget, consume_attempts, enroll_device
from .channel import ArrayConfig, PathParams, ScenarioConfig, add_noise, perturb_paths, sample_random_scenario, synthesize_csi
from .closed_form import reconstruct_single_antenna, to_csi_tensor
from .codec import BfiReport, QuantConfig, encode_bfi
from .constraints import BoundSearchConfig, TofContext, amplitude_bounds, filter_candidates
from .mle import ReconCandidate, SearchConfig, multi_start_search, track_candidates
from .refine import RefinementModel, apply_refinement, fit_weights

log = logging.getLogger(__name__)

ARMS = ("mle", "constraints", "refine")


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for stage ``name`` of trial ``index`` under a root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, index)])


@dataclass(frozen=True)
class PipelineConfig:
    application: str = "device_auth"
    quant: QuantConfig = QuantConfig()
    search: SearchConfig = SearchConfig()
    use_constraints: bool = True
    use_refinement: bool = True
    filter_slack: float = 0.02
    bound_search: BoundSearchConfig = BoundSearchConfig()
    tof_distance: float | None = None
    fpr_target: float = 0.05
    enroll_packets: int = 20
    impostors: int = 200
    packets_per_decision: int = 1
    key: KeyConfig = KeyConfig()
    training_positions: int = 20
    refine_blend: float = 1.0
    refine_per_subcarrier: bool = False
    phase_policy: str = "zero"
    track_cycles: int = 3

    def __post_init__(self):
        if self.application not in APPLICATIONS:
            raise ValueError(f"unknown application {self.application!r}")
        if self.packets_per_decision < 1:
            raise ValueError("packets_per_decision must be >= 1")

    @property
    def arm(self) -> str:
        if self.use_refinement and self.use_constraints:
            return "refine"
        if self.use_refinement:
            return "refine-only"
        return "constraints" if self.use_constraints else "mle"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quant"] = self.quant.to_dict()
        d["search"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.search).items()}
        return d


def arm_config(pipeline: PipelineConfig, arm: str) -> PipelineConfig:
    """Cumulative ablation arms: MLE only, plus constraints, plus refinement."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    return replace(pipeline, use_constraints=arm != "mle", use_refinement=arm == "refine")


# -- victim side -------------------------------------------------------------


@dataclass
class Victim:
    index: int
    paths: list[PathParams]
    config: ArrayConfig
    scenario: ScenarioConfig

    def packets(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """``count`` packets with independent gain drift (and noise if configured)."""
        out = []
        for _ in range(count):
            H = synthesize_csi(perturb_paths(self.paths, rng, self.scenario.gain_jitter), self.config)
            out.append(add_noise(H, self.scenario.snr_db, rng))
        return np.array(out)

    def sniff(self, H: np.ndarray, quant: QuantConfig) -> BfiReport:
        sc = self.scenario
        return encode_bfi(H, quant, sc.tx_power, sc.noise_power, self.config.streams)


def draw_victim(scenario: ScenarioConfig, seed: int, index: int) -> Victim:
    paths, config = sample_random_scenario(substream(seed, "channel", index), scenario)
    return Victim(index, paths, config, scenario)


def build_target(victim: Victim, pipeline: PipelineConfig, seed: int, truth: np.ndarray):
    """Verifier for the trial: enrolled profile or the legitimate key of ``truth``."""
    if pipeline.application == "key_gen":
        return KeyTarget(truth[0] if truth.ndim == 4 else truth, pipeline.key)
    rng = substream(seed, "enroll", victim.index)
    genuine = list(victim.packets(rng, pipeline.enroll_packets))
    imp_rng = substream(seed, "impostors", victim.index)
    B = pipeline.packets_per_decision
    units = []
    for _ in range(pipeline.impostors):
        other = Victim(-1, *sample_random_scenario(imp_rng, victim.scenario), victim.scenario)
        units.append(other.packets(imp_rng, B) if B > 1 else other.packets(imp_rng, 1)[0])
    return AuthTarget(enroll_device(genuine, units, pipeline.fpr_target, B))


# -- adversary side ----------------------------------------------------------


def train_refinement(scenario: ScenarioConfig, pipeline: PipelineConfig, seed: int, index: int) -> RefinementModel:
    """Linear pair model fitted on channels from other positions in the same environment."""
    rng = substream(seed, "training", index)
    chans = []
    for _ in range(pipeline.training_positions):
        paths, cfg = sample_random_scenario(rng, scenario)
        chans.append(synthesize_csi(paths, cfg))
    return fit_weights(chans, per_subcarrier=pipeline.refine_per_subcarrier)


def closed_form_candidate(report: BfiReport, scenario: ScenarioConfig, pipeline: PipelineConfig) -> ReconCandidate:
    res = reconstruct_single_antenna(report, scenario.tx_power, scenario.noise_power)
    return ReconCandidate(omega=None, loss=0.0, csi=to_csi_tensor(res, pipeline.phase_policy),
                          los_delay=float("nan"))


def search_candidates(report: BfiReport, config: ArrayConfig, scenario: ScenarioConfig,
                      pipeline: PipelineConfig, seed: int, index: int) -> list[ReconCandidate]:
    return multi_start_search(report, config, pipeline.search, substream(seed, "search", index),
                              scenario.tx_power, scenario.noise_power)


def postprocess(raw: list[ReconCandidate], report: BfiReport, config: ArrayConfig,
                scenario: ScenarioConfig, pipeline: PipelineConfig,
                model: RefinementModel | None) -> list[ReconCandidate]:
    """Dual-constraint filtering then refinement, as toggled by ``pipeline``."""
    cands = list(raw)
    if pipeline.use_constraints:
        bounds = amplitude_bounds(report, scenario.tx_power, scenario.noise_power, pipeline.bound_search)
        ctx = TofContext(pipeline.tof_distance or scenario.distance, config.bandwidth)
        cands = filter_candidates(cands, bounds, ctx, pipeline.filter_slack)
    if pipeline.use_refinement and model is not None:
        cands = [apply_refinement(c, model, pipeline.refine_blend) for c in cands]
    return cands


def effective_q(config: ArrayConfig, Q: int) -> int:
    if Q < 1:
        raise ValueError("Q must be >= 1")
    if config.N == 1 and Q != 1:
        warnings.warn("single-antenna station: closed form yields one candidate, Q set to 1",
                      RuntimeWarning, stacklevel=3)
        return 1
    return Q


# -- trials ------------------------------------------------------------------


@dataclass
class TrialContext:
    """Everything shared by the ablation arms of one trial."""

    victim: Victim
    truth: np.ndarray
    report: BfiReport
    target: object
    raw: list[ReconCandidate] = field(default_factory=list)
    model: RefinementModel | None = None


def prepare_trial(scenario: ScenarioConfig, pipeline: PipelineConfig, seed: int, index: int,
                  search: bool = True) -> TrialContext:
    victim = draw_victim(scenario, seed, index)
    truth = victim.packets(substream(seed, "packets", index), 1)[0]
    report = victim.sniff(truth, pipeline.quant)
    target = build_target(victim, pipeline, seed, truth)
    ctx = TrialContext(victim, truth, report, target)
    if not search:
        return ctx
    if victim.config.N == 1:
        ctx.raw = [closed_form_candidate(report, scenario, pipeline)]
    else:
        ctx.raw = search_candidates(report, victim.config, scenario, pipeline, seed, index)
        ctx.model = train_refinement(scenario, pipeline, seed, index)
    return ctx


def attack_with(ctx: TrialContext, pipeline: PipelineConfig, Q: int,
                inject_truth: bool = False) -> AttackTrial:
    """Spend up to ``Q`` attempts using the candidates the configured pipeline produces."""
    v = ctx.victim
    Q = effective_q(v.config, Q)
    if v.config.N == 1:
        cands = list(ctx.raw)
    else:
        cands = postprocess(ctx.raw, ctx.report, v.config, v.scenario, pipeline, ctx.model)
    payloads = [c.csi for c in cands]
    if inject_truth:
        payloads = [ctx.truth] + payloads
    outcomes, scores = consume_attempts(ctx.target, payloads, Q)
    return AttackTrial(scenario_id=v.index, application=pipeline.application, Q=Q,
                       outcomes=outcomes, scores=scores, candidate_count=len(payloads),
                       truth=ctx.truth, report=ctx.report, candidates=cands)


def run_attack_trial(scenario: ScenarioConfig, pipeline: PipelineConfig, Q: int, rng_seed: int,
                     index: int = 0, inject_truth: bool = False) -> AttackTrial:
    if pipeline.packets_per_decision > 1:
        return run_multipacket_trial(scenario, pipeline, Q, rng_seed, index)
    ctx = prepare_trial(scenario, pipeline, rng_seed, index)
    return attack_with(ctx, pipeline, Q, inject_truth)


def run_arms(scenario: ScenarioConfig, pipeline: PipelineConfig, Q: int, rng_seed: int,
             index: int = 0, arms=ARMS) -> dict[str, AttackTrial]:
    """All ablation arms of one trial on a single shared candidate search."""
    ctx = prepare_trial(scenario, pipeline, rng_seed, index)
    return {a: attack_with(ctx, arm_config(pipeline, a), Q) for a in arms}


def physical_amplitude_range(scenario: ScenarioConfig) -> float:
    """Largest per-element amplitude the scenario family can produce."""
    return scenario.los_gain[1] * (1 + (scenario.path_count[1] - 1) * scenario.nlos_ratio[1]) \
        * (1 + 3 * scenario.gain_jitter)


def random_payloads(shape: tuple, amp_max: float, rng: np.random.Generator, count: int) -> list[np.ndarray]:
    out = []
    for _ in range(count):
        amp = rng.uniform(0.0, amp_max, size=shape)
        out.append(amp * np.exp(1j * rng.uniform(0, 2 * np.pi, size=shape)))
    return out


def random_attack_baseline(scenario: ScenarioConfig, pipeline: PipelineConfig, Q: int,
                           rng_seed: int, index: int = 0) -> AttackTrial:
    """Same victim and verifier as the real attack; candidates are uniform random CSI."""
    ctx = prepare_trial(scenario, pipeline, rng_seed, index, search=False)
    rng = substream(rng_seed, "baseline", index)
    shape = ctx.truth.shape
    B = pipeline.packets_per_decision
    if B > 1:
        shape = (B,) + shape
    payloads = random_payloads(shape, physical_amplitude_range(scenario), rng, Q)
    outcomes, scores = consume_attempts(ctx.target, payloads, Q)
    return AttackTrial(scenario_id=index, application=pipeline.application, Q=Q,
                       outcomes=outcomes, scores=scores, candidate_count=len(payloads),
                       truth=ctx.truth, report=ctx.report, notes={"baseline": "random"})


def run_multipacket_trial(scenario: ScenarioConfig, pipeline: PipelineConfig, Q: int,
                          rng_seed: int, index: int = 0) -> AttackTrial:
    """Attack a verifier that decides on ``packets_per_decision`` packets at once.

    The adversary sniffs every packet.  The first packet gets the full search;
    the candidates attempted there are re-fitted to each later packet and
    re-ranked on that packet's own evidence (filter verdict, then loss).
    Attempt ``q`` presents every packet's ``q``-th candidate.
    """
    B = pipeline.packets_per_decision
    victim = draw_victim(scenario, rng_seed, index)
    if victim.config.N == 1:
        raise ValueError("multi-packet attacks are modelled for multi-antenna stations")
    Q = effective_q(victim.config, Q)
    packets = victim.packets(substream(rng_seed, "packets", index), B)
    target = build_target(victim, pipeline, rng_seed, packets)
    model = train_refinement(scenario, pipeline, rng_seed, index) if pipeline.use_refinement else None
    sc = scenario
    reports = [victim.sniff(H, pipeline.quant) for H in packets]
    raw = search_candidates(reports[0], victim.config, sc, pipeline, rng_seed, index)
    first = postprocess(raw, reports[0], victim.config, sc, pipeline, None)
    tracked = [c for c in raw if any(c is f for f in first[:Q])]
    tracked.sort(key=lambda c: c.loss)
    if not tracked:
        return AttackTrial(scenario_id=index, application=pipeline.application, Q=Q,
                           truth=packets, notes={"packets": B})
    per_packet = []
    for j, rep in enumerate(reports):
        cands = tracked if j == 0 else track_candidates(
            rep, victim.config, tracked, pipeline.search, sc.tx_power, sc.noise_power,
            pipeline.track_cycles)
        kept = postprocess(cands, rep, victim.config, sc, replace(pipeline, use_refinement=False), None)
        order = kept + [c for c in cands if not any(c is k for k in kept)]
        if pipeline.use_refinement and model is not None:
            order = [apply_refinement(c, model, pipeline.refine_blend) for c in order]
        per_packet.append([c.csi for c in order])
    n = len(tracked)
    payloads = [np.array([pp[q] for pp in per_packet]) for q in range(n)]
    outcomes, scores = consume_attempts(target, payloads, Q)
    return AttackTrial(scenario_id=index, application=pipeline.application, Q=Q,
                       outcomes=outcomes, scores=scores, candidate_count=n,
                       truth=packets, notes={"packets": B})
