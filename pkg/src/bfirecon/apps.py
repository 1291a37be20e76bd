"""Simulated physical-layer security targets and attack-success accounting.

Device authentication is a calibrated distance threshold on a normalized
amplitude template.  Key generation quantizes normalized amplitudes into
Gray-coded bits with guard bands.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

APPLICATIONS = ("device_auth", "key_gen")


# -- device authentication ---------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def amplitude_features(csi) -> np.ndarray:
    """``|H|`` flattened and scaled to unit L2 norm (removes the overall gain)."""
    return _unit(np.abs(np.asarray(csi, dtype=complex)).ravel())


def _unit_features(unit) -> np.ndarray:
    """Features of one decision unit: a single CSI ``(K, N, M)`` or a batch ``(B, K, N, M)``."""
    unit = np.asarray(unit)
    if unit.ndim == 4:
        return _unit(np.mean([amplitude_features(x) for x in unit], axis=0))
    return amplitude_features(unit)


@dataclass
class DeviceProfile:
    template: np.ndarray
    threshold: float
    fpr_target: float
    packets_per_decision: int = 1
    normalization: str = "unit-l2"
    impostor_distances: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def validation_fpr(self) -> float:
        d = self.impostor_distances
        return float(np.mean(d <= self.threshold)) if d.size else float("nan")


def unit_distance(profile: DeviceProfile, unit) -> float:
    f = _unit_features(unit)
    if f.shape != profile.template.shape:
        raise ValueError("CSI dimensions do not match the enrolled profile")
    return float(np.linalg.norm(f - profile.template))


def enroll_device(genuine_csi, impostor_csi, fpr_target: float = 0.05,
                  packets_per_decision: int = 1) -> DeviceProfile:
    """Template = mean normalized amplitude of the genuine packets, rescaled to unit norm.

    The threshold is the ``fpr_target`` quantile of impostor distances, so that
    fraction of impostor decision units is accepted.  Each impostor entry is
    one decision unit: a single CSI, or a batch of ``packets_per_decision``.
    """
    genuine = [np.asarray(g) for g in genuine_csi]
    if len(genuine) < 10:
        raise ValueError("at least 10 genuine packets are required")
    if len(impostor_csi) < 1:
        raise ValueError("impostor validation set is empty")
    if not 0 < fpr_target < 1:
        raise ValueError("fpr_target must lie in (0, 1)")
    if packets_per_decision < 1:
        raise ValueError("packets_per_decision must be >= 1")
    template = _unit(np.mean([amplitude_features(g) for g in genuine], axis=0))
    prof = DeviceProfile(template, 0.0, fpr_target, packets_per_decision)
    d = np.array([unit_distance(prof, u) for u in impostor_csi])
    prof.threshold = float(np.quantile(d, fpr_target))
    prof.impostor_distances = d
    return prof


def authenticate(profile: DeviceProfile, csi_or_batch) -> tuple[bool, float]:
    """Accept iff the normalized distance is at most the threshold."""
    unit = np.asarray(csi_or_batch)
    if profile.packets_per_decision > 1 and (unit.ndim != 4 or unit.shape[0] != profile.packets_per_decision):
        raise ValueError(f"expected a batch of {profile.packets_per_decision} packets")
    d = unit_distance(profile, unit)
    return d <= profile.threshold, d


# -- key generation -----------------------------------------------------------


@dataclass(frozen=True)
class KeyConfig:
    """``levels`` must be a power of two; ``guard`` is the dropped fraction of each level."""

    levels: int = 4
    normalization: str = "per-subcarrier"
    agreement_threshold: float = 0.9
    guard: float = 0.1

    def __post_init__(self):
        if self.levels < 2 or self.levels & (self.levels - 1):
            raise ValueError("levels must be a power of two >= 2")
        if self.normalization not in ("per-subcarrier", "global"):
            raise ValueError("normalization must be 'per-subcarrier' or 'global'")
        if not 0 <= self.guard < 1:
            raise ValueError("guard must lie in [0, 1)")
        if not 0 < self.agreement_threshold <= 1:
            raise ValueError("agreement_threshold must lie in (0, 1]")

    @property
    def bits_per_sample(self) -> int:
        return self.levels.bit_length() - 1


def normalize_amplitudes(csi, cfg: KeyConfig) -> np.ndarray:
    """Amplitudes in [0, 1], shape ``(K, N*M)``.

    ``per-subcarrier`` scales each subcarrier's amplitude vector to unit norm;
    ``global`` is min-max over every sample.
    """
    a = np.abs(np.asarray(csi, dtype=complex))
    a = a.reshape(a.shape[0], -1)
    if cfg.normalization == "per-subcarrier":
        n = np.linalg.norm(a, axis=1, keepdims=True)
        return np.divide(a, n, out=np.zeros_like(a), where=n > 0)
    lo, hi = a.min(), a.max()
    return np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)


def quantize_samples(csi, cfg: KeyConfig) -> tuple[np.ndarray, np.ndarray]:
    """Level index per sample and the mask of samples outside the guard bands."""
    x = normalize_amplitudes(csi, cfg).ravel()
    scaled = x * cfg.levels
    lvl = np.clip(np.floor(scaled), 0, cfg.levels - 1).astype(np.int64)
    frac = scaled - lvl
    g = cfg.guard / 2
    keep = (frac >= g) & (frac <= 1 - g)
    # the outer edges of the first and last level have no neighbour to confuse
    keep |= (lvl == 0) & (frac < g)
    keep |= (lvl == cfg.levels - 1) & (frac > 1 - g)
    return lvl, keep


def gray_bits(levels: np.ndarray, bits_per_sample: int) -> np.ndarray:
    g = levels ^ (levels >> 1)
    shifts = np.arange(bits_per_sample - 1, -1, -1)
    return ((g[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def generate_key(csi, cfg: KeyConfig | None = None, keep: np.ndarray | None = None) -> np.ndarray:
    """Gray-coded bits of the guard-filtered samples.

    ``keep`` is the publicly exchanged sample mask; by default the key's own
    guard mask is used.
    """
    cfg = cfg or KeyConfig()
    lvl, own = quantize_samples(csi, cfg)
    mask = own if keep is None else np.asarray(keep, dtype=bool)
    if mask.shape != lvl.shape:
        raise ValueError("sample mask does not match the CSI")
    return gray_bits(lvl[mask], cfg.bits_per_sample)


def key_agreement(key_a, key_b) -> float:
    a, b = np.asarray(key_a), np.asarray(key_b)
    if a.shape != b.shape:
        raise ValueError("keys differ in length")
    return float(np.mean(a == b)) if a.size else 0.0


def key_attack_success(true_key, adversary_key, cfg: KeyConfig | None = None) -> tuple[bool, float]:
    """Success iff agreement reaches the reconciliation tolerance."""
    cfg = cfg or KeyConfig()
    ag = key_agreement(true_key, adversary_key)
    return ag >= cfg.agreement_threshold, ag


# -- targets and attempts -----------------------------------------------------


class AuthTarget:
    def __init__(self, profile: DeviceProfile):
        self.profile = profile

    def attempt(self, payload) -> tuple[bool, float]:
        return authenticate(self.profile, payload)


class KeyTarget:
    """Holds the legitimate key and its public sample mask."""

    def __init__(self, truth_csi, cfg: KeyConfig):
        self.cfg = cfg
        lvl, self.keep = quantize_samples(truth_csi, cfg)
        self.key = gray_bits(lvl[self.keep], cfg.bits_per_sample)

    def attempt(self, payload) -> tuple[bool, float]:
        adv = generate_key(payload, self.cfg, keep=self.keep)
        return key_attack_success(self.key, adv, self.cfg)


@dataclass
class AttackTrial:
    scenario_id: int
    application: str
    Q: int
    outcomes: list[bool] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    candidate_count: int = 0
    truth: np.ndarray | None = field(default=None, repr=False)
    report: object = field(default=None, repr=False)
    candidates: list = field(default_factory=list, repr=False)
    notes: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return any(self.outcomes[: self.Q])

    def success_within(self, q: int) -> bool:
        return any(self.outcomes[: min(q, self.Q)])


def consume_attempts(target, payloads, Q: int) -> tuple[list[bool], list[float]]:
    """Try payloads in order until one succeeds or ``Q`` are used."""
    outcomes, scores = [], []
    for p in list(payloads)[:Q]:
        ok, score = target.attempt(p)
        outcomes.append(bool(ok))
        scores.append(float(score))
        if ok:
            break
    return outcomes, scores


def compute_asr(trials) -> float:
    """Successful trials over all trials, in percent."""
    trials = list(trials)
    if not trials:
        raise ValueError("no trials")
    return 100.0 * sum(t.success for t in trials) / len(trials)
