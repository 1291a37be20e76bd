"""Geometric multipath MIMO channel synthesis.

CSI tensors are plain complex ndarrays of shape ``(K, N, M)``: subcarrier,
STA antenna, AP antenna.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

# OFDM subcarrier counts per channel width.
DEFAULT_SUBCARRIERS = {20e6: 64, 40e6: 128, 80e6: 256, 160e6: 512}


@dataclass(frozen=True)
class ArrayConfig:
    """AP/STA uniform linear arrays plus the OFDM subcarrier grid."""

    tx_antennas: int
    rx_antennas: int
    carrier_freq: float = 5.18e9
    bandwidth: float = 20e6
    subcarrier_count: int | None = None
    spacing: float | None = None
    streams: int | None = None

    def __post_init__(self):
        if self.tx_antennas < 1 or self.rx_antennas < 1:
            raise ValueError("antenna counts must be positive")
        if not (self.carrier_freq > 0 and self.bandwidth > 0):
            raise ValueError("carrier frequency and bandwidth must be positive")
        if self.subcarrier_count is None:
            k = DEFAULT_SUBCARRIERS.get(float(self.bandwidth))
            if k is None:
                k = max(2, int(round(64 * self.bandwidth / 20e6)))
            object.__setattr__(self, "subcarrier_count", k)
        if self.subcarrier_count < 1:
            raise ValueError("subcarrier_count must be positive")
        if self.spacing is None:
            object.__setattr__(self, "spacing", SPEED_OF_LIGHT / self.carrier_freq / 2)
        if not self.spacing > 0:
            raise ValueError("antenna spacing must be positive")
        max_streams = min(self.tx_antennas, self.rx_antennas)
        if self.streams is None:
            object.__setattr__(self, "streams", max_streams)
        if not 1 <= self.streams <= max_streams:
            raise ValueError(f"streams must lie in [1, {max_streams}]")

    @property
    def M(self) -> int:
        return self.tx_antennas

    @property
    def N(self) -> int:
        return self.rx_antennas

    @property
    def K(self) -> int:
        return self.subcarrier_count

    @property
    def subcarrier_freqs(self) -> np.ndarray:
        if self.K == 1:
            return np.array([self.carrier_freq])
        half = self.bandwidth / 2
        return np.linspace(self.carrier_freq - half, self.carrier_freq + half, self.K)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayConfig":
        return cls(**d)


@dataclass(frozen=True)
class PathParams:
    """One propagation path: complex gain, delay (s), AoA and AoD (rad)."""

    gain: complex
    delay: float
    aoa: float
    aod: float

    def __post_init__(self):
        vals = (self.gain.real, self.gain.imag, self.delay, self.aoa, self.aod)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("path parameters must be finite")
        if abs(self.gain) <= 0:
            raise ValueError("path gain must be nonzero")
        if self.delay < 0:
            raise ValueError("path delay must be non-negative")
        if abs(self.aoa) >= np.pi / 2 or abs(self.aod) >= np.pi / 2:
            raise ValueError("angles must lie in (-pi/2, pi/2)")


def steering_vector(freq: float, angle: float, count: int, spacing: float) -> np.ndarray:
    """ULA response ``exp(-j 2 pi f s q sin(angle) / c)`` for q = 0..count-1."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not all(np.isfinite(v) for v in (freq, angle, spacing)):
        raise ValueError("non-finite steering vector input")
    if abs(angle) >= np.pi / 2:
        raise ValueError("angle must lie in (-pi/2, pi/2)")
    q = np.arange(count)
    return np.exp(-2j * np.pi * freq * spacing * q * np.sin(angle) / SPEED_OF_LIGHT)


def steering_matrix(freqs, angles, count: int, spacing: float) -> np.ndarray:
    """Vectorised steering vectors; returns shape ``angles.shape + (K, count)``."""
    freqs = np.asarray(freqs, dtype=float)
    s = np.sin(np.asarray(angles, dtype=float))[..., None, None]
    q = np.arange(count)
    return np.exp(-2j * np.pi * spacing / SPEED_OF_LIGHT * s * freqs[:, None] * q)


def synthesize_csi(paths: list[PathParams], config: ArrayConfig) -> np.ndarray:
    """Sum of rank-one path contributions on every subcarrier, shape (K, N, M)."""
    if not paths:
        raise ValueError("at least one path is required")
    f = config.subcarrier_freqs
    H = np.zeros((config.K, config.N, config.M), dtype=complex)
    for p in paths:
        a = steering_matrix(f, p.aoa, config.N, config.spacing)
        d = steering_matrix(f, p.aod, config.M, config.spacing)
        phase = p.gain * np.exp(-2j * np.pi * f * p.delay)
        H += phase[:, None, None] * a[:, :, None] * d.conj()[:, None, :]
    return H


def add_noise(H: np.ndarray, snr_db: float | None, rng: np.random.Generator) -> np.ndarray:
    """Complex Gaussian measurement noise at ``snr_db`` relative to mean |H|^2."""
    if snr_db is None:
        return H
    power = np.mean(np.abs(H) ** 2) / 10 ** (snr_db / 10)
    noise = rng.normal(size=H.shape) + 1j * rng.normal(size=H.shape)
    return H + np.sqrt(power / 2) * noise


@dataclass(frozen=True)
class ScenarioConfig:
    """Bounds for random room-scale scenarios."""

    tx_antennas: int = 2
    rx_antennas: int = 2
    bandwidth: float = 20e6
    carrier_freq: float = 5.18e9
    streams: int | None = None
    distance: float = 3.0
    path_count: tuple[int, int] = (2, 3)
    los_gain: tuple[float, float] = (0.8, 1.2)
    nlos_ratio: tuple[float, float] = (0.1, 0.6)
    max_delay_factor: float = 4.0
    angle_limit: float = 1.4
    # measurement noise on the ground truth; None disables it
    snr_db: float | None = None
    gain_jitter: float = 0.03
    # transmit and noise power behind the reported ASNR
    tx_power: float = 1000.0
    noise_power: float = 1.0

    def __post_init__(self):
        lo, hi = self.path_count
        if not 1 <= lo <= hi:
            raise ValueError("path_count must satisfy 1 <= lo <= hi")
        if self.distance <= 0:
            raise ValueError("distance must be positive")
        if not 0 < self.los_gain[0] <= self.los_gain[1]:
            raise ValueError("invalid LoS gain range")
        if not 0 < self.nlos_ratio[0] < self.nlos_ratio[1] < 1:
            raise ValueError("NLoS ratio range must lie strictly inside (0, 1)")
        if self.max_delay_factor <= 1:
            raise ValueError("max_delay_factor must exceed 1")
        if not 0 < self.angle_limit < np.pi / 2:
            raise ValueError("angle_limit must lie in (0, pi/2)")
        if not (self.tx_power > 0 and self.noise_power > 0):
            raise ValueError("powers must be positive")

    def array_config(self) -> ArrayConfig:
        return ArrayConfig(
            tx_antennas=self.tx_antennas,
            rx_antennas=self.rx_antennas,
            carrier_freq=self.carrier_freq,
            bandwidth=self.bandwidth,
            streams=self.streams,
        )

    def with_(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


def sample_random_scenario(rng_seed, scenario: ScenarioConfig) -> tuple[list[PathParams], ArrayConfig]:
    """Draw a LoS path at ``distance / c`` plus weaker, later NLoS paths."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    config = scenario.array_config()
    lo, hi = scenario.path_count
    P = int(rng.integers(lo, hi + 1))
    t_los = scenario.distance / SPEED_OF_LIGHT
    lim = scenario.angle_limit

    los_mag = rng.uniform(*scenario.los_gain)
    ratios = np.sort(rng.uniform(*scenario.nlos_ratio, size=P - 1))[::-1]
    excess = np.sort(rng.uniform(0.0, 1.0, size=P - 1))
    # strictly increasing, strictly inside (t_los, max_delay_factor * t_los]
    delays = t_los * (1 + (scenario.max_delay_factor - 1) * (excess + np.arange(1, P)) / P)
    paths = [PathParams(
        gain=complex(los_mag * np.exp(1j * rng.uniform(0, 2 * np.pi))),
        delay=t_los,
        aoa=float(rng.uniform(-lim, lim)),
        aod=float(rng.uniform(-lim, lim)),
    )]
    for ratio, t in zip(ratios, delays):
        paths.append(PathParams(
            gain=complex(ratio * los_mag * np.exp(1j * rng.uniform(0, 2 * np.pi))),
            delay=float(t),
            aoa=float(rng.uniform(-lim, lim)),
            aod=float(rng.uniform(-lim, lim)),
        ))
    return paths, config


def perturb_paths(paths: list[PathParams], rng: np.random.Generator, jitter: float) -> list[PathParams]:
    """Small multiplicative complex jitter on each path gain (packet-to-packet drift)."""
    out = []
    for p in paths:
        g = p.gain * (1 + jitter * (rng.normal() + 1j * rng.normal()) / np.sqrt(2))
        out.append(replace(p, gain=complex(g)))
    return out
