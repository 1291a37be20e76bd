"""Feasibility filters for reconstructed CSI.

Two independent checks: per-element amplitude bounds implied by the
downlink feedback and ASNR, and consistency of the earliest path delay with
the known AP-STA distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import SPEED_OF_LIGHT
from .codec import BfiReport, angle_count, reconstruct_v_tilde

DEFAULT_SLACK = 0.02


@dataclass
class AmplitudeBounds:
    """``h_min[k, v, u]`` and ``h_max[k, v, u]``."""

    h_min: np.ndarray
    h_max: np.ndarray

    def __post_init__(self):
        if self.h_min.shape != self.h_max.shape:
            raise ValueError("bound arrays differ in shape")
        if np.any(self.h_min < 0) or np.any(self.h_min > self.h_max + 1e-12):
            raise ValueError("bounds must satisfy 0 <= h_min <= h_max")

    def pooled(self) -> "AmplitudeBounds":
        """One interval per antenna pair, the union over subcarriers."""
        lo = np.broadcast_to(self.h_min.min(axis=0), self.h_min.shape).copy()
        hi = np.broadcast_to(self.h_max.max(axis=0), self.h_max.shape).copy()
        return AmplitudeBounds(lo, hi)


@dataclass(frozen=True)
class TofContext:
    distance: float
    bandwidth: float

    def __post_init__(self):
        if not (self.distance > 0 and self.bandwidth > 0):
            raise ValueError("distance and bandwidth must be positive")

    @property
    def t_real(self) -> float:
        return self.distance / SPEED_OF_LIGHT

    @property
    def resolution(self) -> float:
        return 1.0 / self.bandwidth


@dataclass(frozen=True)
class BoundSearchConfig:
    """Uplink-angle grid for the bound search.

    ``None`` point counts mean the report's codebook resolution.  ``phi_range``
    is ``2pi`` for the full codebook or ``pi`` for the half-range reading.
    """

    phi_points: int | None = None
    psi_points: int | None = None
    phi_range: float = 2 * np.pi
    pooled: bool = False
    max_grid: int = 200_000


def uplink_magnitude_grid(report: BfiReport, bsc: BoundSearchConfig) -> np.ndarray:
    """``|V_ul|`` for every grid point, shape ``(G, N, Ns)``."""
    N, ns = report.sta_antennas, report.streams
    n = angle_count(N, ns)
    if n == 0:
        return np.ones((1, N, ns))
    q = report.quant
    n_phi = bsc.phi_points or 2 ** q.phi_bits
    n_psi = bsc.psi_points or 2 ** q.psi_bits
    if (n_phi * n_psi) ** n > bsc.max_grid:
        raise ValueError("uplink angle grid too large; lower the bound-search resolution")
    phi_1d = (np.arange(n_phi) + 0.5) * bsc.phi_range / n_phi
    psi_1d = np.linspace(0.0, np.pi / 2, n_psi) if n_psi > 1 else np.array([np.pi / 4])
    grids = np.meshgrid(*([phi_1d] * n + [psi_1d] * n), indexing="ij")
    flat = np.stack([g.ravel() for g in grids], axis=-1)
    V = reconstruct_v_tilde(flat[:, :n], flat[:, n:], N, ns)
    return np.abs(V)


def amplitude_bounds(report: BfiReport, p_tx: float = 1.0, p_n: float = 1.0,
                     bsc: BoundSearchConfig | None = None, sigma=None) -> AmplitudeBounds:
    """Per-element amplitude interval implied by the feedback.

    Each element is ``|sum_i z_i|`` with ``|z_i| = sigma_i |V_ul[v,i]| |V_dl[u,i]|``
    and free phases, so over the uplink grid the magnitude is at most
    ``Z = sum |z_i|`` and at least ``max(0, 2 max|z_i| - Z)``.

    ``sigma`` overrides the ASNR-derived singular values, either per stream or
    per subcarrier ``(K, Ns)``; only a simulation oracle knows the latter.
    """
    bsc = bsc or BoundSearchConfig()
    sigma = report.sigma_bar(p_tx, p_n) if sigma is None else np.asarray(sigma, dtype=float)
    if sigma.ndim == 2:
        sigma = sigma[:, None, :]
    v_dl = np.abs(report.v_tilde())                     # (K, M, Ns)
    v_ul = uplink_magnitude_grid(report, bsc)           # (G, N, Ns)
    # rows of the uplink grid repeat heavily; deduplicate to save work
    v_ul = np.unique(np.round(v_ul, 12).reshape(v_ul.shape[0], -1), axis=0).reshape(-1, *v_ul.shape[1:])
    z = (sigma * v_ul[:, None])[:, :, :, None, :] * v_dl[None, :, None, :, :]   # (G, K, N, M, Ns)
    Z = z.sum(axis=-1)
    lo = np.maximum(0.0, 2 * z.max(axis=-1) - Z)
    bounds = AmplitudeBounds(lo.min(axis=0), Z.max(axis=0))
    return bounds.pooled() if bsc.pooled else bounds


def theory_filter(csi: np.ndarray, bounds: AmplitudeBounds, slack: float = DEFAULT_SLACK) -> bool:
    """Every element inside ``[h_min (1 - slack), h_max (1 + slack)]`` (closed)."""
    if slack < 0:
        raise ValueError("slack must be non-negative")
    amp = np.abs(np.asarray(csi))
    if amp.shape != bounds.h_max.shape:
        raise ValueError("candidate and bounds differ in shape")
    return bool(np.all(amp >= bounds.h_min * (1 - slack)) and np.all(amp <= bounds.h_max * (1 + slack)))


def tof_filter(t_rec: float, ctx: TofContext) -> bool:
    """``t_real - 1/B <= t_rec <= t_real + 1/B``."""
    return bool(ctx.t_real - ctx.resolution <= t_rec <= ctx.t_real + ctx.resolution)


def filter_candidates(candidates: list, bounds: AmplitudeBounds | None, ctx: TofContext | None,
                      slack: float = DEFAULT_SLACK) -> list:
    """Keep candidates that pass both checks, preserving order.

    Verdicts are written onto each candidate (``theory`` and ``tof`` keys); a
    ``None`` bound or context skips that check.
    """
    kept = []
    for c in candidates:
        th = True if bounds is None else theory_filter(c.csi, bounds, slack)
        tf = True if ctx is None else tof_filter(c.los_delay, ctx)
        c.verdicts = {**c.verdicts, "theory": th, "tof": tf}
        if th and tf:
            kept.append(c)
    return kept

