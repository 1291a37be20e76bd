"""Closed-form CSI amplitude and relative phase for a single-antenna station.

With one station antenna the channel on subcarrier ``k`` is a row vector
``h = sigma * conj(v)^T`` up to a common phase, so the feedback vector alone
fixes the amplitude profile across AP antennas and the ASNR fixes its scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import BfiReport

PHASE_POLICIES = ("zero", "relative")


@dataclass
class ClosedFormResult:
    """``amplitudes[k, m]`` and ``relative_phases[k, m1, m2] = beta[m2] - beta[m1]``,
    where ``beta`` is the phase of the feedback entry."""

    amplitudes: np.ndarray
    relative_phases: np.ndarray
    sigma_bar: float

    @property
    def K(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def M(self) -> int:
        return self.amplitudes.shape[1]


def reconstruct_single_antenna(report: BfiReport, p_tx: float = 1.0, p_n: float = 1.0) -> ClosedFormResult:
    """Amplitude ``|v[m]| * sigma_bar`` per subcarrier and antenna.

    ``sigma_bar`` is the geometric-mean singular value implied by the ASNR and
    is applied uniformly across subcarriers.
    """
    if report.streams != 1 or report.sta_antennas != 1:
        raise ValueError("closed-form reconstruction needs a one-stream report from a single-antenna station")
    if report.asnr is None or report.asnr.size == 0 or not np.all(np.isfinite(report.asnr)):
        raise ValueError("report carries no usable ASNR")
    return from_feedback(report.v_tilde()[..., 0], float(report.sigma_bar(p_tx, p_n)[0]))


def from_feedback(v, sigma_bar: float) -> ClosedFormResult:
    """Closed form from a feedback vector per subcarrier ``v[k, m]`` and a singular value."""
    v = np.atleast_2d(np.asarray(v, dtype=complex))
    if not np.all(np.isfinite(v)) or not np.isfinite(sigma_bar) or sigma_bar < 0:
        raise ValueError("feedback and singular value must be finite")
    beta = np.angle(v)
    rel = beta[:, None, :] - beta[:, :, None]
    return ClosedFormResult(amplitudes=np.abs(v) * sigma_bar, relative_phases=rel, sigma_bar=float(sigma_bar))


def to_csi_tensor(result: ClosedFormResult, phase_policy: str = "zero") -> np.ndarray:
    """Assemble a ``(K, 1, M)`` CSI tensor.

    ``zero`` gives real non-negative entries.  ``relative`` anchors the last
    antenna at phase 0 and sets ``arg H[m1] - arg H[m2] = relative_phases[m1, m2]``,
    which is the physical relation since ``h`` is the conjugate of the feedback.
    """
    if phase_policy not in PHASE_POLICIES:
        raise ValueError(f"phase_policy must be one of {PHASE_POLICIES}")
    b = result.amplitudes
    if phase_policy == "zero":
        return b[:, None, :].astype(complex)
    phase = result.relative_phases[:, :, -1]
    return (b * np.exp(1j * phase))[:, None, :]
