"""Cross-antenna-pair amplitude refinement.

Amplitude profiles of closely spaced antenna pairs are strongly correlated,
so a through-origin linear map from one reference pair to every other pair
is learned on adversary-side channels and applied to reconstructed CSI.

Antenna pairs are indexed AP-major: pair ``e = u * N + v`` for AP antenna
``u`` and STA antenna ``v``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np


def pearson(x, y, with_flag: bool = False):
    """Sample Pearson correlation.  Zero-variance input gives 0 (flagged)."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("inputs need equal length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.linalg.norm(xc), np.linalg.norm(yc)
    # spread at rounding level counts as constant
    degenerate = bool(nx <= 1e-12 * np.linalg.norm(x) or ny <= 1e-12 * np.linalg.norm(y)
                      or nx * ny <= 1e-300)
    r = 0.0 if degenerate else float(np.clip(np.sum(xc * yc) / (nx * ny), -1.0, 1.0))
    return (r, degenerate) if with_flag else r


def pair_profiles(csi) -> np.ndarray:
    """Amplitude per antenna pair over subcarriers, shape ``(M*N, K)``."""
    a = np.abs(np.asarray(csi))
    if a.ndim != 3:
        raise ValueError("CSI must have shape (K, N, M)")
    K = a.shape[0]
    return np.transpose(a, (2, 1, 0)).reshape(-1, K)


def _profiles_to_amplitude(prof: np.ndarray, N: int, M: int) -> np.ndarray:
    K = prof.shape[-1]
    return np.transpose(prof.reshape(M, N, K), (2, 1, 0))


def correlation_matrix(training_csi) -> np.ndarray:
    """Pairwise Pearson correlation of pair profiles, averaged over packets."""
    mats = []
    for csi in training_csi:
        prof = pair_profiles(csi)
        E = prof.shape[0]
        C = np.eye(E)
        for i in range(E):
            for j in range(i + 1, E):
                C[i, j] = C[j, i] = pearson(prof[i], prof[j])
        mats.append(C)
    return np.mean(mats, axis=0)


def select_reference_pair(training_csi) -> int:
    """Pair with the highest mean correlation to all others (lowest index on ties)."""
    training_csi = list(training_csi)
    if len(training_csi) < 2:
        raise ValueError("at least two training packets are required")
    C = correlation_matrix(training_csi)
    E = C.shape[0]
    if E < 2:
        raise ValueError("at least two antenna pairs are required")
    mean_corr = (C.sum(axis=1) - 1.0) / (E - 1)
    # round so float noise cannot break exact ties
    return int(np.argmax(np.round(mean_corr, 12)))


@dataclass
class RefinementModel:
    reference: int
    weights: np.ndarray          # (E,) pooled or (E, K) per subcarrier
    correlation: np.ndarray      # (E, E) training correlation matrix
    per_subcarrier: bool = False

    @property
    def pair_count(self) -> int:
        return self.weights.shape[0]

    def to_json(self) -> str:
        return json.dumps({
            "reference": self.reference,
            "weights": self.weights.tolist(),
            "correlation": self.correlation.tolist(),
            "per_subcarrier": self.per_subcarrier,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RefinementModel":
        d = json.loads(text)
        return cls(int(d["reference"]), np.array(d["weights"], dtype=float),
                   np.array(d["correlation"], dtype=float), bool(d["per_subcarrier"]))


def fit_weights(training_csi, reference: int | None = None,
                per_subcarrier: bool = False) -> RefinementModel:
    """Least-squares slope through the origin, ``mu = sum(b b_ref) / sum(b_ref^2)``.

    Pooled over packets and subcarriers unless ``per_subcarrier`` is set.
    """
    training_csi = list(training_csi)
    if reference is None:
        reference = select_reference_pair(training_csi)
    prof = np.stack([pair_profiles(c) for c in training_csi])   # (packets, E, K)
    ref = prof[:, reference]
    if per_subcarrier:
        den = np.sum(ref ** 2, axis=0)
        num = np.sum(prof * ref[:, None], axis=0)
    else:
        den = np.sum(ref ** 2)
        num = np.sum(prof * ref[:, None], axis=(0, 2))
    if np.any(den <= 0):
        raise ValueError("reference pair amplitudes are all zero")
    weights = num / den
    return RefinementModel(reference, weights, correlation_matrix(training_csi), per_subcarrier)


def refine_csi(csi: np.ndarray, model: RefinementModel, blend: float = 1.0) -> np.ndarray:
    """Replace each non-reference amplitude profile by ``mu * reference``; phases kept.

    ``blend`` in [0, 1] mixes the original (0) and predicted (1) amplitudes.
    """
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must lie in [0, 1]")
    csi = np.asarray(csi)
    K, N, M = csi.shape
    prof = pair_profiles(csi)
    if prof.shape[0] != model.pair_count:
        raise ValueError("candidate and model antenna-pair counts differ")
    ref = prof[model.reference]
    w = model.weights if model.per_subcarrier else model.weights[:, None]
    pred = w * ref
    pred[model.reference] = ref
    new = (1 - blend) * prof + blend * pred
    amp = _profiles_to_amplitude(new, N, M)
    return amp * np.exp(1j * np.angle(csi))


def apply_refinement(candidate, model: RefinementModel, blend: float = 1.0):
    """Refined copy of a candidate; loss and delay are carried over unchanged."""
    return replace(candidate, csi=refine_csi(candidate.csi, model, blend))
