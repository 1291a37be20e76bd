"""Station-side beamforming feedback: SVD, phase adjustment, Givens angles, ASNR.

Angles for one subcarrier are stored column by column: for column ``i`` the
phases ``phi[i, l]`` for rows ``l = i .. M-2`` and rotations ``psi[l, i]`` for
rows ``l = i+1 .. M-1`` (0-based).  Both lists have the same length
``sum(M - 1 - i for i < min(Ns, M - 1))``.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class QuantConfig:
    psi_bits: int = 4
    phi_bits: int = 6
    asnr_step: float = 0.25
    asnr_range: tuple[float, float] = (-10.0, 53.75)

    def __post_init__(self):
        if self.psi_bits < 1 or self.phi_bits < 1:
            raise ValueError("bit depths must be >= 1")
        if self.asnr_step <= 0 or self.asnr_range[0] >= self.asnr_range[1]:
            raise ValueError("invalid ASNR quantizer")

    @property
    def phi_step(self) -> float:
        return np.pi / 2 ** (self.phi_bits - 1)

    @property
    def psi_step(self) -> float:
        return np.pi / 2 ** (self.psi_bits + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["asnr_range"] = list(self.asnr_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        d = dict(d)
        d["asnr_range"] = tuple(d["asnr_range"])
        return cls(**d)


@dataclass
class SvdResult:
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray


def compute_svd(H, streams: int | None = None) -> SvdResult:
    """Thin SVD of an N x M matrix (or a stack of them), truncated to ``streams``.

    Singular values come out descending; equal values keep their index order.
    """
    H = np.asarray(H, dtype=complex)
    if H.ndim < 2 or min(H.shape[-2:]) < 1:
        raise ValueError("H must be at least 1x1")
    if not np.all(np.isfinite(H)):
        raise ValueError("H contains non-finite entries")
    ns = min(H.shape[-2:]) if streams is None else streams
    if not 1 <= ns <= min(H.shape[-2:]):
        raise ValueError("streams out of range")
    U, s, Vh = np.linalg.svd(H, full_matrices=False)
    order = np.argsort(-s, axis=-1, kind="stable")
    s = np.take_along_axis(s, order, axis=-1)
    U = np.take_along_axis(U, order[..., None, :], axis=-1)
    V = np.take_along_axis(np.conj(np.swapaxes(Vh, -1, -2)), order[..., None, :], axis=-1)
    return SvdResult(U=U[..., :ns], singular_values=s[..., :ns], V=V[..., :ns])


def phase_adjust(V) -> np.ndarray:
    """Rotate each column so its last-row entry is real and non-negative."""
    V = np.asarray(V, dtype=complex)
    last = V[..., -1:, :]
    ph = np.where(np.abs(last) < DEGENERATE_TOL, 0.0, np.angle(last))
    return V * np.exp(-1j * ph)


def angle_count(M: int, streams: int) -> int:
    return sum(M - 1 - i for i in range(min(streams, M - 1)))


def angle_layout(M: int, streams: int) -> list[tuple[int, int]]:
    """(column, row) pairs in storage order; the phi at that slot acts on row
    ``row - 1`` of the column and the psi rotates ``row`` into the column index."""
    return [(i, l) for i in range(min(streams, M - 1)) for l in range(i + 1, M)]


def extract_givens_angles(v_tilde) -> tuple[np.ndarray, np.ndarray]:
    """Invert the Givens cascade. Accepts ``(M, Ns)`` or ``(..., M, Ns)``.

    Returns ``(phi, psi)`` with phi in [0, 2pi) and psi in [0, pi/2].
    """
    V = np.array(v_tilde, dtype=complex)
    M, ns = V.shape[-2:]
    norms = np.linalg.norm(V, axis=-2)
    if np.any(np.abs(norms - 1) > 1e-6):
        raise ValueError("columns of v_tilde must be unit-norm")
    phis, psis = [], []
    for i in range(min(ns, M - 1)):
        block = V[..., i:M - 1, i]
        ph = np.where(np.abs(block) < DEGENERATE_TOL, 0.0, np.mod(np.angle(block), 2 * np.pi))
        # angle() of values just below the positive real axis rounds up to 2pi
        ph = np.where(ph >= 2 * np.pi, 0.0, ph)
        V[..., i:M - 1, :] *= np.exp(-1j * ph)[..., None]
        for j in range(ph.shape[-1]):
            phis.append(ph[..., j])
        for l in range(i + 1, M):
            x = np.maximum(V[..., i, i].real, 0.0)
            y = np.maximum(V[..., l, i].real, 0.0)
            y = np.where(y < DEGENERATE_TOL, 0.0, y)
            psi = np.arctan2(y, x)
            c, s = np.cos(psi)[..., None], np.sin(psi)[..., None]
            row_i, row_l = V[..., i, :].copy(), V[..., l, :].copy()
            V[..., i, :] = c * row_i + s * row_l
            V[..., l, :] = -s * row_i + c * row_l
            psis.append(psi)
    lead = V.shape[:-2]
    if not phis:
        empty = np.zeros(lead + (0,))
        return empty, empty.copy()
    return np.stack(phis, axis=-1), np.stack(psis, axis=-1)


def reconstruct_v_tilde(phi, psi, M: int, streams: int) -> np.ndarray:
    """Evaluate the cascade ``prod_i D_i prod_l G_{l,i}^T`` applied to ``I_{M x Ns}``."""
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    n = angle_count(M, streams)
    if phi.shape[-1] != n or psi.shape != phi.shape:
        raise ValueError(f"expected {n} phi and psi angles per subcarrier")
    lead = phi.shape[:-1]
    X = np.zeros(lead + (M, streams), dtype=complex)
    X[..., np.arange(streams), np.arange(streams)] = 1.0
    layout = angle_layout(M, streams)
    for i in reversed(range(min(streams, M - 1))):
        cols = [k for k, (ci, _) in enumerate(layout) if ci == i]
        for k in reversed(cols):
            l = layout[k][1]
            c, s = np.cos(psi[..., k])[..., None], np.sin(psi[..., k])[..., None]
            row_i, row_l = X[..., i, :].copy(), X[..., l, :].copy()
            X[..., i, :] = c * row_i - s * row_l
            X[..., l, :] = s * row_i + c * row_l
        X[..., i:M - 1, :] *= np.exp(1j * phi[..., cols])[..., None]
    return X


def quantize_angles(phi, psi, quant: QuantConfig) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-codeword indices on the midpoint grids (phi wraps around)."""
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    n_phi, n_psi = 2 ** quant.phi_bits, 2 ** quant.psi_bits
    phi_idx = np.mod(np.floor(np.mod(phi, 2 * np.pi) / quant.phi_step), n_phi).astype(np.int64)
    psi_idx = np.clip(np.floor(psi / quant.psi_step), 0, n_psi - 1).astype(np.int64)
    return phi_idx, psi_idx


def dequantize_angles(phi_idx, psi_idx, quant: QuantConfig) -> tuple[np.ndarray, np.ndarray]:
    phi = (np.asarray(phi_idx) + 0.5) * quant.phi_step
    psi = (np.asarray(psi_idx) + 0.5) * quant.psi_step
    return phi, psi


def compute_asnr(sigma, p_tx: float = 1.0, p_n: float = 1.0,
                 quant: QuantConfig | None = None, quantize: bool = True) -> np.ndarray:
    """Per-stream ASNR in dB from a ``(K, Ns)`` array of singular values."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if p_tx <= 0 or p_n <= 0:
        raise ValueError("powers must be positive")
    if np.any(sigma < 1e-12):
        warnings.warn("zero singular value replaced by 1e-12 floor", RuntimeWarning, stacklevel=2)
        sigma = np.maximum(sigma, 1e-12)
    asnr = np.mean(10 * np.log10(p_tx * sigma ** 2 / p_n), axis=0)
    if not quantize:
        return asnr
    quant = quant or QuantConfig()
    lo, hi = quant.asnr_range
    q = np.floor(asnr / quant.asnr_step + 0.5) * quant.asnr_step
    return np.clip(q, lo, hi)


def asnr_to_sigma_bar(asnr, p_tx: float = 1.0, p_n: float = 1.0) -> np.ndarray:
    """Geometric-mean singular value per stream implied by an ASNR value."""
    return 10 ** (np.asarray(asnr, dtype=float) / 20) * np.sqrt(p_n / p_tx)


@dataclass
class BfiReport:
    """What a passive sniffer sees: angle indices per subcarrier and ASNR."""

    M: int
    streams: int
    phi_idx: np.ndarray
    psi_idx: np.ndarray
    asnr: np.ndarray
    quant: QuantConfig
    sta_antennas: int = 1

    def __post_init__(self):
        n = angle_count(self.M, self.streams)
        self.phi_idx = np.asarray(self.phi_idx, dtype=np.int64).reshape(-1, n)
        self.psi_idx = np.asarray(self.psi_idx, dtype=np.int64).reshape(-1, n)
        self.asnr = np.asarray(self.asnr, dtype=float).reshape(self.streams)

    @property
    def K(self) -> int:
        return self.phi_idx.shape[0]

    def angles(self) -> tuple[np.ndarray, np.ndarray]:
        return dequantize_angles(self.phi_idx, self.psi_idx, self.quant)

    def v_tilde(self) -> np.ndarray:
        """Dequantized feedback matrices, shape ``(K, M, Ns)``."""
        phi, psi = self.angles()
        return reconstruct_v_tilde(phi, psi, self.M, self.streams)

    def sigma_bar(self, p_tx: float = 1.0, p_n: float = 1.0) -> np.ndarray:
        return asnr_to_sigma_bar(self.asnr, p_tx, p_n)

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "N_s": self.streams,
            "N": self.sta_antennas,
            "quant": self.quant.to_dict(),
            "phi_idx": self.phi_idx.tolist(),
            "psi_idx": self.psi_idx.tolist(),
            "asnr": self.asnr.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BfiReport":
        return cls(M=d["M"], streams=d["N_s"], sta_antennas=d.get("N", 1),
                   phi_idx=np.array(d["phi_idx"]), psi_idx=np.array(d["psi_idx"]),
                   asnr=np.array(d["asnr"]), quant=QuantConfig.from_dict(d["quant"]))


def encode_bfi(csi, quant: QuantConfig | None = None, p_tx: float = 1.0, p_n: float = 1.0,
               streams: int | None = None) -> BfiReport:
    """Full sounding computation on a ``(K, N, M)`` CSI tensor."""
    quant = quant or QuantConfig()
    H = np.asarray(csi, dtype=complex)
    if H.ndim == 2:
        H = H[None]
    K, N, M = H.shape
    ns = min(M, N) if streams is None else streams
    svd = compute_svd(H, ns)
    v_tilde = phase_adjust(svd.V)
    phi, psi = extract_givens_angles(v_tilde)
    phi_idx, psi_idx = quantize_angles(phi, psi, quant)
    asnr = compute_asnr(svd.singular_values, p_tx, p_n, quant)
    return BfiReport(M=M, streams=ns, phi_idx=phi_idx, psi_idx=psi_idx,
                     asnr=asnr, quant=quant, sta_antennas=N)
