"""Multi-antenna CSI reconstruction by loss minimisation over path parameters.

The unknowns are per-path gain, delay, AoA and AoD plus a synthetic uplink
feedback matrix per subcarrier.  For any fixed set of paths the best uplink
matrix has a closed form (orthogonal Procrustes on ``W = H(paths) V_dl``), so
the search runs coordinate descent over the path parameters on that profiled
loss and reads the uplink angles off the optimum.

Internally a path is a row ``[|alpha|, baseband phase, aoa, aod, delay]``
where the carrier rotation ``exp(-j 2 pi f_c t)`` is folded into the phase,
which keeps the loss smooth in the delay coordinate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .channel import SPEED_OF_LIGHT, ArrayConfig, PathParams, steering_matrix, synthesize_csi
from .codec import BfiReport, extract_givens_angles, phase_adjust, reconstruct_v_tilde

log = logging.getLogger(__name__)

MAG, PHASE, AOA, AOD, DELAY = range(5)
GROUP_NAMES = ("magnitude", "phase", "aoa", "aod", "delay")
ANGLE_EDGE = np.pi / 2 - 1e-6


@dataclass
class OmegaParams:
    """Path list plus uplink Givens angles, one row of angles per subcarrier."""

    paths: list[PathParams]
    ul_phi: np.ndarray
    ul_psi: np.ndarray

    def __post_init__(self):
        if not self.paths:
            raise ValueError("at least one path is required")
        self.ul_phi = np.atleast_1d(np.asarray(self.ul_phi, dtype=float))
        self.ul_psi = np.atleast_1d(np.asarray(self.ul_psi, dtype=float))
        if self.ul_phi.shape != self.ul_psi.shape:
            raise ValueError("uplink phi/psi layouts differ")

    @property
    def los_delay(self) -> float:
        return min(p.delay for p in self.paths)

    def to_dict(self) -> dict:
        return {
            "paths": [{"gain": [p.gain.real, p.gain.imag], "delay": p.delay,
                       "aoa": p.aoa, "aod": p.aod} for p in self.paths],
            "ul_phi": self.ul_phi.tolist(),
            "ul_psi": self.ul_psi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OmegaParams":
        paths = [PathParams(complex(*p["gain"]), p["delay"], p["aoa"], p["aod"]) for p in d["paths"]]
        return cls(paths, np.array(d["ul_phi"]), np.array(d["ul_psi"]))


@dataclass
class ReconCandidate:
    omega: OmegaParams | None
    loss: float
    csi: np.ndarray
    los_delay: float
    restart: int = -1
    path_count: int = 0
    cycles: int = 0
    verdicts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"omega": self.omega.to_dict(), "loss": self.loss, "t_rec": self.los_delay,
                "restart": self.restart, "path_count": self.path_count, "cycles": self.cycles,
                "verdicts": dict(self.verdicts)}


class MleProblem:
    """Everything the loss needs from one captured report, precomputed."""

    def __init__(self, report: BfiReport, config: ArrayConfig, p_tx: float = 1.0, p_n: float = 1.0):
        if report.M != config.M or report.sta_antennas != config.N:
            raise ValueError("report and array configuration disagree")
        if report.K != config.K:
            raise ValueError("report subcarrier count differs from configuration")
        self.report = report
        self.config = config
        self.v_dl = report.v_tilde()
        self.sigma = report.sigma_bar(p_tx, p_n)
        self.freqs = config.subcarrier_freqs
        self.baseband = self.freqs - config.carrier_freq
        self.N, self.M, self.Ns = config.N, config.M, report.streams
        self.procrustes = self.Ns == self.N

    # -- path parameters <-> W = H V_dl ---------------------------------

    def path_w(self, rows: np.ndarray) -> np.ndarray:
        """Contribution of paths ``rows[..., 5]`` to ``H V_dl``; shape ``(..., K, N, Ns)``."""
        rows = np.asarray(rows, dtype=float)
        a = steering_matrix(self.freqs, rows[..., AOA], self.N, self.config.spacing)
        d = steering_matrix(self.freqs, rows[..., AOD], self.M, self.config.spacing)
        dv = np.einsum("...ku,kui->...ki", d.conj(), self.v_dl)
        coef = rows[..., MAG, None] * np.exp(
            1j * (rows[..., PHASE, None] - 2 * np.pi * self.baseband * rows[..., DELAY, None]))
        return (coef[..., None] * a)[..., :, :, None] * dv[..., :, None, :]

    def total_w(self, params: np.ndarray) -> np.ndarray:
        return self.path_w(params).sum(axis=-4)

    # -- losses --------------------------------------------------------------

    def profile_loss(self, W: np.ndarray) -> np.ndarray:
        """Loss minimised over the uplink matrix, summed over subcarriers."""
        sig = self.sigma
        if self.procrustes:
            A = W * sig
            fro_w = np.sum(np.abs(W) ** 2, axis=(-1, -2))
            if self.N == 1:
                nuc = np.sqrt(np.sum(np.abs(A) ** 2, axis=(-1, -2)))
            elif self.N == 2:
                det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
                nuc = np.sqrt(np.sum(np.abs(A) ** 2, axis=(-1, -2)) + 2 * np.abs(det))
            else:
                nuc = np.linalg.svd(A, compute_uv=False).sum(axis=-1)
            per_k = fro_w + np.sum(sig ** 2) - 2 * nuc
            return np.maximum(per_k, 0.0).sum(axis=-1)
        return self._grid_profile_loss(W)[0]

    def _ul_grid(self):
        if not hasattr(self, "_ul_cache"):
            from .codec import QuantConfig, angle_count, dequantize_angles
            q = self.report.quant
            n = angle_count(self.N, self.Ns)
            n_phi, n_psi = 2 ** q.phi_bits, 2 ** q.psi_bits
            grids = np.meshgrid(*([np.arange(n_phi)] * n + [np.arange(n_psi)] * n), indexing="ij")
            idx = np.stack([g.ravel() for g in grids], axis=-1)
            phi, psi = dequantize_angles(idx[:, :n], idx[:, n:], q)
            self._ul_cache = (phi, psi, reconstruct_v_tilde(phi, psi, self.N, self.Ns))
        return self._ul_cache

    def _grid_profile_loss(self, W):
        phi, psi, V = self._ul_grid()
        T = np.einsum("gvi,...kvj->...kgij", V, W)
        per = self._t_loss(T)
        best = per.argmin(axis=-1)
        return per.min(axis=-1).sum(axis=-1), best

    def _t_loss(self, T: np.ndarray) -> np.ndarray:
        diag = np.abs(np.diagonal(T, axis1=-2, axis2=-1))
        off = np.sum(np.abs(T) ** 2, axis=(-1, -2)) - np.sum(diag ** 2, axis=-1)
        return np.sum((diag - self.sigma) ** 2, axis=-1) + off

    def best_uplink(self, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Uplink Givens angles (per subcarrier) attaining the profiled loss."""
        if self.procrustes:
            U, _, Vh = np.linalg.svd(W * self.sigma)
            Q = np.conj(U) @ np.conj(Vh)
            return extract_givens_angles(phase_adjust(Q))
        phi, psi, _ = self._ul_grid()
        _, best = self._grid_profile_loss(W)
        return phi[best], psi[best]

    def loss_literal(self, H: np.ndarray, ul_phi: np.ndarray, ul_psi: np.ndarray) -> float:
        """Direct sum over subcarriers of the diagonalisation loss for a given uplink matrix."""
        v_ul = reconstruct_v_tilde(ul_phi, ul_psi, self.N, self.Ns)
        if v_ul.ndim == 2:
            v_ul = np.broadcast_to(v_ul, (self.config.K,) + v_ul.shape)
        T = np.swapaxes(v_ul, -1, -2) @ H @ self.v_dl
        return float(self._t_loss(T).sum())

    # -- conversions -------------------------------------------------------

    def to_omega(self, params: np.ndarray) -> OmegaParams:
        fc = self.config.carrier_freq
        paths = []
        for r in np.atleast_2d(params):
            gain = r[MAG] * np.exp(1j * (r[PHASE] + 2 * np.pi * fc * r[DELAY]))
            paths.append(PathParams(complex(gain), float(r[DELAY]), float(r[AOA]), float(r[AOD])))
        phi, psi = self.best_uplink(self.total_w(params))
        return OmegaParams(paths, phi, psi)

    def from_omega(self, omega: OmegaParams) -> np.ndarray:
        fc = self.config.carrier_freq
        rows = [[abs(p.gain), np.angle(p.gain) - 2 * np.pi * fc * p.delay, p.aoa, p.aod, p.delay]
                for p in omega.paths]
        rows = np.array(rows, dtype=float)
        rows[:, PHASE] = np.mod(rows[:, PHASE], 2 * np.pi)
        return rows


def build_T(omega: OmegaParams, v_tilde_dl: np.ndarray, config: ArrayConfig, k: int,
            streams: int | None = None) -> np.ndarray:
    """``V_ul^T H(omega) V_dl`` on subcarrier ``k``."""
    v_dl = np.asarray(v_tilde_dl)
    if v_dl.ndim == 3:
        v_dl = v_dl[k]
    if v_dl.shape[0] != config.M:
        raise ValueError("downlink feedback has the wrong number of rows")
    ns = v_dl.shape[1] if streams is None else streams
    phi, psi = omega.ul_phi, omega.ul_psi
    if phi.ndim == 2:
        phi, psi = phi[k], psi[k]
    v_ul = reconstruct_v_tilde(phi, psi, config.N, ns)
    H = synthesize_csi(omega.paths, config)[k]
    return v_ul.T @ H @ v_dl


def loss(omega: OmegaParams, report: BfiReport, config: ArrayConfig,
         p_tx: float = 1.0, p_n: float = 1.0) -> float:
    """Diagonal-magnitude mismatch plus off-diagonal energy of T, summed over subcarriers.

    Target diagonal magnitudes are the geometric-mean singular values implied
    by the report's ASNR.
    """
    prob = MleProblem(report, config, p_tx, p_n)
    return prob.loss_literal(synthesize_csi(omega.paths, config), omega.ul_phi, omega.ul_psi)


# -- search ----------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    restarts: int = 20
    path_counts: tuple[int, ...] = (1, 2, 3)
    pool_factor: int = 8
    distance: float = 3.0
    angle_points: int = 64
    phase_points: int = 32
    magnitude_points: int = 32
    magnitude_range: tuple[float, float] = (0.01, 2.0)
    delay_points: int = 16
    max_delay_factor: float = 4.0
    fine_divisions: int = 8
    max_cycles: int = 30
    rel_tol: float = 1e-4
    # candidates whose amplitude tensors differ by less than this NRMSE are merged
    amplitude_merge: float = 0.05


@dataclass
class SearchGrids:
    """Per-group 1-D search sets.

    With ``relative=True`` the sets are offsets from the incumbent value
    (magnitude offsets are multiplicative).
    """

    magnitude: np.ndarray
    phase: np.ndarray
    aoa: np.ndarray
    aod: np.ndarray
    delay: np.ndarray
    relative: bool = False

    def __post_init__(self):
        for name in GROUP_NAMES:
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if arr.size == 0:
                raise ValueError(f"empty grid for {name}")
            setattr(self, name, arr)

    def group(self, g: int) -> np.ndarray:
        return getattr(self, GROUP_NAMES[g])

    def values(self, g: int, current: float, max_delay: float) -> np.ndarray:
        grid = self.group(g)
        if not self.relative:
            return grid
        if g == MAG:
            return current * grid
        vals = current + grid
        if g == PHASE:
            return np.mod(vals, 2 * np.pi)
        if g in (AOA, AOD):
            return np.clip(vals, -ANGLE_EDGE, ANGLE_EDGE)
        return np.clip(vals, 0.0, max_delay)


def reference_gain(problem: MleProblem) -> float:
    return float(problem.sigma[0] / np.sqrt(problem.M * problem.N))


def coarse_grids(problem: MleProblem, sc: SearchConfig) -> SearchGrids:
    g0 = reference_gain(problem)
    lo, hi = sc.magnitude_range
    half = np.pi / sc.angle_points / 2
    max_delay = sc.max_delay_factor * sc.distance / SPEED_OF_LIGHT
    return SearchGrids(
        magnitude=g0 * np.geomspace(lo, hi, sc.magnitude_points),
        phase=np.arange(sc.phase_points) * 2 * np.pi / sc.phase_points,
        aoa=np.linspace(-np.pi / 2 + half, np.pi / 2 - half, sc.angle_points),
        aod=np.linspace(-np.pi / 2 + half, np.pi / 2 - half, sc.angle_points),
        delay=np.linspace(0.0, max_delay, sc.delay_points),
    )


def fine_grids(coarse: SearchGrids, sc: SearchConfig) -> SearchGrids:
    """Offsets spanning one coarse step either side at ``fine_divisions`` resolution."""
    n = sc.fine_divisions
    steps = np.arange(-n, n + 1) / n

    def step(arr):
        return float(np.diff(arr).mean()) if arr.size > 1 else 0.0

    ratio = np.log(coarse.magnitude[1] / coarse.magnitude[0]) if coarse.magnitude.size > 1 else 0.0
    return SearchGrids(
        magnitude=np.exp(ratio * steps),
        phase=step(coarse.phase) * steps,
        aoa=step(coarse.aoa) * steps,
        aod=step(coarse.aod) * steps,
        delay=step(coarse.delay) * steps,
        relative=True,
    )


@dataclass
class DescentResult:
    params: np.ndarray
    loss: float
    trace: list[float]
    cycles: int


def descend(problem: MleProblem, params0: np.ndarray, grids: SearchGrids,
            max_cycles: int = 30, rel_tol: float = 1e-4, max_delay: float | None = None) -> DescentResult:
    """Cyclic 1-D grid argmin over every (path, group) coordinate.

    Each sweep includes the incumbent, so the loss never increases.  Stops when
    a full cycle improves the loss by less than ``rel_tol`` (relative).
    """
    params = np.array(params0, dtype=float, copy=True)
    P = params.shape[0]
    if max_delay is None:
        max_delay = float(max(grids.delay.max() if not grids.relative else 0.0, params[:, DELAY].max()))
    W_paths = problem.path_w(params)
    W = W_paths.sum(axis=0)
    current = float(problem.profile_loss(W))
    trace = [current]
    cycles = 0
    for cycles in range(1, max_cycles + 1):
        start = current
        for p in range(P):
            rest = W - W_paths[p]
            for g in range(5):
                vals = grids.values(g, params[p, g], max_delay)
                cand = np.repeat(params[p][None], vals.size, axis=0)
                cand[:, g] = vals
                if g == MAG:
                    Wc = W_paths[p][None] * (vals / params[p, MAG])[:, None, None, None]
                elif g == PHASE:
                    Wc = W_paths[p][None] * np.exp(1j * (vals - params[p, PHASE]))[:, None, None, None]
                else:
                    Wc = problem.path_w(cand)
                losses = problem.profile_loss(rest[None] + Wc)
                best = int(np.argmin(losses))
                if losses[best] < current:
                    params[p] = cand[best]
                    W_paths[p] = Wc[best]
                    W = rest + W_paths[p]
                    current = float(losses[best])
                trace.append(current)
        if start - current <= rel_tol * max(start, 1e-300):
            break
    return DescentResult(params, current, trace, cycles)


def coordinate_descent(omega0: OmegaParams, report: BfiReport, config: ArrayConfig,
                       grids: SearchGrids, p_tx: float = 1.0, p_n: float = 1.0,
                       max_cycles: int = 30, rel_tol: float = 1e-4) -> tuple[OmegaParams, DescentResult]:
    """Coordinate descent from an explicit starting point; returns the new omega and its trace."""
    prob = MleProblem(report, config, p_tx, p_n)
    res = descend(prob, prob.from_omega(omega0), grids, max_cycles, rel_tol)
    return prob.to_omega(res.params), res


def canonicalize(params: np.ndarray) -> np.ndarray:
    """Sort paths by delay and rotate the common phase so the first path is real."""
    params = params[np.argsort(params[:, DELAY], kind="stable")].copy()
    params[:, PHASE] = np.mod(params[:, PHASE] - params[0, PHASE], 2 * np.pi)
    return params


def _same_point(a: np.ndarray, b: np.ndarray, tol: np.ndarray) -> bool:
    if a.shape != b.shape:
        return False
    diff = np.abs(a - b)
    diff[:, PHASE] = np.minimum(diff[:, PHASE], 2 * np.pi - diff[:, PHASE])
    diff[:, MAG] = np.abs(np.log(a[:, MAG] / b[:, MAG]))
    return bool(np.all(diff <= tol))


def random_starts(problem: MleProblem, grids: SearchGrids, P: int, count: int,
                  rng: np.random.Generator) -> np.ndarray:
    """``count`` random coarse-grid points for a ``P``-path model, shape ``(count, P, 5)``."""
    out = np.empty((count, P, 5))
    for g in range(5):
        arr = grids.group(g)
        out[:, :, g] = arr[rng.integers(0, arr.size, size=(count, P))]
    return out


def multi_start_search(report: BfiReport, config: ArrayConfig, search: SearchConfig | None = None,
                       rng_seed=0, p_tx: float = 1.0, p_n: float = 1.0) -> list[ReconCandidate]:
    """Coarse-grid screening, coordinate descent from the best starts, then a fine pass.

    Candidates from every assumed path count are pooled, merged when their
    parameters agree to within one fine-grid step or their amplitude tensors
    are nearly identical (the loss cannot tell apart a common delay or
    sin-AoA shift), and sorted by loss.
    """
    sc = search or SearchConfig()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    prob = MleProblem(report, config, p_tx, p_n)
    coarse = coarse_grids(prob, sc)
    fine = fine_grids(coarse, sc)
    max_delay = float(coarse.delay.max())
    tol = np.array([np.log(fine.magnitude[1] / fine.magnitude[0]),
                    fine.phase[1] - fine.phase[0], fine.aoa[1] - fine.aoa[0],
                    fine.aod[1] - fine.aod[0], fine.delay[1] - fine.delay[0]]) * 1.0001

    found: list[tuple[float, np.ndarray, int, int, int]] = []
    for P in sc.path_counts:
        pool = random_starts(prob, coarse, P, sc.pool_factor * sc.restarts, rng)
        pool_loss = prob.profile_loss(prob.total_w(pool))
        order = np.argsort(pool_loss, kind="stable")[: sc.restarts]
        for r, idx in enumerate(order):
            res = descend(prob, pool[idx], coarse, sc.max_cycles, sc.rel_tol, max_delay)
            res2 = descend(prob, res.params, fine, sc.max_cycles, sc.rel_tol, max_delay)
            found.append((res2.loss, canonicalize(res2.params), r, P, res.cycles + res2.cycles))

    found.sort(key=lambda x: x[0])
    kept: list[tuple[float, np.ndarray, int, int, int]] = []
    for item in found:
        if not any(_same_point(item[1], k[1], tol) for k in kept):
            kept.append(item)

    cands: list[ReconCandidate] = []
    for L, params, r, P, cyc in kept:
        omega = prob.to_omega(params)
        csi = synthesize_csi(omega.paths, config)
        if sc.amplitude_merge > 0 and any(
                amplitude_nrmse(csi, c.csi) < sc.amplitude_merge for c in cands):
            continue
        cands.append(ReconCandidate(
            omega=omega, loss=float(L), csi=csi,
            los_delay=omega.los_delay, restart=r, path_count=P, cycles=cyc))
    if not cands:
        log.warning("multi-start search produced no candidates")
    return cands



def track_candidates(report: BfiReport, config: ArrayConfig, previous: list[ReconCandidate],
                     search: SearchConfig | None = None, p_tx: float = 1.0, p_n: float = 1.0,
                     max_cycles: int = 3) -> list[ReconCandidate]:
    """Re-fit earlier candidates to a new report with a short fine-grid descent.

    Used across consecutive packets of a slowly drifting channel: each
    candidate keeps its identity (restart index) and the result is re-sorted
    by the new loss.
    """
    sc = search or SearchConfig()
    prob = MleProblem(report, config, p_tx, p_n)
    coarse = coarse_grids(prob, sc)
    fine = fine_grids(coarse, sc)
    max_delay = float(coarse.delay.max())
    out = []
    for c in previous:
        res = descend(prob, prob.from_omega(c.omega), fine, max_cycles, sc.rel_tol, max_delay)
        omega = prob.to_omega(res.params)
        out.append(ReconCandidate(
            omega=omega, loss=res.loss, csi=synthesize_csi(omega.paths, config),
            los_delay=omega.los_delay, restart=c.restart, path_count=c.path_count,
            cycles=res.cycles))
    out.sort(key=lambda c: c.loss)
    return out

def complexity_estimate(grid_sizes: dict, P: int, ul_angles: int = 1) -> dict:
    """Grid evaluations per coordinate-descent cycle versus exhaustive search.

    ``grid_sizes`` maps ``alpha, chi, gamma, t, phi, psi`` to grid sizes; the
    uplink groups are counted once per uplink angle.
    """
    g = grid_sizes
    per_path = g["alpha"] + g["chi"] + g["gamma"] + g["t"]
    coordinate = P * per_path + ul_angles * (g["phi"] + g["psi"])
    exhaustive = (g["alpha"] * g["chi"] * g["gamma"] * g["t"]) ** P * (g["phi"] * g["psi"]) ** ul_angles
    return {"coordinate": int(coordinate), "exhaustive": int(exhaustive)}


def amplitude_nrmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """RMS amplitude error normalised by the RMS true amplitude."""
    ea, ta = np.abs(estimate), np.abs(truth)
    return float(np.sqrt(np.mean((ea - ta) ** 2) / np.mean(ta ** 2)))
