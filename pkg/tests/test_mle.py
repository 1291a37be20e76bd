import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bfirecon.channel import PathParams, ScenarioConfig, sample_random_scenario, synthesize_csi
from bfirecon.codec import (QuantConfig, compute_svd, encode_bfi, extract_givens_angles, phase_adjust,
                            reconstruct_v_tilde)
from bfirecon.mle import (MleProblem, OmegaParams, SearchConfig, amplitude_nrmse, build_T,
                          coarse_grids, complexity_estimate, coordinate_descent, descend, fine_grids,
                          loss, multi_start_search, random_starts)

P = 1000.0
FAST = SearchConfig(restarts=4, path_counts=(1,), pool_factor=4)


def scenario(seed, paths=(1, 1), q=QuantConfig(7, 9)):
    ps, cfg = sample_random_scenario(seed, ScenarioConfig(path_count=paths))
    H = synthesize_csi(ps, cfg)
    return ps, cfg, H, encode_bfi(H, q, P)


def true_uplink(H):
    """Feedback angles the station would report for the reverse link."""
    U = compute_svd(H).U
    return extract_givens_angles(phase_adjust(np.conj(U)))


def test_build_T_diagonal_at_truth():
    paths, cfg, H, _ = scenario(5, (2, 2))
    svd = compute_svd(H)
    v_dl = phase_adjust(svd.V)
    phi, psi = true_uplink(H)
    om = OmegaParams(paths, phi, psi)
    for k in (0, 17, 63):
        T = build_T(om, v_dl, cfg, k)
        off = T - np.diag(np.diag(T))
        assert np.max(np.abs(off)) < 1e-6
        np.testing.assert_allclose(np.abs(np.diag(T)), svd.singular_values[k], rtol=1e-6)


def test_build_T_is_linear_in_gain():
    paths, cfg, H, rep = scenario(2, (2, 2))
    phi, psi = true_uplink(H)
    a = build_T(OmegaParams(paths, phi, psi), rep.v_tilde(), cfg, 3)
    scaled = [PathParams(p.gain * -2.5j, p.delay, p.aoa, p.aod) for p in paths]
    b = build_T(OmegaParams(scaled, phi, psi), rep.v_tilde(), cfg, 3)
    np.testing.assert_allclose(b, -2.5j * a, atol=1e-12)


def _problem_with_uplink(rng):
    paths, cfg, H, rep = scenario(11, (2, 2))
    prob = MleProblem(rep, cfg, P)
    phi = rng.uniform(0, 2 * np.pi, size=(cfg.K, 1))
    psi = rng.uniform(0, np.pi / 2, size=(cfg.K, 1))
    v_ul = reconstruct_v_tilde(phi, psi, 2, 2)
    return prob, cfg, phi, psi, v_ul


def test_loss_zero_on_phase_diagonal(rng):
    prob, cfg, phi, psi, v_ul = _problem_with_uplink(rng)
    x = rng.uniform(0, 2 * np.pi, size=(cfg.K, 2))
    T = np.zeros((cfg.K, 2, 2), dtype=complex)
    T[:, [0, 1], [0, 1]] = prob.sigma * np.exp(1j * x)
    # invert T = V_ul^T H V_dl for square unitary feedback
    H = np.conj(v_ul) @ T @ np.conj(np.swapaxes(prob.v_dl, -1, -2))
    assert prob.loss_literal(H, phi, psi) == pytest.approx(0.0, abs=1e-18)
    eps = 0.01
    T[:, 0, 1] += eps
    H2 = np.conj(v_ul) @ T @ np.conj(np.swapaxes(prob.v_dl, -1, -2))
    assert prob.loss_literal(H2, phi, psi) == pytest.approx(cfg.K * eps ** 2, rel=1e-8)


def test_loss_identity_feedback():
    # V_ul = V_dl = I and H = I: T is the identity, zero loss when sigma_bar = 1
    from bfirecon.channel import ArrayConfig
    cfg = ArrayConfig(2, 2, subcarrier_count=4)
    rep = encode_bfi(np.tile(np.eye(2), (4, 1, 1)), QuantConfig(7, 9), 1.0)
    prob = MleProblem(rep, cfg)
    H = np.tile(np.eye(2), (4, 1, 1)).astype(complex)
    v = prob.v_dl
    T = np.swapaxes(v, -1, -2) @ H @ v
    assert prob.sigma == pytest.approx(1.0, rel=0.02)
    assert np.allclose(np.abs(T), np.eye(2), atol=0.02)


def test_profile_loss_is_minimum_over_uplink(rng):
    paths, cfg, H, rep = scenario(4, (2, 2))
    prob = MleProblem(rep, cfg, P)
    W = H @ prob.v_dl
    prof = float(prob.profile_loss(W))
    phi, psi = prob.best_uplink(W)
    assert prob.loss_literal(H, phi, psi) == pytest.approx(prof, rel=1e-8, abs=1e-12)
    for _ in range(20):
        rp = rng.uniform(0, 2 * np.pi, size=(cfg.K, 1))
        rs = rng.uniform(0, np.pi / 2, size=(cfg.K, 1))
        assert prob.loss_literal(H, rp, rs) >= prof - 1e-9


def test_module_loss_matches_problem():
    paths, cfg, H, rep = scenario(9, (1, 1))
    phi, psi = true_uplink(H)
    om = OmegaParams(paths, phi, psi)
    assert loss(om, rep, cfg, P) == pytest.approx(MleProblem(rep, cfg, P).loss_literal(H, phi, psi))
    assert loss(om, rep, cfg, P) >= 0


@settings(max_examples=8)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_descent_trace_never_increases(seed, P_paths):
    paths, cfg, H, rep = scenario(seed, (1, 3), QuantConfig(4, 6))
    prob = MleProblem(rep, cfg, P)
    co = coarse_grids(prob, FAST)
    start = random_starts(prob, co, P_paths, 1, np.random.default_rng(seed))[0]
    res = descend(prob, start, co, max_cycles=5)
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    fi = fine_grids(co, FAST)
    res2 = descend(prob, res.params, fi, max_cycles=5)
    assert all(b <= a for a, b in zip(res2.trace, res2.trace[1:]))
    assert res2.loss <= res.loss


def test_fixed_point_is_stable():
    paths, cfg, H, rep = scenario(3)
    prob = MleProblem(rep, cfg, P)
    co = coarse_grids(prob, FAST)
    fi = fine_grids(co, FAST)
    start = random_starts(prob, co, 1, 1, np.random.default_rng(0))[0]
    first = descend(prob, descend(prob, start, co).params, fi, max_cycles=60, rel_tol=0.0)
    again = descend(prob, first.params, fi, max_cycles=5, rel_tol=0.0)
    np.testing.assert_array_equal(again.params, first.params)
    assert again.cycles == 1


def test_single_coordinate_recovery():
    # magnitude knocked one coarse step off the truth comes back within a fine step
    paths, cfg, H, rep = scenario(7)
    prob = MleProblem(rep, cfg, P)
    co = coarse_grids(prob, FAST)
    fi = fine_grids(co, FAST)
    truth = prob.from_omega(OmegaParams(paths, np.zeros(1), np.zeros(1)))
    ratio = co.magnitude[1] / co.magnitude[0]
    start = truth.copy()
    start[0, 0] *= ratio
    res = descend(prob, start, fi, max_cycles=30, rel_tol=0.0)
    assert abs(np.log(res.params[0, 0] / truth[0, 0])) <= np.log(ratio) / FAST.fine_divisions * 1.01


def test_coordinate_descent_wrapper():
    paths, cfg, H, rep = scenario(1)
    prob = MleProblem(rep, cfg, P)
    om0 = OmegaParams(paths, np.zeros(1), np.zeros(1))
    om, res = coordinate_descent(om0, rep, cfg, fine_grids(coarse_grids(prob, FAST), FAST), P)
    assert res.trace[-1] <= res.trace[0]
    assert isinstance(om, OmegaParams)


def test_search_recovers_single_path():
    paths, cfg, H, rep = scenario(21)
    cands = multi_start_search(rep, cfg, SearchConfig(restarts=6, path_counts=(1, 2)), 0, P)
    assert amplitude_nrmse(cands[0].csi, H) < 0.05
    losses = [c.loss for c in cands]
    assert losses == sorted(losses)


def test_search_deterministic_and_more_restarts_help():
    paths, cfg, H, rep = scenario(8, (2, 2), QuantConfig(4, 6))
    a = multi_start_search(rep, cfg, FAST, 5, P)
    b = multi_start_search(rep, cfg, FAST, 5, P)
    assert [c.loss for c in a] == [c.loss for c in b]
    np.testing.assert_array_equal(a[0].csi, b[0].csi)
    one = multi_start_search(rep, cfg, SearchConfig(restarts=1, path_counts=(2,)), 5, P)
    many = multi_start_search(rep, cfg, SearchConfig(restarts=20, path_counts=(2,)), 5, P)
    assert many[0].loss <= one[0].loss * (1 + 1e-9)


def test_candidates_are_distinct():
    paths, cfg, H, rep = scenario(12, (2, 3), QuantConfig(4, 6))
    sc = SearchConfig(restarts=6)
    cands = multi_start_search(rep, cfg, sc, 1, P)
    for i, a in enumerate(cands):
        for b in cands[i + 1:]:
            assert amplitude_nrmse(a.csi, b.csi) >= sc.amplitude_merge


def test_complexity_bookkeeping():
    g = dict.fromkeys(["alpha", "chi", "gamma", "t", "phi", "psi"], 10)
    est = complexity_estimate(g, 2)
    assert est["coordinate"] == 2 * 40 + 20
    assert est["exhaustive"] == 10 ** 8 * 100
    assert complexity_estimate(g, 1)["coordinate"] == 60
    counts = [complexity_estimate(g, p)["coordinate"] for p in range(1, 6)]
    assert len(set(np.diff(counts))) == 1


def test_nrmse():
    x = np.ones((4, 2, 2))
    assert amplitude_nrmse(x, x) == 0
    assert amplitude_nrmse(1.1 * x, x) == pytest.approx(0.1)


def test_problem_rejects_mismatch():
    _, cfg, H, rep = scenario(0)
    from bfirecon.channel import ArrayConfig
    with pytest.raises(ValueError):
        MleProblem(rep, ArrayConfig(3, 2))
