from __future__ import annotations

import numpy as np
import pytest

from epitomo.moments import (
    aggregate_moment_curves,
    aggregate_moments,
    approx_aggregate_step,
    approx_step_moments,
    drift_matrix,
    exact_moments,
    exact_moments_quadrature,
    noise_matrix,
)
from epitomo.netgen import NeighborMatrix, generate_er_topology, mobility_from_topology
from epitomo.simulate import TransmissionParams, linearized_ensemble


def no_mobility(n: int):
    return mobility_from_topology(NeighborMatrix(np.zeros((n, n), dtype=np.int8)), 0.0)


def pair_mobility(gamma_total: float):
    bits = np.zeros((2, 2), dtype=np.int8)
    bits[0, 1] = bits[1, 0] = 1
    return mobility_from_topology(NeighborMatrix(bits), gamma_total)


def covariance_z_scores(sample_a, sample_b, exact):
    """z-score of a sample covariance against its exact value, with the
    standard error taken from the spread of the centered products."""
    prod = (sample_a - sample_a.mean()) * (sample_b - sample_b.mean())
    se = prod.std(ddof=1) / np.sqrt(prod.size)
    return (prod.mean() - exact) / se


def test_drift_matrix_single_node():
    params = TransmissionParams(0.067, 0.033)
    a = drift_matrix(params, no_mobility(1))
    assert a.shape == (1, 1)
    assert a[0, 0] == pytest.approx(0.034, rel=1e-12)


def test_drift_matrix_no_mobility_is_scaled_identity():
    params = TransmissionParams(0.08, 0.02)
    a = drift_matrix(params, no_mobility(3))
    assert np.allclose(a, 0.06 * np.eye(3), atol=1e-15)


def test_drift_matrix_two_node_hand_values():
    params = TransmissionParams(0.067, 0.033, 0.1)
    a = drift_matrix(params, pair_mobility(0.1))
    assert a == pytest.approx(np.array([[-0.066, 0.1], [0.1, -0.066]]), rel=1e-12)


def test_noise_matrix_is_positive_semidefinite():
    rng = np.random.default_rng(4)
    params = TransmissionParams(0.067, 0.033, 0.1)
    for seed in range(5):
        topo = generate_er_topology(5, 2.5, seed=seed)
        mob = mobility_from_topology(topo, 0.1)
        m = rng.uniform(0.0, 300.0, size=5)
        w = np.linalg.eigvalsh(noise_matrix(params, mob, m))
        assert w.min() > -1e-9 * max(w.max(), 1.0)


def test_exact_moments_at_time_zero():
    params = TransmissionParams(0.067, 0.033, 0.1)
    mob = pair_mobility(0.1)
    I0 = np.array([120.0, 30.0])
    state = exact_moments(params, mob, I0, 0.0)
    assert np.array_equal(state.mI, I0)
    assert np.array_equal(state.mJ, I0)
    assert not state.vII.any() and not state.vIJ.any() and not state.vJJ.any()


def test_exact_moments_rejects_negative_time():
    params = TransmissionParams(0.067, 0.033)
    with pytest.raises(ValueError):
        exact_moments(params, no_mobility(1), np.array([10.0]), -1.0)


def test_exact_moments_scalar_matches_aggregate_closed_form():
    params = TransmissionParams(0.067, 0.033)
    I0 = np.array([200.0])
    for t in (0.5, 2.0, 10.0, 40.0):
        state = exact_moments(params, no_mobility(1), I0, t)
        agg = aggregate_moments(0.067, 0.033, 200.0, t)
        assert state.mI[0] == pytest.approx(agg.mI, rel=1e-6)
        assert state.mJ[0] == pytest.approx(agg.mJ, rel=1e-6)
        assert state.vII[0, 0] == pytest.approx(agg.vII, rel=1e-6)
        assert state.vIJ[0, 0] == pytest.approx(agg.vIJ, rel=1e-6)
        assert state.vJJ[0, 0] == pytest.approx(agg.vJJ, rel=1e-6)


def test_exact_moments_match_ensemble_all_blocks():
    # Monte-Carlo oracle: 1e5 linearized paths on a 3-node chain with an
    # interior start (clamping at zero-count nodes would bias the means).
    bits = np.zeros((3, 3), dtype=np.int8)
    bits[0, 1] = bits[1, 0] = 1
    bits[1, 2] = bits[2, 1] = 1
    mob = mobility_from_topology(NeighborMatrix(bits), 0.1)
    params = TransmissionParams(0.09, 0.05, 0.1)
    I0 = np.array([150.0, 200.0, 250.0])
    t = 5.0
    # dt_int=0.01: at 1e5 paths the covariance standard errors resolve the
    # O(dt_int) weak bias of the coarser 0.02 step (measured z ~ +3 there).
    I_rec, J_rec = linearized_ensemble(
        mob, params, I0, np.array([t]), dt_int=0.01, n_paths=100_000, seed=2
    )
    I, J = I_rec[0], J_rec[0]
    state = exact_moments(params, mob, I0, t)

    z_mI = (I.mean(axis=0) - state.mI) / (I.std(axis=0, ddof=1) / np.sqrt(I.shape[0]))
    z_mJ = (J.mean(axis=0) - state.mJ) / (J.std(axis=0, ddof=1) / np.sqrt(J.shape[0]))
    assert np.max(np.abs(z_mI)) < 3.0
    assert np.max(np.abs(z_mJ)) < 3.0
    for i in range(3):
        for j in range(3):
            assert abs(covariance_z_scores(I[:, i], I[:, j], state.vII[i, j])) < 3.0
            assert abs(covariance_z_scores(I[:, i], J[:, j], state.vIJ[i, j])) < 3.0
            assert abs(covariance_z_scores(J[:, i], J[:, j], state.vJJ[i, j])) < 3.0


def test_exact_moments_covariances_exactly_symmetric():
    topo = generate_er_topology(4, 2.0, seed=6)
    mob = mobility_from_topology(topo, 0.1)
    params = TransmissionParams(0.067, 0.033, 0.1)
    state = exact_moments(params, mob, np.array([50.0, 80.0, 10.0, 5.0]), 7.0)
    assert np.array_equal(state.vII, state.vII.T)
    assert np.array_equal(state.vJJ, state.vJJ.T)


def test_exact_moments_propagator_self_consistency():
    # One step of t equals two steps of t/2 for the mean (the covariance
    # does not compose this way because conditioning resets it).
    topo = generate_er_topology(4, 2.5, seed=8)
    mob = mobility_from_topology(topo, 0.1)
    params = TransmissionParams(0.067, 0.033, 0.1)
    I0 = np.array([200.0, 40.0, 10.0, 90.0])
    half = exact_moments(params, mob, I0, 4.0)
    again = exact_moments(params, mob, half.mI, 4.0)
    full = exact_moments(params, mob, I0, 8.0)
    assert np.allclose(again.mI, full.mI, rtol=1e-9)


def test_exact_moments_ode_step_insensitivity():
    mob = pair_mobility(0.1)
    params = TransmissionParams(0.067, 0.033, 0.1)
    I0 = np.array([200.0, 100.0])
    coarse = exact_moments(params, mob, I0, 10.0, max_step=0.5)
    fine = exact_moments(params, mob, I0, 10.0, max_step=0.25)
    assert np.allclose(coarse.vJJ, fine.vJJ, rtol=1e-6)


def test_exact_moments_quadrature_cross_check():
    # Independent oracle: direct quadrature of the integral solutions.
    mob = pair_mobility(0.1)
    params = TransmissionParams(0.09, 0.05, 0.1)
    I0 = np.array([130.0, 60.0])
    ode = exact_moments(params, mob, I0, 6.0)
    quad = exact_moments_quadrature(params, mob, I0, 6.0)
    assert np.allclose(quad.mI, ode.mI, rtol=1e-8)
    assert np.allclose(quad.mJ, ode.mJ, rtol=1e-8)
    assert np.allclose(quad.vII, ode.vII, rtol=1e-7)
    assert np.allclose(quad.vIJ, ode.vIJ, rtol=1e-7)
    assert np.allclose(quad.vJJ, ode.vJJ, rtol=1e-7)


def test_exact_moments_singular_drift_falls_back():
    # alpha = beta with no movement makes the drift matrix singular; the
    # mJ closed form through the inverse is unavailable and the ODE route
    # must still reproduce the aggregate limit mJ = I0 (1 + alpha t).
    params = TransmissionParams(0.05, 0.05)
    state = exact_moments(params, no_mobility(1), np.array([80.0]), 12.0)
    agg = aggregate_moments(0.05, 0.05, 80.0, 12.0)
    assert state.mJ[0] == pytest.approx(80.0 * (1 + 0.05 * 12.0), rel=1e-8)
    assert state.mJ[0] == pytest.approx(agg.mJ, rel=1e-8)
    assert state.mI[0] == pytest.approx(80.0, rel=1e-10)


def test_aggregate_moments_at_time_zero():
    agg = aggregate_moments(0.067, 0.033, 200.0, 0.0)
    assert agg.mI == 200.0
    assert agg.mJ == pytest.approx(200.0, rel=1e-12)
    assert agg.vII == agg.vIJ == agg.vJJ == 0.0


def test_aggregate_moments_match_ode_oracle():
    state = exact_moments(
        TransmissionParams(0.067, 0.033), no_mobility(1), np.array([200.0]), 10.0
    )
    agg = aggregate_moments(0.067, 0.033, 200.0, 10.0)
    assert agg.mI == pytest.approx(state.mI[0], rel=1e-8)
    assert agg.mJ == pytest.approx(state.mJ[0], rel=1e-8)
    assert agg.vII == pytest.approx(state.vII[0, 0], rel=1e-8)
    assert agg.vIJ == pytest.approx(state.vIJ[0, 0], rel=1e-8)
    assert agg.vJJ == pytest.approx(state.vJJ[0, 0], rel=1e-8)


def test_aggregate_cauchy_schwarz_on_rate_grid():
    # The correlation of I and J tends to 1 at long times, so the bound
    # is approached within ~1e-12 relative; allow float headroom only.
    rng = np.random.default_rng(0)
    ts = np.linspace(0.0, 100.0, 51)
    for _ in range(100):
        alpha, beta = rng.uniform(0.01, 0.3, size=2)
        _, _, vII, vIJ, vJJ = aggregate_moment_curves(alpha, beta, 200.0, ts)
        assert (vIJ[1:] ** 2 <= vII[1:] * vJJ[1:] * (1 + 1e-9)).all()
        assert (vII >= 0).all() and (vJJ >= 0).all()


def test_aggregate_moments_continuous_through_equal_rates():
    # The closed forms have a removable singularity at alpha = beta; the
    # series branch must join smoothly.
    lower = aggregate_moments(0.05 - 1e-9, 0.05, 100.0, 20.0)
    mid = aggregate_moments(0.05, 0.05, 100.0, 20.0)
    upper = aggregate_moments(0.05 + 1e-9, 0.05, 100.0, 20.0)
    for field in ("mI", "mJ", "vII", "vIJ", "vJJ"):
        lo, md, hi = (getattr(s, field) for s in (lower, mid, upper))
        assert lo == pytest.approx(md, rel=1e-6)
        assert hi == pytest.approx(md, rel=1e-6)


def test_approx_step_small_interval_limit():
    params = TransmissionParams(0.067, 0.033, 0.1)
    mob = pair_mobility(0.1)
    I0 = np.array([100.0, 50.0])
    mean, cov = approx_step_moments(params, mob, I0, 1e-12)
    assert np.allclose(mean, I0, rtol=1e-10)
    assert np.max(np.abs(cov)) < 1e-9


def test_approx_step_hand_values():
    params = TransmissionParams(0.067, 0.033)
    mean, cov = approx_step_moments(params, no_mobility(1), np.array([100.0]), 1.0)
    assert mean[0] == pytest.approx(103.4, rel=1e-12)
    assert cov[0, 0] == pytest.approx(10.0, rel=1e-12)


def test_approx_step_richardson_convergence():
    # First-order step: halving delta_t divides the gap to the interval
    # solution by about four.
    topo = generate_er_topology(3, 1.5, seed=1)
    mob = mobility_from_topology(topo, 0.1)
    params = TransmissionParams(0.09, 0.05, 0.1)
    I0 = np.array([150.0, 200.0, 250.0])

    def gap(delta_t: float) -> float:
        mean, cov = approx_step_moments(params, mob, I0, delta_t)
        state = exact_moments(params, mob, I0, delta_t)
        return float(
            np.linalg.norm(mean - state.mI) + np.linalg.norm(cov - state.vII)
        )

    ratio = gap(0.1) / gap(0.05)
    assert 3.0 < ratio < 5.0


def test_approx_aggregate_hand_values():
    mean, var = approx_aggregate_step(0.08, 0.02, 600.0, 1.0)
    assert mean == pytest.approx(636.0, rel=1e-12)
    assert var == pytest.approx(60.0, rel=1e-12)
    with pytest.raises(ValueError):
        approx_aggregate_step(0.08, 0.02, 600.0, 0.0)


def test_approx_step_totals_match_aggregate():
    # Movement conserves the total count, so summing the per-node means
    # reproduces the aggregate mean for any mobility.
    rng = np.random.default_rng(3)
    topo = generate_er_topology(4, 2.0, seed=3)
    mob = mobility_from_topology(topo, 0.1)
    params = TransmissionParams(0.067, 0.033, 0.1)
    for _ in range(20):
        I = rng.uniform(0.0, 500.0, size=4)
        mean, _ = approx_step_moments(params, mob, I, 1.0)
        agg_mean, _ = approx_aggregate_step(0.067, 0.033, float(I.sum()), 1.0)
        assert mean.sum() == pytest.approx(agg_mean, rel=1e-12)
