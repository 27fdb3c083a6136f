import numpy as np
import pytest

from gridloop.estimator import (EstimatorState, ProcessNoiseModel, covariance_bounds,
                                covariance_update, initial_state, kalman_gain, kalman_step,
                                riccati_history)

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _spd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T / n + 0.1 * np.eye(n))


def test_scalar_gain():
    K = kalman_gain(np.eye(1), np.zeros((1, 1)), np.eye(1), np.eye(1))
    assert K[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_gain_limits(rng):
    n = 4
    P = _spd(rng, n)
    K = kalman_gain(P, np.zeros((n, n)), np.eye(n), 1e12 * np.eye(n))
    assert np.max(np.abs(K)) < 1e-10
    K = kalman_gain(P, np.zeros((n, n)), np.eye(n), 1e-12 * np.eye(n))
    np.testing.assert_allclose(K, np.eye(n), atol=1e-6)


def test_gain_matches_explicit_formula(rng):
    n, m = 5, 7
    P, Sl, Sy = _spd(rng, n), _spd(rng, n, 0.1), _spd(rng, m, 0.01)
    H = rng.standard_normal((m, n))
    M = P + Sl
    K_ref = M @ H.T @ np.linalg.inv(H @ M @ H.T + Sy)
    np.testing.assert_allclose(kalman_gain(P, Sl, H, Sy), K_ref, rtol=1e-9, atol=1e-12)


def test_non_pd_innovation_rejected():
    with pytest.raises(np.linalg.LinAlgError, match="sigma_y"):
        kalman_gain(np.zeros((1, 1)), np.zeros((1, 1)), np.eye(1), -np.eye(1))


def test_zero_innovation_fixed_point(rng):
    n, m = 4, 6
    H = rng.standard_normal((m, n))
    est = EstimatorState(V_hat=rng.standard_normal(n), P=_spd(rng, n))
    out = kalman_step(est, H @ est.V_hat, np.zeros(2), np.zeros((n, 2)), H,
                      _spd(rng, n, 0.1), _spd(rng, m, 0.1))
    np.testing.assert_allclose(out.V_hat, est.V_hat, atol=1e-13)
    assert out.t == 1


def test_scalar_step_hand_evaluation():
    est = EstimatorState(V_hat=np.zeros(1), P=np.eye(1))
    out = kalman_step(est, np.array([2.0]), np.zeros(1), np.zeros((1, 1)), np.eye(1),
                      np.zeros((1, 1)), np.eye(1))
    assert out.V_hat[0] == pytest.approx(1.0, abs=1e-15)
    assert out.P[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert out.K[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_three_step_filter_equals_batch_least_squares(rng):
    """Information-form smoother over (x_prior, x_0, x_1, x_2); its last block
    is the filtered estimate and its marginal covariance the filter P."""
    n, m, k, T = 3, 4, 2, 3
    H = rng.standard_normal((m, n))
    Bc = rng.standard_normal((n, k))
    Sl, Sy, P0 = _spd(rng, n, 0.2), _spd(rng, m, 0.05), _spd(rng, n)
    m0 = rng.standard_normal(n)
    u = rng.standard_normal((T, k))
    ys = rng.standard_normal((T, m))

    est = EstimatorState(V_hat=m0, P=P0)
    for t in range(T):
        est = kalman_step(est, ys[t], u[t], Bc, H, Sl, Sy)

    # unknowns z = [x_-1, x_0, x_1, x_2]; residuals whitened by Cholesky factors
    dim = (T + 1) * n
    rows, rhs = [], []

    def add(A, b, cov):
        W = np.linalg.inv(np.linalg.cholesky(cov))
        rows.append(W @ A)
        rhs.append(W @ b)

    A = np.zeros((n, dim))
    A[:, :n] = np.eye(n)
    add(A, m0, P0)
    for t in range(T):
        A = np.zeros((n, dim))
        A[:, (t + 1) * n:(t + 2) * n] = np.eye(n)
        A[:, t * n:(t + 1) * n] = -np.eye(n)
        add(A, Bc @ u[t], Sl)
        A = np.zeros((m, dim))
        A[:, (t + 1) * n:(t + 2) * n] = H
        add(A, ys[t], Sy)
    A, b = np.vstack(rows), np.concatenate(rhs)
    z, *_ = np.linalg.lstsq(A, b, rcond=None)
    cov = np.linalg.inv(A.T @ A)
    np.testing.assert_allclose(est.V_hat, z[-n:], atol=1e-8)
    np.testing.assert_allclose(est.P, cov[-n:, -n:], atol=1e-8)


def test_scalar_riccati_fixed_point():
    one = np.eye(1)
    Ps, Ks = riccati_history(one, one, one, one, 60)
    assert Ps[-1][0, 0] == pytest.approx(GOLDEN, abs=1e-10)
    assert Ks[-1][0, 0] == pytest.approx((GOLDEN + 1) / (GOLDEN + 2), abs=1e-10)
    lo, hi = covariance_bounds(Ps[1:])
    assert lo == pytest.approx(GOLDEN, abs=1e-10)
    assert hi == pytest.approx(Ps[1][0, 0])


def test_covariance_bounds_examples(rng):
    assert covariance_bounds([np.eye(3)] * 4) == (1.0, 1.0)
    history = [np.diag([3.0, 2.0]) * s for s in (1.0, 0.8, 0.5)]
    lo, hi = covariance_bounds(history)
    assert (lo, hi) == (pytest.approx(1.0), pytest.approx(3.0))
    with pytest.raises(ValueError):
        covariance_bounds([])


def test_covariance_update_equals_joseph_form(rng):
    for _ in range(20):
        n, m = 5, 3
        P, Sl, Sy = _spd(rng, n), _spd(rng, n, 0.3), _spd(rng, m, 0.2)
        H = rng.standard_normal((m, n))
        K = kalman_gain(P, Sl, H, Sy)
        A = np.eye(n) - K @ H
        joseph = A @ (P + Sl) @ A.T + K @ Sy @ K.T
        np.testing.assert_allclose(covariance_update(P, Sl, H, K), joseph, atol=1e-10)


def test_gain_minimizes_posterior_trace(rng):
    n, m = 4, 3
    P, Sl, Sy = _spd(rng, n), _spd(rng, n, 0.3), _spd(rng, m, 0.2)
    H = rng.standard_normal((m, n))
    K = kalman_gain(P, Sl, H, Sy)

    def joseph_trace(G):
        A = np.eye(n) - G @ H
        return np.trace(A @ (P + Sl) @ A.T + G @ Sy @ G.T)

    base = joseph_trace(K)
    for _ in range(50):
        D = rng.standard_normal(K.shape)
        D /= np.linalg.norm(D)
        assert joseph_trace(K + 1e-3 * D) >= base
        assert joseph_trace(K - 1e-3 * D) >= base


def test_reference_covariances_symmetric_psd(reference):
    sys = reference.system()
    Ps, _ = riccati_history(np.eye(sys.lin.B.shape[0]), sys.noise.sigma_l, sys.meas.H,
                            sys.meas.sigma_y, 300)
    for P in Ps:
        assert np.max(np.abs(P - P.T)) <= 1e-12
        assert np.linalg.eigvalsh(P)[0] >= -1e-10


def test_noise_free_error_decays_geometrically(rng):
    n, m = 3, 4
    H = rng.standard_normal((m, n))
    Sl, Sy = 0.01 * np.eye(n), 0.01 * np.eye(m)
    V = rng.standard_normal(n)
    est = initial_state(np.zeros(n), 1.0)
    errs = []
    for _ in range(60):
        est = kalman_step(est, H @ V, np.zeros(1), np.zeros((n, 1)), H, Sl, Sy)
        errs.append(np.linalg.norm(est.V_hat - V))
    errs = np.array(errs)
    assert errs[-1] < 1e-10 * errs[0]
    assert np.all(errs[1:] <= errs[:-1] + 1e-15)


def test_batched_step_matches_single_runs(rng):
    n, m = 3, 4
    H = rng.standard_normal((m, n))
    Sl, Sy = _spd(rng, n, 0.1), _spd(rng, m, 0.1)
    Vh = rng.standard_normal((5, n))
    y = rng.standard_normal((5, m))
    du = rng.standard_normal((5, 2))
    Bc = rng.standard_normal((n, 2))
    P = _spd(rng, n)
    batch = kalman_step(EstimatorState(Vh, P), y, du, Bc, H, Sl, Sy)
    for r in range(5):
        single = kalman_step(EstimatorState(Vh[r], P), y[r], du[r], Bc, H, Sl, Sy)
        np.testing.assert_allclose(batch.V_hat[r], single.V_hat, atol=1e-14)


def test_process_noise_model():
    Bl = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    pn = ProcessNoiseModel.from_load_increments(Bl, np.eye(2))
    np.testing.assert_allclose(pn.sigma_l, Bl @ Bl.T)
    assert not pn.full_rank
    pn = ProcessNoiseModel.from_load_increments(Bl, np.eye(2), floor=1e-6)
    assert pn.full_rank
    assert np.linalg.eigvalsh(pn.sigma_l)[0] == pytest.approx(1e-6, rel=1e-6)
    with pytest.raises(ValueError):
        ProcessNoiseModel.from_load_increments(Bl, -np.eye(2))
