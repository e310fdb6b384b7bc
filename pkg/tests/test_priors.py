import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdslam.neuralnet import GatWeights, MlpWeights, SingleAgentPredictor, gat_encode
from crowdslam.neuralnet.models import mlp_forward
from crowdslam.priors import (
    FACTOR_CVM_POSITION,
    FACTOR_DISPLACEMENT,
    FACTOR_MAHALANOBIS,
    HistoryBuffer,
    PriorConfig,
    PriorKind,
    PriorWindow,
    RolloutSet,
    cvm_residual_position,
    cvm_residuals_velocity,
    empirical_stats,
    gat_rollout_deterministic,
    gat_rollout_stochastic,
    make_prior_factors,
    mlp_predict,
    mlp_rollout,
    prior_factor_arrays,
)

DT = 0.1


def constant_mlp(v0, H=8):
    """Single-agent predictor whose output ignores its input."""
    w = MlpWeights([(np.zeros((4, 2 * (H - 1))), np.zeros(4)), (np.zeros((2, 4)), np.asarray(v0, float))])
    return SingleAgentPredictor(w, H, DT)


def small_gat(seed=0, H=8):
    return GatWeights.init(H, DT, 4.0, np.random.default_rng(seed), 6, (8,), (8,))


def cv_history(start, vel, H=8):
    return np.asarray(start, float) + np.asarray(vel, float) * DT * np.arange(H)[:, None]


# --- residuals ----------------------------------------------------------------


def test_cvm_position_examples():
    np.testing.assert_array_equal(cvm_residual_position((0, 0), (1, 0), (2, 0), 1.0), [0, 0])
    np.testing.assert_array_equal(cvm_residual_position((0, 0), (1, 0), (1, 0), 1.0), [-1, 0])
    np.testing.assert_allclose(cvm_residual_position((0, 0), (1, 0), (1, 0), 0.1), [-100, 0])
    with pytest.raises(ValueError):
        cvm_residual_position((0, 0), (1, 0), (2, 0), 0.0)


def test_cvm_velocity_examples():
    r1, r2 = cvm_residuals_velocity((0, 0), (0.1, 0), (1, 0), (1, 0), 0.1)
    np.testing.assert_allclose(r1, 0, atol=1e-15)
    np.testing.assert_array_equal(r2, [0, 0])
    _, r2 = cvm_residuals_velocity((0, 0), (0, 0), (0, 1), (1, 0), 0.1)
    np.testing.assert_array_equal(r2, [1, -1])


@settings(max_examples=100)
@given(
    p=st.tuples(st.floats(-100, 100), st.floats(-100, 100)),
    v=st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
    dt=st.floats(0.01, 1.0),
)
def test_cvm_residual_zero_on_constant_velocity(p, v, dt):
    p, v = np.array(p), np.array(v)
    r = cvm_residual_position(p, p + v * dt, p + 2 * v * dt, dt)
    assert np.all(np.abs(r) * dt * dt < 1e-12 * (1 + np.abs(p).max()))


# --- single-agent prediction ------------------------------------------------------


def test_mlp_predict_zero_weights_returns_bias():
    np.testing.assert_array_equal(mlp_predict(np.zeros((8, 2)), constant_mlp([0.3, -0.2])), [0.3, -0.2])


def test_mlp_predict_translation_invariant():
    w = SingleAgentPredictor(MlpWeights.init([14, 16, 2], np.random.default_rng(0)), 8, DT)
    h = np.random.default_rng(1).normal(size=(8, 2)).cumsum(axis=0)
    np.testing.assert_allclose(mlp_predict(h + 10.0, w), mlp_predict(h, w), atol=1e-12)


def test_mlp_predict_incomplete_history():
    h = np.zeros((8, 2))
    h[3] = np.nan
    with pytest.raises(ValueError):
        mlp_predict(h, constant_mlp([0, 0]))
    with pytest.raises(ValueError):
        HistoryBuffer(0, 7, h)
    with pytest.raises(ValueError):
        HistoryBuffer.from_track(0, [0, 1, 3, 4], np.zeros((4, 2)), 3)


# --- rollouts ---------------------------------------------------------------------


def test_rollout_zero_horizon():
    pos, vel = gat_rollout_deterministic(cv_history([0, 0], [1, 0])[None], small_gat(), 0)
    assert pos.shape == (1, 0, 2) and vel.shape == (1, 0, 2)


def test_rollout_empty_scene():
    with pytest.raises(ValueError):
        gat_rollout_deterministic(np.zeros((0, 8, 2)), small_gat(), 3)
    with pytest.raises(ValueError):
        gat_rollout_deterministic([], small_gat(), 3)


def test_single_agent_gat_rollout_euler_and_self_attention():
    w = small_gat(1)
    hist = cv_history([0, 0], [0.8, 0.3])[None]
    pos, vel = gat_rollout_deterministic(hist, w, 12)
    prev = np.concatenate([hist[:, -1:], pos[:, :-1]], axis=1)
    np.testing.assert_allclose(pos, prev + vel * DT, atol=1e-13)
    # isolated agent: z = [h, W h]; reproduce the first velocity by hand
    z, alpha, _ = gat_encode(hist, w)
    np.testing.assert_array_equal(alpha, [1.0])
    np.testing.assert_allclose(vel[0, 0], mlp_forward(w.head, z[0]), atol=1e-13)


def test_two_agent_first_step_matches_hand_composition():
    w = small_gat(2)
    hist = np.stack([cv_history([0, 0], [1, 0]), cv_history([1, 1], [0, -1])])
    pos, vel = gat_rollout_deterministic(hist, w, 3)
    z, _, _ = gat_encode(hist, w)
    np.testing.assert_allclose(vel[:, 0], np.stack([mlp_forward(w.head, zk) for zk in z]), atol=1e-13)


def test_history_buffer_scene_input():
    w = small_gat(3)
    hist = np.stack([cv_history([0, 0], [1, 0]), cv_history([1, 1], [0, -1])])
    bufs = [HistoryBuffer(7, 20, hist[0]), HistoryBuffer(9, 20, hist[1])]
    a = gat_rollout_deterministic(bufs, w, 4)
    b = gat_rollout_deterministic(hist, w, 4)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        gat_rollout_deterministic([bufs[0], HistoryBuffer(9, 21, hist[1])], w, 4)


def test_stochastic_collapse():
    w = small_gat(4)
    hist = np.stack([cv_history([0, 0], [1, 0]), cv_history([2, 0], [-1, 0.5])])
    det_pos, det_vel = gat_rollout_deterministic(hist, w, 6)
    sets = gat_rollout_stochastic(hist, w, 6, 5, 0.0, seed=1)
    for k, rs in enumerate(sets):
        np.testing.assert_array_equal(rs.positions, np.broadcast_to(det_pos[k], rs.positions.shape))
        stats = empirical_stats(rs, 1e-4)
        np.testing.assert_array_equal(stats.mu, det_vel[k])
        np.testing.assert_array_equal(stats.sigma, np.broadcast_to(1e-4 * np.eye(2), stats.sigma.shape))


def test_stochastic_determinism_and_euler_consistency():
    w = small_gat(5)
    hist = np.stack([cv_history([0, 0], [1, 0]), cv_history([1, 0.5], [-1, 0.5]), cv_history([0, 2], [0, -1])])
    a = gat_rollout_stochastic(hist, w, 8, 6, 0.05, seed=11, step=3)
    b = gat_rollout_stochastic(hist, w, 8, 6, 0.05, seed=11, step=3)
    c = gat_rollout_stochastic(hist, w, 8, 6, 0.05, seed=12, step=3)
    for x, y, z in zip(a, b, c):
        np.testing.assert_array_equal(x.positions, y.positions)
        assert not np.array_equal(x.positions, z.positions)
        assert x.euler_residual() < 1e-12


def test_stochastic_prefix_property():
    w = small_gat(6)
    hist = np.stack([cv_history([0, 0], [1, 0]), cv_history([1, 0.5], [-1, 0.5])])
    short = gat_rollout_stochastic(hist, w, 3, 4, 0.05, seed=2)
    long = gat_rollout_stochastic(hist, w, 7, 4, 0.05, seed=2)
    for s, l in zip(short, long):
        np.testing.assert_array_equal(s.positions, l.positions[:, :3])


def test_stochastic_argument_errors():
    w = small_gat()
    hist = cv_history([0, 0], [1, 0])[None]
    with pytest.raises(ValueError):
        gat_rollout_stochastic(hist, w, 3, 1, 0.05, seed=0)
    with pytest.raises(ValueError):
        gat_rollout_stochastic(hist, w, 3, 4, -0.1, seed=0)


def test_stochastic_noise_distribution_monte_carlo():
    v0 = np.array([0.7, -0.4])
    (rs,) = gat_rollout_stochastic(np.zeros((1, 8, 2)), constant_mlp(v0), 1, 10_000, 0.05, seed=3)
    v = rs.velocities[:, 0]
    assert np.all(np.abs(v.mean(axis=0) - v0) < 4 * 0.05 / 100)
    assert np.all(np.abs(v.std(axis=0, ddof=1) / 0.05 - 1) < 0.05)


def test_mlp_rollout_matches_constant_velocity_output():
    pos, vel = mlp_rollout(np.zeros((2, 8, 2)), constant_mlp([1.0, 0.0]), 5)
    np.testing.assert_allclose(pos[0, :, 0], DT * np.arange(1, 6), atol=1e-14)


# --- empirical statistics ----------------------------------------------------------


def rollout_from_velocities(vel):
    vel = np.asarray(vel, float)
    pos = np.cumsum(vel * DT, axis=1)
    return RolloutSet(0, np.zeros(2), pos, vel, DT)


def test_empirical_stats_examples():
    s = empirical_stats(rollout_from_velocities(np.tile([[[0.3, 0.1]]], (5, 1, 1))), 1e-4)
    np.testing.assert_allclose(s.sigma[0], 1e-4 * np.eye(2), atol=1e-18)
    s = empirical_stats(rollout_from_velocities([[[0.0, 0.0]], [[2.0, 0.0]]]), 1e-4)
    np.testing.assert_allclose(s.mu[0], [1, 0])
    np.testing.assert_allclose(s.sigma[0], [[2 + 1e-4, 0], [0, 1e-4]])
    with pytest.raises(ValueError):
        empirical_stats(rollout_from_velocities([[[0.0, 0.0]]]))


def test_empirical_covariance_monte_carlo():
    cov = np.array([[0.04, 0.015], [0.015, 0.02]])
    v = np.random.default_rng(0).multivariate_normal([0.5, 0.2], cov, size=10_000)
    s = empirical_stats(rollout_from_velocities(v[:, None, :]), 0.0 + 1e-12)
    assert np.linalg.norm(s.sigma[0] - cov) / np.linalg.norm(cov) < 0.1


def test_position_covariance_accumulates():
    s = empirical_stats(rollout_from_velocities(np.random.default_rng(1).normal(size=(50, 4, 2))))
    P = s.position_covariances(DT)
    np.testing.assert_allclose(P[-1], s.sigma.sum(axis=0) * DT * DT)
    assert np.all(np.diff(np.trace(P, axis1=1, axis2=2)) > 0)


# --- factor construction -------------------------------------------------------------


def cv_window(n_peds=3, S=14, i_min=8, seed=0, gap=None):
    rng = np.random.default_rng(seed)
    start = rng.uniform(-3, 3, (n_peds, 2))
    vel = rng.uniform(-1, 1, (n_peds, 2))
    pos = start[:, None] + vel[:, None] * DT * np.arange(S)[None, :, None]
    if gap is not None:
        pos[gap[0], gap[1]] = np.nan
    return PriorWindow(np.arange(10, 10 + n_peds), pos, 100, 100 + i_min, 100 + S - 1)


def test_no_prior_gives_nothing():
    assert make_prior_factors(PriorConfig(PriorKind.NONE), cv_window(), DT) == []
    assert make_prior_factors(PriorConfig(PriorKind.CVM, scale=0.0), cv_window(), DT) == []


def test_cvm_factor_counts_and_information():
    win = cv_window(S=14, i_min=8)
    cfg = PriorConfig(PriorKind.CVM, sigma_accel=2.0)
    f = make_prior_factors(cfg, win, DT)
    # triples (i-2, i-1, i) with i in [i_min+2, i_now]: 4 per ped
    assert len(f) == 3 * 4
    assert all(s.kind == FACTOR_CVM_POSITION for s in f)
    np.testing.assert_allclose(f[0].information, np.eye(2) / 4.0)
    # a missing estimate removes every triple containing it
    f = make_prior_factors(cfg, cv_window(S=14, i_min=8, gap=(1, 11)), DT)
    assert len(f) == 3 * 4 - 3  # column 11 sits in the triples ending at 11, 12, 13


def test_neural_kinds_need_weights():
    with pytest.raises(ValueError):
        prior_factor_arrays(PriorConfig(PriorKind.MLP), cv_window(), DT)
    assert PriorConfig(PriorKind.GAT_DET).validate()
    assert PriorConfig(PriorKind.CVM, weights=constant_mlp([0, 0])).validate()
    assert PriorConfig(PriorKind.MLP, weights=constant_mlp([0, 0], H=6)).validate()


def test_displacement_factors():
    cfg = PriorConfig(PriorKind.MLP, weights=constant_mlp([0.5, -0.5]))
    arr = prior_factor_arrays(cfg, cv_window(S=14, i_min=8), DT)
    assert arr.kind == FACTOR_DISPLACEMENT
    # a transition into step i needs a full history ending at i-1 (columns i-8..i-1)
    assert len(arr) == 3 * (13 - 8)
    np.testing.assert_allclose(arr.means, np.tile([0.05, -0.05], (len(arr), 1)))
    np.testing.assert_allclose(arr.information[0], np.eye(2) / 0.1**2)


def test_displacement_factors_carry_linearisation():
    w = SingleAgentPredictor(MlpWeights.init([14, 8, 2], np.random.default_rng(2)), 8, DT)
    win = cv_window(S=14, i_min=8)
    arr = prior_factor_arrays(PriorConfig(PriorKind.MLP, weights=w), win, DT)
    assert arr.jacobians.shape == (len(arr), 8, 2, 2)
    # row n was evaluated on the history ending one step before its transition
    for n in (0, len(arr) - 1):
        r = int(arr.ped_ids[n]) - 10
        c = int(arr.steps[n]) - win.base_step
        np.testing.assert_array_equal(arr.history[n], win.positions[r, c - 8 : c])
    off = prior_factor_arrays(PriorConfig(PriorKind.MLP, weights=w, linearize=False), win, DT)
    assert off.jacobians is None and off.history is None
    np.testing.assert_allclose(off.means, arr.means, atol=1e-15)


def test_prediction_cache_keeps_first_evaluation():
    w = SingleAgentPredictor(MlpWeights.init([14, 8, 2], np.random.default_rng(2)), 8, DT)
    cfg = PriorConfig(PriorKind.MLP, weights=w)
    win = cv_window(S=14, i_min=8)
    cache = {}
    first = prior_factor_arrays(cfg, win, DT, cache)
    assert len(cache) == len(first)
    moved = PriorWindow(win.ped_ids, win.positions * 1.5, win.base_step, win.i_min, win.i_now)
    again = prior_factor_arrays(cfg, moved, DT, cache)
    np.testing.assert_array_equal(again.means, first.means)
    np.testing.assert_array_equal(again.history, first.history)
    fresh = prior_factor_arrays(cfg, moved, DT)
    assert not np.allclose(fresh.means, first.means)


def test_stochastic_isotropic_reduces_to_scaled_l2():
    """Constant head: Sigma is exactly eps_reg I at sigma_sto 0, so info = I / (eps * dt^2)."""
    w = constant_mlp([0.5, 0.0])
    det = prior_factor_arrays(PriorConfig(PriorKind.MLP, weights=w, sigma_nn=1.0), cv_window(), DT)
    sto = prior_factor_arrays(
        PriorConfig(PriorKind.GAT_STOCH, weights=w, sigma_sto=0.0, eps_reg=0.01), cv_window(), DT
    )
    assert sto.kind == FACTOR_MAHALANOBIS
    np.testing.assert_allclose(sto.means, det.means, atol=1e-15)
    sigma = 0.1  # sqrt(eps_reg)
    np.testing.assert_allclose(sto.information, det.information / (sigma * DT) ** 2, rtol=1e-12)
    r = np.array([0.01, -0.02])
    e1 = r @ det.information[0] @ r
    e2 = r @ sto.information[0] @ r
    assert e2 == pytest.approx(e1 / (sigma * DT) ** 2, rel=1e-12)


def test_velocity_space_option():
    w = constant_mlp([0.5, 0.0])
    a = prior_factor_arrays(PriorConfig(PriorKind.GAT_STOCH, weights=w, sigma_sto=0.0), cv_window(), DT)
    b = prior_factor_arrays(
        PriorConfig(PriorKind.GAT_STOCH, weights=w, sigma_sto=0.0, mahalanobis_space="velocity"), cv_window(), DT
    )
    np.testing.assert_allclose(b.information * DT**-2, a.information, rtol=1e-12)


def test_larger_spread_means_smaller_information():
    w = constant_mlp([0.5, 0.0])
    eig = []
    for s in (0.01, 0.05, 0.2):
        arr = prior_factor_arrays(PriorConfig(PriorKind.GAT_STOCH, weights=w, sigma_sto=s, seed=4), cv_window(), DT)
        eig.append(np.linalg.eigvalsh(arr.information))
    assert np.all(eig[1] < eig[0]) and np.all(eig[2] < eig[1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), sigma=st.floats(0.0, 0.5), kind=st.sampled_from(["cvm", "mlp", "gat-det", "gat-stoch"]))
def test_information_matrices_spd(seed, sigma, kind):
    w = None
    if kind == "mlp":
        w = SingleAgentPredictor(MlpWeights.init([14, 8, 2], np.random.default_rng(seed)), 8, DT)
    elif kind != "cvm":
        w = small_gat(seed)
    cfg = PriorConfig(kind, weights=w, sigma_sto=sigma, seed=seed)
    for spec in make_prior_factors(cfg, cv_window(seed=seed), DT):
        np.linalg.cholesky(spec.information)
        np.testing.assert_array_equal(spec.information, spec.information.T)
