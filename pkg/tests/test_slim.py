import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slimtrace.preprocess import NoiseModel, whiten
from slimtrace.simkit import THREE_GAS_TRUTH, SyntheticTruth, add_noise, generate_clean
from slimtrace.slim import (
    DEFAULT_Q_GRID,
    AbundanceEstimate,
    SlimConfig,
    SlimError,
    SlimState,
    compute_bic,
    estimate,
    has_converged,
    init_estimate,
    objective,
    select_q,
    slim_step,
    solve_slim,
    stationarity_residual,
    support_of,
)

from oracles import grid_minimizer_2, objective_reference, slim_reference_step, support_minimizer


def random_instance(seed, L=10, N=29, k=3, snr_db=40.0):
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((L, N))
    V /= np.linalg.norm(V, axis=0)
    a = np.zeros(N)
    a[rng.choice(N, k, replace=False)] = rng.uniform(0.5, 1.0, k)
    z, var = add_noise(V @ a, snr_db, seed)
    s = math.sqrt(var)
    return z / s, V / s, a


def easy_instance():
    """Three planted columns, strong signal; large q adds small spurious entries."""
    rng = np.random.default_rng(7)
    L, N = 20, 12
    V = rng.standard_normal((L, N))
    V /= np.linalg.norm(V, axis=0)
    V *= 30.0
    a = np.zeros(N)
    a[[1, 5, 9]] = [1.0, 0.8, 0.6]
    y = V @ a + 0.3 * rng.standard_normal(L)
    return y, V, a


# --- config --------------------------------------------------------------------------

def test_config_defaults_and_validation():
    cfg = SlimConfig()
    assert cfg.q is None and cfg.delta == 1e-4 and cfg.max_iter == 500
    assert cfg.q_grid == DEFAULT_Q_GRID == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    assert cfg.support_epsilon == 1e-3
    for bad in ({"q": 0.0}, {"q": 1.5}, {"delta": 0}, {"max_iter": 0}, {"q_grid": ()},
                {"q_grid": (0.5, 0.0)}, {"init_weights": "ones"}):
        with pytest.raises(ValueError):
            SlimConfig(**bad)
    assert cfg.with_q(0.5).q == 0.5
    assert cfg.to_dict()["bic_formula"].startswith("2*")


# --- init_estimate ---------------------------------------------------------------------

def test_init_single_endmember(rng):
    S = np.abs(rng.standard_normal((10, 5)))
    k = 2
    a0 = init_estimate(S[:, k], S, NoiseModel.scaled_identity(1.0))
    assert a0[k] == pytest.approx(1.0, rel=1e-14)
    corr = S.T @ S[:, k] / np.einsum("ij,ij->j", S, S)
    np.testing.assert_allclose(a0, corr, rtol=1e-13)


def test_init_zero_observation(rng):
    S = rng.standard_normal((10, 29))
    assert np.array_equal(init_estimate(np.zeros(10), S), np.zeros(29))


def test_init_matches_scalar_regressions(rng):
    S = rng.standard_normal((10, 29))
    z = rng.standard_normal(10)
    A = rng.standard_normal((10, 10))
    M = A @ A.T + np.eye(10)
    noise = NoiseModel.full(M)
    W = noise.inv_sqrt(10)
    y, V = W @ z, W @ S
    oracle = []
    for n in range(29):
        coef, *_ = np.linalg.lstsq(V[:, [n]], y, rcond=None)
        oracle.append(max(coef[0], 0.0))
    got = init_estimate(z, S, noise)
    np.testing.assert_allclose(got, oracle, rtol=1e-10, atol=1e-12)
    assert np.all(got >= 0)


def test_init_rejects_zero_column():
    S = np.ones((4, 3))
    S[:, 1] = 0
    with pytest.raises(SlimError, match="zero-norm"):
        init_estimate(np.ones(4), S)


# --- slim_step ----------------------------------------------------------------------------

def test_step_from_zero_stays_zero(rng):
    V = rng.standard_normal((10, 29))
    y = rng.standard_normal(10)
    s = slim_step(SlimState.start(np.zeros(29), y, V, 0.5), y, V, 0.5)
    assert np.array_equal(s.alpha, np.zeros(29)) and s.iteration == 1


def test_step_with_zero_observation(rng):
    V = rng.standard_normal((10, 29))
    s = slim_step(SlimState.start(rng.uniform(0, 2, 29), np.zeros(10), V, 0.7), np.zeros(10), V, 0.7)
    assert np.array_equal(s.alpha, np.zeros(29))


def test_step_scalar_case():
    V = np.array([[1.0]])
    y = np.array([1.0])
    s = slim_step(SlimState.start(np.array([1.0]), y, V, 1.0), y, V, 1.0)
    assert s.alpha[0] == pytest.approx(0.5, rel=1e-15)
    assert s.weights[0] == pytest.approx(0.5, rel=1e-15)
    assert s.objective == pytest.approx(0.5 * 0.25 + (0.5 - 1.0), rel=1e-15)


@pytest.mark.parametrize("shape", [(10, 29), (40, 6)])
def test_step_matches_literal_formula(rng, shape):
    L, N = shape
    V = rng.standard_normal((L, N))
    y = rng.standard_normal(L)
    alpha = rng.uniform(0, 2, N)
    for q in (0.2, 0.6, 1.0):
        s = slim_step(SlimState.start(alpha, y, V, q), y, V, q)
        np.testing.assert_allclose(s.alpha, slim_reference_step(alpha, y, V, q), rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("shape", [(10, 29), (60, 8)])
def test_solver_agrees_with_repeated_steps(rng, shape):
    # solve_slim picks the cheaper of two equivalent linear systems
    L, N = shape
    V = rng.standard_normal((L, N))
    y = V[:, :3] @ np.array([2.0, 1.0, 0.5]) + 0.1 * rng.standard_normal(L)
    init = rng.uniform(0.1, 1.0, N)
    cfg = SlimConfig(q=0.6, max_iter=25, delta=1e-300)
    est = solve_slim(y, V, cfg, init=init)
    state = SlimState.start(init, y, V, 0.6)
    for _ in range(25):
        state = slim_step(state, y, V, 0.6)
    np.testing.assert_allclose(est.alpha, state.alpha, rtol=1e-8, atol=1e-12)
    assert est.objective == pytest.approx(state.objective, rel=1e-10)


def test_ill_conditioned_system_is_reported():
    V = np.ones((3, 2))
    y = np.ones(3)
    with pytest.raises(SlimError, match="ill-conditioned|non-finite"):
        slim_step(SlimState(np.array([1e20, 1e20]), np.array([1e20, 1e20]), 0, 0.0), y, V, 1.0)
    with pytest.raises(SlimError, match="non-finite"):
        slim_step(SlimState(np.array([1.0, 1.0]), np.array([np.inf, 1.0]), 0, 0.0), y, V, 1.0)


# --- has_converged / objective -------------------------------------------------------------

def test_has_converged_cases():
    v = np.array([3.0, -1.0])
    assert has_converged(v, v, 1e-300)
    assert has_converged(np.zeros(2), np.zeros(2), 1e-4)
    assert not has_converged(np.ones(2), np.zeros(2), 1e-4)
    assert not has_converged(np.array([1.0, 0.0]), np.array([1.0, 0.01]), 1e-4)
    assert has_converged(np.array([1.0, 0.0]), np.array([1.0, 0.01]), 0.02)
    with pytest.raises(ValueError):
        has_converged(np.zeros(2), np.zeros(3), 1e-4)


def test_objective_cases(rng):
    V = rng.standard_normal((6, 4))
    ones = np.ones(4)
    assert objective(ones, V @ ones, V, 0.4) == pytest.approx(0.0, abs=1e-12)
    assert objective(np.zeros(4), np.zeros(6), V, 0.25) == -4 / 0.25


@settings(max_examples=100, deadline=None)
@given(
    alpha=arrays(float, 5, elements=st.floats(0, 5)),
    y=arrays(float, 4, elements=st.floats(-5, 5)),
    q=st.floats(0.05, 1.0),
    seed=st.integers(0, 2 ** 16),
)
def test_objective_matches_reference(alpha, y, q, seed):
    V = np.random.default_rng(seed).standard_normal((4, 5))
    ref = objective_reference(alpha, y, V, q)
    assert objective(alpha, y, V, q) == pytest.approx(ref, rel=1e-12, abs=1e-12)


# --- solve_slim ---------------------------------------------------------------------------------

def test_zero_observation_converges_immediately(rng):
    V = rng.standard_normal((10, 29))
    est = solve_slim(np.zeros(10), V, SlimConfig(q=0.5))
    assert np.array_equal(est.alpha, np.zeros(29))
    assert est.converged and est.iterations_used <= 2
    assert est.support.size == 0 and est.model_order == 0


def test_max_iter_respected(rng):
    y, V, _ = random_instance(3)
    est = solve_slim(y, V, SlimConfig(q=0.5, max_iter=3, delta=1e-300))
    assert est.iterations_used == 3 and not est.converged


def test_init_length_checked(rng):
    y, V, _ = random_instance(3)
    with pytest.raises(ValueError):
        solve_slim(y, V, SlimConfig(q=0.5), init=np.ones(5))
    with pytest.raises(ValueError):
        solve_slim(y, V, SlimConfig())


def test_three_gas_pixel_at_60db(unit_library):
    truth = SyntheticTruth.from_labels(unit_library, THREE_GAS_TRUTH)
    z, var = add_noise(generate_clean(unit_library, truth), 60.0, 11)
    prob = whiten(z, unit_library, NoiseModel.scaled_identity(var))
    est, _ = select_q(prob.y, prob.V, SlimConfig())
    idx = truth.support
    np.testing.assert_allclose(est.alpha[idx], [0.25, 0.35, 0.15], atol=0.03)
    off = np.delete(est.alpha, idx)
    assert off.max() < 0.03
    assert est.alpha[idx].sum() > 0.9 * est.alpha.sum()


def two_sparse_instances(count, seed0=500):
    out = []
    seed = seed0
    while len(out) < count:
        rng = np.random.default_rng(seed)
        seed += 1
        V = rng.standard_normal((5, 12))
        V /= np.linalg.norm(V, axis=0)
        a = np.zeros(12)
        a[rng.choice(12, 2, replace=False)] = rng.uniform(1.0, 5.0, 2)
        y = V @ a
        best, _ = support_minimizer(y, V, 5)
        if np.count_nonzero(best) == 2:  # the 2-support search is then the minimizer
            out.append((y, V, best))
    return out


def test_q1_matches_two_support_search():
    for y, V, best in two_sparse_instances(5):
        T = np.flatnonzero(best)
        grid = grid_minimizer_2(y, V, T)
        np.testing.assert_allclose(grid, best[T], atol=1e-3)
        est = solve_slim(y, V, SlimConfig(q=1.0, delta=1e-10, max_iter=20000))
        assert set(est.support.tolist()) == set(T.tolist())
        np.testing.assert_allclose(est.alpha[T], best[T], atol=1e-3)


def test_q1_reaches_global_minimum_of_convex_objective():
    # at q = 1 the objective is convex; compare with the exhaustive minimizer over all supports
    for seed in range(10):
        rng = np.random.default_rng(900 + seed)
        V = rng.standard_normal((5, 12))
        V /= np.linalg.norm(V, axis=0)
        a = np.zeros(12)
        a[rng.choice(12, 2, replace=False)] = rng.uniform(1.0, 5.0, 2)
        y = V @ a + 0.1 * rng.standard_normal(5)
        best, g_best = support_minimizer(y, V, 5)
        est = solve_slim(y, V, SlimConfig(q=1.0, delta=1e-10, max_iter=50000))
        assert objective(est.alpha, y, V, 1.0) == pytest.approx(g_best, abs=1e-7)
        np.testing.assert_allclose(est.alpha, best, atol=1e-4)


# --- BIC / select_q ----------------------------------------------------------------------------

def _est(alpha, q=0.5):
    alpha = np.asarray(alpha, dtype=float)
    return AbundanceEstimate(alpha, alpha, 1, True, q, 0.0, support_of(alpha, 1e-3))


def test_bic_exact_fit():
    V = np.eye(10)[:, :5]
    alpha = np.array([1.0, 2.0, 3.0, 0.0, 0.0])
    sc = compute_bic(V @ alpha, V, _est(alpha))
    assert sc.h == 3 and sc.residual_norm_sq == 0.0
    assert sc.score == pytest.approx(3 * math.log(10), rel=1e-15)


def test_bic_prefers_smaller_model_at_equal_residual():
    # columns 0 and 1 are identical, so both candidates fit y equally well
    V = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    y = np.array([2.0, 0.0, 1.0])
    sparse = compute_bic(y, V, _est([2.0, 0.0, 0.0]))
    dense = compute_bic(y, V, _est([1.0, 1.0, 0.0]))
    assert sparse.residual_norm_sq == dense.residual_norm_sq
    assert (sparse.h, dense.h) == (1, 2)
    assert sparse.score < dense.score


def test_support_threshold():
    assert support_of(np.array([1.0, 1e-3, 2e-3, 0.0]), 1e-3).tolist() == [0, 2]
    assert support_of(np.zeros(3), 1e-3).size == 0


def test_bic_favors_true_support_on_easy_instance():
    y, V, a = easy_instance()
    est, scores = select_q(y, V, SlimConfig())
    by_q = {s.q: s for s in scores}
    assert set(est.support.tolist()) == set(np.flatnonzero(a).tolist())
    dense = max(scores, key=lambda s: s.h)
    assert dense.h > 3
    # the denser fit barely lowers the residual and pays for every extra entry
    assert dense.residual_norm_sq > 0.5 * by_q[est.q_used].residual_norm_sq
    assert by_q[est.q_used].score < dense.score


def test_select_q_single_grid_point():
    y, V, _ = easy_instance()
    est, scores = select_q(y, V, SlimConfig(q_grid=(0.4,)))
    assert est.q_used == 0.4 and len(scores) == 1


def test_select_q_tie_goes_to_smallest_q(rng):
    V = rng.standard_normal((10, 29))
    est, scores = select_q(np.zeros(10), V, SlimConfig(q_grid=(0.9, 0.3, 0.6)))
    assert est.q_used == 0.3
    assert len({s.score for s in scores}) == 1
    assert [s.q for s in scores] == [0.3, 0.6, 0.9]


def test_estimate_dispatch():
    y, V, _ = easy_instance()
    est, scores = estimate(y, V, SlimConfig(q=0.7))
    assert est.q_used == 0.7 and len(scores) == 1
    est, scores = estimate(y, V, SlimConfig())
    assert len(scores) == len(DEFAULT_Q_GRID)


def test_stationarity_on_converged_estimate():
    y, V, _ = random_instance(21)
    est = solve_slim(y, V, SlimConfig(q=0.7))
    assert est.converged
    assert stationarity_residual(est.alpha, y, V, 0.7, est.support) <= 1e-4


def test_magnitude_weights_let_anticorrelated_column_enter():
    # column 1 alone correlates negatively with y; only a joint fit reveals it
    V = np.array([[1.0, -0.6], [0.0, 0.8], [0.0, 0.0]])
    a = np.array([3.0, 0.4])
    y = 10 * (V @ a)
    V10 = 10 * V
    assert (V10.T @ y)[1] < 0
    clipped = solve_slim(y, V10, SlimConfig(q=0.8, init_weights="clipped"))
    magnitude = solve_slim(y, V10, SlimConfig(q=0.8, init_weights="magnitude"))
    assert clipped.alpha[1] == 0.0
    assert magnitude.alpha[1] > 0.2


# --- invariants -------------------------------------------------------------------------------

states = st.tuples(
    st.integers(0, 2 ** 32 - 1),
    st.integers(2, 12),
    st.integers(1, 30),
    st.floats(0.05, 1.0),
    st.floats(0.0, 0.8),
)


def random_state(seed, L, N, q, zero_frac):
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((L, N)) * rng.uniform(0.1, 10)
    y = rng.standard_normal(L) * rng.uniform(0.1, 10)
    alpha = rng.uniform(0, 3, N)
    alpha[rng.random(N) < zero_frac] = 0.0
    return SlimState.start(alpha, y, V, q), y, V


@settings(max_examples=200, deadline=None)
@given(states)
def test_zero_coordinates_stay_zero(params):
    state, y, V = random_state(*params)
    q = params[3]
    zeros = state.alpha == 0
    nxt = slim_step(state, y, V, q)
    assert np.all(nxt.alpha[zeros] == 0)
    assert np.all(nxt.alpha >= 0)
    np.testing.assert_array_equal(nxt.weights, nxt.alpha ** (2 - q))


@settings(max_examples=200, deadline=None)
@given(states)
def test_step_is_deterministic(params):
    state, y, V = random_state(*params)
    a = slim_step(state, y, V, params[3])
    b = slim_step(state, y.copy(), V.copy(), params[3])
    assert np.array_equal(a.alpha, b.alpha) and a.objective == b.objective


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), q=st.floats(0.1, 1.0))
def test_monotone_descent_without_clipping(seed, q):
    rng = np.random.default_rng(seed)
    L, N = 8, 6
    V = np.abs(rng.standard_normal((L, N)))
    y = V @ rng.uniform(0.5, 2.0, N) * 5
    state = SlimState.start(rng.uniform(0.5, 2.0, N), y, V, q)
    for _ in range(30):
        raw = state.weights * (V.T @ np.linalg.solve((V * state.weights) @ V.T + np.eye(L), y))
        assume(np.all(raw >= 0))
        nxt = slim_step(state, y, V, q)
        assert nxt.objective <= state.objective + 1e-9 * abs(state.objective)
        state = nxt


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_permutation_equivariance(seed):
    y, V, _ = random_instance(seed % 10_000, L=8, N=12, k=2)
    perm = np.random.default_rng(seed).permutation(12)
    cfg = SlimConfig(q=0.6)
    a = solve_slim(y, V, cfg)
    b = solve_slim(y, V[:, perm], cfg)
    np.testing.assert_allclose(b.alpha, a.alpha[perm], rtol=1e-9, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_solver_outputs_are_nonnegative_and_reproducible(seed):
    y, V, _ = random_instance(seed % 10_000)
    a, _ = select_q(y, V, SlimConfig(q_grid=(0.3, 0.8)))
    b, _ = select_q(y.copy(), V.copy(), SlimConfig(q_grid=(0.3, 0.8)))
    assert np.all(a.alpha >= 0)
    assert np.array_equal(a.alpha, b.alpha)
