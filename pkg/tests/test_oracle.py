import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskdistill.diffusion import NoiseSchedule, corrupt, make_rng, posterior_probs
from maskdistill.distill import student_rollout
from maskdistill.oracle import (ExactReward, StateExplosion, corruption_matrix, direct_ikl,
                                enumerate_states, exact_corrupted_marginal, exact_generator_marginal,
                                exact_ikl, exact_log_ratio, exact_optimal_discriminator,
                                exact_student_gradient, kl_divergence, mc_policy_gradient,
                                midpoint_grid, state_index, tabular_pair, transition_matrix)

SCH = NoiseSchedule()


def test_enumerate_states_and_index_agree():
    s = enumerate_states(3, 2)
    assert s.shape == (9, 2)
    np.testing.assert_array_equal(state_index(s, 3), np.arange(9))
    np.testing.assert_array_equal(s[5], [2, 1])
    with pytest.raises(StateExplosion):
        enumerate_states(11, 4)


@given(st.floats(0.0, 1.0))
def test_corruption_matrix_rows_are_distributions(alpha):
    Q = corruption_matrix(3, 2, alpha)
    np.testing.assert_allclose(Q.sum(1), 1.0, atol=1e-12)
    assert np.all(Q >= 0)


def test_corruption_matrix_matches_monte_carlo():
    # clean state (1, 0) corrupted at alpha = 0.7 (linear schedule, t = 0.3)
    sch = NoiseSchedule("linear")
    x = np.array([1, 0])
    row = corruption_matrix(3, 2, 0.7)[state_index(x, 3)]
    n = 10 ** 5
    z = corrupt(np.tile(x, (n, 1)), 0.3, sch, make_rng(0), 2)
    freq = np.bincount(state_index(z, 3), minlength=9) / n
    assert np.all(np.abs(freq - row) <= 3 * np.sqrt(row * (1 - row) / n) + 1e-12)


def composition_error(k: int, length: int, s: float, t: float, sch=SCH) -> float:
    """max |sum_z_t q(z_t | x) Q(z_s | z_t, x) - q(z_s | x)| over clean x."""
    states = enumerate_states(k, length)
    m = k - 1
    Qt = corruption_matrix(k, length, float(sch.alpha(t)))
    Qs = corruption_matrix(k, length, float(sch.alpha(s)))
    worst = 0.0
    for i, x in enumerate(states):
        if m in x:
            continue
        pred = np.eye(k)[x]  # exact clean prediction
        post = posterior_probs(states, np.broadcast_to(pred, (len(states), length, k)), s, t, sch, m)
        step = np.prod([post[:, l, states[:, l]] for l in range(length)], axis=0)
        composed = Qt[i] @ step
        worst = max(worst, float(np.abs(composed - Qs[i]).max()))
    return worst


@pytest.mark.parametrize("s,t", [(0.0, 0.5), (0.2, 0.6), (0.5, 0.99), (0.01, 1.0)])
def test_corrupt_then_posterior_recovers_marginal(s, t):
    assert composition_error(3, 2, s, t) < 1e-12


def test_transition_rows_sum_to_one():
    student, _ = tabular_pair(0)
    states = enumerate_states(3, 2)
    P = transition_matrix(student, states, 0.8, 0.3, SCH)
    np.testing.assert_allclose(P.sum(1), 1.0, atol=1e-12)


def test_generator_marginal_matches_sampler():
    student, _ = tabular_pair(1)
    p = exact_generator_marginal(student, 3, SCH)
    clean = np.array([2 not in s for s in enumerate_states(3, 2)])
    assert p[~clean].sum() == 0 and p.sum() == pytest.approx(1, abs=1e-12)
    n = 10 ** 5
    x = student_rollout(student, n, 3, SCH, make_rng(2)).x
    freq = np.bincount(state_index(x, 3), minlength=9) / n
    assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1e-12)


def test_kl_divergence_basics():
    p = np.array([0.5, 0.5, 0.0])
    assert kl_divergence(p, p) == 0.0
    assert kl_divergence(p, np.array([1.0, 0.0, 0.0])) == float("inf")
    assert kl_divergence(p, np.array([0.25, 0.75, 0.0])) == pytest.approx(
        0.5 * np.log(2) + 0.5 * np.log(2 / 3))


def test_two_ikl_routes_agree():
    for seed in range(3):
        s, t = tabular_pair(seed)
        a = exact_ikl(s, t, SCH, 2)
        b = direct_ikl(s, t, SCH, 2)
        assert a > 0
        assert abs(a - b) < 1e-10
    assert exact_ikl(s, s, SCH, 2) == 0.0


def test_midpoint_grid():
    np.testing.assert_allclose(midpoint_grid(4), [0.125, 0.375, 0.625, 0.875])


def test_optimal_discriminator_and_log_ratio():
    q_s = np.array([0.2, 0.0, 0.8, 0.0])
    q_t = np.array([0.6, 0.4, 0.0, 0.0])
    d = exact_optimal_discriminator(q_s, q_t)
    np.testing.assert_allclose(d[:3], [0.25, 0.0, 1.0])
    assert np.isnan(d[3])
    lr = exact_log_ratio(q_s[:1], q_t[:1])
    assert lr[0] == pytest.approx(np.log(1 / 3))
    swap = exact_optimal_discriminator(q_t, q_s)
    np.testing.assert_allclose(d[:3] + swap[:3], 1.0)


def test_exact_reward_lookup():
    s, t = tabular_pair(0)
    times = np.array([0.25, 0.75])
    r = ExactReward(s, t, SCH, 2, times)
    z = np.array([[0, 2], [2, 2]])
    p_s = exact_generator_marginal(s, 2, SCH)
    p_t = exact_generator_marginal(t, 2, SCH)
    q_s = exact_corrupted_marginal(p_s, 0.75, SCH, 3, 2)
    q_t = exact_corrupted_marginal(p_t, 0.75, SCH, 3, 2)
    expect = np.log(q_s[state_index(z, 3)]) - np.log(q_t[state_index(z, 3)])
    np.testing.assert_allclose(r(z, np.array([0.75, 0.75])), expect)


def test_exact_gradient_vanishes_at_teacher():
    s, _ = tabular_pair(0)
    g = exact_student_gradient(s, s.clone(), SCH, 2, times=midpoint_grid(8))["table"]
    assert np.linalg.norm(g) < 1e-8


def test_policy_gradient_direction_on_small_budget():
    # cheap smoke version of the acceptance check: positive alignment with the exact gradient
    s, t = tabular_pair(0)
    times = midpoint_grid(8)
    exact = exact_student_gradient(s, t, SCH, 2, times=times)["table"]
    mc = mc_policy_gradient(s, t, SCH, 2, 4000, times=times, seed=3)["table"]
    cos = (exact * mc).sum() / np.linalg.norm(exact) / np.linalg.norm(mc)
    assert cos > 0.9
