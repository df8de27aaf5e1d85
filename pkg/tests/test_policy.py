import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adazoom.env import N_CHANNELS, State, ZoomEnv
from adazoom.policy import (Action, ActionDistribution, PolicyDivergence, PolicyParams, feature_dim, feature_maps,
                            greedy_action, logprob_grad, sample_action)
from adazoom.scene import ObjectAnnotation, Scene

D = feature_dim(N_CHANNELS)


def rand_state(rows, cols, seed):
    rng = np.random.default_rng(seed)
    return State(rng.uniform(0, 1, (rows, cols, N_CHANNELS)), (rng.uniform(0, 1, (rows, cols)) < 0.3).astype(float))


def rand_params(seed, scale=0.5, n_hidden=0):
    rng = np.random.default_rng(seed)
    p = PolicyParams.zeros(D, 3, 3, n_hidden, rng)
    return p.with_flat(rng.normal(0, scale, p.size))


def test_feature_dim():
    assert D == 22


def test_zero_state_features_are_bias_only():
    phi = feature_maps(State(np.zeros((5, 5, N_CHANNELS)), np.zeros((5, 5))))
    expected = np.zeros(D)
    expected[-1] = 1.0
    for i, j in itertools.product(range(5), range(5)):
        np.testing.assert_array_equal(phi[i, j], expected)


def test_pooling_interior_and_border():
    c = 0.37
    F = np.full((12, 12, N_CHANNELS), c)
    phi = feature_maps(State(F, np.zeros((12, 12))))
    C = N_CHANNELS + 1
    # interior cell: both pools see only constant cells
    np.testing.assert_allclose(phi[6, 6, C:C + N_CHANNELS], c)
    np.testing.assert_allclose(phi[6, 6, 2 * C:2 * C + N_CHANNELS], c)
    # corner: 4 of the 9 cells of the 3x3 window exist, 16 of 49 for 7x7
    np.testing.assert_allclose(phi[0, 0, C:C + N_CHANNELS], c * 4 / 9)
    np.testing.assert_allclose(phi[0, 0, 2 * C:2 * C + N_CHANNELS], c * 16 / 49)
    # edge cell (0, 5): 6 of 9
    np.testing.assert_allclose(phi[0, 5, C:C + N_CHANNELS], c * 6 / 9)


def test_pooling_matches_direct_window_sum():
    st_ = rand_state(9, 7, 4)
    phi = feature_maps(st_)
    g = np.concatenate([st_.F, st_.H[..., None]], axis=-1)
    C = g.shape[-1]
    for (i, j), (off, k) in itertools.product(itertools.product(range(9), range(7)), [(C, 3), (2 * C, 7)]):
        r = k // 2
        win = g[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1].sum(axis=(0, 1)) / k**2
        np.testing.assert_allclose(phi[i, j, off:off + C], win, atol=1e-12)


def test_zero_params_give_uniform_heads():
    dist = ActionDistribution(PolicyParams.zeros(D, 3, 3), rand_state(4, 5, 0))
    np.testing.assert_allclose(dist.p_f, 1 / 20)
    np.testing.assert_allclose(dist.p_s((1, 2)), 1 / 3)
    np.testing.assert_allclose(dist.p_r((1, 2), 1), 1 / 3)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 1000), st.sampled_from([0, 4]))
def test_joint_probabilities_sum_to_one(rows, cols, seed, n_hidden):
    dist = ActionDistribution(rand_params(seed, 1.0, n_hidden), rand_state(rows, cols, seed))
    assert abs(dist.p_f_flat.sum() - 1) <= 1e-6
    total = 0.0
    for a in dist.all_actions():
        assert abs(dist.p_s(a.cell).sum() - 1) <= 1e-6
        assert abs(dist.p_r(a.cell, a.scale).sum() - 1) <= 1e-6
        total += dist.prob(a)
    assert abs(total - 1) <= 1e-6


def test_fast_linear_path_matches_explicit_features():
    params = rand_params(3)
    state = rand_state(6, 6, 3)
    dist = ActionDistribution(params, state)
    phi = feature_maps(state).reshape(-1, D)
    logits = phi @ params.fixation
    p = np.exp(logits - logits.max())
    np.testing.assert_allclose(dist.p_f_flat, p / p.sum(), atol=1e-13)
    ps = np.exp(params.scale @ phi[8])
    np.testing.assert_allclose(dist.p_s((1, 2)), ps / ps.sum(), atol=1e-13)


def test_fixation_shift_invariance():
    params = rand_params(5)
    state = rand_state(4, 4, 5)
    shifted = params.copy()
    shifted.fixation[-1] += 3.7  # bias feature is 1 everywhere
    np.testing.assert_allclose(ActionDistribution(params, state).p_f, ActionDistribution(shifted, state).p_f,
                               atol=1e-12)


def test_nonfinite_logits_raise():
    params = rand_params(1)
    params.fixation[0] = np.nan
    with pytest.raises(PolicyDivergence):
        ActionDistribution(params, rand_state(3, 3, 1))


def test_logprob_is_sum_of_heads():
    dist = ActionDistribution(rand_params(2), rand_state(3, 4, 2))
    a = Action((2, 1), 2, 0)
    expected = np.log(dist.p_f[2, 1]) + np.log(dist.p_s((2, 1))[2]) + np.log(dist.p_r((2, 1), 2)[0])
    assert dist.logprob(a) == pytest.approx(expected, abs=1e-12)


def fd_check(params, state, action, eps=1e-6):
    analytic = logprob_grad(params, state, action).flat()
    base = params.flat()
    numeric = np.zeros_like(base)
    for k in range(base.size):
        up, down = base.copy(), base.copy()
        up[k] += eps
        down[k] -= eps
        numeric[k] = (ActionDistribution(params.with_flat(up), state).logprob(action)
                      - ActionDistribution(params.with_flat(down), state).logprob(action)) / (2 * eps)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_logprob_grad_finite_differences(seed):
    assert fd_check(rand_params(seed), rand_state(3, 4, seed), Action((1, 2), seed % 3, (seed + 1) % 3)) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_logprob_grad_finite_differences_hidden(seed):
    params = rand_params(seed, 0.5, n_hidden=5)
    assert fd_check(params, rand_state(3, 3, seed), Action((2, 0), 1, 2)) < 1e-4


def test_zero_params_scale_gradient_identity():
    state = rand_state(3, 3, 7)
    params = PolicyParams.zeros(D, 3, 3)
    a = Action((1, 1), 1, 0)
    grad = logprob_grad(params, state, a)
    phi = feature_maps(state)[1, 1]
    for k in range(3):
        np.testing.assert_allclose(grad.scale[k], ((k == 1) - 1 / 3) * phi, atol=1e-12)
    # (onehot - p) sums to zero over the simplex, per feature coordinate
    np.testing.assert_allclose(grad.scale.sum(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(grad.ratio.sum(axis=0), 0, atol=1e-12)


def test_entropy_grad_finite_differences():
    params, state, a = rand_params(9), rand_state(3, 3, 9), Action((0, 1), 2, 1)
    analytic = ActionDistribution(params, state).entropy_grad(a).flat()
    base, eps = params.flat(), 1e-6
    numeric = np.array([
        (ActionDistribution(params.with_flat(base + eps * e), state).entropy(a)
         - ActionDistribution(params.with_flat(base - eps * e), state).entropy(a)) / (2 * eps)
        for e in np.eye(base.size)
    ])
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4


def test_greedy_tie_break_is_first_index():
    assert greedy_action(ActionDistribution(PolicyParams.zeros(D, 3, 3), rand_state(4, 4, 0))) == Action((0, 0), 0, 0)


def test_greedy_follows_stated_maxima():
    state = State(np.zeros((4, 5, N_CHANNELS)), np.zeros((4, 5)))
    state.F[2, 3, 0] = 1.0  # the only cell with a nonzero first channel
    params = PolicyParams.zeros(D, 3, 3)
    params.fixation[0] = 5.0
    params.scale[1, -1] = 2.0
    params.ratio[2, D - 1] = 2.0  # ratio input is [psi, onehot(scale)]; bias sits at D - 1
    assert greedy_action(ActionDistribution(params, state)) == Action((2, 3), 1, 2)


def joint_argmax(dist):
    return max(dist.all_actions(), key=lambda a: (dist.prob(a), [-v for v in (*a.cell, a.scale, a.ratio)]))


def test_greedy_is_not_joint_argmax_in_general():
    found = None
    for seed in range(500):
        dist = ActionDistribution(rand_params(seed, 2.0), rand_state(2, 2, seed))
        if greedy_action(dist) != joint_argmax(dist):
            found = seed
            break
    assert found is not None
    dist = ActionDistribution(rand_params(found, 2.0), rand_state(2, 2, found))
    assert dist.prob(joint_argmax(dist)) > dist.prob(greedy_action(dist))


def test_greedy_equals_joint_argmax_when_heads_ignore_cell():
    for seed in range(20):
        params = rand_params(seed, 2.0)
        params.scale[:, :-1] = 0.0  # only the bias feature reaches the conditionals
        params.ratio[:, :D - 1] = 0.0
        params.ratio[:, D:] = 0.0  # nor the chosen scale
        dist = ActionDistribution(params, rand_state(2, 2, seed))
        assert dist.prob(greedy_action(dist)) == pytest.approx(dist.prob(joint_argmax(dist)), rel=1e-12)


def single_object_env():
    scene = Scene(800, 800, (ObjectAnnotation(610, 110, 20, 20, 1, 0),), "one")
    return ZoomEnv(scene, (8, 8))


def test_full_guidance_picks_object_cell():
    env = single_object_env()
    state = env.reset()
    dist = ActionDistribution(rand_params(0), state)
    rng = np.random.default_rng(0)
    for _ in range(20):
        action, logp, guided = sample_action(dist, state, env, 1.0, rng)
        assert guided and action.cell == (1, 6)
        assert action.scale == 0  # the only range that matches a 20 px object
        assert logp == pytest.approx(dist.logprob(action))


def test_plain_sampling_matches_distribution():
    env = single_object_env()
    state = State(np.zeros((2, 2, N_CHANNELS)), np.zeros((2, 2)))
    params = rand_params(4, 1.0)
    dist = ActionDistribution(params, state)
    rng = np.random.default_rng(1)
    n = 20000
    counts = {}
    for _ in range(n):
        a, _, guided = sample_action(dist, state, env, 0.0, rng)
        assert not guided
        counts[a] = counts.get(a, 0) + 1
    for a in dist.all_actions():
        p = dist.prob(a)
        assert abs(counts.get(a, 0) / n - p) <= 4 * np.sqrt(p * (1 - p) / n) + 1e-9


def test_params_flat_round_trip():
    p = rand_params(3, n_hidden=4)
    q = p.with_flat(p.flat())
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        p.with_flat(np.zeros(p.size + 1))
