import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adazoom.env import (N_CHANNELS, RewardConfig, ZoomEnv, init_state, reward, run_episode, scale_match,
                         scale_match_many, update_feature, update_history)
from adazoom.geometry import GridRect, Region
from adazoom.policy import PolicyParams, feature_dim
from adazoom.scene import ObjectAnnotation, Scene, SynthSceneConfig, synth_scene

CFG = RewardConfig()


def square_scene(sides_and_pos, W=1000, H=1000):
    objs = tuple(ObjectAnnotation(x, y, s, s, 1, k) for k, (s, x, y) in enumerate(sides_and_pos))
    return Scene(W, H, objs, "t")


@pytest.mark.parametrize("s,k,expected", [
    (35, 0, 1.0),
    (48, 0, 2 - math.exp(0.3)),
    (20, 1, 2 - math.exp(0.5)),
])
def test_scale_match_hand_values(s, k, expected):
    assert abs(scale_match(s, k, CFG) - expected) <= 1e-9


def test_scale_match_hand_decimals():
    assert scale_match(48, 0, CFG) == pytest.approx(0.650141, abs=1e-6)
    assert scale_match(20, 1, CFG) == pytest.approx(0.351279, abs=1e-6)


def test_scale_match_zero_beyond_root():
    root = math.log(2) / 1.5
    assert root == pytest.approx(0.462098, abs=1e-6)
    assert scale_match(40 * (1 + root), 0, CFG) == pytest.approx(0.0, abs=1e-12)
    assert scale_match(40 * (1 + root + 1e-6), 0, CFG) == 0.0
    assert scale_match(1000, 0, CFG) == 0.0
    assert scale_match(40 * (1 + root - 1e-3), 0, CFG) > 0.0


@given(st.floats(0.5, 2000), st.integers(0, 2))
def test_scale_match_bounded_and_vectorized(s, k):
    v = scale_match(s, k, CFG)
    assert 0.0 <= v <= 1.0
    assert scale_match_many(np.array([s]), k, CFG)[0] == pytest.approx(v, abs=1e-12)


@given(st.floats(40, 200), st.floats(0, 50))
def test_scale_match_decreases_with_distance(s, extra):
    assert scale_match(s + extra, 0, CFG) <= scale_match(s, 0, CFG) + 1e-12


def test_reward_hand_example():
    scene = square_scene([(20, 10, 10), (30, 50, 50), (100, 600, 600)])
    region = Region(0, 0, 240, 240, 0, 1)
    r, newly = reward(scene, init_state(scene), region, 0)
    expected = (0.05 + 1 / 30) / (0.05 + 1 / 30 + 0.01)
    assert abs(r - expected) <= 1e-9
    assert r == pytest.approx(0.892857, abs=1e-6)
    assert newly == frozenset({0, 1})


def test_reward_trivial_cases():
    scene = square_scene([(20, 10, 10), (30, 50, 50)])
    assert reward(scene, init_state(scene), Region(500, 500, 100, 100, 0, 1), 0)[0] == 0.0
    lone = square_scene([(20, 10, 10)])
    assert reward(lone, init_state(lone), Region(0, 0, 240, 240, 0, 1), 0)[0] == 1.0


def test_reward_ignores_covered_objects():
    scene = square_scene([(20, 10, 10), (30, 50, 50), (100, 600, 600)])
    env = ZoomEnv(scene)
    s0 = env.reset()
    reg = Region(0, 0, 240, 240, 0, 1)
    r, newly = env.reward(s0, reg, 0)
    s1 = env.transition(s0, reg, newly)
    assert env.reward(s1, reg, 0) == (0.0, frozenset())
    r2, _ = env.reward(s1, Region(550, 550, 240, 240, 2, 1), 2)
    assert r2 == pytest.approx(1.0)


def test_initial_state_examples():
    empty = Scene(640, 640, (), "e")
    s = init_state(empty, (8, 8))
    assert not s.F.any() and not s.H.any()
    # object centered in cell (3, 4) of an 8x8 grid on 640x640: cell size 80
    one = Scene(640, 640, (ObjectAnnotation(4 * 80 + 30, 3 * 80 + 30, 20, 20, 1, 0),), "o")
    F = init_state(one, (8, 8)).F
    assert F[3, 4, 0] == 1.0
    mask = np.ones((8, 8), bool)
    mask[3, 4] = False
    assert not F[mask][:, 0].any()


def test_initial_state_permutation_invariant():
    scene = synth_scene(SynthSceneConfig(seed=9))
    perm = np.random.default_rng(1).permutation(len(scene.objects))
    shuffled = Scene(scene.width, scene.height,
                     tuple(ObjectAnnotation(*scene.objects[p].box, scene.objects[p].category, k)
                           for k, p in enumerate(perm)), "p")
    np.testing.assert_array_equal(init_state(scene, (16, 16)).F, init_state(shuffled, (16, 16)).F)


def test_history_update_examples():
    H = np.zeros((4, 4))
    z = GridRect(1, 1, 1, 2)
    out = update_history(H, z)
    assert set(zip(*np.nonzero(out))) == {(1, 1), (1, 2)}
    np.testing.assert_array_equal(update_history(out, z), out)
    assert update_history(H, GridRect(0, 3, 0, 3)).all()


def test_feature_update_examples():
    F = np.full((4, 4, N_CHANNELS), 0.8)
    z = GridRect(0, 0, 0, 0)
    once = update_feature(F, z, 0.1)
    assert once[0, 0, 0] == pytest.approx(0.08)
    assert once[1, 1, 0] == 0.8
    twice = update_feature(once, z, 0.1)
    np.testing.assert_allclose(twice[0, 0], 0.8 * 0.01)


def random_params(seed, scale=1.0):
    rng = np.random.default_rng(seed)
    p = PolicyParams.zeros(feature_dim(N_CHANNELS), 3, 3)
    return p.with_flat(rng.normal(0, scale, p.size))


def test_empty_scene_episode():
    ep = run_episode(ZoomEnv(Scene(640, 480, (), "e"), (8, 8)), random_params(0), "greedy", 7)
    assert len(ep) == 0 and ep.total_return == 0.0


def test_greedy_episode_deterministic():
    env = ZoomEnv(synth_scene(SynthSceneConfig(seed=2)), (16, 16))
    a = run_episode(env, random_params(3), "greedy", 7)
    b = run_episode(env, random_params(3), "greedy", 7)
    assert [s.action for s in a.steps] == [s.action for s in b.steps]
    assert a.rewards == b.rewards


@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_rewards_in_unit_interval(scene_seed, param_seed):
    env = ZoomEnv(synth_scene(SynthSceneConfig(seed=scene_seed)), (8, 8))
    ep = run_episode(env, random_params(param_seed, 2.0), "sample", 7, 0.3, np.random.default_rng(param_seed))
    covered = set()
    for step in ep.steps:
        assert 0.0 <= step.reward <= 1.0 + 1e-12
        assert not (covered & step.newly_covered)
        covered |= step.newly_covered


def test_weights_override_drives_reward():
    scene = square_scene([(20, 10, 10), (30, 50, 50), (100, 600, 600)])
    env = ZoomEnv(scene, weights=np.array([0.0, 0.0, 1.0]))
    r, _ = env.reward(env.reset(), Region(0, 0, 240, 240, 0, 1), 0)
    assert r == 0.0
    with pytest.raises(ValueError):
        ZoomEnv(scene, weights=np.array([1.0]))


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(beta=0)
    with pytest.raises(ValueError):
        RewardConfig(kappa=1.0)
