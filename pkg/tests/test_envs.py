import numpy as np
import pytest

from gradlab.envs import (
    CartPoleSpec,
    CartPoleVecEnv,
    GridWorldSpec,
    GridWorldVecEnv,
    bfs_distance,
    make_vecenv,
    optimal_return_oracle,
)
from gradlab.errors import ConfigError, InputError


class TestGridWorldBasics:
    def test_reset_onehot_at_start(self):
        spec = GridWorldSpec(size=5, start=(0, 0))
        env = GridWorldVecEnv(spec, 3, seed=0)
        obs = env.reset()
        assert obs.shape == (3, 25)
        assert np.array_equal(obs[:, 0], np.ones(3))
        assert obs.sum() == 3

    def test_random_starts_avoid_goal(self):
        env = GridWorldVecEnv(GridWorldSpec(size=4), 64, seed=1)
        pos, _ = env.state_snapshot()
        assert not np.any((pos[:, 0] == 3) & (pos[:, 1] == 3))

    def test_same_seed_same_observations(self):
        a = GridWorldVecEnv(GridWorldSpec(), 4, seed=9).reset()
        b = GridWorldVecEnv(GridWorldSpec(), 4, seed=9).reset()
        assert np.array_equal(a, b)

    def test_adjacent_goal_step_solves(self):
        spec = GridWorldSpec(size=5, start=(3, 4))
        env = GridWorldVecEnv(spec, 1, seed=0)
        obs, rewards, dones = env.step(np.array([1]))  # move down to (4,4)
        assert rewards[0] == 1.0 and dones[0]
        # auto-reset: the returned observation is the next episode's start
        assert obs[0, 24] == 0.0
        assert obs[0].argmax() == 3 * 5 + 4

    def test_wall_clipping(self):
        spec = GridWorldSpec(size=3, start=(0, 0))
        env = GridWorldVecEnv(spec, 1, seed=0)
        env.step(np.array([0]))  # up against the edge: stays
        pos, _ = env.state_snapshot()
        assert tuple(pos[0]) == (0, 0)

    def test_timeout_done_with_zero_reward(self):
        spec = GridWorldSpec(size=3, start=(0, 0), max_steps=2)
        env = GridWorldVecEnv(spec, 1, seed=0)
        _, r1, d1 = env.step(np.array([0]))
        _, r2, d2 = env.step(np.array([0]))
        assert not d1[0] and d2[0] and r2[0] == 0.0

    def test_out_of_range_action(self):
        env = GridWorldVecEnv(GridWorldSpec(size=3), 2, seed=0)
        with pytest.raises(InputError):
            env.step(np.array([0, 4]))

    def test_image_observation(self):
        spec = GridWorldSpec(size=6, observation="image", start=(2, 3))
        env = GridWorldVecEnv(spec, 2, seed=0)
        obs = env.reset()
        assert obs.shape == (2, 1, 6, 6)
        assert obs[0, 0, 2, 3] == 1.0 and obs.sum() == 2

    def test_episode_returns_bounded(self):
        env = GridWorldVecEnv(GridWorldSpec(size=4), 8, seed=3)
        rng = np.random.default_rng(0)
        for _ in range(200):
            env.step(rng.integers(0, 4, 8))
        returns = list(env.tracker.completed)
        assert len(returns) > 0
        assert set(returns) <= {0.0, 1.0}


class TestGridWorldBatchEquivalence:
    def test_batched_equals_single(self):
        spec = GridWorldSpec(size=5)
        batched = GridWorldVecEnv(spec, 3, seed=[11, 22, 33])
        singles = [GridWorldVecEnv(spec, 1, seed=[s]) for s in (11, 22, 33)]
        rng = np.random.default_rng(5)
        for _ in range(100):
            actions = rng.integers(0, 4, 3)
            obs_b, rew_b, done_b = batched.step(actions)
            for i, env in enumerate(singles):
                obs_s, rew_s, done_s = env.step(actions[i : i + 1])
                assert np.array_equal(obs_b[i], obs_s[0])
                assert rew_b[i] == rew_s[0] and done_b[i] == done_s[0]
        pos_b, steps_b = batched.state_snapshot()
        for i, env in enumerate(singles):
            pos_s, steps_s = env.state_snapshot()
            assert np.array_equal(pos_b[i], pos_s[0]) and steps_b[i] == steps_s[0]


def cartpole_scalar_oracle(state, action, spec):
    x, x_dot, th, th_dot = state
    force = spec.force if action == 1 else -spec.force
    total = spec.cart_mass + spec.pole_mass
    pml = spec.pole_mass * spec.half_length
    temp = (force + pml * th_dot**2 * np.sin(th)) / total
    th_acc = (spec.gravity * np.sin(th) - np.cos(th) * temp) / (
        spec.half_length * (4 / 3 - spec.pole_mass * np.cos(th) ** 2 / total)
    )
    x_acc = temp - pml * th_acc * np.cos(th) / total
    return np.array(
        [x + spec.dt * x_dot, x_dot + spec.dt * x_acc, th + spec.dt * th_dot, th_dot + spec.dt * th_acc]
    )


class TestCartPole:
    def test_reset_within_bounds(self):
        env = CartPoleVecEnv(CartPoleSpec(), 16, seed=0)
        obs = env.reset()
        assert np.all(np.abs(obs) <= 0.05)

    def test_seed_determinism(self):
        a = CartPoleVecEnv(CartPoleSpec(), 4, seed=7).reset()
        b = CartPoleVecEnv(CartPoleSpec(), 4, seed=7).reset()
        assert np.array_equal(a, b)

    def test_alternating_forces_survive(self):
        env = CartPoleVecEnv(CartPoleSpec(), 1, seed=0)
        env._state[0] = 0.0  # zero angle, zero velocity
        state = env._state[0].copy()
        alive = 0
        for t in range(12):
            action = t % 2
            expected = cartpole_scalar_oracle(state, action, env.spec)
            _, _, dones = env.step(np.array([action]))
            assert np.allclose(env._state[0], expected, atol=1e-12)
            state = expected
            if dones[0]:
                break
            alive += 1
        assert alive > 10

    def test_angle_limit_terminates(self):
        env = CartPoleVecEnv(CartPoleSpec(), 1, seed=0)
        done_seen = False
        for _ in range(200):
            _, _, dones = env.step(np.array([1]))  # constant push tips the pole
            if dones[0]:
                done_seen = True
                break
        assert done_seen
        assert np.all(np.abs(env._state[0]) <= 0.05)  # auto-reset state

    def test_batched_equals_single(self):
        spec = CartPoleSpec()
        batched = CartPoleVecEnv(spec, 2, seed=[3, 4])
        singles = [CartPoleVecEnv(spec, 1, seed=[s]) for s in (3, 4)]
        rng = np.random.default_rng(1)
        for _ in range(300):
            actions = rng.integers(0, 2, 2)
            obs_b, _, _ = batched.step(actions)
            for i, env in enumerate(singles):
                obs_s, _, _ = env.step(actions[i : i + 1])
                assert np.array_equal(obs_b[i], obs_s[0])

    def test_returns_bounded(self):
        env = CartPoleVecEnv(CartPoleSpec(max_steps=50), 4, seed=2)
        rng = np.random.default_rng(3)
        for _ in range(400):
            env.step(rng.integers(0, 2, 4))
        returns = np.array(env.tracker.completed)
        assert returns.size and np.all((returns >= 1) & (returns <= 50))


class TestOracle:
    def test_corner_to_corner(self):
        spec = GridWorldSpec(size=12, start=(0, 0))
        assert bfs_distance(spec) == 22
        assert optimal_return_oracle(spec) == 1.0

    def test_size_two(self):
        spec = GridWorldSpec(size=2, start=(0, 0))
        assert bfs_distance(spec) == 2
        assert optimal_return_oracle(spec) == 1.0

    def test_unreachable_goal(self):
        size = 4
        walls = frozenset({(2, 3), (3, 2), (2, 2)})  # seals off the goal corner
        spec = GridWorldSpec(size=size, start=(0, 0), walls=walls)
        assert bfs_distance(spec) is None
        assert optimal_return_oracle(spec) == 0.0

    def test_default_start_is_corner(self):
        assert bfs_distance(GridWorldSpec(size=5)) == 8

    def test_unsupported_env(self):
        with pytest.raises(InputError):
            optimal_return_oracle(CartPoleSpec())


class TestFactory:
    def test_make_vecenv(self):
        env = make_vecenv("gridworld", 2, seed=0, size=4)
        assert isinstance(env, GridWorldVecEnv)
        env = make_vecenv("cartpole", 2, seed=0)
        assert isinstance(env, CartPoleVecEnv)
        with pytest.raises(ConfigError):
            make_vecenv("mountaincar", 2)

    def test_bad_specs(self):
        with pytest.raises(ConfigError):
            GridWorldSpec(size=1)
        with pytest.raises(ConfigError):
            GridWorldSpec(size=3, start=(2, 2))
        with pytest.raises(ConfigError):
            CartPoleSpec(dt=0.0)
