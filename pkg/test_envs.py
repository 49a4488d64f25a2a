import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from envs import (
    D_MIN,
    CoordinationGame,
    EnvState,
    FlockingEnv,
    SpawnError,
    TrajectoryRecorder,
    coord_reset,
    coord_step,
    coordination_grid_search,
    flocking_obs_dim,
    flocking_observe,
    flocking_reset,
    flocking_step,
    make_env,
    nearest_neighbour_distances,
)

REWARD_LOW = -0.05 * 4 * np.sqrt(2) - 2.5
REWARD_HIGH = 5.0


def still_state(positions, goal=(1.0, 1.0)):
    positions = np.asarray(positions, dtype=float)
    return EnvState(positions, np.zeros_like(positions), np.asarray(goal, dtype=float))


class TestFlockingReset(unittest.TestCase):
    def test_observation_size(self):
        self.assertEqual(flocking_obs_dim(3), 14)
        _, obs = flocking_reset(np.random.default_rng(0), 3)
        self.assertEqual(obs.shape, (42,))

    def test_fixed_seed_gives_identical_state(self):
        a, obs_a = flocking_reset(np.random.default_rng(9), 4)
        b, obs_b = flocking_reset(np.random.default_rng(9), 4)
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.goal, b.goal)
        np.testing.assert_array_equal(obs_a, obs_b)

    def test_spawn_constraints(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            state, _ = flocking_reset(rng, 5)
            self.assertGreaterEqual(nearest_neighbour_distances(state.positions).min(), D_MIN)
            self.assertTrue(np.all(np.linalg.norm(state.positions - [-1.5, -1.5], axis=1) <= 0.5))
            self.assertTrue(np.all((state.goal >= 0.5) & (state.goal <= 1.5)))
            np.testing.assert_array_equal(state.velocities, 0.0)

    def test_observation_layout(self):
        state = EnvState(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0.1, 0.0], [0.0, 0.2]]), np.array([1.0, 1.0]))
        obs = flocking_observe(state)
        np.testing.assert_allclose(obs[:10], [0, 0, 0.1, 0, 1, 1, 1, 0, -0.1, 0.2])

    def test_impossible_spawn_rejected(self):
        with self.assertRaises(SpawnError):
            flocking_reset(np.random.default_rng(0), 60)
        with self.assertRaises(ValueError):
            flocking_reset(np.random.default_rng(0), 1)


class TestFlockingStep(unittest.TestCase):
    def test_agent_at_goal_with_good_neighbours(self):
        state = still_state([[1.0, 1.0], [1.5, 1.0], [1.0, 1.5]])
        _, result, _ = flocking_step(state, np.zeros(6))
        self.assertEqual(result.rew[0], 5.0)

    def test_collision_penalises_both(self):
        state = still_state([[-1.0, -1.0], [-0.9, -1.0], [-1.0, -0.6]], goal=(1.5, 1.5))
        _, result, _ = flocking_step(state, np.zeros(6))
        dist = np.linalg.norm(state.positions - state.goal, axis=1)
        np.testing.assert_allclose(result.rew[:2], -0.05 * dist[:2] - 2.0)
        self.assertTrue(result.info["collision"])

    def test_zero_action_keeps_position(self):
        state = still_state([[-1.0, -1.0], [-0.5, -1.0], [-1.0, -0.5]], goal=(1.5, 1.5))
        new_state, result, _ = flocking_step(state, np.zeros(6))
        np.testing.assert_array_equal(new_state.positions, state.positions)
        np.testing.assert_allclose(result.rew, -0.05 * np.linalg.norm(state.positions - state.goal, axis=1))

    def test_speed_and_arena_clamps(self):
        state = EnvState(np.array([[1.99, 0.0], [0.0, 0.0]]), np.array([[0.99, 0.0], [0.0, 0.0]]), np.zeros(2))
        new_state, _, _ = flocking_step(state, np.array([1.0, 1.0, 0.0, 0.0]))
        self.assertLessEqual(np.linalg.norm(new_state.velocities[0]), 1.0 + 1e-12)
        self.assertLessEqual(new_state.positions[0, 0], 2.0)

    def test_out_of_bounds_actions_clamped_with_warning(self):
        env = FlockingEnv(3)
        env.reset(np.random.default_rng(0))
        with self.assertLogs("envs", level="WARNING"):
            env.step(np.full(6, 3.0))
        env.step(np.full(6, -3.0))
        self.assertEqual(env.clamped_actions, 2)

    def test_episode_properties(self):
        """Rewards stay bounded, episodes end at step 100, success implies no collision."""
        rng = np.random.default_rng(4)
        env = FlockingEnv(3)
        for episode in range(3):
            env.reset(rng)
            collided, steps, result = False, 0, None
            while result is None or not result.done:
                result = env.step(rng.uniform(-1, 1, size=6))
                steps += 1
                collided = collided or result.info["collision"]
                self.assertTrue(np.all(result.rew >= REWARD_LOW) and np.all(result.rew <= REWARD_HIGH))
            self.assertEqual(steps, 100)
            if result.info["success"]:
                self.assertFalse(collided)

    def test_identical_seed_and_actions_give_identical_trajectory(self):
        def rollout():
            env = FlockingEnv(3)
            env.reset(np.random.default_rng(5))
            actions = np.random.default_rng(6)
            return np.array([env.step(actions.uniform(-1, 1, size=6)).rew for _ in range(30)])
        np.testing.assert_array_equal(rollout(), rollout())

    def test_success_needs_everyone_at_goal_without_collisions(self):
        state = EnvState(np.array([[1.0, 1.0], [1.3, 1.0], [1.0, 1.3]]), np.zeros((3, 2)),
                         np.array([1.1, 1.1]), step=99)
        _, result, _ = flocking_step(state, np.zeros(6))
        self.assertTrue(result.done and result.info["success"])
        _, result, _ = flocking_step(EnvState(state.positions, state.velocities, state.goal, 99, collided=True),
                                     np.zeros(6))
        self.assertFalse(result.info["success"])


class TestCoordinationGame(unittest.TestCase):
    def test_rewards(self):
        np.testing.assert_array_equal(coord_step(0.5, 0.5).rew, [0.0, 0.0])
        np.testing.assert_array_equal(coord_step(0.0, 0.5).rew, [-0.25, 0.0])
        self.assertTrue(coord_step(0.5, 0.5).done)
        np.testing.assert_array_equal(coord_reset(), [1.0, 1.0])

    def test_success_threshold(self):
        self.assertTrue(coord_step(0.5, 0.5).info["success"])
        self.assertFalse(coord_step(0.0, 0.5).info["success"])

    def test_actions_clamped(self):
        np.testing.assert_array_equal(coord_step(2.0, 1.0).rew, [0.0, -0.25])
        env = CoordinationGame()
        env.step(np.array([1.5, 0.0]))
        self.assertEqual(env.clamped_actions, 1)

    def test_grid_oracle(self):
        oracle = coordination_grid_search(0.01)
        self.assertEqual(oracle.grid.shape, (201,))
        np.testing.assert_allclose(oracle.best_joint, (0.5, 0.5), atol=1e-12)
        self.assertAlmostEqual(oracle.best_total, 0.0, places=12)
        np.testing.assert_allclose(oracle.best_response, oracle.grid)

    def test_two_agents_only(self):
        with self.assertRaises(ValueError):
            CoordinationGame(3)
        with self.assertRaises(ValueError):
            make_env("gridworld", 2)


class TestTrajectoryRecorder(unittest.TestCase):
    def test_flocking_dump(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "traj.csv")
            env = FlockingEnv(2)
            env.reset(np.random.default_rng(0))
            recorder = TrajectoryRecorder(path)
            for t in range(3):
                a = np.zeros(4)
                recorder.record(0, t, env, a, env.step(a).rew)
            recorder.close()
            frame = pd.read_csv(path)
            self.assertEqual(list(frame.columns), ["episode", "step", "p0_x", "p0_y", "v0_x", "v0_y",
                                                   "p1_x", "p1_y", "v1_x", "v1_y", "r0", "r1"])
            self.assertEqual(len(frame), 3)


if __name__ == "__main__":
    unittest.main()
