"""
Local-reward Markov games.

FlockingEnv  - agents steer double integrators from a spawn corner to a goal
               disc while keeping the flock together without collisions.
CoordinationGame - one-step two-agent game whose optimum needs agent 2 to
               serve agent 1; small enough for a brute-force oracle.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Tuple

import numpy as np
import pandas as pd

from networks import AgentSpec, JointSpec

logger = logging.getLogger(__name__)

# Flocking surrogate constants
ARENA_HALF_WIDTH = 2.0
DT = 0.1
A_MAX = 1.0
V_MAX = 1.0
D_MIN = 0.2
D_MAX = 1.0
R_GOAL = 0.5
EPISODE_LENGTH = 100
SPAWN_CENTER = np.array([-1.5, -1.5])
SPAWN_RADIUS = 0.5
GOAL_LOW, GOAL_HIGH = 0.5, 1.5
MAX_SPAWN_TRIES = 1000

W_GOAL_DISTANCE = 0.05
P_COLLISION = 2.0
P_ISOLATION = 0.5
B_GOAL = 5.0

# Coordination game
COORD_TARGET = 0.5
COORD_SUCCESS_TOTAL = -0.02


class SpawnError(RuntimeError):
    """Rejection sampling could not place the agents."""


@dataclass(frozen=True)
class EnvState:
    positions: np.ndarray   # (n, 2)
    velocities: np.ndarray  # (n, 2)
    goal: np.ndarray        # (2,)
    step: int = 0
    collided: bool = False  # any collision so far this episode


@dataclass(frozen=True)
class StepResult:
    obs: np.ndarray
    rew: np.ndarray
    done: bool
    info: Dict[str, bool] = field(default_factory=dict)


def flocking_obs_dim(n: int) -> int:
    return 6 + 4 * (n - 1)


def flocking_observe(state: EnvState) -> np.ndarray:
    """o_i = [p_i, v_i, g - p_i, (p_j - p_i, v_j - v_i) for j != i], concatenated over i."""
    p, v, g = state.positions, state.velocities, state.goal
    n = p.shape[0]
    blocks = []
    for i in range(n):
        parts = [p[i], v[i], g - p[i]]
        for j in range(n):
            if j != i:
                parts.extend((p[j] - p[i], v[j] - v[i]))
        blocks.append(np.concatenate(parts))
    return np.concatenate(blocks)


def flocking_reset(rng: np.random.Generator, n: int) -> Tuple[EnvState, np.ndarray]:
    if n < 2:
        raise ValueError(f"flocking needs at least two agents, got {n}")
    positions: List[np.ndarray] = []
    for i in range(n):
        for _ in range(MAX_SPAWN_TRIES):
            radius = SPAWN_RADIUS * np.sqrt(rng.uniform())
            angle = rng.uniform(0.0, 2.0 * np.pi)
            candidate = SPAWN_CENTER + radius * np.array([np.cos(angle), np.sin(angle)])
            if all(np.linalg.norm(candidate - q) >= D_MIN for q in positions):
                positions.append(candidate)
                break
        else:
            raise SpawnError(f"could not place agent {i} of {n} after {MAX_SPAWN_TRIES} tries")
    goal = rng.uniform(GOAL_LOW, GOAL_HIGH, size=2)
    state = EnvState(np.array(positions), np.zeros((n, 2)), goal)
    return state, flocking_observe(state)


def nearest_neighbour_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    return dist.min(axis=1)


def flocking_step(state: EnvState, a_joint: np.ndarray,
                  episode_length: int = EPISODE_LENGTH) -> Tuple[EnvState, StepResult, bool]:
    """Advance one step. The third value reports whether any action had to be clamped."""
    n = state.positions.shape[0]
    accel = np.asarray(a_joint, dtype=np.float64).reshape(n, 2)
    clipped = np.clip(accel, -1.0, 1.0)
    was_clamped = bool(np.any(clipped != accel))

    v = state.velocities + clipped * A_MAX * DT
    speed = np.linalg.norm(v, axis=1)
    too_fast = speed > V_MAX
    v[too_fast] *= (V_MAX / speed[too_fast])[:, None]
    p = np.clip(state.positions + v * DT, -ARENA_HALF_WIDTH, ARENA_HALF_WIDTH)

    nearest = nearest_neighbour_distances(p)
    goal_dist = np.linalg.norm(p - state.goal, axis=1)
    collide = nearest < D_MIN
    isolated = nearest > D_MAX
    at_goal = goal_dist < R_GOAL
    rew = (-W_GOAL_DISTANCE * goal_dist - P_COLLISION * collide
           - P_ISOLATION * isolated + B_GOAL * at_goal)

    step = state.step + 1
    collided = state.collided or bool(np.any(collide))
    done = step >= episode_length
    new_state = replace(state, positions=p, velocities=v, step=step, collided=collided)
    info = {
        "success": bool(done and np.all(at_goal) and not collided),
        "collision": bool(np.any(collide)),
        "isolation": bool(np.any(isolated)),
    }
    return new_state, StepResult(flocking_observe(new_state), rew, done, info), was_clamped


class FlockingEnv:
    name = "flocking"

    def __init__(self, n_agents: int = 3, episode_length: int = EPISODE_LENGTH):
        if n_agents < 2:
            raise ValueError(f"flocking needs at least two agents, got {n_agents}")
        self.n_agents = n_agents
        self.episode_length = episode_length
        self.joint = JointSpec([AgentSpec.box(flocking_obs_dim(n_agents), 2)] * n_agents)
        self.state: EnvState = None
        self.clamped_actions = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state, obs = flocking_reset(rng, self.n_agents)
        return obs

    def step(self, a_joint: np.ndarray) -> StepResult:
        self.state, result, was_clamped = flocking_step(self.state, a_joint, self.episode_length)
        if was_clamped:
            self.clamped_actions += 1
            if self.clamped_actions == 1:
                logger.warning("[Flocking] actions outside [-1, 1] were clamped")
        return result

    def trajectory_fields(self, a_joint: np.ndarray, rew: np.ndarray) -> Dict[str, float]:
        row = {}
        for i in range(self.n_agents):
            row[f"p{i}_x"], row[f"p{i}_y"] = self.state.positions[i]
            row[f"v{i}_x"], row[f"v{i}_y"] = self.state.velocities[i]
        for i in range(self.n_agents):
            row[f"r{i}"] = rew[i]
        return row


def coord_reset(rng: np.random.Generator = None) -> np.ndarray:
    return np.array([1.0, 1.0])


def coord_step(a1: float, a2: float) -> StepResult:
    a1, a2 = float(np.clip(a1, -1.0, 1.0)), float(np.clip(a2, -1.0, 1.0))
    rew = np.array([-(a1 - a2) ** 2, -(a2 - COORD_TARGET) ** 2])
    return StepResult(coord_reset(), rew, True, {
        "success": bool(rew.sum() > COORD_SUCCESS_TOTAL),
        "collision": False,
        "isolation": False,
    })


class CoordinationGame:
    """Agent 1 wants to match agent 2; agent 2 only cares about reaching 0.5."""

    name = "coordination"

    def __init__(self, n_agents: int = 2):
        if n_agents != 2:
            raise ValueError(f"the coordination game has exactly two agents, got {n_agents}")
        self.n_agents = 2
        self.episode_length = 1
        self.joint = JointSpec([AgentSpec.box(1, 1)] * 2)
        self.clamped_actions = 0
        self._last_action = np.zeros(2)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return coord_reset(rng)

    def step(self, a_joint: np.ndarray) -> StepResult:
        a = np.asarray(a_joint, dtype=np.float64).reshape(2)
        if np.any(np.abs(a) > 1.0):
            self.clamped_actions += 1
        self._last_action = np.clip(a, -1.0, 1.0)
        return coord_step(a[0], a[1])

    def trajectory_fields(self, a_joint: np.ndarray, rew: np.ndarray) -> Dict[str, float]:
        return {"a0": self._last_action[0], "a1": self._last_action[1], "r0": rew[0], "r1": rew[1]}


class GridOracle(NamedTuple):
    grid: np.ndarray
    best_joint: Tuple[float, float]
    best_total: float
    best_response: np.ndarray  # agent 1's best a_1 for each a_2 on the grid


def coordination_grid_search(resolution: float = 0.01) -> GridOracle:
    """Brute force over the action grid of the coordination game."""
    points = int(round(2.0 / resolution)) + 1
    grid = np.linspace(-1.0, 1.0, points)
    a1, a2 = np.meshgrid(grid, grid, indexing="ij")
    r1 = -(a1 - a2) ** 2
    r2 = -(a2 - COORD_TARGET) ** 2
    total = r1 + r2
    k1, k2 = np.unravel_index(np.argmax(total), total.shape)
    best_response = grid[np.argmax(r1, axis=0)]
    return GridOracle(grid, (float(grid[k1]), float(grid[k2])), float(total[k1, k2]), best_response)


ENVIRONMENTS = {
    "flocking": FlockingEnv,
    "coordination": CoordinationGame,
}


def make_env(name: str, n_agents: int):
    env_cls = ENVIRONMENTS.get(name)
    if env_cls is None:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(ENVIRONMENTS)}")
    return env_cls(n_agents)


class TrajectoryRecorder:
    """Collects one row per evaluation step; `close` writes the CSV."""

    def __init__(self, path: str):
        self.path = path
        self.rows: List[Dict[str, float]] = []

    def record(self, episode: int, step: int, env, a_joint: np.ndarray, rew: np.ndarray):
        self.rows.append({"episode": episode, "step": step, **env.trajectory_fields(a_joint, rew)})

    def close(self):
        tmp_path = f"{self.path}.tmp"
        pd.DataFrame(self.rows).to_csv(tmp_path, index=False)
        os.replace(tmp_path, self.path)
