"""In-repo vectorized environments: a sparse-reward gridworld and cartpole.

Both auto-reset: a transition that ends an episode carries the terminal
reward together with the next episode's initial observation. Every env in
the batch owns its own PRNG stream, so stepping N envs batched equals
stepping each env alone with its seed.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .rng import child_rng, make_rng

__all__ = [
    "GridWorldSpec",
    "CartPoleSpec",
    "GridWorldVecEnv",
    "CartPoleVecEnv",
    "make_vecenv",
    "bfs_distance",
    "optimal_return_oracle",
]


@dataclass(frozen=True)
class GridWorldSpec:
    size: int = 12
    goal_reward: float = 1.0
    step_reward: float = 0.0
    max_steps: int | None = None  # defaults to 4 * size
    observation: str = "onehot"  # onehot (vector) or image (1-channel occupancy)
    start: tuple | None = None  # None: uniform random non-goal cell per episode
    walls: frozenset = frozenset()

    def __post_init__(self):
        if self.size < 2:
            raise ConfigError("gridworld size must be >= 2")
        if self.observation not in ("onehot", "image"):
            raise ConfigError(f"unknown observation mode '{self.observation}'")
        if self.start is not None and tuple(self.start) == self.goal:
            raise ConfigError("start must differ from the goal cell")
        if self.goal in {tuple(w) for w in self.walls}:
            raise ConfigError("goal cannot be a wall")

    @property
    def goal(self) -> tuple:
        return (self.size - 1, self.size - 1)

    @property
    def episode_cap(self) -> int:
        return self.max_steps if self.max_steps is not None else 4 * self.size


@dataclass(frozen=True)
class CartPoleSpec:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force: float = 10.0
    dt: float = 0.02
    angle_limit_rad: float = 12.0 * np.pi / 180.0
    position_limit: float = 2.4
    max_steps: int = 500
    gravity: float = 9.8

    def __post_init__(self):
        for name in ("cart_mass", "pole_mass", "half_length", "force", "dt"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


_MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])  # up, down, left, right


class _EpisodeTracker:
    """Per-env running returns; completed episode returns land in a window."""

    def __init__(self, n_envs: int, window: int = 256):
        self.acc = np.zeros(n_envs)
        self.completed: deque = deque(maxlen=window)

    def add(self, rewards: np.ndarray, dones: np.ndarray):
        self.acc += rewards
        for i in np.nonzero(dones)[0]:
            self.completed.append(float(self.acc[i]))
            self.acc[i] = 0.0

    def mean_return(self) -> float:
        return float(np.mean(self.completed)) if self.completed else 0.0


def _resolve_seeds(seed, n_envs: int) -> list:
    """Per-env generators from an int seed, a seed list, or ready generators."""
    if np.isscalar(seed):
        return [child_rng(int(seed), i) for i in range(n_envs)]
    seeds = list(seed)
    if len(seeds) != n_envs:
        raise InputError(f"need {n_envs} per-env seeds, got {len(seeds)}")
    return [s if isinstance(s, np.random.Generator) else make_rng(int(s)) for s in seeds]


class GridWorldVecEnv:
    """Deterministic 4-neighbor moves clipped at walls; reward 1 at the goal corner."""

    def __init__(self, spec: GridWorldSpec, n_envs: int, seed=0):
        self.spec = spec
        self.n_envs = n_envs
        self.n_actions = 4
        self._walls = {tuple(w) for w in spec.walls}
        self._rngs = _resolve_seeds(seed, n_envs)
        self._pos = np.zeros((n_envs, 2), dtype=np.int64)
        self._steps = np.zeros(n_envs, dtype=np.int64)
        self.tracker = _EpisodeTracker(n_envs)
        self.reset()

    @property
    def obs_shape(self):
        s = self.spec.size
        return (1, s, s) if self.spec.observation == "image" else (s * s,)

    def _sample_start(self, i: int) -> np.ndarray:
        if self.spec.start is not None:
            return np.array(self.spec.start, dtype=np.int64)
        s = self.spec.size
        while True:
            cell = self._rngs[i].integers(0, s, size=2)
            t = (int(cell[0]), int(cell[1]))
            if t != self.spec.goal and t not in self._walls:
                return cell

    def _observe(self) -> np.ndarray:
        s = self.spec.size
        flat = self._pos[:, 0] * s + self._pos[:, 1]
        if self.spec.observation == "onehot":
            obs = np.zeros((self.n_envs, s * s))
            obs[np.arange(self.n_envs), flat] = 1.0
            return obs
        obs = np.zeros((self.n_envs, 1, s, s))
        obs[np.arange(self.n_envs), 0, self._pos[:, 0], self._pos[:, 1]] = 1.0
        return obs

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self._rngs = _resolve_seeds(seed, self.n_envs)
        for i in range(self.n_envs):
            self._pos[i] = self._sample_start(i)
        self._steps[:] = 0
        self.tracker = _EpisodeTracker(self.n_envs)
        return self._observe()

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n_envs,) or actions.min() < 0 or actions.max() >= 4:
            raise InputError(f"need {self.n_envs} actions in [0, 4)")
        size = self.spec.size
        candidate = np.clip(self._pos + _MOVES[actions], 0, size - 1)
        if self._walls:
            for i in range(self.n_envs):
                if (int(candidate[i, 0]), int(candidate[i, 1])) in self._walls:
                    candidate[i] = self._pos[i]
        self._pos = candidate
        self._steps += 1
        at_goal = (self._pos[:, 0] == size - 1) & (self._pos[:, 1] == size - 1)
        timeout = self._steps >= self.spec.episode_cap
        dones = at_goal | timeout
        rewards = np.where(at_goal, self.spec.goal_reward, self.spec.step_reward).astype(np.float64)
        self.tracker.add(rewards, dones)
        for i in np.nonzero(dones)[0]:
            self._pos[i] = self._sample_start(i)
            self._steps[i] = 0
        return self._observe(), rewards, dones

    def state_snapshot(self):
        return self._pos.copy(), self._steps.copy()


class CartPoleVecEnv:
    """Euler-integrated classic cartpole; reward 1 per step, auto-reset on limits."""

    def __init__(self, spec: CartPoleSpec, n_envs: int, seed=0):
        self.spec = spec
        self.n_envs = n_envs
        self.n_actions = 2
        self._rngs = _resolve_seeds(seed, n_envs)
        self._state = np.zeros((n_envs, 4))  # x, x_dot, theta, theta_dot
        self._steps = np.zeros(n_envs, dtype=np.int64)
        self.tracker = _EpisodeTracker(n_envs)
        self.reset()

    @property
    def obs_shape(self):
        return (4,)

    def _init_state(self, i: int) -> np.ndarray:
        return self._rngs[i].uniform(-0.05, 0.05, size=4)

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self._rngs = _resolve_seeds(seed, self.n_envs)
        for i in range(self.n_envs):
            self._state[i] = self._init_state(i)
        self._steps[:] = 0
        self.tracker = _EpisodeTracker(self.n_envs)
        return self._state.copy()

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n_envs,) or actions.min() < 0 or actions.max() >= 2:
            raise InputError(f"need {self.n_envs} actions in [0, 2)")
        sp = self.spec
        x, x_dot, theta, theta_dot = self._state.T
        force = np.where(actions == 1, sp.force, -sp.force)
        total_mass = sp.cart_mass + sp.pole_mass
        polemass_length = sp.pole_mass * sp.half_length
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sin_t) / total_mass
        theta_acc = (sp.gravity * sin_t - cos_t * temp) / (
            sp.half_length * (4.0 / 3.0 - sp.pole_mass * cos_t**2 / total_mass)
        )
        x_acc = temp - polemass_length * theta_acc * cos_t / total_mass
        self._state = np.stack(
            [
                x + sp.dt * x_dot,
                x_dot + sp.dt * x_acc,
                theta + sp.dt * theta_dot,
                theta_dot + sp.dt * theta_acc,
            ],
            axis=1,
        )
        self._steps += 1
        breach = (np.abs(self._state[:, 0]) > sp.position_limit) | (np.abs(self._state[:, 2]) > sp.angle_limit_rad)
        dones = breach | (self._steps >= sp.max_steps)
        rewards = np.ones(self.n_envs)
        self.tracker.add(rewards, dones)
        for i in np.nonzero(dones)[0]:
            self._state[i] = self._init_state(i)
            self._steps[i] = 0
        return self._state.copy(), rewards, dones

    def state_snapshot(self):
        return self._state.copy(), self._steps.copy()


def make_vecenv(kind: str, n_envs: int, seed=0, **spec_kwargs):
    if kind == "gridworld":
        return GridWorldVecEnv(GridWorldSpec(**spec_kwargs), n_envs, seed)
    if kind == "cartpole":
        return CartPoleVecEnv(CartPoleSpec(**spec_kwargs), n_envs, seed)
    raise ConfigError(f"unknown environment '{kind}'")


def bfs_distance(spec: GridWorldSpec) -> int | None:
    """Shortest path length from spec.start (default corner (0,0)) to the goal."""
    start = tuple(spec.start) if spec.start is not None else (0, 0)
    walls = {tuple(w) for w in spec.walls}
    goal = spec.goal
    if start == goal:
        return 0
    seen = {start}
    frontier = deque([(start, 0)])
    while frontier:
        (r, c), d = frontier.popleft()
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nxt = (r + dr, c + dc)
            if not (0 <= nxt[0] < spec.size and 0 <= nxt[1] < spec.size):
                continue
            if nxt in walls or nxt in seen:
                continue
            if nxt == goal:
                return d + 1
            seen.add(nxt)
            frontier.append((nxt, d + 1))
    return None


def optimal_return_oracle(spec) -> float:
    """Best achievable episode return; gridworld only (solved by BFS)."""
    if not isinstance(spec, GridWorldSpec):
        raise InputError("optimal_return_oracle supports GridWorldSpec only")
    dist = bfs_distance(spec)
    if dist is None or dist > spec.episode_cap:
        return 0.0
    return spec.goal_reward
