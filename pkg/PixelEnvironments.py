#!/usr/bin/env python3
"""
Synthetic pixel environments so that the whole attack pipeline
trains and tests without external simulators.

- PointGoalPixels: a dot moved by a 2-dim continuous action towards a goal dot.
- GridAvoidPixels: a 4-action grid world with a hazard cell, rendered to pixels.
- ChainPixels: a tiny deterministic chain MDP whose states render as distinct images.

All observations are float32 arrays [channels, height, width] with values in [0,1].
Dynamics are deterministic given (seed, episode index).
"""
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "ActionKind", "EnvSpec", "StepResult", "EnvConfig", "PixelEnv",
    "PointGoalPixels", "GridAvoidPixels", "ChainPixels", "ExternalEnvAdapter",
    "ActionOutOfBounds", "EpisodeFinished", "EnvSpecMismatch", "make_env"
]

class ActionOutOfBounds(Exception):
    """Raised when an action violates the action space of the environment"""
    pass

class EpisodeFinished(Exception):
    """Raised when step() is called after the episode is done"""
    pass

class EnvSpecMismatch(Exception):
    """Raised when an artifact was produced for a different environment"""
    pass

class ActionKind(object):
    Continuous = "continuous"
    Discrete = "discrete"

class EnvSpec(namedtuple("EnvSpec", ["name", "obs_channels", "obs_height", "obs_width",
                                     "action_kind", "action_dim", "action_count",
                                     "episode_horizon", "seed"])):
    """
    Static description of an environment.
    For continuous envs action_count is 0, for discrete envs action_dim is 0.
    """
    def validate(self):
        if min(self.obs_channels, self.obs_height, self.obs_width) < 1:
            raise ValueError(f"Observation dimensions must be >= 1, got {self.obs_shape}")
        if self.episode_horizon < 1:
            raise ValueError(f"episode_horizon must be >= 1, got {self.episode_horizon}")
        if self.action_kind == ActionKind.Continuous and self.action_dim < 1:
            raise ValueError("Continuous envs need action_dim >= 1")
        if self.action_kind == ActionKind.Discrete and self.action_count < 1:
            raise ValueError("Discrete envs need action_count >= 1")
        if self.action_kind not in (ActionKind.Continuous, ActionKind.Discrete):
            raise ValueError(f"Unknown action kind {self.action_kind}")
        return self

    @property
    def obs_shape(self):
        return (self.obs_channels, self.obs_height, self.obs_width)

    @property
    def is_continuous(self):
        return self.action_kind == ActionKind.Continuous

    def compatible_with(self, other) -> bool:
        """
        Two specs are compatible if observations and actions agree.
        The seed and horizon may differ.
        """
        keys = ["name", "obs_channels", "obs_height", "obs_width", "action_kind", "action_dim", "action_count"]
        mine, theirs = self._asdict(), dict(other._asdict() if hasattr(other, "_asdict") else other)
        return all(mine[key] == theirs.get(key) for key in keys)

    @staticmethod
    def from_dict(d):
        return EnvSpec(**{key: d[key] for key in EnvSpec._fields})

StepResult = namedtuple("StepResult", ["next_obs", "reward", "done"])

@dataclass
class EnvConfig:
    name: str = "point_goal"
    seed: int = 0
    obs_size: int = 32
    episode_horizon: int = 50
    # PointGoalPixels
    max_speed: float = 0.08
    goal_radius: float = 0.05
    dot_radius: float = 2.0
    # GridAvoidPixels
    grid_size: int = 5
    hazards: list = field(default_factory=lambda: [[2, 2]])
    goal_cell: list = field(default_factory=lambda: [4, 4])
    # ChainPixels
    chain_rewards: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0])

    def __post_init__(self):
        if self.name not in _ENV_CLASSES:
            raise ValueError(f"Unknown environment '{self.name}', expected one of {sorted(_ENV_CLASSES)}")
        if self.obs_size < 4:
            raise ValueError(f"obs_size must be >= 4, got {self.obs_size}")
        if self.episode_horizon < 1:
            raise ValueError(f"episode_horizon must be >= 1, got {self.episode_horizon}")
        if not 1 <= len(self.chain_rewards) <= 4:
            raise ValueError("ChainPixels supports 1 to 4 states")

class PixelEnv(object):
    """
    Base class. An instance is single-owner: use one instance per concurrent caller.
    """
    def __init__(self, spec: EnvSpec):
        self.spec = spec.validate()
        self.episode_index = -1
        self.steps = 0
        self.done = True
        self.rng = None

    def reset(self, episode_index: Optional[int] = None) -> np.ndarray:
        """
        Start a new episode. Without an explicit episode_index, episodes
        are numbered 0, 1, 2, ... per instance.
        """
        self.episode_index = self.episode_index + 1 if episode_index is None else int(episode_index)
        self.rng = np.random.default_rng([self.spec.seed, self.episode_index])
        self.steps = 0
        self.done = False
        self._reset_state()
        return self.render()

    def step(self, action) -> StepResult:
        if self.done:
            raise EpisodeFinished(f"{self.spec.name}: step() called after the episode ended, call reset()")
        action = self.check_action(action)
        reward, goal_done = self._transition(action)
        self.steps += 1
        self.done = bool(goal_done or self.steps >= self.spec.episode_horizon)
        return StepResult(self.render(), float(reward), self.done)

    def check_action(self, action):
        if self.spec.is_continuous:
            action = np.asarray(action, dtype=np.float64).reshape(-1)
            if action.shape != (self.spec.action_dim,):
                raise ActionOutOfBounds(f"Expected action of shape ({self.spec.action_dim},), got {action.shape}")
            if not np.all(np.isfinite(action)) or np.any(np.abs(action) > 1.0 + 1e-6):
                raise ActionOutOfBounds(f"Action {action.tolist()} outside [-1,1]^{self.spec.action_dim}")
            return np.clip(action, -1.0, 1.0)
        else:
            try:
                index = int(np.asarray(action).reshape(-1)[0]) if np.ndim(action) else int(action)
            except (TypeError, ValueError, IndexError):
                raise ActionOutOfBounds(f"Invalid discrete action {action!r}")
            if not 0 <= index < self.spec.action_count:
                raise ActionOutOfBounds(f"Action {index} outside {{0..{self.spec.action_count - 1}}}")
            return index

    @property
    def max_step_reward(self) -> float:
        raise NotImplementedError

    def render(self) -> np.ndarray:
        raise NotImplementedError

    def _reset_state(self):
        raise NotImplementedError

    def _transition(self, action):
        raise NotImplementedError

    def __str__(self):
        return f"{type(self).__name__}(seed={self.spec.seed}, episode={self.episode_index}, step={self.steps})"

    def __repr__(self) -> str:
        return self.__str__()

def _pixel_grid(size):
    """Pixel center coordinates, as (ys, xs) arrays of shape [size, size]"""
    return np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")

class PointGoalPixels(PixelEnv):
    """
    Continuous 2-dim control. State: agent and goal positions in [0,1]^2.

    Channels: 0 = agent dot, 1 = goal dot, 2 = arena border.
    Dynamics: agent <- clip(agent + max_speed * action, 0, 1).
    Reward (evaluated at the pre-step state, d = |agent - goal|):
        r = 0.5 * max(0, 1 - d / sqrt(2)) + 0.5 * [d <= goal_radius]
    so 0 <= r <= 1 per step and the episodic return is bounded by the horizon.
    Episodes end at the horizon only.
    """
    MAX_DISTANCE = float(np.sqrt(2.0))

    def __init__(self, seed=0, obs_size=32, episode_horizon=50, max_speed=0.08, goal_radius=0.05, dot_radius=2.0):
        super().__init__(EnvSpec("point_goal", 3, obs_size, obs_size, ActionKind.Continuous, 2, 0,
                                 episode_horizon, seed))
        self.max_speed = float(max_speed)
        self.goal_radius = float(goal_radius)
        self.dot_radius = float(dot_radius)
        self.agent = np.zeros(2)
        self.goal = np.zeros(2)
        self._ys, self._xs = _pixel_grid(obs_size)
        border = np.zeros((obs_size, obs_size), dtype=np.float32)
        border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = 1.0
        self._border = border

    @property
    def max_step_reward(self) -> float:
        return 1.0

    def _reset_state(self):
        while True:
            agent = self.rng.uniform(0.1, 0.9, size=2)
            goal = self.rng.uniform(0.1, 0.9, size=2)
            if np.linalg.norm(agent - goal) >= 0.3:
                break
        self.agent, self.goal = agent, goal

    def set_positions(self, agent, goal):
        self.agent = np.clip(np.asarray(agent, dtype=np.float64), 0.0, 1.0)
        self.goal = np.clip(np.asarray(goal, dtype=np.float64), 0.0, 1.0)

    def reward_at(self, agent, goal) -> float:
        distance = float(np.linalg.norm(np.asarray(agent) - np.asarray(goal)))
        shaped = 0.5 * max(0.0, 1.0 - distance / self.MAX_DISTANCE)
        bonus = 0.5 if distance <= self.goal_radius else 0.0
        return shaped + bonus

    def next_position(self, agent, action):
        return np.clip(np.asarray(agent) + self.max_speed * np.asarray(action), 0.0, 1.0)

    def _transition(self, action):
        reward = self.reward_at(self.agent, self.goal)
        self.agent = self.next_position(self.agent, action)
        return reward, False

    def _disk(self, position):
        size = self.spec.obs_width
        # (x, y) in [0,1]^2 -> pixel centers in [0, size-1]
        cx, cy = position[0] * (size - 1), position[1] * (size - 1)
        distance = np.sqrt((self._xs - cx) ** 2 + (self._ys - cy) ** 2)
        return np.clip(self.dot_radius + 0.5 - distance, 0.0, 1.0)

    def render_positions(self, agent, goal) -> np.ndarray:
        obs = np.empty(self.spec.obs_shape, dtype=np.float32)
        obs[0] = self._disk(agent)
        obs[1] = self._disk(goal)
        obs[2] = self._border
        return obs

    def render(self) -> np.ndarray:
        return self.render_positions(self.agent, self.goal)

class GridAvoidPixels(PixelEnv):
    """
    Discrete 4-action grid world (0 = up, 1 = down, 2 = left, 3 = right).
    Moving into a wall leaves the agent in place.

    Channels: 0 = agent cell, 1 = goal cell, 2 = hazard cells.
    Rewards: +1 on entering the goal (episode ends), -1 on entering a hazard
    (episode ends), -0.01 otherwise. Per-step reward lies in [-1, 1].
    """
    MOVES = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}

    def __init__(self, seed=0, obs_size=32, episode_horizon=50, grid_size=5, hazards=((2, 2),), goal_cell=(4, 4)):
        super().__init__(EnvSpec("grid_avoid", 3, obs_size, obs_size, ActionKind.Discrete, 0, 4,
                                 episode_horizon, seed))
        self.grid_size = int(grid_size)
        self.cell_pixels = obs_size // self.grid_size
        if self.cell_pixels < 1:
            raise ValueError(f"obs_size {obs_size} too small for a {grid_size}x{grid_size} grid")
        self.offset = (obs_size - self.cell_pixels * self.grid_size) // 2
        self.hazards = [tuple(int(v) for v in cell) for cell in hazards]
        self.goal_cell = tuple(int(v) for v in goal_cell)
        self.agent_cell = (0, 0)

    @property
    def max_step_reward(self) -> float:
        return 1.0

    def free_cells(self):
        return [(r, c) for r in range(self.grid_size) for c in range(self.grid_size)
                if (r, c) not in self.hazards and (r, c) != self.goal_cell]

    def _reset_state(self):
        cells = self.free_cells()
        self.agent_cell = cells[int(self.rng.integers(len(cells)))]

    def next_cell(self, cell, action):
        dr, dc = self.MOVES[int(action)]
        row = min(max(cell[0] + dr, 0), self.grid_size - 1)
        col = min(max(cell[1] + dc, 0), self.grid_size - 1)
        return (row, col)

    def _transition(self, action):
        self.agent_cell = self.next_cell(self.agent_cell, action)
        if self.agent_cell == self.goal_cell:
            return 1.0, True
        if self.agent_cell in self.hazards:
            return -1.0, True
        return -0.01, False

    def _fill(self, plane, cell):
        top = self.offset + cell[0] * self.cell_pixels
        left = self.offset + cell[1] * self.cell_pixels
        plane[top:top + self.cell_pixels, left:left + self.cell_pixels] = 1.0

    def render_cells(self, agent_cell) -> np.ndarray:
        obs = np.zeros(self.spec.obs_shape, dtype=np.float32)
        self._fill(obs[0], agent_cell)
        self._fill(obs[1], self.goal_cell)
        for hazard in self.hazards:
            self._fill(obs[2], hazard)
        return obs

    def render(self) -> np.ndarray:
        return self.render_cells(self.agent_cell)

class ChainPixels(PixelEnv):
    """
    Deterministic chain with n <= 4 states. Action 1 advances to the next
    state (wrapping around), action 0 stays. The reward is chain_rewards[state]
    of the pre-step state. State k renders as a 1-channel image with column k lit,
    so every state has a distinct image.
    """
    def __init__(self, seed=0, obs_size=4, episode_horizon=1000, chain_rewards=(0.0, 0.25, 0.5, 1.0)):
        n_states = len(chain_rewards)
        if not 1 <= n_states <= 4:
            raise ValueError("ChainPixels supports 1 to 4 states")
        super().__init__(EnvSpec("chain", 1, obs_size, obs_size, ActionKind.Discrete, 0, 2,
                                 episode_horizon, seed))
        self.rewards = [float(r) for r in chain_rewards]
        self.n_states = n_states
        self.state = 0

    @property
    def max_step_reward(self) -> float:
        return max(abs(r) for r in self.rewards)

    def _reset_state(self):
        self.state = 0

    def next_state(self, state, action):
        return (state + 1) % self.n_states if int(action) == 1 else state

    def transition_table(self):
        """
        {(state, action): (next_state, reward)} for all state-action pairs
        """
        return {(s, a): (self.next_state(s, a), self.rewards[s])
                for s in range(self.n_states) for a in range(self.spec.action_count)}

    def _transition(self, action):
        reward = self.rewards[self.state]
        self.state = self.next_state(self.state, action)
        return reward, False

    def render_state(self, state) -> np.ndarray:
        obs = np.zeros(self.spec.obs_shape, dtype=np.float32)
        obs[0, :, state % self.spec.obs_width] = 1.0
        return obs

    def render(self) -> np.ndarray:
        return self.render_state(self.state)

class ExternalEnvAdapter(PixelEnv):
    """
    Wraps an external simulator exposing reset() -> obs and
    step(action) -> (obs, reward, done, ...) into the PixelEnv interface.
    Observations are validated against the spec.
    """
    def __init__(self, simulator, spec: EnvSpec, max_step_reward=1.0):
        super().__init__(spec)
        self.simulator = simulator
        self._max_step_reward = float(max_step_reward)
        self._obs = None

    @property
    def max_step_reward(self) -> float:
        return self._max_step_reward

    def _checked(self, obs):
        obs = np.asarray(obs, dtype=np.float32)
        if obs.shape != self.spec.obs_shape:
            raise ValueError(f"Simulator returned observation of shape {obs.shape}, expected {self.spec.obs_shape}")
        if obs.min() < 0.0 or obs.max() > 1.0:
            raise ValueError("Simulator observation outside [0,1]")
        return obs

    def _reset_state(self):
        self._obs = self._checked(self.simulator.reset())

    def _transition(self, action):
        result = self.simulator.step(action)
        self._obs = self._checked(result[0])
        return float(result[1]), bool(result[2])

    def render(self) -> np.ndarray:
        return self._obs

_ENV_CLASSES = {
    "point_goal": PointGoalPixels,
    "grid_avoid": GridAvoidPixels,
    "chain": ChainPixels,
}

def make_env(config: EnvConfig, seed_offset=0) -> PixelEnv:
    """
    Build an environment from its config. Independent instances
    (e.g. for parallel evaluation) should use distinct seed offsets.
    """
    seed = config.seed + seed_offset
    if config.name == "point_goal":
        return PointGoalPixels(seed=seed, obs_size=config.obs_size, episode_horizon=config.episode_horizon,
                               max_speed=config.max_speed, goal_radius=config.goal_radius,
                               dot_radius=config.dot_radius)
    elif config.name == "grid_avoid":
        return GridAvoidPixels(seed=seed, obs_size=config.obs_size, episode_horizon=config.episode_horizon,
                               grid_size=config.grid_size, hazards=config.hazards, goal_cell=config.goal_cell)
    else: # chain
        return ChainPixels(seed=seed, obs_size=config.obs_size, episode_horizon=config.episode_horizon,
                           chain_rewards=config.chain_rewards)
