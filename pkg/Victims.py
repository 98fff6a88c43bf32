#!/usr/bin/env python3
"""
Victim policies under attack.

Attack-side code only ever calls act(), act_batch() or query_distribution(),
each of which records one victim query per observation in the QueryLedger.
Learned victims additionally expose a differentiable handle that only
white-box baselines may use.
"""
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from ContainerIO import write_container, read_container
from PixelEnvironments import (
    EnvSpec, EnvSpecMismatch, PointGoalPixels, GridAvoidPixels, ChainPixels, PixelEnv
)
from QueryLedger import QueryContext, QueryLedger
from TorchUtils import seed_everything, frozen, soft_update, all_finite, as_batch
from Transitions import ReplayBuffer, Transition, Provenance, collate_transitions

__all__ = [
    "VictimPolicy", "ScriptedPointGoalVictim", "ScriptedGridVictim", "ConstantVictim",
    "LearnedContinuousVictim", "LearnedDiscreteVictim", "DifferentiableHandle",
    "VictimTrainConfig", "ShapeMismatch", "TrainingDiverged", "EnvSpecMismatch",
    "make_scripted_victim", "train_victim", "episode_return", "save_victim", "load_victim"
]

class ShapeMismatch(Exception):
    """Raised when an observation does not match the victim's observation shape"""
    pass

class TrainingDiverged(Exception):
    """Raised when victim training does not reach the competence threshold"""
    pass

class VictimPolicy(object):
    """
    Query-only policy pi(a|s).

    Subclasses implement _act_tensor(obs [N,C,H,W]) returning actions
    ([N,action_dim] float for continuous, [N] long for discrete).
    """
    def __init__(self, spec: EnvSpec, deterministic=True, seed=0):
        self.spec = spec
        self.deterministic = deterministic
        self.generator = torch.Generator().manual_seed(int(seed))
        self.competence = {}

    @property
    def differentiable_handle(self):
        return None

    def check_obs(self, obs) -> torch.Tensor:
        batch = as_batch(obs)
        if tuple(batch.shape[1:]) != tuple(self.spec.obs_shape):
            raise ShapeMismatch(f"Observation shape {tuple(batch.shape[1:])} does not match {self.spec.obs_shape}")
        return batch

    def act_batch(self, obs, ledger: QueryLedger = None, context=QueryContext.PolicyExecution,
                  operation="victim.act") -> torch.Tensor:
        """
        Query the victim on a batch of observations.
        Records len(obs) queries in the ledger under the given context.
        """
        batch = self.check_obs(obs)
        with torch.no_grad():
            actions = self._act_tensor(batch.detach())
        if ledger is not None:
            ledger.record_victim_queries(batch.shape[0], context, operation)
        return actions

    def act(self, obs, ledger: QueryLedger = None, context=QueryContext.PolicyExecution, operation="victim.act"):
        """
        Query the victim on a single observation.
        Returns a float vector for continuous actions or an int for discrete actions.
        """
        actions = self.act_batch(obs, ledger, context, operation)
        if actions.shape[0] != 1:
            raise ShapeMismatch("act() expects a single observation, use act_batch()")
        if self.spec.is_continuous:
            return actions[0].double().numpy()
        return int(actions[0])

    def query_distribution(self, obs, ledger: QueryLedger = None, context=QueryContext.Training,
                           operation="victim.distribution") -> torch.Tensor:
        """
        Action probabilities [N, action_count] of a discrete victim (one query per observation).
        """
        if self.spec.is_continuous:
            raise NotImplementedError("query_distribution() is only defined for discrete victims")
        batch = self.check_obs(obs)
        with torch.no_grad():
            probs = self._distribution_tensor(batch.detach())
        if ledger is not None:
            ledger.record_victim_queries(batch.shape[0], context, operation)
        return probs

    def _distribution_tensor(self, obs):
        actions = self._act_tensor(obs)
        return F.one_hot(actions, self.spec.action_count).float()

    def _act_tensor(self, obs):
        raise NotImplementedError

    def architecture(self) -> dict:
        raise NotImplementedError

    def networks(self) -> dict:
        return {}

    def __str__(self):
        mode = "deterministic" if self.deterministic else "stochastic"
        return f"{type(self).__name__}({self.spec.name}, {mode})"

    def __repr__(self) -> str:
        return self.__str__()

class ScriptedVictim(VictimPolicy):
    """
    Hand-written policy. In stochastic mode, continuous actions get
    Gaussian noise and discrete actions are replaced by a uniformly
    random action with probability noise.
    """
    def __init__(self, spec, deterministic=True, seed=0, noise=0.1):
        super().__init__(spec, deterministic, seed)
        self.noise = float(noise)

    def _act_tensor(self, obs):
        actions = self._scripted(obs)
        if self.deterministic or self.noise == 0.0:
            return actions
        if self.spec.is_continuous:
            noise = torch.randn(actions.shape, generator=self.generator) * self.noise
            return (actions + noise).clamp(-1.0, 1.0)
        replace = torch.rand(actions.shape, generator=self.generator) < self.noise
        random_actions = torch.randint(0, self.spec.action_count, actions.shape, generator=self.generator)
        return torch.where(replace, random_actions, actions)

    def _distribution_tensor(self, obs):
        probs = F.one_hot(self._scripted(obs), self.spec.action_count).float()
        if self.deterministic:
            return probs
        return (1.0 - self.noise) * probs + self.noise / self.spec.action_count

    def _scripted(self, obs):
        raise NotImplementedError

class ScriptedPointGoalVictim(ScriptedVictim):
    """
    Locates agent and goal as intensity-weighted centroids of channels 0 and 1
    and moves straight towards the goal:
        a = clip((goal - agent) / max_speed, -1, 1)
    """
    def __init__(self, spec, max_speed=0.08, deterministic=True, seed=0, noise=0.1):
        super().__init__(spec, deterministic, seed, noise)
        self.max_speed = float(max_speed)
        size = spec.obs_width
        ys, xs = torch.meshgrid(torch.arange(spec.obs_height, dtype=torch.float64),
                                torch.arange(size, dtype=torch.float64), indexing="ij")
        self._xs = xs / (spec.obs_width - 1)
        self._ys = ys / (spec.obs_height - 1)

    def centroids(self, plane):
        plane = plane.double()
        total = plane.sum(dim=(1, 2)).clamp_min(1e-8)
        x = (plane * self._xs).sum(dim=(1, 2)) / total
        y = (plane * self._ys).sum(dim=(1, 2)) / total
        return torch.stack([x, y], dim=1)

    def _scripted(self, obs):
        agent = self.centroids(obs[:, 0])
        goal = self.centroids(obs[:, 1])
        return ((goal - agent) / self.max_speed).clamp(-1.0, 1.0).float()

    def architecture(self) -> dict:
        return {"type": "scripted-point-goal", "max_speed": self.max_speed, "noise": self.noise}

class ScriptedGridVictim(ScriptedVictim):
    """
    Reads the agent, goal and hazard cells from the rendered grid and takes
    the first move of a shortest hazard-free path to the goal (BFS).
    """
    def __init__(self, spec, grid_size=5, deterministic=True, seed=0, noise=0.1):
        super().__init__(spec, deterministic, seed, noise)
        self.grid_size = int(grid_size)
        self.cell_pixels = spec.obs_width // self.grid_size
        self.offset = (spec.obs_width - self.cell_pixels * self.grid_size) // 2

    def cell_means(self, obs):
        g, cp, off = self.grid_size, self.cell_pixels, self.offset
        inner = obs[:, :, off:off + g * cp, off:off + g * cp]
        return inner.reshape(obs.shape[0], obs.shape[1], g, cp, g, cp).mean(dim=(3, 5))

    def _distances_to(self, goal, hazards):
        distance = {goal: 0}
        queue = deque([goal])
        while queue:
            cell = queue.popleft()
            for dr, dc in GridAvoidPixels.MOVES.values():
                neighbor = (cell[0] + dr, cell[1] + dc)
                if not (0 <= neighbor[0] < self.grid_size and 0 <= neighbor[1] < self.grid_size):
                    continue
                if neighbor in hazards or neighbor in distance:
                    continue
                distance[neighbor] = distance[cell] + 1
                queue.append(neighbor)
        return distance

    def _first_move(self, agent, goal, hazards):
        distance = self._distances_to(goal, hazards)
        best_action, best_distance = 0, None
        for action, (dr, dc) in sorted(GridAvoidPixels.MOVES.items()):
            row = min(max(agent[0] + dr, 0), self.grid_size - 1)
            col = min(max(agent[1] + dc, 0), self.grid_size - 1)
            if (row, col) in hazards or (row, col) not in distance:
                continue
            if best_distance is None or distance[(row, col)] < best_distance:
                best_action, best_distance = action, distance[(row, col)]
        return best_action

    def _scripted(self, obs):
        means = self.cell_means(obs)
        g = self.grid_size
        actions = []
        for sample in means:
            agent = divmod(int(torch.argmax(sample[0])), g)
            goal = divmod(int(torch.argmax(sample[1])), g)
            hazards = {divmod(int(i), g) for i in torch.nonzero(sample[2].reshape(-1) > 0.5).reshape(-1)}
            hazards.discard(goal)
            actions.append(self._first_move(agent, goal, hazards))
        return torch.as_tensor(actions, dtype=torch.long)

    def architecture(self) -> dict:
        return {"type": "scripted-grid", "grid_size": self.grid_size, "noise": self.noise}

class ConstantVictim(ScriptedVictim):
    """Always takes the same discrete action"""
    def __init__(self, spec, action=1, deterministic=True, seed=0, noise=0.1):
        super().__init__(spec, deterministic, seed, noise)
        self.action = int(action)

    def _scripted(self, obs):
        return torch.full((obs.shape[0],), self.action, dtype=torch.long)

    def architecture(self) -> dict:
        return {"type": "constant", "action": self.action, "noise": self.noise}

class ConvEncoder(nn.Module):
    """Two strided convolutions followed by a normalized linear projection"""
    def __init__(self, obs_shape, feature_dim=64):
        super().__init__()
        channels = obs_shape[0]
        self.convs = nn.Sequential(
            nn.Conv2d(channels, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Flatten())
        with torch.no_grad():
            flat = self.convs(torch.zeros(1, *obs_shape)).shape[1]
        self.fc = nn.Sequential(nn.Linear(flat, feature_dim), nn.LayerNorm(feature_dim), nn.Tanh())

    def forward(self, obs):
        return self.fc(self.convs(obs))

class GaussianActor(nn.Module):
    LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0

    def __init__(self, obs_shape, action_dim, feature_dim=64, hidden_dim=128):
        super().__init__()
        self.encoder = ConvEncoder(obs_shape, feature_dim)
        self.trunk = nn.Sequential(nn.Linear(feature_dim, hidden_dim), nn.ReLU(),
                                   nn.Linear(hidden_dim, 2 * action_dim))

    def forward(self, obs):
        mu, log_std = self.trunk(self.encoder(obs)).chunk(2, dim=-1)
        return mu, log_std.clamp(self.LOG_STD_MIN, self.LOG_STD_MAX)

    def sample(self, obs, generator=None):
        """
        Reparameterized tanh-Gaussian sample and its log-probability.
        """
        mu, log_std = self(obs)
        std = log_std.exp()
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        pre_tanh = mu + std * noise
        action = torch.tanh(pre_tanh)
        log_prob = torch.distributions.Normal(mu, std).log_prob(pre_tanh)
        log_prob = (log_prob - torch.log(1.0 - action.pow(2) + 1e-6)).sum(dim=-1)
        return action, log_prob

class StateActionCritic(nn.Module):
    def __init__(self, obs_shape, action_dim, feature_dim=64, hidden_dim=128):
        super().__init__()
        self.encoder = ConvEncoder(obs_shape, feature_dim)
        self.head = nn.Sequential(nn.Linear(feature_dim + action_dim, hidden_dim), nn.ReLU(),
                                  nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
                                  nn.Linear(hidden_dim, 1))

    def forward(self, obs, action):
        return self.head(torch.cat([self.encoder(obs), action], dim=-1)).squeeze(-1)

class ActionValueNetwork(nn.Module):
    def __init__(self, obs_shape, action_count, feature_dim=64, hidden_dim=128):
        super().__init__()
        self.encoder = ConvEncoder(obs_shape, feature_dim)
        self.head = nn.Sequential(nn.Linear(feature_dim, hidden_dim), nn.ReLU(),
                                  nn.Linear(hidden_dim, action_count))

    def forward(self, obs):
        return self.head(self.encoder(obs))

class LearnedContinuousVictim(VictimPolicy):
    """
    Compact entropy-regularized actor-critic. Deterministic mode
    executes the mean action tanh(mu).
    """
    def __init__(self, spec, feature_dim=64, hidden_dim=128, deterministic=True, seed=0):
        super().__init__(spec, deterministic, seed)
        self.feature_dim, self.hidden_dim = feature_dim, hidden_dim
        self.actor = GaussianActor(spec.obs_shape, spec.action_dim, feature_dim, hidden_dim)
        self.critic = StateActionCritic(spec.obs_shape, spec.action_dim, feature_dim, hidden_dim)
        self.critic_target = StateActionCritic(spec.obs_shape, spec.action_dim, feature_dim, hidden_dim)
        self.critic_target.load_state_dict(self.critic.state_dict())

    @property
    def differentiable_handle(self):
        return DifferentiableHandle(self)

    def _act_tensor(self, obs):
        if self.deterministic:
            mu, _ = self.actor(obs)
            return torch.tanh(mu)
        action, _ = self.actor.sample(obs, self.generator)
        return action

    def architecture(self) -> dict:
        return {"type": "learned-continuous", "feature_dim": self.feature_dim, "hidden_dim": self.hidden_dim}

    def networks(self) -> dict:
        return {"actor": self.actor, "critic": self.critic, "critic_target": self.critic_target}

class LearnedDiscreteVictim(VictimPolicy):
    """
    Convolutional state-action value learner. Deterministic mode is greedy,
    stochastic mode samples from softmax(Q / temperature).
    """
    def __init__(self, spec, feature_dim=64, hidden_dim=128, deterministic=True, seed=0, temperature=0.1):
        super().__init__(spec, deterministic, seed)
        self.feature_dim, self.hidden_dim = feature_dim, hidden_dim
        self.temperature = float(temperature)
        self.q = ActionValueNetwork(spec.obs_shape, spec.action_count, feature_dim, hidden_dim)
        self.q_target = ActionValueNetwork(spec.obs_shape, spec.action_count, feature_dim, hidden_dim)
        self.q_target.load_state_dict(self.q.state_dict())

    @property
    def differentiable_handle(self):
        return DifferentiableHandle(self)

    def _act_tensor(self, obs):
        values = self.q(obs)
        if self.deterministic:
            return values.argmax(dim=-1)
        probs = F.softmax(values / self.temperature, dim=-1)
        return torch.multinomial(probs, 1, generator=self.generator).squeeze(-1)

    def _distribution_tensor(self, obs):
        values = self.q(obs)
        if self.deterministic:
            return F.one_hot(values.argmax(dim=-1), self.spec.action_count).float()
        return F.softmax(values / self.temperature, dim=-1)

    def architecture(self) -> dict:
        return {"type": "learned-discrete", "feature_dim": self.feature_dim,
                "hidden_dim": self.hidden_dim, "temperature": self.temperature}

    def networks(self) -> dict:
        return {"q": self.q, "q_target": self.q_target}

class DifferentiableHandle(object):
    """
    White-box access to a learned victim's networks.
    Objectives are to be minimized by the attacker.
    """
    def __init__(self, victim):
        self.victim = victim

    def actions(self, obs):
        """Differentiable action (continuous) or action values (discrete)"""
        if isinstance(self.victim, LearnedContinuousVictim):
            mu, _ = self.victim.actor(obs)
            return torch.tanh(mu)
        return self.victim.q(obs)

    def attack_objective(self, adv_obs, clean_obs):
        """
        Continuous victims: the victim's own value Q(s', mu(s')).
        Discrete victims: negative cross-entropy against the clean greedy action.
        """
        if isinstance(self.victim, LearnedContinuousVictim):
            return self.victim.critic(adv_obs, self.actions(adv_obs)).mean()
        with torch.no_grad():
            clean_actions = self.victim.q(clean_obs).argmax(dim=-1)
        return -F.cross_entropy(self.victim.q(adv_obs), clean_actions)

    def targeted_objective(self, adv_obs, dimension_index, target_low, target_high):
        """Mean hinge distance of the victim's action dimension to [target_low, target_high]"""
        action = self.actions(adv_obs)[:, dimension_index]
        return (F.relu(target_low - action) + F.relu(action - target_high)).mean()

@dataclass
class VictimTrainConfig:
    kind: str = "learned"  # learned | scripted
    seed: int = 0
    steps: int = 20000
    start_steps: int = 1000
    batch_size: int = 64
    lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.01
    alpha: float = 0.05
    feature_dim: int = 64
    hidden_dim: int = 128
    replay_capacity: int = 100000
    # Discrete victims: linearly decaying epsilon-greedy exploration
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 10000
    eval_episodes: int = 5
    competence_ratio: float = 0.8
    deterministic: bool = True

    def __post_init__(self):
        if self.kind not in ("learned", "scripted"):
            raise ValueError(f"Victim kind must be 'learned' or 'scripted', got '{self.kind}'")
        if self.steps < 0 or self.start_steps < 0:
            raise ValueError("Victim training step counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0,1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0,1], got {self.tau}")
        if self.eval_episodes < 1:
            raise ValueError(f"eval_episodes must be >= 1, got {self.eval_episodes}")

def make_scripted_victim(env: PixelEnv, deterministic=True, seed=0) -> VictimPolicy:
    if isinstance(env, PointGoalPixels):
        return ScriptedPointGoalVictim(env.spec, env.max_speed, deterministic, seed)
    elif isinstance(env, GridAvoidPixels):
        return ScriptedGridVictim(env.spec, env.grid_size, deterministic, seed)
    elif isinstance(env, ChainPixels):
        return ConstantVictim(env.spec, 1, deterministic, seed)
    raise ValueError(f"No scripted victim for {type(env).__name__}")

# Held-out episode indices used for competence measurements
COMPETENCE_EPISODE_OFFSET = 1000000

def episode_return(env: PixelEnv, victim: VictimPolicy, episode_index: int) -> float:
    """Clean return of one episode, without ledger accounting"""
    obs = env.reset(episode_index)
    total, done = 0.0, False
    while not done:
        result = env.step(victim.act(obs))
        total += result.reward
        obs, done = result.next_obs, result.done
    return total

def measure_competence(env, victim, config: VictimTrainConfig) -> dict:
    indices = [COMPETENCE_EPISODE_OFFSET + k for k in range(config.eval_episodes)]
    reference = make_scripted_victim(env)
    scripted_return = float(np.mean([episode_return(env, reference, i) for i in indices]))
    mean_return = float(np.mean([episode_return(env, victim, i) for i in indices]))
    return {
        "mean_return": mean_return,
        "scripted_return": scripted_return,
        "threshold": config.competence_ratio * scripted_return,
        "episodes": config.eval_episodes,
    }

class _ActorCriticTrainer(object):
    def __init__(self, victim: LearnedContinuousVictim, config: VictimTrainConfig):
        self.victim, self.config = victim, config
        self.actor_optimizer = torch.optim.Adam(victim.actor.parameters(), lr=config.lr)
        self.critic_optimizer = torch.optim.Adam(victim.critic.parameters(), lr=config.lr)

    def explore(self, obs, step, rng):
        if step < self.config.start_steps:
            return rng.uniform(-1.0, 1.0, size=self.victim.spec.action_dim)
        with torch.no_grad():
            action, _ = self.victim.actor.sample(as_batch(obs), self.victim.generator)
        return action[0].double().numpy()

    def update(self, batch):
        victim, config = self.victim, self.config
        with torch.no_grad():
            next_action, next_log_prob = victim.actor.sample(batch["next_obs"], victim.generator)
            next_value = victim.critic_target(batch["next_obs"], next_action) - config.alpha * next_log_prob
            target = batch["rewards"] + config.gamma * (1.0 - batch["dones"]) * next_value
        critic_loss = F.mse_loss(victim.critic(batch["obs"], batch["actions"]), target)
        self.critic_optimizer.zero_grad()
        critic_loss.backward()
        self.critic_optimizer.step()

        with frozen(victim.critic):
            action, log_prob = victim.actor.sample(batch["obs"], victim.generator)
            actor_loss = (config.alpha * log_prob - victim.critic(batch["obs"], action)).mean()
        self.actor_optimizer.zero_grad()
        actor_loss.backward()
        self.actor_optimizer.step()
        soft_update(victim.critic_target, victim.critic, config.tau)
        return critic_loss.detach(), actor_loss.detach()

class _ValueTrainer(object):
    def __init__(self, victim: LearnedDiscreteVictim, config: VictimTrainConfig):
        self.victim, self.config = victim, config
        self.optimizer = torch.optim.Adam(victim.q.parameters(), lr=config.lr)

    def explore(self, obs, step, rng):
        config = self.config
        fraction = min(1.0, step / max(1, config.epsilon_decay_steps))
        epsilon = config.epsilon_start + fraction * (config.epsilon_end - config.epsilon_start)
        if step < config.start_steps or rng.random() < epsilon:
            return int(rng.integers(self.victim.spec.action_count))
        with torch.no_grad():
            return int(self.victim.q(as_batch(obs)).argmax(dim=-1)[0])

    def update(self, batch):
        victim, config = self.victim, self.config
        with torch.no_grad():
            next_value = victim.q_target(batch["next_obs"]).max(dim=-1).values
            target = batch["rewards"] + config.gamma * (1.0 - batch["dones"]) * next_value
        values = victim.q(batch["obs"]).gather(1, batch["actions"].unsqueeze(1)).squeeze(1)
        loss = F.mse_loss(values, target)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        soft_update(victim.q_target, victim.q, config.tau)
        return (loss.detach(),)

def train_victim(env: PixelEnv, config: VictimTrainConfig, verbose=False) -> VictimPolicy:
    """
    Train a learned victim on env (or build the scripted one when config.kind == "scripted")
    and measure its competence on held-out episodes.

    Raises:
        TrainingDiverged: zero step budget, non-finite losses, or mean clean return
            below competence_ratio x the scripted victim's return
    """
    if config.kind == "scripted":
        victim = make_scripted_victim(env, config.deterministic, config.seed)
        victim.competence = measure_competence(env, victim, config)
        return victim
    if config.steps == 0:
        raise TrainingDiverged("Victim training budget is 0 steps, competence cannot be reached")
    seed_everything(config.seed)
    rng = np.random.default_rng(config.seed)
    spec = env.spec
    if spec.is_continuous:
        victim = LearnedContinuousVictim(spec, config.feature_dim, config.hidden_dim, seed=config.seed)
        trainer = _ActorCriticTrainer(victim, config)
    else:
        victim = LearnedDiscreteVictim(spec, config.feature_dim, config.hidden_dim, seed=config.seed)
        trainer = _ValueTrainer(victim, config)
    buffer = ReplayBuffer(config.replay_capacity, seed=config.seed)

    episode = 0
    obs = env.reset(episode)
    for step in tqdm(range(config.steps), desc="train-victim", leave=False, disable=not verbose):
        action = trainer.explore(obs, step, rng)
        result = env.step(action)
        buffer.push(Transition(obs, action, result.reward, result.next_obs, result.done, Provenance.Real),
                    episode=episode)
        obs = result.next_obs
        if result.done:
            episode += 1
            obs = env.reset(episode)
        if step >= config.start_steps and len(buffer) >= config.batch_size:
            losses = trainer.update(collate_transitions(buffer.sample(config.batch_size), spec.is_continuous))
            if not all_finite(*losses):
                raise TrainingDiverged(f"Non-finite victim loss at step {step}")

    victim.deterministic = config.deterministic
    victim.competence = measure_competence(env, victim, config)
    if verbose:
        print(f"Victim return {victim.competence['mean_return']:.3f} "
              f"(threshold {victim.competence['threshold']:.3f})")
    if victim.competence["mean_return"] < victim.competence["threshold"]:
        raise TrainingDiverged(
            f"Victim mean return {victim.competence['mean_return']:.3f} below the competence threshold "
            f"{victim.competence['threshold']:.3f} after {config.steps} steps")
    return victim

def save_victim(victim: VictimPolicy, filename):
    """Write a victim container. Returns the parameter digest."""
    params = {name: module.state_dict() for name, module in victim.networks().items()}
    metadata = {"competence": victim.competence, "deterministic": victim.deterministic}
    return write_container(filename, "victim", params, env_spec=victim.spec,
                           architecture=victim.architecture(), metadata=metadata)

def load_victim(filename, expected_env_spec=None, deterministic=None, seed=0) -> VictimPolicy:
    """
    Load a victim container. Rejects containers written for
    an incompatible env (EnvSpecMismatch).
    """
    container = read_container(filename, kind="victim", expected_env_spec=expected_env_spec)
    spec = EnvSpec.from_dict(container.env_spec)
    architecture = container.architecture
    if deterministic is None:
        deterministic = container.metadata.get("deterministic", True)
    kind = architecture["type"]
    if kind == "scripted-point-goal":
        victim = ScriptedPointGoalVictim(spec, architecture["max_speed"], deterministic, seed, architecture["noise"])
    elif kind == "scripted-grid":
        victim = ScriptedGridVictim(spec, architecture["grid_size"], deterministic, seed, architecture["noise"])
    elif kind == "constant":
        victim = ConstantVictim(spec, architecture["action"], deterministic, seed, architecture["noise"])
    elif kind == "learned-continuous":
        victim = LearnedContinuousVictim(spec, architecture["feature_dim"], architecture["hidden_dim"],
                                         deterministic, seed)
    elif kind == "learned-discrete":
        victim = LearnedDiscreteVictim(spec, architecture["feature_dim"], architecture["hidden_dim"],
                                       deterministic, seed, architecture["temperature"])
    else:
        raise ValueError(f"Unknown victim architecture '{kind}' in {filename}")
    for name, module in victim.networks().items():
        module.load_state_dict(container.params[name])
    victim.competence = container.metadata.get("competence", {})
    return victim
