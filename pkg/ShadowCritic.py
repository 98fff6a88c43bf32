#!/usr/bin/env python3
"""
Shadow critic Q(s', a): the attacker's estimate of the victim's return
under perturbation, learned by temporal differences from transitions on
perturbed states and queried victim actions.

    y = r                                     if done
    y = r + gamma * E_{a ~ pi(.|s'_next)} Q_target(s'_next, a)   otherwise
    L = 1/2 * mean (Q(s', a) - y)^2
"""
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from ContainerIO import write_container, read_container
from PerturbationGAN import BatchMismatch, NonFiniteLoss
from PixelEnvironments import EnvSpec
from QueryLedger import QueryContext
from TorchUtils import soft_update, all_finite
from Transitions import EmptyBuffer, collate_transitions
from Victims import ConvEncoder

__all__ = [
    "CriticConfig", "ShadowCritic", "td_target", "td_targets",
    "critic_loss", "critic_loss_from_predictions", "critic_update",
    "save_critic", "load_critic"
]

@dataclass
class CriticConfig:
    gamma: float = 0.99
    # Soft target update rate tau
    tau: float = 0.01
    action_samples_for_target: int = 1
    lr: float = 3e-4
    batch_size: int = 64
    architecture: str = "conv"  # conv | linear
    optimizer: str = "adam"  # adam | sgd
    # Discrete victims: expectation over the queried action distribution instead of sampling
    exact_expectation: bool = False
    feature_dim: int = 64
    hidden_dim: int = 128

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0,1), got {self.gamma}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0,1], got {self.tau}")
        if self.action_samples_for_target < 1:
            raise ValueError(f"action_samples_for_target must be >= 1, got {self.action_samples_for_target}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.architecture not in ("conv", "linear"):
            raise ValueError(f"architecture must be 'conv' or 'linear', got '{self.architecture}'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got '{self.optimizer}'")

class CriticNetwork(nn.Module):
    """
    Continuous actions: (state, action) -> scalar.
    Discrete actions: state -> per-action values.
    """
    def __init__(self, spec, config: CriticConfig):
        super().__init__()
        self.continuous = spec.is_continuous
        outputs = 1 if self.continuous else spec.action_count
        extra = spec.action_dim if self.continuous else 0
        if config.architecture == "linear":
            self.encoder = nn.Flatten()
            features = spec.obs_channels * spec.obs_height * spec.obs_width
            self.head = nn.Linear(features + extra, outputs)
        else:
            self.encoder = ConvEncoder(spec.obs_shape, config.feature_dim)
            self.head = nn.Sequential(nn.Linear(config.feature_dim + extra, config.hidden_dim), nn.ReLU(),
                                      nn.Linear(config.hidden_dim, outputs))

    def values(self, obs):
        """[N, action_count] action values (discrete only)"""
        return self.head(self.encoder(obs))

    def forward(self, obs, actions):
        if self.continuous:
            actions = actions.reshape(actions.shape[0], -1).to(obs.dtype)
            return self.head(torch.cat([self.encoder(obs), actions], dim=-1)).squeeze(-1)
        return self.values(obs).gather(1, actions.long().reshape(-1, 1)).squeeze(1)

class ShadowCritic(nn.Module):
    """
    Online network plus a target copy that only moves by soft updates.
    Calling the critic evaluates the online network.
    """
    def __init__(self, spec, config: CriticConfig = None):
        super().__init__()
        self.spec = spec
        self.config = config or CriticConfig()
        self.online = CriticNetwork(spec, self.config)
        self.target = CriticNetwork(spec, self.config)
        self.target.load_state_dict(self.online.state_dict())
        for param in self.target.parameters():
            param.requires_grad_(False)
        if self.config.optimizer == "sgd":
            self.optimizer = torch.optim.SGD(self.online.parameters(), lr=self.config.lr)
        else:
            self.optimizer = torch.optim.Adam(self.online.parameters(), lr=self.config.lr)

    def forward(self, obs, actions):
        return self.online(obs, actions)

    def values(self, obs):
        return self.online.values(obs)

def td_targets(critic: ShadowCritic, batch: dict, victim, config: CriticConfig, ledger=None,
               operation="critic.td_target") -> torch.Tensor:
    """
    TD targets for a collated batch. The victim is queried (training context)
    on every non-terminal next state, action_samples_for_target times, or once
    when exact_expectation enumerates a discrete action distribution.
    """
    rewards = batch["rewards"].to(torch.float64)
    targets = rewards.clone()
    active = batch["dones"] < 0.5
    if not bool(active.any()):
        return targets
    dtype = next(critic.target.parameters()).dtype
    next_obs = batch["next_obs"][active]
    with torch.no_grad():
        if not critic.spec.is_continuous and config.exact_expectation:
            probs = victim.query_distribution(next_obs, ledger, QueryContext.Training, operation)
            expected = (probs.to(dtype) * critic.target.values(next_obs.to(dtype))).sum(dim=-1)
        else:
            total = torch.zeros(next_obs.shape[0], dtype=torch.float64)
            for _ in range(config.action_samples_for_target):
                actions = victim.act_batch(next_obs, ledger, QueryContext.Training, operation)
                total += critic.target(next_obs.to(dtype), actions).to(torch.float64)
            expected = total / config.action_samples_for_target
    targets[active] = rewards[active] + config.gamma * expected.to(torch.float64)
    return targets

def td_target(critic: ShadowCritic, transition, victim, config: CriticConfig, ledger=None) -> float:
    """TD target of a single Transition"""
    batch = collate_transitions([transition], critic.spec.is_continuous)
    return float(td_targets(critic, batch, victim, config, ledger)[0])

def critic_loss_from_predictions(predictions, targets):
    if predictions.shape[0] != targets.shape[0]:
        raise BatchMismatch(f"{predictions.shape[0]} predictions but {targets.shape[0]} targets")
    if predictions.shape[0] == 0:
        raise BatchMismatch("Empty critic batch")
    return 0.5 * (predictions - targets.detach().to(predictions.dtype)).pow(2).mean()

def critic_loss(critic, obs, actions, targets):
    """1/2 mean squared TD error, targets are constants"""
    if obs.shape[0] != targets.shape[0] or actions.shape[0] != targets.shape[0]:
        raise BatchMismatch(f"{obs.shape[0]} observations, {actions.shape[0]} actions, {targets.shape[0]} targets")
    return critic_loss_from_predictions(critic(obs, actions), targets)

def critic_update(critic: ShadowCritic, buffer, victim, config: CriticConfig, ledger=None,
                  operation="critic.td_target") -> dict:
    """
    One gradient step on a uniformly sampled minibatch, then the soft target update.

    Raises:
        EmptyBuffer: if the buffer has no transitions
        NonFiniteLoss: before the parameters are touched
    """
    if len(buffer) == 0:
        raise EmptyBuffer("Critic update needs at least one transition in the replay buffer")
    batch = collate_transitions(buffer.sample(config.batch_size), critic.spec.is_continuous)
    dtype = next(critic.online.parameters()).dtype
    targets = td_targets(critic, batch, victim, config, ledger, operation)
    loss = critic_loss(critic, batch["obs"].to(dtype), batch["actions"], targets)
    if not all_finite(loss.detach()):
        raise NonFiniteLoss("Non-finite critic loss", {"critic_loss": float(loss)})
    critic.optimizer.zero_grad()
    loss.backward()
    critic.optimizer.step()
    soft_update(critic.target, critic.online, config.tau)
    return {"critic_loss": float(loss), "target_magnitude": float(targets.abs().mean())}

def save_critic(critic: ShadowCritic, filename):
    return write_container(filename, "critic", {"online": critic.online.state_dict(),
                                                "target": critic.target.state_dict()},
                           env_spec=critic.spec, architecture={"critic": asdict(critic.config)})

def load_critic(filename, expected_env_spec=None) -> ShadowCritic:
    container = read_container(filename, kind="critic", expected_env_spec=expected_env_spec)
    critic = ShadowCritic(EnvSpec.from_dict(container.env_spec), CriticConfig(**container.architecture["critic"]))
    critic.online.load_state_dict(container.params["online"])
    critic.target.load_state_dict(container.params["target"])
    return critic
