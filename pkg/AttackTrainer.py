#!/usr/bin/env python3
"""
SEBA training loop: optional world-model pre-training, then n_iter
alternations of

    Stage 1: generator and discriminator frozen, adversarial interaction
             (real or imagined) fills the replay buffer, the shadow critic
             learns by TD
    Stage 2: shadow critic frozen, the GAN learns to lower the critic's
             value of the victim's actions on perturbed states

Every environment step and victim query is recorded in the QueryLedger.
"""
import os
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml
from tqdm import tqdm

from Baselines import AttackerInterface, AccessLevel, match_input
from PerturbationGAN import (
    PerturbationGAN, PerturbationBudget, GanConfig, NonFiniteLoss, D_FLOOR, save_attack, load_attack
)
from PixelEnvironments import PixelEnv, EnvSpecMismatch
from QueryLedger import QueryLedger, QueryContext, ledger_report
from ShadowCritic import ShadowCritic, CriticConfig, critic_update, save_critic
from TorchUtils import seed_everything, frozen, as_batch, all_finite, parameter_digest
from Transitions import ReplayBuffer, Transition, Provenance, EmptyBuffer
from Victims import VictimPolicy, ConvEncoder
from WorldModel import (
    WorldModel, WorldModelConfig, train_world_model, train_dynamics, one_step_fidelity,
    imagine_rollout, save_world_model
)

__all__ = [
    "TrainerConfig", "TargetedSpec", "SEBAConfig", "SEBAState", "StatePool", "SurrogatePolicy",
    "RunReport", "SEBAAttacker", "DimensionOutOfRange",
    "stage1", "stage2", "pretrain_world_model", "refresh_world_model", "adopt_world_model", "run_seba",
    "hinge_penalty", "targeted_generator_loss", "fit_surrogate", "random_action"
]

class DimensionOutOfRange(Exception):
    """Raised when a targeted action dimension does not exist in the action space"""
    pass

@dataclass
class TrainerConfig:
    n_iter: int = 10
    t1: int = 500
    t2: int = 500
    use_wm: bool = True
    # Ablation -D
    use_discriminator: bool = True
    # Ablation -Noise when false: the critic learns on clean states
    perturb_stage1: bool = True
    H: int = 4
    seed: int = 0
    updates_per_transition: int = 1
    stage2_source: str = "auto"  # auto | world_model | env | pool
    # Also append the real Stage 1 transition when imagining
    mix_real_transitions: bool = False
    # Periodic world-model refresh with fresh real steps (0 = off)
    wm_refresh_every: int = 0
    wm_refresh_steps: int = 1000
    wm_refresh_train_steps: int = 1000
    replay_capacity: int = 100000
    pool_capacity: int = 10000
    # Targeted mode: behaviour-cloned surrogate of the victim
    surrogate_steps: int = 200
    surrogate_lr: float = 1e-3
    surrogate_capacity: int = 20000
    maximize_value_targeted: bool = True

    def __post_init__(self):
        for name in ("n_iter", "t1", "t2", "H", "updates_per_transition", "wm_refresh_every",
                     "wm_refresh_steps", "wm_refresh_train_steps", "surrogate_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.stage2_source not in ("auto", "world_model", "env", "pool"):
            raise ValueError(f"stage2_source must be one of auto, world_model, env, pool, got '{self.stage2_source}'")
        if self.stage2_source == "world_model" and not self.use_wm:
            raise ValueError("stage2_source 'world_model' requires use_wm")
        if self.replay_capacity < 1 or self.pool_capacity < 1 or self.surrogate_capacity < 1:
            raise ValueError("Capacities must be >= 1")

    @property
    def resolved_stage2_source(self):
        if self.stage2_source == "auto":
            return "world_model" if self.use_wm else "env"
        return self.stage2_source

@dataclass
class TargetedSpec:
    dimension_index: int = 0
    target_low: float = 0.3
    target_high: float = 0.5
    penalty_weight: float = 1.0

    def __post_init__(self):
        if self.dimension_index < 0:
            raise ValueError(f"dimension_index must be >= 0, got {self.dimension_index}")
        if not -1.0 <= self.target_low < self.target_high <= 1.0:
            raise ValueError(f"Target range [{self.target_low}, {self.target_high}] must be a sub-interval of [-1,1]")
        if self.penalty_weight < 0:
            raise ValueError(f"penalty_weight must be >= 0, got {self.penalty_weight}")

    def check(self, action_dim):
        if self.dimension_index >= action_dim:
            raise DimensionOutOfRange(f"Action dimension {self.dimension_index} does not exist "
                                      f"in a {action_dim}-dimensional action space")

    def contains(self, value) -> bool:
        return self.target_low <= value <= self.target_high

@dataclass
class SEBAConfig:
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    world_model: WorldModelConfig = field(default_factory=WorldModelConfig)
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)
    targeted: Optional[TargetedSpec] = None

    def __post_init__(self):
        if self.trainer.use_wm and self.trainer.H != self.world_model.horizon:
            raise ValueError(f"trainer.H ({self.trainer.H}) and world_model.horizon "
                             f"({self.world_model.horizon}) must agree")

    def to_dict(self) -> dict:
        return asdict(self)

class StatePool(object):
    """
    Clean frames for Stage 2: real frames seen in Stage 1
    and clean frames imagined by the world model.
    """
    def __init__(self, capacity=10000):
        self.real = deque(maxlen=capacity)
        self.imagined = deque(maxlen=capacity)

    def add_real(self, frame):
        self.real.append(torch.as_tensor(frame).float())

    def sample(self, batch_size, rng, prefer_imagined=False) -> torch.Tensor:
        frames = self.imagined if prefer_imagined and len(self.imagined) > 0 else self.real
        if len(frames) == 0:
            raise EmptyBuffer("No frames in the state pool")
        indices = rng.integers(0, len(frames), size=int(batch_size))
        return torch.stack([frames[int(i)] for i in indices])

    def __len__(self):
        return len(self.real) + len(self.imagined)

class SurrogatePolicy(nn.Module):
    """Differentiable behaviour clone of a continuous victim, tanh-squashed"""
    def __init__(self, obs_shape, action_dim, feature_dim=64, hidden_dim=128):
        super().__init__()
        self.action_dim = action_dim
        self.encoder = ConvEncoder(obs_shape, feature_dim)
        self.head = nn.Sequential(nn.Linear(feature_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, action_dim))

    def forward(self, obs):
        return torch.tanh(self.head(self.encoder(obs)))

def fit_surrogate(surrogate: SurrogatePolicy, optimizer, pairs, steps, batch_size, rng) -> Optional[float]:
    """Behaviour cloning on logged (perturbed observation, victim action) pairs"""
    loss = None
    if len(pairs) == 0:
        return None
    for _ in range(steps):
        indices = rng.integers(0, len(pairs), size=batch_size)
        obs = torch.stack([pairs[int(i)][0] for i in indices])
        actions = torch.stack([pairs[int(i)][1] for i in indices])
        loss = F.mse_loss(surrogate(obs), actions)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return None if loss is None else float(loss)

def hinge_penalty(x, low, high):
    """max(0, low - x) + max(0, x - high)"""
    return F.relu(low - x) + F.relu(x - high)

def targeted_generator_loss(disc, critic, surrogate, adv_obs, actions, spec: TargetedSpec, lam,
                            use_discriminator=True, maximize_value=True):
    """
    Realism term -/+ lam * Q(s', a) + penalty_weight * mean hinge of the
    surrogate's action dimension to the target range. The surrogate supplies
    the differentiable action path, the victim stays a black box.
    """
    spec.check(surrogate.action_dim)
    q_values = critic(adv_obs, actions.detach())
    loss = (-lam if maximize_value else lam) * q_values
    if use_discriminator:
        loss = loss - torch.log(disc(adv_obs).clamp(D_FLOOR, 1.0 - D_FLOOR))
    penalty = hinge_penalty(surrogate(adv_obs)[:, spec.dimension_index], spec.target_low, spec.target_high)
    return loss.mean() + spec.penalty_weight * penalty.mean()

def random_action(spec, rng):
    if spec.is_continuous:
        return rng.uniform(-1.0, 1.0, size=spec.action_dim)
    return int(rng.integers(0, spec.action_count))

class SEBAState(object):
    """
    Everything the two stages operate on. The real environment is shared by
    both stages through one interaction cursor (current observation and
    episode counter).
    """
    def __init__(self, env: PixelEnv, victim: VictimPolicy, config: SEBAConfig, ledger: QueryLedger = None):
        self.env = env
        self.victim = victim
        self.config = config
        self.spec = env.spec
        self.ledger = ledger if ledger is not None else QueryLedger()
        seed_everything(config.trainer.seed)
        self.rng = np.random.default_rng(config.trainer.seed)
        self.gan = PerturbationGAN(self.spec.obs_shape, config.budget, config.gan)
        self.critic = ShadowCritic(self.spec, config.critic)
        self.buffer = ReplayBuffer(config.trainer.replay_capacity, seed=config.trainer.seed)
        self.pool = StatePool(config.trainer.pool_capacity)
        self.wm = None
        self.wm_buffer = None
        self.surrogate = None
        self.surrogate_optimizer = None
        self.logged_pairs = deque(maxlen=config.trainer.surrogate_capacity)
        if config.targeted is not None:
            if not self.spec.is_continuous:
                raise ValueError("Targeted attacks need a continuous action space")
            config.targeted.check(self.spec.action_dim)
            self.surrogate = SurrogatePolicy(self.spec.obs_shape, self.spec.action_dim)
            self.surrogate_optimizer = torch.optim.Adam(self.surrogate.parameters(), lr=config.trainer.surrogate_lr)
        self.obs = None
        self.episode = 0

    def current_obs(self) -> np.ndarray:
        if self.obs is None or self.env.done:
            self.obs = self.env.reset(self.episode)
            self.episode += 1
        return self.obs

    def real_step(self, action, operation):
        result = self.env.step(action)
        self.ledger.record_env_steps(1, operation)
        self.obs = result.next_obs
        return result

    def log_pair(self, adv_obs, action):
        if self.surrogate is not None:
            self.logged_pairs.append((torch.as_tensor(adv_obs).float().reshape(self.spec.obs_shape),
                                      torch.as_tensor(action, dtype=torch.float32).reshape(-1)))

def _adversarial_obs(state: SEBAState, clean, perturb_states=True) -> torch.Tensor:
    batch = as_batch(clean).float()
    return state.gan.perturb(batch) if perturb_states else batch

def stage1(state: SEBAState, steps, verbose=False) -> dict:
    """
    Critic learning with the GAN frozen. Each step takes one real environment
    step on the (perturbed) observation; with the world model it appends H
    imagined transitions from the real clean state instead of the real one.
    One critic update runs per appended transition.
    """
    trainer = state.config.trainer
    losses, appended = [], 0
    with frozen(state.gan.generator, state.gan.discriminator):
        for _ in tqdm(range(steps), desc="stage 1", leave=False, disable=not verbose):
            clean = state.current_obs()
            adv = _adversarial_obs(state, clean, trainer.perturb_stage1)
            action = state.victim.act(adv, state.ledger, QueryContext.Training, "stage1.victim_query")
            state.log_pair(adv, action)
            episode = state.episode
            result = state.real_step(action, "stage1.env_step")
            state.pool.add_real(clean)
            new_transitions = []
            if trainer.use_wm:
                gen = state.gan.generator if trainer.perturb_stage1 else None
                new_transitions.extend(imagine_rollout(state.wm, clean, gen, state.victim, state.config.budget,
                                                       trainer.H, state.ledger, trainer.perturb_stage1,
                                                       frame_sink=state.pool.imagined))
            if not trainer.use_wm or trainer.mix_real_transitions:
                next_adv = _adversarial_obs(state, result.next_obs, trainer.perturb_stage1)
                new_transitions.append(Transition(adv[0].numpy(), action, result.reward, next_adv[0].numpy(),
                                                  result.done, Provenance.Real))
            state.buffer.extend(new_transitions, episode=episode)
            appended += len(new_transitions)
            for _ in range(trainer.updates_per_transition * len(new_transitions)):
                report = critic_update(state.critic, state.buffer, state.victim, state.config.critic,
                                       state.ledger, "stage1.td_target")
                losses.append(report["critic_loss"])
    return {
        "critic_loss": float(np.mean(losses)) if losses else None,
        "critic_updates": len(losses),
        "appended_transitions": appended,
    }

def _stage2_batch(state: SEBAState, source, batch_size):
    """Clean states and the victim's actions on their perturbations"""
    if source == "env":
        clean, actions = [], []
        for _ in range(batch_size):
            obs = state.current_obs()
            adv = _adversarial_obs(state, obs)
            action = state.victim.act(adv, state.ledger, QueryContext.Training, "stage2.victim_query")
            state.log_pair(adv, action)
            state.real_step(action, "stage2.env_step")
            clean.append(torch.as_tensor(obs).float())
            actions.append(action)
        clean = torch.stack(clean)
        if state.spec.is_continuous:
            return clean, torch.as_tensor(np.stack(actions), dtype=torch.float32)
        return clean, torch.as_tensor(actions, dtype=torch.long)
    clean = state.pool.sample(batch_size, state.rng, prefer_imagined=(source == "world_model"))
    adv = _adversarial_obs(state, clean)
    actions = state.victim.act_batch(adv, state.ledger, QueryContext.Training, "stage2.victim_query")
    for k in range(adv.shape[0]):
        state.log_pair(adv[k], actions[k])
    return clean, actions.float() if state.spec.is_continuous else actions

def stage2(state: SEBAState, steps, verbose=False) -> dict:
    """
    GAN learning with the shadow critic frozen.
    """
    trainer, gan_config = state.config.trainer, state.config.gan
    source = trainer.resolved_stage2_source
    objective = None
    if state.config.targeted is not None:
        def objective(adv_obs, actions):
            return targeted_generator_loss(state.gan.discriminator, state.critic, state.surrogate, adv_obs, actions,
                                           state.config.targeted, gan_config.lam, trainer.use_discriminator,
                                           trainer.maximize_value_targeted)
    reports = []
    with frozen(state.critic):
        for _ in tqdm(range(steps), desc="stage 2", leave=False, disable=not verbose):
            clean, actions = _stage2_batch(state, source, gan_config.batch_size)
            if state.surrogate is not None:
                with frozen(state.surrogate):
                    reports.append(state.gan.update(clean, actions, state.critic, trainer.use_discriminator, objective))
            else:
                reports.append(state.gan.update(clean, actions, state.critic, trainer.use_discriminator, objective))
    disc_losses = [r["disc_loss"] for r in reports if r["disc_loss"] is not None]
    return {
        "gen_loss": float(np.mean([r["gen_loss"] for r in reports])) if reports else None,
        "disc_loss": float(np.mean(disc_losses)) if disc_losses else None,
        "gan_updates": len(reports),
    }

def _collect_real(state: SEBAState, buffer, steps, operation, verbose=False):
    """Real victim interaction for world-model data, with random exploratory actions"""
    wm_config = state.config.world_model
    transitions = []
    for _ in tqdm(range(steps), desc=operation, leave=False, disable=not verbose):
        obs = state.current_obs()
        episode = state.episode
        frame = _adversarial_obs(state, obs)[0].numpy() if wm_config.train_on_perturbed else obs
        if state.rng.random() < wm_config.collect_random_action_prob:
            action = random_action(state.spec, state.rng)
        else:
            action = state.victim.act(frame, state.ledger, QueryContext.Training, operation)
        result = state.real_step(action, operation)
        next_frame = _adversarial_obs(state, result.next_obs)[0].numpy() if wm_config.train_on_perturbed \
            else result.next_obs
        transition = Transition(frame, action, result.reward, next_frame, result.done, Provenance.Real)
        transitions.append((transition, episode))
        if buffer is not None:
            buffer.push(transition, episode=episode)
    return transitions

def pretrain_world_model(state: SEBAState, verbose=False) -> WorldModel:
    """
    Collect real transitions with the victim, hold out the last 10% for the
    one-step fidelity check and train the world model on the rest.
    """
    wm_config = state.config.world_model
    before = state.ledger.snapshot()
    collected = _collect_real(state, None, wm_config.collect_steps, "world_model.collect", verbose)
    after = state.ledger.snapshot()
    held_out = len(collected) // 10
    train_part = collected[:len(collected) - held_out]
    state.wm_buffer = ReplayBuffer(max(1, len(train_part)) + state.config.trainer.n_iter
                                   * state.config.trainer.wm_refresh_steps, seed=wm_config.seed)
    for transition, episode in train_part:
        state.wm_buffer.push(transition, episode=episode)
    state.wm = train_world_model(state.wm_buffer, state.spec, wm_config, verbose=verbose)
    state.wm.collection_counts = {name: after.get(name, 0) - before.get(name, 0) for name in ("train_env", "train_vic")}
    if held_out > 0:
        state.wm.fidelity = one_step_fidelity(state.wm, [t for t, _ in collected[-held_out:]])
        if verbose:
            print(f"World model fidelity: reward MSE {state.wm.fidelity['reward_mse']:.5f}, "
                  f"decode error {state.wm.fidelity['decode_error']:.4f}")
    return state.wm

def refresh_world_model(state: SEBAState, verbose=False) -> dict:
    """Fresh real steps, then continued dynamics training with the tokenizer frozen"""
    trainer = state.config.trainer
    _collect_real(state, state.wm_buffer, trainer.wm_refresh_steps, "world_model.refresh", verbose)
    return train_dynamics(state.wm, state.wm_buffer, trainer.wm_refresh_train_steps, state.rng, verbose)

def adopt_world_model(state: SEBAState, wm: WorldModel) -> WorldModel:
    """
    Use a world model pre-trained by an earlier run instead of pre-training one.
    The real steps and victim queries spent collecting its data are charged to
    this run's ledger.
    """
    trainer = state.config.trainer
    if wm.config.horizon != trainer.H:
        raise ValueError(f"World model horizon {wm.config.horizon} does not match trainer.H {trainer.H}")
    if not wm.spec.compatible_with(state.spec):
        raise EnvSpecMismatch(f"World model was trained on {wm.spec.name}, not {state.spec.name}")
    counts = wm.collection_counts
    state.ledger.record_env_steps(int(counts.get("train_env", 0)), "world_model.collect")
    state.ledger.record_victim_queries(int(counts.get("train_vic", 0)), QueryContext.Training, "world_model.collect")
    state.wm = wm
    state.wm_buffer = ReplayBuffer(max(1, trainer.n_iter * trainer.wm_refresh_steps), seed=wm.config.seed)
    return wm

class RunReport(object):
    """
    Ledger totals, per-iteration losses, world-model fidelity
    and the checkpoints written by run_seba.
    """
    def __init__(self, config: SEBAConfig):
        self.config = config
        self.iterations = []
        self.ledger = {}
        self.fidelity = None
        self.checkpoints = []
        self.generator_digest = None

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "ledger": self.ledger,
            "world_model_fidelity": self.fidelity,
            "generator_digest": self.generator_digest,
            "checkpoints": list(self.checkpoints),
            "iterations": list(self.iterations),
        }

    def iteration_table(self) -> pd.DataFrame:
        columns = ["iteration", "critic_loss", "critic_updates", "appended_transitions", "gen_loss", "disc_loss",
                   "gan_updates", "surrogate_loss", "train_env_total", "train_vic_total"]
        return pd.DataFrame(self.iterations, columns=columns)

    def write(self, run_dir):
        with open(os.path.join(run_dir, "report.yaml"), "w", encoding="utf-8") as outfile:
            yaml.safe_dump(self.to_dict(), outfile, sort_keys=False)
        self.iteration_table().to_csv(os.path.join(run_dir, "iterations.csv"), index=False)

    def __str__(self):
        return f"RunReport({len(self.iterations)} iterations, ledger={self.ledger})"

    def __repr__(self) -> str:
        return self.__str__()

class _Manifest(object):
    def __init__(self, run_dir):
        self.run_dir = run_dir
        self.entries = []

    def add(self, iteration, stage, checkpoints, ledger):
        self.entries.append({"iteration": iteration, "stage": stage,
                             "checkpoints": checkpoints, "ledger": ledger.snapshot()})
        with open(os.path.join(self.run_dir, "manifest.yaml"), "w", encoding="utf-8") as outfile:
            yaml.safe_dump({"entries": self.entries}, outfile, sort_keys=False)

def _write_diagnostic(run_dir, iteration, stage, exc: NonFiniteLoss, last_losses, ledger):
    diagnostic = {
        "iteration": iteration,
        "stage": stage,
        "error": str(exc),
        "losses": exc.report,
        "last_finite_losses": last_losses,
        "ledger": ledger.snapshot(),
    }
    with open(os.path.join(run_dir, "diagnostic.yaml"), "w", encoding="utf-8") as outfile:
        yaml.safe_dump(diagnostic, outfile, sort_keys=False)

def run_seba(env: PixelEnv, victim: VictimPolicy, config: SEBAConfig = None, run_dir=None, ledger=None,
             world_model: WorldModel = None, verbose=False):
    """
    Train a perturbation generator against a black-box victim.

    Args:
        run_dir: if given, per-iteration checkpoints, manifest.yaml,
            report.yaml and iterations.csv are written there
        world_model: pre-trained world model used instead of pre-training one
    Returns:
        (PerturbationGAN, RunReport)
    Raises:
        NonFiniteLoss: after writing diagnostic.yaml to run_dir
    """
    config = config or SEBAConfig()
    trainer = config.trainer
    state = SEBAState(env, victim, config, ledger)
    report = RunReport(config)
    manifest = None
    if run_dir is not None:
        os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
        manifest = _Manifest(run_dir)

    def checkpoint(name):
        return os.path.join(run_dir, "checkpoints", name)

    iteration, stage, last_losses = 0, "world_model", {}
    try:
        if trainer.use_wm:
            if world_model is not None:
                adopt_world_model(state, world_model)
            else:
                pretrain_world_model(state, verbose)
            report.fidelity = state.wm.fidelity
            if manifest is not None:
                filename = checkpoint("world_model.seba")
                save_world_model(state.wm, filename)
                manifest.add(0, stage, [filename], state.ledger)
                report.checkpoints.append(filename)

        for iteration in range(1, trainer.n_iter + 1):
            if trainer.use_wm and trainer.wm_refresh_every > 0 and iteration > 1 \
                    and (iteration - 1) % trainer.wm_refresh_every == 0:
                stage = "world_model_refresh"
                refresh_world_model(state, verbose)
            stage = "stage1"
            row = {"iteration": iteration}
            row.update(stage1(state, trainer.t1, verbose))
            last_losses = {"critic_loss": row["critic_loss"]}
            if manifest is not None:
                filename = checkpoint(f"iteration{iteration:03d}_critic.seba")
                save_critic(state.critic, filename)
                manifest.add(iteration, stage, [filename], state.ledger)
                report.checkpoints.append(filename)
            row["surrogate_loss"] = None
            if state.surrogate is not None:
                stage = "surrogate"
                row["surrogate_loss"] = fit_surrogate(state.surrogate, state.surrogate_optimizer, state.logged_pairs,
                                                      trainer.surrogate_steps, config.gan.batch_size, state.rng)
            stage = "stage2"
            row.update(stage2(state, trainer.t2, verbose))
            last_losses.update({"gen_loss": row["gen_loss"], "disc_loss": row["disc_loss"]})
            row.update({"train_env_total": state.ledger.train_env_total,
                        "train_vic_total": state.ledger.train_vic_total})
            report.iterations.append(row)
            if manifest is not None:
                filename = checkpoint(f"iteration{iteration:03d}_attack.seba")
                save_attack(state.gan, filename, env_spec=state.spec, metadata={"iteration": iteration})
                manifest.add(iteration, stage, [filename], state.ledger)
                report.checkpoints.append(filename)
            if verbose:
                print(f"Iteration {iteration}/{trainer.n_iter}: critic loss {row['critic_loss']}, "
                      f"generator loss {row['gen_loss']}, {state.ledger}")
    except NonFiniteLoss as exc:
        if run_dir is not None:
            _write_diagnostic(run_dir, iteration, stage, exc, last_losses, state.ledger)
        print(f"ERROR: non-finite loss in {stage} of iteration {iteration}: {exc}")
        raise

    report.ledger = ledger_report(state.ledger)
    report.generator_digest = parameter_digest(state.gan.generator.state_dict())
    if run_dir is not None:
        filename = checkpoint("final_attack.seba")
        save_attack(state.gan, filename, env_spec=state.spec,
                    metadata={"iteration": trainer.n_iter, "ledger": report.ledger})
        report.checkpoints.append(filename)
        report.write(run_dir)
    return state.gan, report

class SEBAAttacker(AttackerInterface):
    """
    Applies a trained generator. Needs no victim access at attack time,
    so attack-extra victim queries stay at zero.
    """
    name = "seba"
    access_level = AccessLevel.NoQuery

    def __init__(self, gan: PerturbationGAN):
        super().__init__(gan.budget)
        self.gan = gan

    @staticmethod
    def from_checkpoint(filename, expected_env_spec=None) -> "SEBAAttacker":
        return SEBAAttacker(load_attack(filename, expected_env_spec))

    def attack(self, obs, victim, ledger):
        self.check_access(victim)
        adv = self.gan.perturb(as_batch(obs).float())
        if not all_finite(adv):
            raise NonFiniteLoss("Generator produced non-finite observations")
        return match_input(adv, obs)
