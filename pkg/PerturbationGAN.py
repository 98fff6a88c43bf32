#!/usr/bin/env python3
"""
Bounded perturbation generator and realism discriminator.

    delta = clip(epsilon * tanh(G(s)), -epsilon, epsilon)
    s'    = clip(s + delta, pixel_min, pixel_max)

The tanh keeps the explicit clip inactive almost everywhere,
the clip guarantees the bound.
"""
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from ContainerIO import write_container, read_container
from TorchUtils import frozen, all_finite

__all__ = [
    "PerturbationBudget", "GanConfig", "PerturbationGenerator", "Discriminator", "PerturbationGAN",
    "BatchMismatch", "NonFiniteLoss", "perturb", "perturb_from_raw",
    "discriminator_loss", "discriminator_loss_from_outputs",
    "generator_loss", "generator_loss_from_outputs", "save_attack", "load_attack"
]

# Discriminator outputs are clamped to [D_FLOOR, 1 - D_FLOOR] inside the logs
D_FLOOR = 1e-6

class BatchMismatch(Exception):
    """Raised when paired batches have different sizes"""
    pass

class NonFiniteLoss(Exception):
    """Raised when a training loss becomes NaN or infinite"""
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}

@dataclass
class PerturbationBudget:
    epsilon: float = 8.0 / 255.0
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        if self.pixel_max <= self.pixel_min:
            raise ValueError(f"pixel_max ({self.pixel_max}) must exceed pixel_min ({self.pixel_min})")
        if not 0.0 <= self.epsilon <= self.pixel_max - self.pixel_min:
            raise ValueError(f"epsilon must lie in [0, {self.pixel_max - self.pixel_min}], got {self.epsilon}")

    def project(self, adv_obs, clean_obs):
        """Project adv_obs onto the epsilon ball around clean_obs intersected with the pixel range"""
        delta = (adv_obs - clean_obs).clamp(-self.epsilon, self.epsilon)
        return (clean_obs + delta).clamp(self.pixel_min, self.pixel_max)

@dataclass
class GanConfig:
    # Attack-strength weight of the critic term
    lam: float = 1.0
    batch_size: int = 32
    gen_lr: float = 1e-4
    disc_lr: float = 1e-4
    disc_steps_per_gen_step: int = 1
    hidden_channels: int = 32

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.gen_lr < 0 or self.disc_lr < 0:
            raise ValueError("Learning rates must be >= 0")
        if self.disc_steps_per_gen_step < 0:
            raise ValueError(f"disc_steps_per_gen_step must be >= 0, got {self.disc_steps_per_gen_step}")
        if self.hidden_channels < 1:
            raise ValueError(f"hidden_channels must be >= 1, got {self.hidden_channels}")

class PerturbationGenerator(nn.Module):
    """Convolutional encoder-decoder, raw output has the input shape"""
    def __init__(self, obs_shape, hidden_channels=32):
        super().__init__()
        channels = obs_shape[0]
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, hidden_channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(hidden_channels, 2 * hidden_channels, 4, stride=2, padding=1), nn.ReLU())
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(2 * hidden_channels, hidden_channels, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(hidden_channels, channels, 3, padding=1))

    def forward(self, obs):
        raw = self.decoder(self.encoder(obs))
        if raw.shape[-2:] != obs.shape[-2:]: # odd image sizes
            raw = F.interpolate(raw, size=obs.shape[-2:], mode="nearest")
        return raw

class Discriminator(nn.Module):
    """Image to probability that the image is clean"""
    def __init__(self, obs_shape, hidden_channels=32):
        super().__init__()
        channels = obs_shape[0]
        self.features = nn.Sequential(
            nn.Conv2d(channels, hidden_channels, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(hidden_channels, 2 * hidden_channels, 3, padding=1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.out = nn.Linear(2 * hidden_channels, 1)

    def forward(self, obs):
        return torch.sigmoid(self.out(self.features(obs))).squeeze(-1)

def perturb_from_raw(raw, s, budget: PerturbationBudget):
    delta = (budget.epsilon * torch.tanh(raw)).clamp(-budget.epsilon, budget.epsilon)
    return (s + delta).clamp(budget.pixel_min, budget.pixel_max)

def perturb(gen: nn.Module, s, budget: PerturbationBudget):
    """
    Perturbed observation s' with |s' - s| <= epsilon and s' in the pixel range.
    Differentiable w.r.t. the generator parameters where the clips are inactive.
    """
    return perturb_from_raw(gen(s), s, budget)

def discriminator_loss_from_outputs(d_clean, d_adv):
    """ -mean[ log D(s) + log(1 - D(s')) ] """
    if d_clean.shape[0] != d_adv.shape[0]:
        raise BatchMismatch(f"Clean batch has {d_clean.shape[0]} samples, adversarial batch {d_adv.shape[0]}")
    if d_clean.shape[0] == 0:
        raise BatchMismatch("Empty discriminator batch")
    d_clean = d_clean.clamp(D_FLOOR, 1.0 - D_FLOOR)
    d_adv = d_adv.clamp(D_FLOOR, 1.0 - D_FLOOR)
    return -(torch.log(d_clean) + torch.log(1.0 - d_adv)).mean()

def discriminator_loss(disc: nn.Module, clean_batch, adv_batch):
    if clean_batch.shape[0] != adv_batch.shape[0]:
        raise BatchMismatch(f"Clean batch has {clean_batch.shape[0]} samples, adversarial batch {adv_batch.shape[0]}")
    return discriminator_loss_from_outputs(disc(clean_batch), disc(adv_batch))

def generator_loss_from_outputs(d_adv, q_values, lam, use_discriminator=True):
    """ mean[ -log D(s') + lam * Q(s', a) ] """
    loss = lam * q_values
    if use_discriminator:
        loss = loss - torch.log(d_adv.clamp(D_FLOOR, 1.0 - D_FLOOR))
    return loss.mean()

def generator_loss(disc, q_shadow, adv_obs, actions, lam, use_discriminator=True):
    """
    Generator loss on perturbed observations adv_obs and the victim's actions on them.
    Actions are constants: gradients reach the generator through the
    state inputs of the discriminator and the shadow critic only.
    """
    if adv_obs.shape[0] != actions.shape[0]:
        raise BatchMismatch(f"{adv_obs.shape[0]} observations but {actions.shape[0]} actions")
    q_values = q_shadow(adv_obs, actions.detach())
    d_adv = disc(adv_obs) if use_discriminator else None
    return generator_loss_from_outputs(d_adv, q_values, lam, use_discriminator)

class PerturbationGAN(object):
    """
    Generator, discriminator and their optimizers.
    """
    def __init__(self, obs_shape, budget: PerturbationBudget = None, config: GanConfig = None):
        self.obs_shape = tuple(obs_shape)
        self.budget = budget or PerturbationBudget()
        self.config = config or GanConfig()
        self.generator = PerturbationGenerator(self.obs_shape, self.config.hidden_channels)
        self.discriminator = Discriminator(self.obs_shape, self.config.hidden_channels)
        self.gen_optimizer = torch.optim.Adam(self.generator.parameters(), lr=self.config.gen_lr, betas=(0.5, 0.999))
        self.disc_optimizer = torch.optim.Adam(self.discriminator.parameters(), lr=self.config.disc_lr,
                                               betas=(0.5, 0.999))

    def perturb(self, obs):
        with torch.no_grad():
            return perturb(self.generator, obs, self.budget)

    def update(self, clean_obs, actions, critic, use_discriminator=True, objective=None) -> dict:
        """
        One GAN update on a clean batch: disc_steps_per_gen_step discriminator
        steps, then one generator step. The critic is frozen throughout.

        actions: victim actions on perturb(clean_obs), queried by the caller.
        objective: optional callable(adv_obs, actions) -> scalar replacing the
            generator loss (targeted mode).

        Raises:
            NonFiniteLoss: before any parameter is changed by the offending step
        """
        report = {"disc_loss": None}
        with frozen(critic):
            if use_discriminator:
                for _ in range(self.config.disc_steps_per_gen_step):
                    with torch.no_grad():
                        adv_obs = perturb(self.generator, clean_obs, self.budget)
                    disc_loss = discriminator_loss(self.discriminator, clean_obs, adv_obs)
                    if not all_finite(disc_loss.detach()):
                        raise NonFiniteLoss("Non-finite discriminator loss", {"disc_loss": float(disc_loss)})
                    self.disc_optimizer.zero_grad()
                    disc_loss.backward()
                    self.disc_optimizer.step()
                    report["disc_loss"] = float(disc_loss)

            with frozen(self.discriminator):
                adv_obs = perturb(self.generator, clean_obs, self.budget)
                if objective is not None:
                    gen_loss = objective(adv_obs, actions)
                else:
                    gen_loss = generator_loss(self.discriminator, critic, adv_obs, actions,
                                              self.config.lam, use_discriminator)
                if not all_finite(gen_loss.detach()):
                    raise NonFiniteLoss("Non-finite generator loss", {**report, "gen_loss": float(gen_loss)})
                self.gen_optimizer.zero_grad()
                gen_loss.backward()
                self.gen_optimizer.step()
        report["gen_loss"] = float(gen_loss)
        return report

    def state_dicts(self) -> dict:
        return {"generator": self.generator.state_dict(), "discriminator": self.discriminator.state_dict()}

def save_attack(gan: PerturbationGAN, filename, env_spec=None, metadata=None, extra_params=None):
    """
    Attack checkpoint. The PerturbationBudget travels with the generator.
    """
    params = gan.state_dicts()
    params.update(extra_params or {})
    header = {"budget": asdict(gan.budget), "gan": asdict(gan.config)}
    header.update(metadata or {})
    return write_container(filename, "attack", params, env_spec=env_spec,
                           architecture={"obs_shape": list(gan.obs_shape),
                                         "hidden_channels": gan.config.hidden_channels},
                           metadata=header)

def load_attack(filename, expected_env_spec=None) -> PerturbationGAN:
    container = read_container(filename, kind="attack", expected_env_spec=expected_env_spec)
    metadata = container.metadata
    gan = PerturbationGAN(container.architecture["obs_shape"], PerturbationBudget(**metadata["budget"]),
                          GanConfig(**metadata["gan"]))
    gan.generator.load_state_dict(container.params["generator"])
    gan.discriminator.load_state_dict(container.params["discriminator"])
    gan.container = container
    return gan
