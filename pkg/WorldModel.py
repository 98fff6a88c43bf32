#!/usr/bin/env python3
"""
Tokenized world model: a vector-quantized image tokenizer (encode/decode)
and an autoregressive transformer over interleaved [frame tokens, action]
steps that predicts the next frame's tokens and the reward.

The tokenizer is trained first on real frames and then frozen,
the dynamics model is trained on the frozen token sequences.
"""
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from ContainerIO import write_container, read_container
from PerturbationGAN import perturb, NonFiniteLoss
from PixelEnvironments import EnvSpec
from QueryLedger import QueryContext
from TorchUtils import seed_everything, all_finite, as_batch
from Transitions import Transition, Provenance

__all__ = [
    "WorldModelConfig", "Tokenizer", "DynamicsModel", "WorldModel",
    "TokenOutOfRange", "InsufficientData",
    "nearest_codebook", "encode", "decode", "dynamics_loss", "tokenizer_loss", "wm_loss",
    "train_world_model", "train_dynamics", "imagine_rollout", "imagine_rollouts", "one_step_fidelity",
    "save_world_model", "load_world_model"
]

class TokenOutOfRange(Exception):
    """Raised when a token index is outside [0, K)"""
    pass

class InsufficientData(Exception):
    """Raised when a replay buffer holds too few transitions to train on"""
    pass

@dataclass
class WorldModelConfig:
    # Codebook size K
    codebook_size: int = 64
    # Frames are tokenized into token_grid x token_grid indices
    token_grid: int = 4
    embedding_dim: int = 32
    commitment: float = 0.25
    context_length: int = 8
    # Rollout horizon H
    horizon: int = 4
    # Real transitions collected before training
    collect_steps: int = 20000
    collect_random_action_prob: float = 0.3
    tokenizer_steps: int = 5000
    # Dynamics training steps N_W
    train_steps: int = 20000
    batch_size: int = 32
    tokenizer_lr: float = 1e-3
    lr: float = 3e-4
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    # Train on perturbed instead of clean frames
    train_on_perturbed: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.token_grid < 1:
            raise ValueError(f"token_grid must be >= 1, got {self.token_grid}")
        if self.context_length < 1:
            raise ValueError(f"context_length must be >= 1, got {self.context_length}")
        if self.horizon < 0:
            raise ValueError(f"horizon must be >= 0, got {self.horizon}")
        if min(self.collect_steps, self.tokenizer_steps, self.train_steps) < 0:
            raise ValueError("World model step counts must be >= 0")
        if not 0.0 <= self.collect_random_action_prob <= 1.0:
            raise ValueError("collect_random_action_prob must be in [0,1]")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")

    @property
    def tokens_per_frame(self):
        return self.token_grid * self.token_grid

def nearest_codebook(features, codebook):
    """
    Index of the nearest codebook vector (squared euclidean distance)
    for each feature vector. features: [..., D], codebook: [K, D].
    """
    flat = features.reshape(-1, features.shape[-1])
    distances = (flat.pow(2).sum(1, keepdim=True)
                 - 2 * flat @ codebook.t()
                 + codebook.pow(2).sum(1))
    return distances.argmin(dim=1).reshape(features.shape[:-1])

class Tokenizer(nn.Module):
    """
    Vector-quantized autoencoder with a straight-through estimator.
    """
    def __init__(self, obs_shape, codebook_size=64, embedding_dim=32, token_grid=4):
        super().__init__()
        channels = obs_shape[0]
        self.obs_shape = tuple(obs_shape)
        self.codebook_size = codebook_size
        self.token_grid = token_grid
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, embedding_dim, 1),
            nn.AdaptiveAvgPool2d(token_grid))
        self.codebook = nn.Embedding(codebook_size, embedding_dim)
        self.codebook.weight.data.uniform_(-1.0 / codebook_size, 1.0 / codebook_size)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(embedding_dim, 64, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(32, channels, 4, stride=2, padding=1))

    def features(self, obs):
        """[N, D, h, w] -> channel-last [N, h, w, D]"""
        return self.encoder(obs).permute(0, 2, 3, 1)

    def quantize(self, features):
        indices = nearest_codebook(features, self.codebook.weight)
        return indices, self.codebook(indices)

    def decode_embeddings(self, embeddings):
        out = self.decoder(embeddings.permute(0, 3, 1, 2))
        if out.shape[-2:] != self.obs_shape[-2:]:
            out = F.interpolate(out, size=self.obs_shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(out)

    def forward(self, obs):
        """
        Returns (reconstruction, indices, codebook loss, commitment loss).
        The commitment weight is applied by the caller.
        """
        features = self.features(obs)
        indices, quantized = self.quantize(features)
        codebook_loss = F.mse_loss(quantized, features.detach())
        commitment_loss = F.mse_loss(features, quantized.detach())
        straight_through = features + (quantized - features).detach()
        return self.decode_embeddings(straight_through), indices, codebook_loss, commitment_loss

def encode(tokenizer: Tokenizer, s) -> torch.Tensor:
    """Token grid(s) [N, h, w] of observation(s)"""
    with torch.no_grad():
        indices, _ = tokenizer.quantize(tokenizer.features(as_batch(s)))
    return indices

def decode(tokenizer: Tokenizer, z) -> torch.Tensor:
    """
    Observation(s) [N, C, H, W] in [0,1] for token grid(s) z.

    Raises:
        TokenOutOfRange: if any index is outside [0, K)
    """
    z = torch.as_tensor(z, dtype=torch.long)
    if z.dim() == 2:
        z = z.unsqueeze(0)
    if z.numel() and (int(z.min()) < 0 or int(z.max()) >= tokenizer.codebook_size):
        raise TokenOutOfRange(f"Token indices must lie in [0, {tokenizer.codebook_size}), "
                              f"got range [{int(z.min())}, {int(z.max())}]")
    with torch.no_grad():
        return tokenizer.decode_embeddings(tokenizer.codebook(z)).clamp(0.0, 1.0)

class DynamicsModel(nn.Module):
    """
    Causal transformer over the interleaved sequence
        [z_0 tokens..., a_0, z_1 tokens..., a_1, ...]
    The output at each action position predicts the logits of all
    next-frame tokens and the reward of that step.
    """
    def __init__(self, spec: EnvSpec, config: WorldModelConfig):
        super().__init__()
        self.continuous = spec.is_continuous
        self.tokens_per_frame = config.tokens_per_frame
        self.codebook_size = config.codebook_size
        d = config.d_model
        self.token_embedding = nn.Embedding(config.codebook_size, d)
        self.position_embedding = nn.Embedding(self.tokens_per_frame + 1, d)
        self.time_embedding = nn.Embedding(config.context_length, d)
        if self.continuous:
            self.action_embedding = nn.Linear(spec.action_dim, d)
        else:
            self.action_embedding = nn.Embedding(spec.action_count, d)
        layer = nn.TransformerEncoderLayer(d, config.n_heads, dim_feedforward=2 * d, dropout=0.0, batch_first=True)
        self.transformer = nn.TransformerEncoder(layer, config.n_layers, enable_nested_tensor=False)
        self.token_head = nn.Linear(d, self.tokens_per_frame * config.codebook_size)
        self.reward_head = nn.Linear(d, 1)

    def forward(self, tokens, actions):
        """
        tokens: [B, T, P] long, actions: [B, T, action_dim] or [B, T]
        Returns next-token logits [B, T, P, K] and rewards [B, T].
        """
        batch, steps, per_frame = tokens.shape
        frames = self.token_embedding(tokens)
        if self.continuous:
            acts = self.action_embedding(actions.to(frames.dtype)).unsqueeze(2)
        else:
            acts = self.action_embedding(actions.long()).unsqueeze(2)
        sequence = torch.cat([frames, acts], dim=2)
        sequence = sequence + self.position_embedding.weight.unsqueeze(0).unsqueeze(0)
        sequence = sequence + self.time_embedding.weight[:steps].unsqueeze(0).unsqueeze(2)
        length = steps * (per_frame + 1)
        sequence = sequence.reshape(batch, length, -1)
        mask = torch.triu(torch.full((length, length), float("-inf"), dtype=sequence.dtype), diagonal=1)
        hidden = self.transformer(sequence, mask=mask)
        hidden = hidden.reshape(batch, steps, per_frame + 1, -1)[:, :, -1]
        logits = self.token_head(hidden).reshape(batch, steps, per_frame, self.codebook_size)
        return logits, self.reward_head(hidden).squeeze(-1)

def dynamics_loss(logits, reward_pred, target_tokens, rewards):
    """
    (negative log-likelihood of the target tokens, reward mean squared error)
    """
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target_tokens.reshape(-1).long())
    reward_mse = (reward_pred - rewards.to(reward_pred.dtype)).pow(2).mean()
    return nll, reward_mse

class WorldModel(nn.Module):
    def __init__(self, spec: EnvSpec, config: WorldModelConfig = None):
        super().__init__()
        self.spec = spec
        self.config = config or WorldModelConfig()
        self.tokenizer = Tokenizer(spec.obs_shape, self.config.codebook_size, self.config.embedding_dim,
                                   self.config.token_grid)
        self.dynamics = DynamicsModel(spec, self.config)
        self.fidelity = {}
        self.training_losses = {}
        # Ledger counts spent collecting the training data
        self.collection_counts = {}
        self.dynamics_optimizer = None

    def frame_tokens(self, obs):
        """Flattened token indices [N, P]"""
        return encode(self.tokenizer, obs).reshape(as_batch(obs).shape[0], -1)

    def decode_tokens(self, tokens):
        grid = self.config.token_grid
        return decode(self.tokenizer, tokens.reshape(-1, grid, grid))

    def predict(self, token_history, action_history):
        """
        Most likely next-frame tokens [N, P] and predicted rewards [N]
        for the last step of the given histories.
        """
        context = self.config.context_length
        with torch.no_grad():
            logits, rewards = self.dynamics(token_history[:, -context:], action_history[:, -context:])
        return logits[:, -1].argmax(dim=-1), rewards[:, -1]

def wm_loss_terms(wm: WorldModel, sequences):
    """
    (token NLL, reward MSE) on a batch of real transition sequences
    (a list of equally long lists of Transition).
    """
    if len(sequences) == 0 or len(sequences[0]) < 1:
        raise InsufficientData("wm_loss needs at least one non-empty sequence")
    length = len(sequences[0])
    obs = torch.stack([torch.as_tensor(t.obs) for seq in sequences for t in seq]).float()
    next_obs = torch.stack([torch.as_tensor(t.next_obs) for seq in sequences for t in seq]).float()
    tokens = wm.frame_tokens(obs).reshape(len(sequences), length, -1)
    targets = wm.frame_tokens(next_obs).reshape(len(sequences), length, -1)
    actions = _action_tensor([t.action for seq in sequences for t in seq], wm.spec).reshape(len(sequences), length, -1)
    if not wm.spec.is_continuous:
        actions = actions.squeeze(-1)
    rewards = torch.as_tensor([[t.reward for t in seq] for seq in sequences], dtype=torch.float32)
    logits, reward_pred = wm.dynamics(tokens, actions)
    return dynamics_loss(logits, reward_pred, targets, rewards)

def tokenizer_loss(tokenizer: Tokenizer, frames, commitment=0.25):
    """Reconstruction MSE + codebook loss + commitment * commitment loss"""
    reconstruction, _, codebook_loss, commitment_loss = tokenizer(frames)
    return F.mse_loss(reconstruction, frames) + codebook_loss + commitment * commitment_loss

def wm_loss(wm: WorldModel, sequences):
    """Joint world-model loss: token NLL + reward MSE"""
    nll, reward_mse = wm_loss_terms(wm, sequences)
    return nll + reward_mse

def _action_tensor(actions, spec):
    if spec.is_continuous:
        return torch.stack([torch.as_tensor(a, dtype=torch.float32).reshape(-1) for a in actions])
    return torch.as_tensor([int(a) for a in actions], dtype=torch.long).reshape(-1, 1)

def _init_codebook(tokenizer: Tokenizer, frames, generator):
    """Initialize the codebook with random encoder features of real frames"""
    with torch.no_grad():
        features = tokenizer.features(frames).reshape(-1, tokenizer.codebook.weight.shape[1])
        chosen = torch.randint(0, features.shape[0], (tokenizer.codebook_size,), generator=generator)
        tokenizer.codebook.weight.data.copy_(features[chosen])

def _batch_frames(buffer, indices):
    return torch.stack([torch.as_tensor(buffer[int(i)].obs) for i in indices]).float()

def _check_real(buffer):
    counts = buffer.provenance_counts
    if counts.get(Provenance.Synthetic, 0) > 0:
        raise ValueError("World models train on real transitions only, "
                         f"buffer holds {counts[Provenance.Synthetic]} synthetic ones")

def train_world_model(buffer, spec: EnvSpec, config: WorldModelConfig, verbose=False) -> WorldModel:
    """
    Train tokenizer then dynamics on the real transitions of buffer.

    Raises:
        InsufficientData: fewer transitions than one batch, or no
            within-episode sequence of the context length
        ValueError: if the buffer holds synthetic transitions
    """
    _check_real(buffer)
    if len(buffer) < config.batch_size:
        raise InsufficientData(f"Buffer holds {len(buffer)} transitions, need at least {config.batch_size}")
    seed_everything(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    wm = WorldModel(spec, config)
    tokenizer = wm.tokenizer

    if config.tokenizer_steps > 0:
        _init_codebook(tokenizer, _batch_frames(buffer, rng.integers(0, len(buffer), size=4 * config.batch_size)),
                       generator)
    optimizer = torch.optim.Adam(tokenizer.parameters(), lr=config.tokenizer_lr)
    for step in tqdm(range(config.tokenizer_steps), desc="tokenizer", leave=False, disable=not verbose):
        frames = _batch_frames(buffer, rng.integers(0, len(buffer), size=config.batch_size))
        loss = tokenizer_loss(tokenizer, frames, config.commitment)
        if not all_finite(loss.detach()):
            raise NonFiniteLoss(f"Non-finite tokenizer loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    for param in tokenizer.parameters():
        param.requires_grad_(False)

    train_dynamics(wm, buffer, config.train_steps, rng, verbose)
    return wm

def train_dynamics(wm: WorldModel, buffer, steps, rng, verbose=False) -> dict:
    """
    Train (or continue training) the dynamics model for the given number of
    steps on within-episode sequences of buffer, with the tokenizer frozen.
    """
    _check_real(buffer)
    config, spec = wm.config, wm.spec
    if steps == 0:
        return wm.training_losses
    length = min(config.context_length, len(buffer))
    starts = buffer.sequence_starts(length)
    if len(starts) == 0:
        raise InsufficientData(f"No within-episode sequence of {length} transitions in the buffer")
    obs_tokens, next_tokens = [], []
    for begin in range(0, len(buffer), 1024):
        chunk = [buffer[i] for i in range(begin, min(len(buffer), begin + 1024))]
        obs_tokens.append(wm.frame_tokens(torch.stack([torch.as_tensor(t.obs) for t in chunk]).float()))
        next_tokens.append(wm.frame_tokens(torch.stack([torch.as_tensor(t.next_obs) for t in chunk]).float()))
    obs_tokens, next_tokens = torch.cat(obs_tokens), torch.cat(next_tokens)
    all_actions = _action_tensor([buffer[i].action for i in range(len(buffer))], spec)
    all_rewards = torch.as_tensor([buffer[i].reward for i in range(len(buffer))], dtype=torch.float32)

    if wm.dynamics_optimizer is None:
        wm.dynamics_optimizer = torch.optim.Adam(wm.dynamics.parameters(), lr=config.lr)
    optimizer = wm.dynamics_optimizer
    offsets = torch.arange(length)
    starts = torch.as_tensor(np.asarray(starts, dtype=np.int64))
    for step in tqdm(range(steps), desc="world-model", leave=False, disable=not verbose):
        chosen = torch.as_tensor(rng.integers(0, len(starts), size=config.batch_size))
        index = starts[chosen].unsqueeze(1) + offsets
        actions = all_actions[index]
        if not spec.is_continuous:
            actions = actions.squeeze(-1)
        logits, reward_pred = wm.dynamics(obs_tokens[index], actions)
        nll, reward_mse = dynamics_loss(logits, reward_pred, next_tokens[index], all_rewards[index])
        loss = nll + reward_mse
        if not all_finite(loss.detach()):
            raise NonFiniteLoss(f"Non-finite world model loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        wm.training_losses = {"token_nll": float(nll), "reward_mse": float(reward_mse)}
    if verbose:
        print(f"World model: token NLL {wm.training_losses['token_nll']:.4f}, "
              f"reward MSE {wm.training_losses['reward_mse']:.5f}")
    return wm.training_losses

def one_step_fidelity(wm: WorldModel, transitions) -> dict:
    """
    One-step prediction quality on held-out real transitions:
    reward MSE and mean per-pixel absolute error of the decoded next frame.
    """
    obs = torch.stack([torch.as_tensor(t.obs) for t in transitions]).float()
    next_obs = torch.stack([torch.as_tensor(t.next_obs) for t in transitions]).float()
    actions = _action_tensor([t.action for t in transitions], wm.spec).unsqueeze(1)
    if not wm.spec.is_continuous:
        actions = actions.squeeze(-1)
    rewards = torch.as_tensor([t.reward for t in transitions], dtype=torch.float32)
    tokens, predicted_rewards = wm.predict(wm.frame_tokens(obs).unsqueeze(1), actions)
    predicted_frames = wm.decode_tokens(tokens)
    return {
        "reward_mse": float((predicted_rewards - rewards).pow(2).mean()),
        "decode_error": float((predicted_frames - next_obs).abs().mean()),
        "reconstruction_error": float((wm.decode_tokens(wm.frame_tokens(next_obs)) - next_obs).abs().mean()),
        "samples": len(transitions),
    }

def _victim_action_value(action, spec):
    if spec.is_continuous:
        return action.double().numpy()
    return int(action)

def imagine_rollouts(wm: WorldModel, starts, gen, victim, budget, H, ledger=None,
                     perturb_states=True, frame_sink=None, operation="world_model.imagine") -> list:
    """
    Roll the world model H steps from each clean start frame.

    At each step the generator perturbs the imagined clean frame, the victim is
    queried on the perturbed frame (training context), and the dynamics model
    advances the tokens and predicts the reward. No environment step is taken.
    Returns one list of H synthetic transitions per start frame.
    frame_sink, if given, receives the imagined clean frames.
    """
    starts = as_batch(starts).float()
    count = starts.shape[0]
    rollouts = [[] for _ in range(count)]
    if H <= 0:
        return rollouts

    def maybe_perturb(frames):
        if not perturb_states or gen is None:
            return frames
        with torch.no_grad():
            return perturb(gen, frames, budget)

    clean = starts
    adv = maybe_perturb(clean)
    token_history = wm.frame_tokens(clean).unsqueeze(1)
    action_history = None
    for _ in range(H):
        actions = victim.act_batch(adv, ledger, QueryContext.Training, operation)
        step_actions = actions.reshape(count, 1, -1).float() if wm.spec.is_continuous else actions.reshape(count, 1)
        action_history = step_actions if action_history is None else torch.cat([action_history, step_actions], dim=1)
        next_tokens, rewards = wm.predict(token_history, action_history)
        next_clean = wm.decode_tokens(next_tokens)
        next_adv = maybe_perturb(next_clean)
        for k in range(count):
            rollouts[k].append(Transition(adv[k].detach().clone(), _victim_action_value(actions[k], wm.spec),
                                          float(rewards[k]), next_adv[k].detach().clone(), False,
                                          Provenance.Synthetic))
        if frame_sink is not None:
            frame_sink.extend(next_clean.detach())
        token_history = torch.cat([token_history, next_tokens.unsqueeze(1)], dim=1)
        clean, adv = next_clean, next_adv
    return rollouts

def imagine_rollout(wm: WorldModel, s0, gen, victim, budget, H, ledger=None, perturb_states=True,
                    frame_sink=None) -> list:
    """H synthetic transitions imagined from the single clean frame s0"""
    return imagine_rollouts(wm, as_batch(s0), gen, victim, budget, H, ledger, perturb_states, frame_sink)[0]

def save_world_model(wm: WorldModel, filename):
    return write_container(filename, "world_model",
                           {"tokenizer": wm.tokenizer.state_dict(), "dynamics": wm.dynamics.state_dict()},
                           env_spec=wm.spec, architecture={"world_model": asdict(wm.config)},
                           metadata={"fidelity": wm.fidelity, "collection_counts": wm.collection_counts})

def load_world_model(filename, expected_env_spec=None) -> WorldModel:
    container = read_container(filename, kind="world_model", expected_env_spec=expected_env_spec)
    wm = WorldModel(EnvSpec.from_dict(container.env_spec), WorldModelConfig(**container.architecture["world_model"]))
    wm.tokenizer.load_state_dict(container.params["tokenizer"])
    wm.dynamics.load_state_dict(container.params["dynamics"])
    for param in wm.tokenizer.parameters():
        param.requires_grad_(False)
    wm.fidelity = container.metadata.get("fidelity", {})
    wm.collection_counts = container.metadata.get("collection_counts", {})
    return wm
