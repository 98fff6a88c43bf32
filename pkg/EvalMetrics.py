#!/usr/bin/env python3
"""
Attack evaluation in the real environment: clean vs attacked returns,
a Fréchet distance between clean and perturbed frames under a fixed
feature extractor, targeted success rate, and the metrics table.

The Fréchet distance uses a small, seeded, randomly initialized
convolutional extractor instead of an Inception network. Values are
only comparable within one run (same extractor seed), never to
published FID numbers.
"""
import os
from dataclasses import dataclass, field

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import scipy.linalg
import torch
import torch.nn as nn
from tqdm import tqdm
from UliPlot.XLSX import auto_adjust_xlsx_column_width

from AttackTrainer import DimensionOutOfRange
from Baselines import AccessLevel
from QueryLedger import QueryContext, ledger_report
from TorchUtils import as_batch

__all__ = [
    "EvalConfig", "RewardStats", "EpisodeLog", "FeatureExtractor", "InsufficientSamples",
    "evaluate_policy", "frechet_distance", "frame_frechet_distance", "frechet_distance_from_statistics",
    "gaussian_statistics", "targeted_success_rate", "metrics_row", "write_metrics_table",
    "plot_returns", "plot_reward_curves", "plot_frechet_distances"
]

# Covariance regularization added before the matrix square root
FD_EPSILON = 1e-6

METRICS_COLUMNS = ["task", "attacker", "mean_return", "std_return", "fd", "atk_vic_per_step",
                   "train_env_total", "train_vic_total", "targeted_success_rate"]

class InsufficientSamples(Exception):
    """Raised when a feature set is too small for a covariance estimate"""
    pass

@dataclass
class EvalConfig:
    episodes: int = 10
    # Evaluation episodes use indices disjoint from training
    episode_offset: int = 500000
    fd_samples: int = 2048
    feature_dim: int = 64
    feature_seed: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError(f"episodes must be >= 1, got {self.episodes}")
        if self.episode_offset < 0:
            raise ValueError(f"episode_offset must be >= 0, got {self.episode_offset}")
        if self.fd_samples < 2 or self.feature_dim < 1:
            raise ValueError("fd_samples must be >= 2 and feature_dim >= 1")

class EpisodeLog(object):
    """Executed actions and rewards of one episode, frames when recorded"""
    def __init__(self, episode_index):
        self.episode_index = episode_index
        self.actions = []
        self.rewards = []
        self.clean_frames = []
        self.perturbed_frames = []

    @property
    def total_return(self) -> float:
        return float(sum(self.rewards))

    def __len__(self):
        return len(self.actions)

    def __str__(self):
        return f"EpisodeLog(episode={self.episode_index}, steps={len(self)}, return={self.total_return:.3f})"

    def __repr__(self) -> str:
        return self.__str__()

@dataclass
class RewardStats:
    mean: float
    std: float
    episodes: int
    returns: list
    logs: list = field(default_factory=list, repr=False)

    @staticmethod
    def from_returns(returns, logs=None) -> "RewardStats":
        if len(returns) < 1:
            raise ValueError("RewardStats needs at least one episode")
        values = np.asarray(returns, dtype=np.float64)
        # Population standard deviation
        return RewardStats(float(values.mean()), float(values.std()), len(returns), [float(r) for r in returns],
                           logs or [])

    def __str__(self):
        return f"{self.mean:.3f} ± {self.std:.3f} ({self.episodes} episodes)"

class FeatureExtractor(nn.Module):
    """
    Fixed image-to-vector map: three stride-2 convolutions, global average
    pooling and a linear projection to feature_dim. Parameters come from
    feature_seed and never change.
    """
    def __init__(self, obs_shape, feature_dim=64, feature_seed=0):
        super().__init__()
        self.feature_dim = feature_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(feature_seed)
            channels = obs_shape[0]
            self.net = nn.Sequential(
                nn.Conv2d(channels, 32, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.ReLU(),
                nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                nn.Linear(64, feature_dim))
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, obs):
        return self.net(as_batch(obs).float())

    def features(self, frames, batch_size=256) -> np.ndarray:
        frames = as_batch(torch.stack([torch.as_tensor(f) for f in frames]) if isinstance(frames, list) else frames)
        chunks = [self(frames[i:i + batch_size]) for i in range(0, frames.shape[0], batch_size)]
        return torch.cat(chunks).double().numpy()

def evaluate_policy(env, victim, attacker=None, episodes=10, ledger=None, episode_offset=0,
                    record_frames=False, verbose=False) -> RewardStats:
    """
    Run full episodes in the real environment. With an attacker every
    observation is perturbed before the victim acts on it.

    Ledger accounting: one evaluation env step and one policy-execution
    victim query per step, one attack step per perturbed observation and
    whatever attack-extra queries the attacker issues itself.
    Episodes use the explicit indices episode_offset .. episode_offset + episodes - 1.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    attack_victim = victim
    if attacker is not None and attacker.access_level == AccessLevel.NoQuery:
        attack_victim = None
    logs = []
    for k in tqdm(range(episodes), desc="evaluate", leave=False, disable=not verbose):
        log = EpisodeLog(episode_offset + k)
        obs = env.reset(episode_offset + k)
        done = False
        while not done:
            seen = obs
            if attacker is not None:
                seen = attacker.attack(obs, attack_victim, ledger)
                if ledger is not None:
                    ledger.record_attack_step(1, "eval.attack_step")
            action = victim.act(seen, ledger, QueryContext.PolicyExecution, "eval.policy")
            result = env.step(action)
            if ledger is not None:
                ledger.record_env_steps(1, "eval.env_step", evaluation=True)
            if record_frames:
                log.clean_frames.append(np.asarray(obs, dtype=np.float32))
                log.perturbed_frames.append(np.asarray(torch.as_tensor(seen).reshape(np.shape(obs)), dtype=np.float32))
            log.actions.append(action)
            log.rewards.append(result.reward)
            obs, done = result.next_obs, result.done
        logs.append(log)
    stats = RewardStats.from_returns([log.total_return for log in logs], logs)
    if verbose:
        print(f"{'Attacked' if attacker is not None else 'Clean'} return: {stats}")
    return stats

def gaussian_statistics(features):
    """Mean and (sample) covariance of an [N, F] feature set"""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    if features.shape[0] < features.shape[1] + 1:
        raise InsufficientSamples(f"{features.shape[0]} samples of dimension {features.shape[1]}, "
                                  f"need at least {features.shape[1] + 1}")
    return features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False))

def _sqrtm_psd(matrix):
    values, vectors = scipy.linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T

def frechet_distance_from_statistics(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """
    ||mu_a - mu_b||^2 + tr(sigma_a + sigma_b - 2 (sigma_a sigma_b)^(1/2))

    The trace of the square root is taken from the eigenvalues of the
    symmetric matrix sigma_a^(1/2) sigma_b sigma_a^(1/2), which shares its
    spectrum with sigma_a sigma_b.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    sigma_a, sigma_b = np.atleast_2d(sigma_a).astype(np.float64), np.atleast_2d(sigma_b).astype(np.float64)
    offset = FD_EPSILON * np.eye(sigma_a.shape[0])
    sigma_a, sigma_b = sigma_a + offset, sigma_b + offset
    root_a = _sqrtm_psd(sigma_a)
    product = root_a @ sigma_b @ root_a
    product = 0.5 * (product + product.T)
    trace_root = float(np.sqrt(np.clip(scipy.linalg.eigvalsh(product), 0.0, None)).sum())
    diff = mu_a - mu_b
    distance = float(diff @ diff) + float(np.trace(sigma_a) + np.trace(sigma_b)) - 2.0 * trace_root
    return max(0.0, distance)

def frechet_distance(features_a, features_b) -> float:
    """
    Fréchet distance between Gaussian fits of two [N, F] feature sets.

    Raises:
        InsufficientSamples: if a set has fewer than F + 1 samples
    """
    mu_a, sigma_a = gaussian_statistics(features_a)
    mu_b, sigma_b = gaussian_statistics(features_b)
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"Feature dimensions differ: {mu_a.shape[0]} vs {mu_b.shape[0]}")
    return frechet_distance_from_statistics(mu_a, sigma_a, mu_b, sigma_b)

def frame_frechet_distance(logs, extractor: FeatureExtractor, max_samples=2048) -> float:
    """Fréchet distance between the pooled clean and perturbed frames of evaluation episodes"""
    clean = [frame for log in logs for frame in log.clean_frames][:max_samples]
    perturbed = [frame for log in logs for frame in log.perturbed_frames][:max_samples]
    return frechet_distance(extractor.features(clean), extractor.features(perturbed))

def targeted_success_rate(logs, spec) -> float:
    """
    Fraction of executed steps whose action dimension lies in the target range.

    Raises:
        DimensionOutOfRange: if the logged actions have no such dimension
    """
    hits, total = 0, 0
    for log in logs:
        for action in log.actions:
            action = np.asarray(action, dtype=np.float64).reshape(-1)
            if spec.dimension_index >= action.shape[0]:
                raise DimensionOutOfRange(f"Action dimension {spec.dimension_index} does not exist "
                                          f"in {action.shape[0]}-dimensional actions")
            hits += int(spec.contains(action[spec.dimension_index]))
            total += 1
    return hits / total if total > 0 else 0.0

def metrics_row(task, attacker, stats: RewardStats, fd=None, attack_ledger=None, training_report=None,
                targeted_rate=None) -> dict:
    """
    One row of the metrics table. attack_ledger is the evaluation ledger,
    training_report the ledger_report() of the attack's training (both optional).
    """
    attack = ledger_report(attack_ledger) if attack_ledger is not None else {}
    training = training_report or {}
    return {
        "task": task,
        "attacker": attacker,
        "mean_return": stats.mean,
        "std_return": stats.std,
        "fd": fd,
        "atk_vic_per_step": attack.get("atk_vic_per_step"),
        "train_env_total": training.get("train_env_total", 0),
        "train_vic_total": training.get("train_vic_total", 0),
        "targeted_success_rate": targeted_rate,
    }

def write_metrics_table(rows, out_dir, basename="metrics") -> pd.DataFrame:
    """Write metrics.csv and metrics.xlsx, one row per (task, attacker)"""
    df = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    os.makedirs(out_dir, exist_ok=True)
    df.to_csv(os.path.join(out_dir, f"{basename}.csv"), index=False)
    with pd.ExcelWriter(os.path.join(out_dir, f"{basename}.xlsx")) as writer:
        df.to_excel(writer, sheet_name="Metrics", index=False)
        auto_adjust_xlsx_column_width(df, writer, sheet_name="Metrics", margin=0)
    return df

def plot_returns(df: pd.DataFrame, filename):
    """Mean return per attacker with population std error bars"""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(df["attacker"], df["mean_return"], yerr=df["std_return"], capsize=4, color="tab:blue")
    ax.set_ylabel("Episodic return")
    ax.set_title(", ".join(sorted(set(df["task"]))))
    fig.tight_layout()
    fig.savefig(filename, dpi=100)
    plt.close(fig)

def plot_reward_curves(stats_by_attacker: dict, filename):
    """Per-episode return of each attacker"""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, stats in stats_by_attacker.items():
        ax.plot(range(len(stats.returns)), stats.returns, marker="o", label=name)
    ax.set_xlabel("Evaluation episode")
    ax.set_ylabel("Return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(filename, dpi=100)
    plt.close(fig)

def plot_frechet_distances(df: pd.DataFrame, filename):
    fig, ax = plt.subplots(figsize=(6, 4))
    fds = df["fd"].fillna(0.0)
    ax.bar(df["attacker"], fds, color="tab:orange")
    ax.set_ylabel("Fréchet distance (fixed random features)")
    fig.tight_layout()
    fig.savefig(filename, dpi=100)
    plt.close(fig)
