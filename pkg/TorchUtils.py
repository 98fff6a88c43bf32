#!/usr/bin/env python3
"""
Small torch helpers shared by every learned component:
seeding, freezing, soft target updates and parameter digests.
"""
import contextlib
import hashlib
import random

import numpy as np
import torch

__all__ = [
    "seed_everything", "frozen", "soft_update", "parameter_digest",
    "as_batch", "all_finite"
]

def seed_everything(seed: int):
    """
    Seed python, numpy and torch RNGs and switch torch
    to deterministic kernels (warn-only so that CPU-only
    ops without a deterministic variant keep working).
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)

@contextlib.contextmanager
def frozen(*modules):
    """
    Temporarily disable gradients for all parameters of the given modules.
    Gradients still flow *through* the modules to their inputs.
    """
    previous = []
    for module in modules:
        for param in module.parameters():
            previous.append((param, param.requires_grad))
            param.requires_grad_(False)
    try:
        yield
    finally:
        for param, requires_grad in previous:
            param.requires_grad_(requires_grad)

@torch.no_grad()
def soft_update(target: torch.nn.Module, online: torch.nn.Module, tau: float):
    """
    target <- (1 - tau) * target + tau * online
    """
    for target_param, online_param in zip(target.parameters(), online.parameters()):
        target_param.mul_(1.0 - tau).add_(online_param, alpha=tau)

def parameter_digest(*state_dicts) -> str:
    """
    SHA-256 over all tensors of the given state dicts,
    in sorted key order. Identical parameters <=> identical digest.
    """
    sha = hashlib.sha256()
    for state_dict in state_dicts:
        for key in sorted(state_dict.keys()):
            tensor = state_dict[key]
            sha.update(key.encode("utf-8"))
            if isinstance(tensor, torch.Tensor):
                array = tensor.detach().cpu().contiguous().numpy()
                sha.update(str(array.dtype).encode("utf-8"))
                sha.update(str(array.shape).encode("utf-8"))
                sha.update(array.tobytes())
            else:
                sha.update(repr(tensor).encode("utf-8"))
    return sha.hexdigest()

def as_batch(obs, dtype=torch.float32) -> torch.Tensor:
    """
    Convert a single observation [C,H,W] or a batch [N,C,H,W]
    (numpy or torch) to a float tensor batch [N,C,H,W].
    """
    tensor = torch.as_tensor(obs)
    if not torch.is_floating_point(tensor):
        tensor = tensor.to(dtype)
    elif tensor.dtype != torch.float64:
        tensor = tensor.to(dtype)
    if tensor.dim() == 3:
        tensor = tensor.unsqueeze(0)
    return tensor

def all_finite(*values) -> bool:
    return all(bool(torch.isfinite(torch.as_tensor(v)).all()) for v in values)
