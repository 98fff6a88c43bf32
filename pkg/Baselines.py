#!/usr/bin/env python3
"""
Comparison attackers sharing the PerturbationBudget and the QueryLedger:

- pgd_attack:        white-box, iterated signed-gradient steps through the
                     victim's differentiable handle
- random_attack:     uniform noise in the epsilon ball, no victim queries
- simba_lite_attack: black-box coordinate search using victim queries only
"""
import numpy as np
import torch

from PerturbationGAN import PerturbationBudget
from QueryLedger import QueryContext
from TorchUtils import as_batch

__all__ = [
    "AccessLevel", "AttackerInterface", "PGDAttacker", "RandomAttacker", "SimBALiteAttacker",
    "NoDifferentiableHandle", "AccessViolation",
    "pgd_attack", "random_attack", "simba_lite_attack", "action_divergence", "make_baseline"
]

class NoDifferentiableHandle(Exception):
    """Raised when a white-box attack targets a victim without a differentiable handle"""
    pass

class AccessViolation(Exception):
    """Raised when an attacker uses access beyond its declared access level"""
    pass

class AccessLevel(object):
    WhiteBox = "white-box"
    BlackBoxQuery = "black-box-query"
    NoQuery = "no-query"

def match_input(adv, s):
    """Return adv in the container type and shape of s"""
    if isinstance(s, np.ndarray):
        return adv.reshape(s.shape).detach().cpu().numpy().astype(s.dtype, copy=False)
    return adv.reshape(torch.as_tensor(s).shape)

def pgd_attack(victim, s, budget: PerturbationBudget, steps=20, step_size=None, ledger=None,
               random_start=False, targeted=None, seed=0):
    """
    Projected signed-gradient descent on the victim's own objective
    (see DifferentiableHandle.attack_objective). Each iteration counts as one
    attack-extra victim query. With targeted=(dimension_index, low, high) the
    objective is the hinge distance of that action dimension to [low, high].

    Raises:
        NoDifferentiableHandle: for victims without white-box access (scripted victims)
    """
    handle = victim.differentiable_handle
    if handle is None:
        raise NoDifferentiableHandle(f"{victim} has no differentiable handle, PGD needs white-box access")
    if step_size is None:
        step_size = 2.5 * budget.epsilon / max(1, steps)
    clean = as_batch(s).detach()
    adv = clean.clone()
    if random_start:
        generator = torch.Generator().manual_seed(int(seed))
        noise = (torch.rand(clean.shape, generator=generator, dtype=clean.dtype) * 2.0 - 1.0) * budget.epsilon
        adv = budget.project(clean + noise, clean)
    for _ in range(steps):
        adv = adv.detach().requires_grad_(True)
        if targeted is not None:
            objective = handle.targeted_objective(adv, *targeted)
        else:
            objective = handle.attack_objective(adv, clean)
        gradient, = torch.autograd.grad(objective, adv)
        adv = budget.project(adv.detach() - step_size * gradient.sign(), clean)
    if ledger is not None:
        ledger.record_victim_queries(steps, QueryContext.AttackExtra, "pgd.gradient")
    return match_input(adv.detach(), s)

def random_attack(s, budget: PerturbationBudget, seed=0):
    """s' = clip(s + delta, pixel range) with delta uniform in [-epsilon, epsilon]"""
    clean = as_batch(s).detach()
    rng = np.random.default_rng(seed)
    delta = torch.as_tensor(rng.uniform(-budget.epsilon, budget.epsilon, size=tuple(clean.shape)), dtype=clean.dtype)
    adv = (clean + delta).clamp(budget.pixel_min, budget.pixel_max)
    return match_input(adv, s)

def action_divergence(action, clean_action, continuous=True) -> float:
    """Euclidean action distance (continuous) or 0/1 disagreement (discrete)"""
    if continuous:
        return float(torch.linalg.vector_norm(action.double() - clean_action.double()))
    return float(int(action.reshape(-1)[0]) != int(clean_action.reshape(-1)[0]))

def simba_lite_attack(victim, s, budget: PerturbationBudget, query_budget=400, ledger=None, seed=0,
                      trace=None):
    """
    Coordinate search: probe the clean action (1 query), then try +-epsilon on
    random pixel coordinates, keeping a change when the victim's action moves
    further away from the clean action. query_budget counts all victim queries
    of the attack, the probe included, all logged as attack-extra.
    trace, if given, receives the score of every accepted trial.
    """
    clean = as_batch(s).detach()
    continuous = victim.spec.is_continuous
    clean_action = victim.act_batch(clean, ledger, QueryContext.AttackExtra, "simba.probe")
    remaining = max(0, int(query_budget) - 1)
    adv = clean.clone()
    best_score = 0.0
    rng = np.random.default_rng(seed)
    flat_clean = clean.reshape(-1)
    for coordinate in rng.permutation(flat_clean.numel()):
        if remaining == 0:
            break
        for sign in (1.0, -1.0):
            if remaining == 0:
                break
            candidate = adv.clone().reshape(-1)
            value = float(flat_clean[coordinate]) + sign * budget.epsilon
            value = min(max(value, budget.pixel_min), budget.pixel_max)
            if value == float(candidate[coordinate]):
                continue
            candidate[coordinate] = value
            candidate = candidate.reshape(clean.shape)
            action = victim.act_batch(candidate, ledger, QueryContext.AttackExtra, "simba.trial")
            remaining -= 1
            score = action_divergence(action, clean_action, continuous)
            if score > best_score:
                adv, best_score = candidate, score
                if trace is not None:
                    trace.append(score)
                break
    return match_input(adv, s)

class AttackerInterface(object):
    """
    attack(obs, victim, ledger) returns the perturbed observation.
    Attackers with access level no-query receive victim=None.
    """
    name = "attacker"
    access_level = AccessLevel.NoQuery

    def __init__(self, budget: PerturbationBudget):
        self.budget = budget

    def attack(self, obs, victim, ledger):
        raise NotImplementedError

    def check_access(self, victim):
        if victim is not None and self.access_level == AccessLevel.NoQuery:
            raise AccessViolation(f"{self.name} is a no-query attacker but was given victim access")

    def __str__(self):
        return f"{type(self).__name__}({self.access_level}, epsilon={self.budget.epsilon:.5f})"

    def __repr__(self) -> str:
        return self.__str__()

class PGDAttacker(AttackerInterface):
    name = "pgd"
    access_level = AccessLevel.WhiteBox

    def __init__(self, budget, steps=20, step_size=None, random_start=False, targeted=None, seed=0):
        super().__init__(budget)
        self.steps = steps
        self.step_size = step_size
        self.random_start = random_start
        self.targeted = targeted
        self.seed = seed
        self.calls = 0

    def attack(self, obs, victim, ledger):
        self.calls += 1
        return pgd_attack(victim, obs, self.budget, self.steps, self.step_size, ledger,
                          self.random_start, self.targeted, self.seed + self.calls)

class RandomAttacker(AttackerInterface):
    name = "random"
    access_level = AccessLevel.NoQuery

    def __init__(self, budget, seed=0):
        super().__init__(budget)
        self.seed = seed
        self.calls = 0

    def attack(self, obs, victim, ledger):
        self.check_access(victim)
        self.calls += 1
        return random_attack(obs, self.budget, seed=(self.seed, self.calls))

class SimBALiteAttacker(AttackerInterface):
    name = "simba"
    access_level = AccessLevel.BlackBoxQuery

    def __init__(self, budget, query_budget=400, seed=0):
        super().__init__(budget)
        self.query_budget = query_budget
        self.seed = seed
        self.calls = 0

    def attack(self, obs, victim, ledger):
        self.calls += 1
        return simba_lite_attack(victim, obs, self.budget, self.query_budget, ledger, seed=(self.seed, self.calls))

def make_baseline(name, budget: PerturbationBudget, seed=0, **kwargs) -> AttackerInterface:
    """Baseline attacker by name: random, pgd or simba"""
    if name == "random":
        return RandomAttacker(budget, seed=seed)
    elif name == "pgd":
        return PGDAttacker(budget, seed=seed, **kwargs)
    elif name == "simba":
        return SimBALiteAttacker(budget, seed=seed, **kwargs)
    raise ValueError(f"Unknown baseline '{name}', expected one of random, pgd, simba")
