import numpy as np
import pytest
import torch

from Baselines import (
    AccessViolation, NoDifferentiableHandle, PGDAttacker, RandomAttacker, SimBALiteAttacker,
    pgd_attack, random_attack, simba_lite_attack, action_divergence, make_baseline
)
from EvalMetrics import evaluate_policy
from PerturbationGAN import PerturbationBudget
from QueryLedger import QueryLedger
from Victims import VictimPolicy, LearnedContinuousVictim

BUDGET = PerturbationBudget(epsilon=0.05)

class _LinearHandle(object):
    def __init__(self, weights):
        self.weights = weights

    def attack_objective(self, adv_obs, clean_obs):
        return (adv_obs * self.weights).sum()

class _LinearVictim(VictimPolicy):
    """White-box victim whose attack objective is linear in the observation"""
    def __init__(self, spec, weights):
        super().__init__(spec)
        self.handle = _LinearHandle(weights)

    @property
    def differentiable_handle(self):
        return self.handle

    def _act_tensor(self, obs):
        return torch.zeros(obs.shape[0], self.spec.action_dim)

def test_pgd_on_linear_objective_moves_to_the_corner(point_env):
    obs = np.full(point_env.spec.obs_shape, 0.5, dtype=np.float32)
    weights = torch.randn(point_env.spec.obs_shape)
    ledger = QueryLedger()
    adv = pgd_attack(_LinearVictim(point_env.spec, weights), obs, BUDGET, steps=10, ledger=ledger)
    expected = obs - BUDGET.epsilon * np.sign(weights.numpy())
    np.testing.assert_allclose(adv, expected, atol=1e-7)
    assert ledger.totals_by_operation("attack_extra") == {"pgd.gradient": 10}

class _QuadraticHandle(object):
    """sum h * (s - center)^2 with h > 0"""
    def __init__(self, curvature, center):
        self.curvature, self.center = curvature, center

    def attack_objective(self, adv_obs, clean_obs):
        return (self.curvature * (adv_obs - self.center).pow(2)).sum()

def test_pgd_decreases_a_convex_quadratic_objective(point_env):
    shape = point_env.spec.obs_shape
    obs = np.full(shape, 0.5, dtype=np.float32)
    generator = torch.Generator().manual_seed(0)
    curvature = torch.rand(shape, generator=generator) + 0.1
    # Minimum outside the epsilon ball: every coordinate keeps moving towards its edge
    center = 0.5 + 0.2 * torch.sign(torch.rand(shape, generator=generator) - 0.5)
    victim = _LinearVictim(point_env.spec, torch.zeros(shape))
    victim.handle = _QuadraticHandle(curvature, center)
    values = []
    for steps in range(9):
        adv = pgd_attack(victim, obs, BUDGET, steps=steps, step_size=0.01)
        values.append(float(victim.handle.attack_objective(torch.as_tensor(adv), None)))
    assert all(b < a for a, b in zip(values[:5], values[1:5]))
    assert all(b <= a + 1e-4 for a, b in zip(values, values[1:]))

def test_pgd_respects_the_pixel_range(point_env):
    obs = np.zeros(point_env.spec.obs_shape, dtype=np.float32)
    weights = torch.ones(point_env.spec.obs_shape)
    adv = pgd_attack(_LinearVictim(point_env.spec, weights), obs, BUDGET, steps=5)
    np.testing.assert_array_equal(adv, obs)

def test_pgd_with_zero_gradient_keeps_the_observation(point_env):
    obs = point_env.reset(0)
    adv = pgd_attack(_LinearVictim(point_env.spec, torch.zeros(point_env.spec.obs_shape)), obs, BUDGET)
    np.testing.assert_array_equal(adv, obs)

def test_pgd_needs_a_differentiable_handle(point_env, point_victim):
    with pytest.raises(NoDifferentiableHandle):
        pgd_attack(point_victim, point_env.reset(0), BUDGET)

def test_pgd_on_learned_victim_stays_in_budget(point_env):
    victim = LearnedContinuousVictim(point_env.spec, feature_dim=16, hidden_dim=16)
    obs = point_env.reset(0)
    adv = pgd_attack(victim, obs, BUDGET, steps=3, random_start=True, seed=1)
    assert np.abs(adv - obs).max() <= BUDGET.epsilon + 1e-7
    targeted = pgd_attack(victim, obs, BUDGET, steps=3, targeted=(0, 0.3, 0.5))
    assert np.abs(targeted - obs).max() <= BUDGET.epsilon + 1e-7

def test_random_attack_with_zero_epsilon_is_identity(point_env):
    obs = point_env.reset(0)
    np.testing.assert_array_equal(random_attack(obs, PerturbationBudget(epsilon=0.0)), obs)

def test_random_attack_is_bounded_and_seeded(point_env):
    obs = point_env.reset(0)
    adv = random_attack(obs, BUDGET, seed=3)
    assert adv.dtype == obs.dtype and adv.shape == obs.shape
    assert np.abs(adv - obs).max() <= BUDGET.epsilon + 1e-7
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    np.testing.assert_array_equal(adv, random_attack(obs, BUDGET, seed=3))
    assert not np.array_equal(adv, random_attack(obs, BUDGET, seed=4))

def test_random_attacker_rejects_victim_access(point_env, point_victim):
    with pytest.raises(AccessViolation):
        RandomAttacker(BUDGET).attack(point_env.reset(0), point_victim, None)

def test_action_divergence():
    assert action_divergence(torch.tensor([[3.0, 4.0]]), torch.zeros(1, 2)) == pytest.approx(5.0)
    assert action_divergence(torch.tensor([2]), torch.tensor([2]), continuous=False) == 0.0
    assert action_divergence(torch.tensor([1]), torch.tensor([2]), continuous=False) == 1.0

def test_simba_zero_budget_still_probes(point_env, point_victim):
    obs = point_env.reset(0)
    ledger = QueryLedger()
    adv = simba_lite_attack(point_victim, obs, BUDGET, query_budget=0, ledger=ledger)
    np.testing.assert_array_equal(adv, obs)
    assert ledger.totals_by_operation("attack_extra") == {"simba.probe": 1}

def test_simba_spends_exactly_its_budget(point_env, point_victim):
    ledger = QueryLedger()
    adv = simba_lite_attack(point_victim, point_env.reset(0), BUDGET, query_budget=400, ledger=ledger)
    assert ledger.counters["attack_extra"] == 400
    assert ledger.train_vic_total == 0
    assert np.abs(adv - point_env.reset(0)).max() <= BUDGET.epsilon + 1e-7

def test_simba_accepted_scores_increase(point_env, point_victim):
    trace = []
    simba_lite_attack(point_victim, point_env.reset(0), PerturbationBudget(epsilon=0.5), query_budget=300,
                      trace=trace)
    assert all(b > a for a, b in zip(trace, trace[1:]))

def test_evaluation_counts_attack_extra_queries_per_step(point_env, point_victim):
    ledger = QueryLedger()
    evaluate_policy(point_env, point_victim, SimBALiteAttacker(BUDGET, query_budget=5), episodes=1, ledger=ledger)
    assert ledger.atk_vic_per_step == pytest.approx(5.0)

def test_make_baseline():
    assert isinstance(make_baseline("pgd", BUDGET, steps=3), PGDAttacker)
    assert make_baseline("pgd", BUDGET, steps=3).steps == 3
    assert isinstance(make_baseline("random", BUDGET), RandomAttacker)
    with pytest.raises(ValueError):
        make_baseline("fgsm", BUDGET)
