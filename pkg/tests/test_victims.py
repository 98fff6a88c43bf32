from dataclasses import replace

import numpy as np
import pytest
import torch

from PixelEnvironments import PointGoalPixels, EnvSpecMismatch
from QueryLedger import QueryLedger, QueryContext
from Victims import (
    LearnedContinuousVictim, LearnedDiscreteVictim, VictimTrainConfig, ShapeMismatch, TrainingDiverged,
    episode_return, make_scripted_victim, train_victim, save_victim, load_victim
)
from TorchUtils import parameter_digest

def test_act_counts_one_query(point_env, point_victim):
    ledger = QueryLedger()
    obs = point_env.reset(0)
    action = point_victim.act(obs, ledger, QueryContext.Training)
    assert action.shape == (2,)
    assert np.all(np.abs(action) <= 1.0)
    assert ledger.train_vic_total == 1

def test_act_batch_counts_every_observation(point_env, point_victim):
    ledger = QueryLedger()
    batch = np.stack([point_env.reset(i) for i in range(5)])
    actions = point_victim.act_batch(batch, ledger, QueryContext.Training)
    assert actions.shape == (5, 2)
    assert ledger.train_vic_total == 5

def test_shape_mismatch(point_victim):
    with pytest.raises(ShapeMismatch):
        point_victim.act(np.zeros((3, 8, 8), dtype=np.float32))

def test_scripted_point_goal_victim_moves_towards_goal(point_env, point_victim):
    point_env.reset(0)
    point_env.set_positions([0.2, 0.5], [0.8, 0.5])
    action = point_victim.act(point_env.render())
    assert action[0] > 0.9
    assert abs(action[1]) < 0.1

def test_scripted_victims_reach_their_goals(point_env, point_victim, grid_env, grid_victim):
    # Random behaviour collects far less reward than the scripted controller
    scripted = episode_return(point_env, point_victim, 0)
    point_env.reset(0)
    rng = np.random.default_rng(0)
    random_return, done = 0.0, False
    while not done:
        result = point_env.step(rng.uniform(-1, 1, size=2))
        random_return += result.reward
        done = result.done
    assert scripted > random_return
    assert episode_return(grid_env, grid_victim, 0) > 0.0

def test_deterministic_victim_repeats_actions(point_env, point_victim):
    obs = point_env.reset(0)
    np.testing.assert_array_equal(point_victim.act(obs), point_victim.act(obs))

def test_stochastic_victim_is_seeded(point_env):
    obs = point_env.reset(0)
    a = make_scripted_victim(point_env, deterministic=False, seed=3)
    b = make_scripted_victim(point_env, deterministic=False, seed=3)
    np.testing.assert_array_equal(a.act(obs), b.act(obs))

def test_discrete_distribution_sums_to_one(grid_env):
    victim = LearnedDiscreteVictim(grid_env.spec, feature_dim=16, hidden_dim=16, deterministic=False)
    probs = victim.query_distribution(np.stack([grid_env.reset(i) for i in range(3)]))
    assert probs.shape == (3, 4)
    torch.testing.assert_close(probs.sum(dim=-1), torch.ones(3))

def test_scripted_victims_have_no_differentiable_handle(point_victim):
    assert point_victim.differentiable_handle is None

def test_learned_victim_handle_gives_gradients(point_env):
    victim = LearnedContinuousVictim(point_env.spec, feature_dim=16, hidden_dim=16)
    obs = torch.as_tensor(point_env.reset(0)).unsqueeze(0).requires_grad_(True)
    objective = victim.differentiable_handle.attack_objective(obs, obs.detach())
    gradient, = torch.autograd.grad(objective, obs)
    assert gradient.shape == obs.shape

def test_zero_step_training_diverges(point_env):
    with pytest.raises(TrainingDiverged):
        train_victim(point_env, VictimTrainConfig(kind="learned", steps=0))

def test_scripted_training_reports_competence(point_env):
    victim = train_victim(point_env, VictimTrainConfig(kind="scripted", eval_episodes=2))
    assert victim.competence["mean_return"] == pytest.approx(victim.competence["scripted_return"])

def test_learned_training_is_reproducible():
    # Rewards are non-negative, a zero ratio only checks that competence gets measured
    config = VictimTrainConfig(kind="learned", seed=3, steps=40, start_steps=10, batch_size=8, feature_dim=8,
                               hidden_dim=8, eval_episodes=2, competence_ratio=0.0)
    digests, competences = [], []
    for _ in range(2):
        victim = train_victim(PointGoalPixels(seed=0, obs_size=16, episode_horizon=10), config)
        assert isinstance(victim, LearnedContinuousVictim)
        digests.append(parameter_digest(*[net.state_dict() for net in victim.networks().values()]))
        competences.append(victim.competence)
    assert digests[0] == digests[1]
    assert competences[0] == competences[1]
    other = train_victim(PointGoalPixels(seed=0, obs_size=16, episode_horizon=10), replace(config, seed=4))
    assert parameter_digest(*[net.state_dict() for net in other.networks().values()]) != digests[0]

def test_victim_checkpoint_round_trip(tmp_path, grid_env):
    victim = LearnedDiscreteVictim(grid_env.spec, feature_dim=16, hidden_dim=16)
    filename = str(tmp_path / "victim.seba")
    save_victim(victim, filename)
    loaded = load_victim(filename, expected_env_spec=grid_env.spec)
    for key, value in victim.q.state_dict().items():
        assert torch.equal(value, loaded.q.state_dict()[key])
    obs = grid_env.reset(0)
    assert loaded.act(obs) == victim.act(obs)

def test_victim_checkpoint_rejects_other_env(tmp_path, point_env, point_victim):
    filename = str(tmp_path / "victim.seba")
    save_victim(point_victim, filename)
    with pytest.raises(EnvSpecMismatch):
        load_victim(filename, expected_env_spec=PointGoalPixels(obs_size=32).spec)
