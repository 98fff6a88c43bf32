import numpy as np
import pytest
import torch

from PixelEnvironments import ChainPixels
from QueryLedger import QueryLedger
from ShadowCritic import (
    CriticConfig, ShadowCritic, td_target, td_targets, critic_loss, critic_loss_from_predictions,
    critic_update, save_critic, load_critic
)
from PerturbationGAN import BatchMismatch
from TorchUtils import parameter_digest
from Transitions import Transition, Provenance, ReplayBuffer, EmptyBuffer, collate_transitions
from Victims import ConstantVictim

def _chain_transition(env, state, action=1, done=False):
    next_state, reward = env.transition_table()[(state, action)]
    return Transition(env.render_state(state), action, reward, env.render_state(next_state), done, Provenance.Real)

def test_terminal_target_is_reward_without_queries(chain_env, chain_victim):
    critic = ShadowCritic(chain_env.spec)
    ledger = QueryLedger()
    target = td_target(critic, _chain_transition(chain_env, 2, done=True), chain_victim, critic.config, ledger)
    assert target == pytest.approx(0.5)
    assert ledger.train_vic_total == 0

def test_non_terminal_target_bootstraps_with_one_query(chain_env, chain_victim):
    config = CriticConfig(gamma=0.9, architecture="linear")
    critic = ShadowCritic(chain_env.spec, config)
    ledger = QueryLedger()
    transition = _chain_transition(chain_env, 1)
    with torch.no_grad():
        bootstrap = float(critic.target(torch.as_tensor(transition.next_obs).unsqueeze(0), torch.tensor([1]))[0])
    assert td_target(critic, transition, chain_victim, config, ledger) == pytest.approx(0.25 + 0.9 * bootstrap, abs=1e-6)
    assert ledger.train_vic_total == 1

def test_exact_expectation_queries_distribution_once(chain_env, chain_victim):
    config = CriticConfig(architecture="linear", exact_expectation=True, action_samples_for_target=4)
    critic = ShadowCritic(chain_env.spec, config)
    ledger = QueryLedger()
    batch = collate_transitions([_chain_transition(chain_env, s) for s in range(3)], continuous=False)
    td_targets(critic, batch, chain_victim, config, ledger)
    assert ledger.train_vic_total == 3

def test_action_samples_multiply_queries(chain_env, chain_victim):
    config = CriticConfig(architecture="linear", action_samples_for_target=3)
    critic = ShadowCritic(chain_env.spec, config)
    ledger = QueryLedger()
    batch = collate_transitions([_chain_transition(chain_env, 0), _chain_transition(chain_env, 1, done=True)],
                                continuous=False)
    td_targets(critic, batch, chain_victim, config, ledger)
    assert ledger.train_vic_total == 3

def test_critic_loss_values():
    predictions = torch.tensor([1.0, 2.0])
    targets = torch.tensor([0.0, 4.0])
    assert float(critic_loss_from_predictions(predictions, targets)) == pytest.approx(0.5 * (1.0 + 4.0) / 2.0)
    with pytest.raises(BatchMismatch):
        critic_loss_from_predictions(predictions, torch.zeros(3))

def test_critic_loss_gradient_matches_finite_differences(chain_env):
    critic = ShadowCritic(chain_env.spec, CriticConfig(architecture="linear")).double()
    obs = torch.as_tensor(np.stack([chain_env.render_state(s) for s in range(3)]), dtype=torch.float64)
    obs.requires_grad_(True)
    actions = torch.tensor([0, 1, 1])
    targets = torch.tensor([0.3, -0.2, 1.0], dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda x: critic_loss(critic, x, actions, targets), (obs,),
                                    eps=1e-6, atol=1e-8, rtol=1e-4)

@pytest.mark.parametrize("env_name", ["chain_env", "point_env"])
def test_critic_loss_parameter_gradients(request, env_name):
    env = request.getfixturevalue(env_name)
    spec = env.spec
    obs = torch.as_tensor(np.stack([env.reset(i) for i in range(3)]), dtype=torch.float64)
    if spec.is_continuous:
        actions = torch.rand(3, spec.action_dim, dtype=torch.float64) * 2.0 - 1.0
    else:
        actions = torch.tensor([0, 1, 1])
    targets = torch.tensor([0.3, -0.2, 1.0], dtype=torch.float64)
    for draw in range(3):
        torch.manual_seed(draw)
        critic = ShadowCritic(spec, CriticConfig(architecture="linear")).double()
        names = [name for name, _ in critic.online.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for p in critic.online.parameters())

        def loss_of(*values):
            online = lambda o, a: torch.func.functional_call(critic.online, dict(zip(names, values)), (o, a))
            return critic_loss(online, obs, actions, targets)
        assert torch.autograd.gradcheck(loss_of, params, eps=1e-6, atol=1e-8, rtol=1e-4)

def test_update_on_empty_buffer(chain_env, chain_victim):
    critic = ShadowCritic(chain_env.spec)
    with pytest.raises(EmptyBuffer):
        critic_update(critic, ReplayBuffer(10), chain_victim, critic.config)

def test_zero_tau_leaves_target_untouched(chain_env, chain_victim):
    config = CriticConfig(tau=0.0, architecture="linear", batch_size=4)
    critic = ShadowCritic(chain_env.spec, config)
    buffer = ReplayBuffer(10)
    buffer.extend([_chain_transition(chain_env, s) for s in range(4)])
    before_target = parameter_digest(critic.target.state_dict())
    before_online = parameter_digest(critic.online.state_dict())
    critic_update(critic, buffer, chain_victim, config)
    assert parameter_digest(critic.target.state_dict()) == before_target
    assert parameter_digest(critic.online.state_dict()) != before_online

def test_update_counts_training_queries(chain_env, chain_victim):
    config = CriticConfig(architecture="linear", batch_size=8)
    critic = ShadowCritic(chain_env.spec, config)
    buffer = ReplayBuffer(10)
    buffer.extend([_chain_transition(chain_env, s) for s in range(4)])
    ledger = QueryLedger()
    critic_update(critic, buffer, chain_victim, config, ledger, operation="stage1.td_target")
    assert ledger.totals_by_operation("train_vic") == {"stage1.td_target": 8}

def test_linear_critic_reaches_bellman_fixed_point(chain_env, chain_victim):
    gamma = 0.9
    config = CriticConfig(gamma=gamma, tau=1.0, lr=0.05, batch_size=16, architecture="linear", optimizer="sgd")
    critic = ShadowCritic(chain_env.spec, config).double()
    buffer = ReplayBuffer(10, seed=1)
    buffer.extend([_chain_transition(chain_env, s) for s in range(chain_env.n_states)])
    for _ in range(4000):
        critic_update(critic, buffer, chain_victim, config)

    # Q = (I - gamma P)^-1 r for the always-advance policy on the cycle
    n = chain_env.n_states
    P = np.roll(np.eye(n), 1, axis=1)
    expected = np.linalg.solve(np.eye(n) - gamma * P, np.asarray(chain_env.rewards))
    obs = torch.as_tensor(np.stack([chain_env.render_state(s) for s in range(n)]), dtype=torch.float64)
    with torch.no_grad():
        learned = critic(obs, torch.ones(n, dtype=torch.long)).numpy()
    np.testing.assert_allclose(learned, expected, atol=1e-3)

def test_critic_checkpoint_round_trip(tmp_path, point_env):
    critic = ShadowCritic(point_env.spec, CriticConfig(feature_dim=16, hidden_dim=16))
    filename = str(tmp_path / "critic.seba")
    save_critic(critic, filename)
    loaded = load_critic(filename, expected_env_spec=point_env.spec)
    assert parameter_digest(loaded.online.state_dict()) == parameter_digest(critic.online.state_dict())
    assert loaded.config == critic.config

def test_two_state_chain_target_with_constant_critic():
    env = ChainPixels(chain_rewards=(1.0, 1.0))
    config = CriticConfig(gamma=0.5, architecture="linear")
    critic = ShadowCritic(env.spec, config)
    with torch.no_grad():
        critic.target.head.weight.zero_()
        critic.target.head.bias.fill_(2.0)
    victim = ConstantVictim(env.spec, action=1)
    assert td_target(critic, _chain_transition(env, 0), victim, config) == pytest.approx(2.0)

def test_myopic_target_is_the_reward(chain_env, chain_victim):
    config = CriticConfig(gamma=0.0, architecture="linear")
    critic = ShadowCritic(chain_env.spec, config)
    assert td_target(critic, _chain_transition(chain_env, 1), chain_victim, config) == pytest.approx(0.25)

def test_loss_scalar_examples():
    assert float(critic_loss_from_predictions(torch.tensor([1.0]), torch.tensor([3.0]))) == pytest.approx(2.0)
    assert float(critic_loss_from_predictions(torch.tensor([0.0, 2.0]), torch.tensor([0.0, 0.0]))) == pytest.approx(1.0)
    assert float(critic_loss_from_predictions(torch.tensor([0.5, 1.5]), torch.tensor([0.5, 1.5]))) == 0.0

def test_zero_learning_rate_and_tau_change_nothing(chain_env, chain_victim):
    config = CriticConfig(lr=0.0, tau=0.0, architecture="linear", batch_size=4)
    critic = ShadowCritic(chain_env.spec, config)
    buffer = ReplayBuffer(10)
    buffer.extend([_chain_transition(chain_env, s) for s in range(4)])
    before = parameter_digest(critic.online.state_dict(), critic.target.state_dict())
    report = critic_update(critic, buffer, chain_victim, config)
    assert parameter_digest(critic.online.state_dict(), critic.target.state_dict()) == before
    assert report["critic_loss"] >= 0.0

def test_synthetic_transitions_train_like_real_ones(chain_env, chain_victim):
    config = CriticConfig(architecture="linear", batch_size=4)
    digests = []
    for provenance in (Provenance.Real, Provenance.Synthetic):
        torch.manual_seed(0)
        critic = ShadowCritic(chain_env.spec, config)
        buffer = ReplayBuffer(10, seed=3)
        buffer.extend([_chain_transition(chain_env, s)._replace(provenance=provenance) for s in range(4)])
        for _ in range(5):
            critic_update(critic, buffer, chain_victim, config)
        digests.append(parameter_digest(critic.online.state_dict()))
    assert digests[0] == digests[1]
