import numpy as np
import pytest
import torch
import torch.nn as nn

from PerturbationGAN import PerturbationGenerator, PerturbationBudget
from QueryLedger import QueryLedger
from Transitions import Transition, Provenance, ReplayBuffer
from WorldModel import (
    WorldModelConfig, WorldModel, TokenOutOfRange, InsufficientData, encode, decode, tokenizer_loss, wm_loss,
    nearest_codebook, dynamics_loss, train_world_model, train_dynamics, imagine_rollout, imagine_rollouts,
    one_step_fidelity, save_world_model, load_world_model
)
from TorchUtils import parameter_digest

def _tiny_config(**kwargs):
    values = dict(codebook_size=8, token_grid=2, embedding_dim=8, context_length=4, horizon=3,
                  tokenizer_steps=3, train_steps=3, batch_size=4, d_model=16, n_layers=1, n_heads=2)
    values.update(kwargs)
    return WorldModelConfig(**values)

def _real_buffer(env, victim, episodes=3):
    buffer = ReplayBuffer(1000)
    for episode in range(episodes):
        obs, done = env.reset(episode), False
        while not done:
            action = victim.act(obs)
            result = env.step(action)
            buffer.push(Transition(obs, action, result.reward, result.next_obs, result.done, Provenance.Real),
                        episode=episode)
            obs, done = result.next_obs, result.done
    return buffer

@pytest.fixture
def trained_wm(point_env, point_victim):
    return train_world_model(_real_buffer(point_env, point_victim), point_env.spec, _tiny_config())

def test_encode_decode_shapes(point_env):
    wm = WorldModel(point_env.spec, _tiny_config())
    obs = np.stack([point_env.reset(i) for i in range(3)])
    tokens = encode(wm.tokenizer, obs)
    assert tokens.shape == (3, 2, 2)
    assert int(tokens.min()) >= 0 and int(tokens.max()) < 8
    frames = decode(wm.tokenizer, tokens)
    assert frames.shape == (3,) + point_env.spec.obs_shape
    assert float(frames.min()) >= 0.0 and float(frames.max()) <= 1.0

def test_decode_rejects_out_of_range_tokens(point_env):
    wm = WorldModel(point_env.spec, _tiny_config())
    with pytest.raises(TokenOutOfRange):
        decode(wm.tokenizer, torch.full((2, 2), 8))
    with pytest.raises(TokenOutOfRange):
        decode(wm.tokenizer, torch.full((2, 2), -1))

def test_training_rejects_synthetic_transitions(point_env, point_victim):
    buffer = _real_buffer(point_env, point_victim, episodes=1)
    t = buffer[0]
    buffer.push(t._replace(provenance=Provenance.Synthetic), episode=0)
    with pytest.raises(ValueError):
        train_world_model(buffer, point_env.spec, _tiny_config())

def test_training_needs_one_batch(point_env, point_victim):
    buffer = ReplayBuffer(10)
    buffer.extend(_real_buffer(point_env, point_victim, episodes=1).transitions()[:2], episode=0)
    with pytest.raises(InsufficientData):
        train_world_model(buffer, point_env.spec, _tiny_config())

def test_dynamics_needs_within_episode_sequences(point_env, point_victim, trained_wm):
    buffer = ReplayBuffer(10)
    # No episode ids: no contiguous sequences
    buffer.extend(_real_buffer(point_env, point_victim, episodes=1).transitions()[:6])
    with pytest.raises(InsufficientData):
        train_dynamics(trained_wm, buffer, 1, np.random.default_rng(0))

def test_trained_world_model_has_finite_loss(point_env, point_victim, trained_wm):
    buffer = _real_buffer(point_env, point_victim, episodes=1)
    loss = wm_loss(trained_wm, buffer.sample_sequences(2, 4))
    assert torch.isfinite(loss) and float(loss) > 0.0
    assert set(trained_wm.training_losses) == {"token_nll", "reward_mse"}
    assert all(not p.requires_grad for p in trained_wm.tokenizer.parameters())

def test_imagined_rollout_takes_no_environment_steps(point_env, trained_wm, point_victim):
    ledger = QueryLedger()
    gen = PerturbationGenerator(point_env.spec.obs_shape, hidden_channels=4)
    budget = PerturbationBudget(epsilon=0.05)
    rollout = imagine_rollout(trained_wm, point_env.reset(0), gen, point_victim, budget, 3, ledger)
    assert len(rollout) == 3
    assert all(t.provenance == Provenance.Synthetic for t in rollout)
    assert ledger.train_env_total == 0
    assert ledger.train_vic_total == 3
    for first, second in zip(rollout, rollout[1:]):
        torch.testing.assert_close(first.next_obs, second.obs)

def test_batched_rollouts_and_frame_sink(point_env, trained_wm, point_victim):
    ledger, sink = QueryLedger(), []
    starts = np.stack([point_env.reset(i) for i in range(2)])
    rollouts = imagine_rollouts(trained_wm, starts, None, point_victim, PerturbationBudget(), 2, ledger,
                                perturb_states=False, frame_sink=sink)
    assert [len(r) for r in rollouts] == [2, 2]
    assert len(sink) == 4
    assert ledger.totals_by_operation("train_vic") == {"world_model.imagine": 4}
    torch.testing.assert_close(rollouts[0][0].obs, torch.as_tensor(starts[0]))

def test_zero_horizon_rollout_is_empty(point_env, trained_wm, point_victim):
    ledger = QueryLedger()
    assert imagine_rollout(trained_wm, point_env.reset(0), None, point_victim, PerturbationBudget(), 0, ledger) == []
    assert ledger.train_vic_total == 0

def test_one_step_fidelity_reports_errors(point_env, point_victim, trained_wm):
    fidelity = one_step_fidelity(trained_wm, _real_buffer(point_env, point_victim, episodes=1).transitions())
    assert fidelity["samples"] == point_env.spec.episode_horizon
    assert fidelity["reward_mse"] >= 0.0 and 0.0 <= fidelity["decode_error"] <= 1.0

def test_world_model_checkpoint_round_trip(tmp_path, point_env, trained_wm):
    filename = str(tmp_path / "world_model.seba")
    save_world_model(trained_wm, filename)
    loaded = load_world_model(filename, expected_env_spec=point_env.spec)
    assert parameter_digest(loaded.dynamics.state_dict()) == parameter_digest(trained_wm.dynamics.state_dict())
    obs = point_env.reset(3)
    torch.testing.assert_close(loaded.frame_tokens(obs), trained_wm.frame_tokens(obs))

class _FunctionalDynamics(nn.Module):
    """Dynamics model evaluated with substituted parameters"""
    def __init__(self, dynamics):
        super().__init__()
        self.dynamics = dynamics
        self.params = {}

    def forward(self, tokens, actions):
        return torch.func.functional_call(self.dynamics, self.params, (tokens, actions))

def test_wm_loss_gradient_wrt_dynamics_parameters(point_env, point_victim):
    sequences = _real_buffer(point_env, point_victim, episodes=1).sample_sequences(2, 3)
    checked = ("token_head.bias", "reward_head.weight", "reward_head.bias", "action_embedding.weight",
               "transformer.layers.0.linear2.bias")
    for draw in range(3):
        torch.manual_seed(draw)
        wm = WorldModel(point_env.spec, _tiny_config())
        # Tokens come from the float tokenizer, the dynamics run in double precision
        dynamics = wm.dynamics.double()
        wm.dynamics = _FunctionalDynamics(dynamics)
        named = dict(dynamics.named_parameters())
        params = tuple(named[name].detach().clone().requires_grad_(True) for name in checked)

        def loss_of(*values):
            wm.dynamics.params = dict(zip(checked, values))
            return wm_loss(wm, sequences)
        assert torch.autograd.gradcheck(loss_of, params, eps=1e-6, atol=1e-8, rtol=1e-4)

def test_tokenizer_loss_gradient_wrt_decoder_parameters(point_env):
    frames = torch.as_tensor(np.stack([point_env.reset(i) for i in range(2)]), dtype=torch.float64)
    # Straight-through quantization: only decoder parameters have matching numerical gradients
    checked = ("decoder.0.bias", "decoder.4.weight", "decoder.4.bias")
    for draw in range(3):
        torch.manual_seed(draw)
        tokenizer = WorldModel(point_env.spec, _tiny_config()).tokenizer.double()
        named = dict(tokenizer.named_parameters())
        params = tuple(named[name].detach().clone().requires_grad_(True) for name in checked)

        def loss_of(*values):
            substituted = lambda obs: torch.func.functional_call(tokenizer, dict(zip(checked, values)), (obs,))
            return tokenizer_loss(substituted, frames, 0.25)
        assert torch.autograd.gradcheck(loss_of, params, eps=1e-6, atol=1e-8, rtol=1e-4)

def test_nearest_codebook_index():
    codebook = torch.tensor([[0.0], [1.0]])
    assert nearest_codebook(torch.tensor([[0.9]]), codebook).tolist() == [1]
    codebook = torch.randn(5, 3)
    assert nearest_codebook(codebook[[3, 0]], codebook).tolist() == [3, 0]

def test_dynamics_loss_values():
    targets = torch.zeros(1, 1, 4, dtype=torch.long)
    nll, reward_mse = dynamics_loss(torch.zeros(1, 1, 4, 64), torch.tensor([[0.5]]), targets, torch.tensor([[0.0]]))
    assert float(nll) == pytest.approx(np.log(64.0), abs=1e-5)
    assert float(reward_mse) == pytest.approx(0.25)
    confident = torch.full((1, 1, 4, 64), -1e4)
    confident[..., 0] = 1e4
    nll, reward_mse = dynamics_loss(confident, torch.tensor([[1.0]]), targets, torch.tensor([[1.0]]))
    assert float(nll + reward_mse) == pytest.approx(0.0, abs=1e-6)

def test_training_is_deterministic(point_env, point_victim):
    buffer = _real_buffer(point_env, point_victim)
    a = train_world_model(buffer, point_env.spec, _tiny_config())
    b = train_world_model(buffer, point_env.spec, _tiny_config())
    assert parameter_digest(a.state_dict()) == parameter_digest(b.state_dict())
