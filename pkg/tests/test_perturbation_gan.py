import math

import pytest
import torch
import torch.nn as nn

from PerturbationGAN import (
    PerturbationBudget, PerturbationGAN, GanConfig, PerturbationGenerator, Discriminator, BatchMismatch,
    NonFiniteLoss, perturb, perturb_from_raw, discriminator_loss, discriminator_loss_from_outputs,
    generator_loss, generator_loss_from_outputs, save_attack, load_attack
)
from TorchUtils import parameter_digest

BUDGET = PerturbationBudget(epsilon=8.0 / 255.0)

def test_perturbation_respects_budget_for_random_generators():
    generator = torch.Generator().manual_seed(0)
    # 1000 parameter draws x 10 inputs
    for trial in range(1000):
        torch.manual_seed(trial)
        gen = PerturbationGenerator((3, 8, 8), hidden_channels=2)
        for param in gen.parameters():
            param.data.mul_(10.0)
        s = torch.rand(10, 3, 8, 8, generator=generator)
        adv = perturb(gen, s, BUDGET)
        assert float((adv - s).abs().max()) <= BUDGET.epsilon + 1e-7
        assert float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0

def test_zero_raw_output_is_identity():
    s = torch.rand(4, 3, 8, 8)
    torch.testing.assert_close(perturb_from_raw(torch.zeros_like(s), s, BUDGET), s)

def test_saturated_generator_pins_to_epsilon_and_clips_range():
    s = torch.full((1, 1, 4, 4), 0.5)
    s[0, 0, 0, 0] = 1.0
    adv = perturb_from_raw(torch.full_like(s, 1e6), s, BUDGET)
    assert float(adv[0, 0, 1, 1]) == pytest.approx(0.5 + BUDGET.epsilon)
    assert float(adv[0, 0, 0, 0]) == 1.0

def test_zero_epsilon_is_identity():
    s = torch.rand(2, 3, 8, 8)
    gen = PerturbationGenerator((3, 8, 8), hidden_channels=4)
    torch.testing.assert_close(perturb(gen, s, PerturbationBudget(epsilon=0.0)), s)

def test_budget_validation():
    with pytest.raises(ValueError):
        PerturbationBudget(epsilon=-0.1)
    with pytest.raises(ValueError):
        PerturbationBudget(epsilon=2.0)

def test_generator_handles_odd_sizes():
    gen = PerturbationGenerator((1, 7, 9), hidden_channels=4)
    assert gen(torch.rand(2, 1, 7, 9)).shape == (2, 1, 7, 9)

def test_discriminator_loss_at_half():
    half = torch.full((6,), 0.5)
    assert float(discriminator_loss_from_outputs(half, half)) == pytest.approx(2.0 * math.log(2.0))

def test_perfect_discriminator_loss_is_finite():
    loss = discriminator_loss_from_outputs(torch.ones(4), torch.zeros(4))
    assert math.isfinite(float(loss))
    assert float(loss) >= 0.0

def test_discriminator_batch_mismatch():
    disc = Discriminator((3, 8, 8), hidden_channels=4)
    with pytest.raises(BatchMismatch):
        discriminator_loss(disc, torch.rand(3, 3, 8, 8), torch.rand(4, 3, 8, 8))

def test_generator_loss_without_discriminator_is_lambda_q():
    q = torch.tensor([0.5, 1.5, -1.0])
    d_adv = torch.full((3,), 0.25)
    assert float(generator_loss_from_outputs(d_adv, q, lam=2.0, use_discriminator=False)) == pytest.approx(2.0 / 3.0)
    expected = (2.0 * q - torch.log(d_adv)).mean()
    torch.testing.assert_close(generator_loss_from_outputs(d_adv, q, lam=2.0), expected)

class _TinyDisc(nn.Module):
    def __init__(self):
        super().__init__()
        self.linear = nn.Linear(4, 1)

    def forward(self, obs):
        return torch.sigmoid(self.linear(obs.reshape(obs.shape[0], -1))).squeeze(-1)

class _TinyCritic(nn.Module):
    def __init__(self):
        super().__init__()
        self.linear = nn.Linear(5, 1)

    def forward(self, obs, actions):
        return self.linear(torch.cat([obs.reshape(obs.shape[0], -1), actions], dim=-1)).squeeze(-1)

def test_discriminator_loss_gradient_matches_finite_differences():
    disc = _TinyDisc().double()
    clean = torch.rand(5, 1, 2, 2, dtype=torch.float64)
    adv = torch.rand(5, 1, 2, 2, dtype=torch.float64)
    weight = disc.linear.weight.detach().clone().requires_grad_(True)

    def loss_of(w):
        d = lambda x: torch.sigmoid(x.reshape(5, -1) @ w.t() + disc.linear.bias).squeeze(-1)
        return discriminator_loss_from_outputs(d(clean), d(adv))
    assert torch.autograd.gradcheck(loss_of, (weight,), eps=1e-6, atol=1e-8, rtol=1e-4)

def test_generator_loss_gradient_matches_finite_differences():
    disc, critic = _TinyDisc().double(), _TinyCritic().double()
    actions = torch.rand(3, 1, dtype=torch.float64)
    adv = torch.rand(3, 1, 2, 2, dtype=torch.float64).mul(0.8).add(0.1).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda x: generator_loss(disc, critic, x, actions, 1.0), (adv,),
                                    eps=1e-6, atol=1e-8, rtol=1e-4)

def test_generator_loss_gradient_wrt_generator_parameters():
    disc, critic = _TinyDisc().double(), _TinyCritic().double()
    budget = PerturbationBudget(epsilon=0.1)
    s = torch.rand(3, 1, 2, 2, dtype=torch.float64).mul(0.6).add(0.2)
    actions = torch.rand(3, 1, dtype=torch.float64)
    for draw in range(3):
        torch.manual_seed(draw)
        gen = PerturbationGenerator((1, 2, 2), hidden_channels=2).double()
        names = [name for name, _ in gen.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for p in gen.parameters())

        def loss_of(*values):
            generator = lambda obs: torch.func.functional_call(gen, dict(zip(names, values)), (obs,))
            return generator_loss(disc, critic, perturb(generator, s, budget), actions, 1.0)
        assert torch.autograd.gradcheck(loss_of, params, eps=1e-6, atol=1e-8, rtol=1e-4)

def test_generator_loss_decreases_on_a_fixed_critic():
    torch.manual_seed(0)
    critic = _TinyCritic()
    gan = PerturbationGAN((1, 2, 2), PerturbationBudget(epsilon=0.1), GanConfig(gen_lr=1e-2, hidden_channels=4))
    clean = torch.rand(2, 1, 2, 2).mul(0.6).add(0.2)
    actions = torch.rand(2, 1)
    digest = parameter_digest(critic.state_dict())
    losses = [gan.update(clean, actions, critic, use_discriminator=False)["gen_loss"] for _ in range(50)]
    assert sum(losses[-5:]) < sum(losses[:5])
    assert losses[-1] < losses[0]
    assert parameter_digest(critic.state_dict()) == digest

def test_generator_loss_is_independent_of_action_gradients():
    disc, critic = _TinyDisc(), _TinyCritic()
    actions = torch.rand(3, 1, requires_grad=True)
    loss = generator_loss(disc, critic, torch.rand(3, 1, 2, 2), actions, 1.0)
    loss.backward()
    assert actions.grad is None

def test_gan_update_leaves_critic_untouched():
    gan = PerturbationGAN((1, 2, 2), BUDGET, GanConfig(batch_size=4, hidden_channels=4))
    critic = _TinyCritic()
    before = parameter_digest(critic.state_dict())
    generator_before = parameter_digest(gan.generator.state_dict())
    report = gan.update(torch.rand(4, 1, 2, 2), torch.rand(4, 1), critic)
    assert parameter_digest(critic.state_dict()) == before
    assert parameter_digest(gan.generator.state_dict()) != generator_before
    assert report["disc_loss"] is not None and math.isfinite(report["gen_loss"])
    assert all(p.requires_grad for p in critic.parameters())

def test_gan_update_without_discriminator_leaves_it_untouched():
    gan = PerturbationGAN((1, 2, 2), BUDGET, GanConfig(hidden_channels=4))
    before = parameter_digest(gan.discriminator.state_dict())
    report = gan.update(torch.rand(4, 1, 2, 2), torch.rand(4, 1), _TinyCritic(), use_discriminator=False)
    assert parameter_digest(gan.discriminator.state_dict()) == before
    assert report["disc_loss"] is None

def test_non_finite_loss_aborts_before_update():
    gan = PerturbationGAN((1, 2, 2), BUDGET, GanConfig(hidden_channels=4))
    before = parameter_digest(gan.generator.state_dict())
    objective = lambda adv, actions: adv.sum() * float("nan")
    with pytest.raises(NonFiniteLoss):
        gan.update(torch.rand(4, 1, 2, 2), torch.rand(4, 1), _TinyCritic(), use_discriminator=False,
                   objective=objective)
    assert parameter_digest(gan.generator.state_dict()) == before

def test_attack_checkpoint_round_trip(tmp_path):
    gan = PerturbationGAN((3, 8, 8), PerturbationBudget(epsilon=0.05), GanConfig(hidden_channels=4))
    filename = str(tmp_path / "attack.seba")
    save_attack(gan, filename)
    loaded = load_attack(filename)
    assert loaded.budget == gan.budget
    assert parameter_digest(loaded.generator.state_dict()) == parameter_digest(gan.generator.state_dict())
    s = torch.rand(2, 3, 8, 8)
    torch.testing.assert_close(loaded.perturb(s), gan.perturb(s), rtol=0, atol=0)

def test_loss_scalar_examples():
    assert float(discriminator_loss_from_outputs(torch.tensor([0.8]), torch.tensor([0.3]))) == \
        pytest.approx(-(math.log(0.8) + math.log(0.7)), abs=1e-6)
    assert float(generator_loss_from_outputs(torch.tensor([0.5]), torch.tensor([2.0]), lam=1.0)) == \
        pytest.approx(2.6931, abs=1e-4)
    assert float(generator_loss_from_outputs(torch.tensor([1.0]), torch.tensor([5.0]), lam=0.0)) == \
        pytest.approx(0.0, abs=1e-5)

def test_zero_learning_rates_leave_parameters_unchanged():
    gan = PerturbationGAN((1, 2, 2), BUDGET, GanConfig(gen_lr=0.0, disc_lr=0.0, hidden_channels=4))
    before = parameter_digest(gan.generator.state_dict(), gan.discriminator.state_dict())
    report = gan.update(torch.rand(4, 1, 2, 2), torch.rand(4, 1), _TinyCritic())
    assert parameter_digest(gan.generator.state_dict(), gan.discriminator.state_dict()) == before
    assert math.isfinite(report["gen_loss"]) and math.isfinite(report["disc_loss"])
