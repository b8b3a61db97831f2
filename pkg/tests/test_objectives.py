import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from swat_gda.objectives import (
    LossSide,
    PseudoLabelBatch,
    adv_loss_dual,
    cycle_loss,
    dual_critic_values,
    gradient_penalty,
    margin_filter,
    pseudo_label,
    rejection_count,
    self_training_loss,
    total_loss,
    wgan_value,
)

from oracles import cross_entropy, linear_critic_value, mlp_critic, penalty_fd


@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


H0 = np.array([
    [0.0012, 0.2987], [-0.2741, -0.8906], [-0.4547, -0.9916],
    [0.0601, 1.3402], [-0.4922, -0.6205], [0.4898, 0.3569],
])
HS = np.array([
    [1.1054, -1.4305], [0.9707, 0.1953], [-0.3442, -0.9576],
    [-0.9012, -1.7895], [-0.8417, -0.7351], [-0.2674, -0.2287],
])
# NumPy hand computation (tests/oracles.linear_critic_value) for the fixture above
DUAL_VALUE_FIXTURE = 8.599456666666667


def linear(w, b=0.0):
    layer = torch.nn.Linear(len(w), 1)
    with torch.no_grad():
        layer.weight.copy_(torch.tensor([w]))
        layer.bias.fill_(b)
    return lambda h: layer(h).squeeze(-1)


class Shift(torch.nn.Module):
    def __init__(self, c, scale=1.0):
        super().__init__()
        self.c = torch.nn.Parameter(torch.as_tensor(c, dtype=torch.float64))
        self.scale = scale

    def forward(self, h):
        return self.scale * h + self.c


def batch(n=8, d=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, d, generator=g), torch.randn(n, d, generator=g) + 1.0


# --- gradient penalty ------------------------------------------------------

def test_unit_norm_linear_critic_has_zero_penalty():
    real, fake = batch()
    w = [0.6, 0.0, -0.8]
    assert gradient_penalty(linear(w), real, fake, lam=10.0).item() == pytest.approx(0.0, abs=1e-12)


def test_slope_two_critic_penalty_equals_lambda():
    real, fake = batch()
    assert gradient_penalty(linear([2.0, 0.0, 0.0]), real, fake, lam=10.0).item() == pytest.approx(10.0, abs=1e-10)


def test_penalty_matches_finite_differences():
    rng = np.random.default_rng(3)
    params = [rng.normal(size=(2, 3)), rng.normal(size=2), rng.normal(size=(1, 2)), rng.normal(size=1)]
    net = torch.nn.Sequential(torch.nn.Linear(3, 2), torch.nn.ReLU(), torch.nn.Linear(2, 1))
    with torch.no_grad():
        for p, v in zip(net.parameters(), params):
            p.copy_(torch.as_tensor(v))
    real = rng.normal(size=(4, 3))
    fake = rng.normal(size=(4, 3)) + 0.5
    u = rng.uniform(size=4)
    got = gradient_penalty(lambda h: net(h).squeeze(-1), torch.as_tensor(real), torch.as_tensor(fake),
                           lam=10.0, u=torch.as_tensor(u)[:, None]).item()
    want = penalty_fd(params, real, fake, u, 10.0)
    assert abs(got - want) <= 1e-3 * max(abs(want), 1e-12)
    assert mlp_critic(params, real).shape == (4, 1)


def test_penalty_backpropagates_into_critic():
    real, fake = batch()
    net = torch.nn.Linear(3, 1)
    r = gradient_penalty(lambda h: net(h).squeeze(-1), real, fake)
    r.backward()
    assert net.weight.grad is not None and torch.isfinite(net.weight.grad).all()


def test_penalty_rejects_non_tensor_critic():
    real, fake = batch()
    with pytest.raises(TypeError):
        gradient_penalty(lambda h: 1.0, real, fake)


def test_penalty_rejects_mismatched_batches():
    with pytest.raises(ValueError):
        gradient_penalty(linear([1.0, 0, 0]), torch.zeros(3, 3), torch.zeros(2, 3))


# --- critic value -----------------------------------------------------------

def test_equal_batches_leave_only_the_penalty():
    real, _ = batch()
    net = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Tanh(), torch.nn.Linear(4, 1))
    crit = lambda h: net(h).squeeze(-1)
    v = wgan_value(crit, real, real.clone(), lam=10.0, generator=torch.Generator().manual_seed(0))
    assert v.wasserstein.item() == pytest.approx(0.0, abs=1e-12)
    assert v.value.item() == pytest.approx(v.penalty.item(), abs=1e-12)


def test_constant_critic_value_is_lambda():
    real, fake = batch()
    v = wgan_value(lambda h: torch.full((h.shape[0],), 3.0), real, fake, lam=10.0)
    assert v.value.item() == pytest.approx(10.0)


def test_point_masses_identity_critic():
    v = wgan_value(lambda h: h.squeeze(-1), torch.zeros(1, 1), torch.ones(1, 1), lam=0.0)
    assert v.value.item() == 1.0


def test_generator_loss_is_negated_unpenalised_value():
    real, fake = batch()
    v = wgan_value(linear([2.0, 0.0, 0.0]), real, fake, lam=10.0)
    assert v.generator_loss.item() == pytest.approx(-v.wasserstein.item())
    assert v.critic_loss.item() == pytest.approx(v.wasserstein.item() + 10.0)


# --- dual-path adversarial loss ---------------------------------------------

def test_identity_generators_on_equal_batches_give_twice_the_penalty():
    h, _ = batch()
    ident = torch.nn.Identity()
    D = linear([2.0, 0.0, 0.0])
    total = adv_loss_dual(ident, ident, D, D, h, h.clone(), lam=10.0)
    assert total.item() == pytest.approx(2 * 10.0)


def test_dual_value_matches_hand_computation():
    G_m, G_s = Shift([0.5, 0.25]), Shift([-0.5, -0.25])
    D_side, D_s = linear([0.6, -0.8], 0.3), linear([2.0, 0.0], -1.0)
    got = adv_loss_dual(G_m, G_s, D_side, D_s, torch.as_tensor(H0), torch.as_tensor(HS), lam=10.0).item()
    oracle = (linear_critic_value([0.6, -0.8], 0.3, HS, H0 + [0.5, 0.25], 10.0)
              + linear_critic_value([2.0, 0.0], -1.0, H0, HS - [0.5, 0.25], 10.0))
    assert got == pytest.approx(DUAL_VALUE_FIXTURE, abs=1e-9)
    assert oracle == pytest.approx(DUAL_VALUE_FIXTURE, abs=1e-12)


def test_swapping_the_two_paths_changes_nothing():
    h0, hs = batch(seed=4)
    G_m, G_s = Shift([0.1, 0.2, 0.3]), Shift([0.0, -0.1, 0.2])
    Da, Db = linear([1.5, 0.0, 0.0]), linear([0.0, 0.5, 0.5])
    fwd, bwd = dual_critic_values(G_m, G_s, Da, Db, h0, hs, lam=0.0)
    assert (fwd.value + bwd.value).item() == pytest.approx((bwd.value + fwd.value).item())


def test_linear_critic_gradients_match_analytic():
    # frozen linear critics, identity-initialised shift generators, H_0 = H_side
    h = torch.randn(5, 3, generator=torch.Generator().manual_seed(1), requires_grad=True)
    w_side, w_s = [0.3, -1.2, 0.5], [1.0, 2.0, -0.5]
    G_m, G_s = Shift([0.0, 0.0, 0.0]), Shift([0.0, 0.0, 0.0])
    fwd, bwd = dual_critic_values(G_m, G_s, linear(w_side), linear(w_s), h, h, lam=10.0)
    loss = fwd.generator_loss + bwd.generator_loss
    loss.backward()
    # real and fake are the same function of h, so nothing reaches the latent
    assert torch.allclose(h.grad, torch.zeros_like(h), atol=1e-12)
    # d/dc of -(E[w.(h + c)] - E[w.h]) is -w
    assert torch.allclose(G_m.c.grad, -torch.tensor(w_side), atol=1e-12)
    assert torch.allclose(G_s.c.grad, -torch.tensor(w_s), atol=1e-12)


# --- cycle loss --------------------------------------------------------------

def test_cycle_zero_for_identity_and_inverse_shifts():
    h0, hs = batch()
    ident = torch.nn.Identity()
    assert cycle_loss(ident, ident, h0, hs).item() == 0.0
    c = torch.tensor([0.3, -1.0, 2.0])
    assert cycle_loss(lambda h: h + c, lambda h: h - c, h0, hs).item() == pytest.approx(0.0, abs=1e-12)


def test_cycle_hand_computation_on_unit_rows():
    h = torch.nn.functional.normalize(torch.randn(7, 4, generator=torch.Generator().manual_seed(2)), dim=1)
    value = cycle_loss(lambda x: 2 * x, torch.nn.Identity(), h, h.clone())
    assert value.item() == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    a=st.floats(0.2, 5.0), b=st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    seed=st.integers(0, 10_000),
)
def test_cycle_vanishes_for_exact_affine_inverses(a, b, seed):
    h0, hs = batch(seed=seed)
    bb = torch.tensor(b)
    value = cycle_loss(lambda h: a * h + bb, lambda h: (h - bb) / a, h0, hs).item()
    assert 0.0 <= value <= 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_cycle_is_never_negative(seed):
    torch.manual_seed(seed)
    G_m, G_s = torch.nn.Linear(3, 3), torch.nn.Linear(3, 3)
    h0, hs = batch(seed=seed)
    assert cycle_loss(G_m, G_s, h0, hs).item() >= 0.0


# --- margin filter and self-training ------------------------------------------

REJECTED_FOR = {1: 1, 9: 1, 10: 1, 11: 2, 19: 2, 20: 2, 21: 3, 30: 3, 99: 10, 100: 10}


def test_rejection_count_table():
    assert {n: rejection_count(n, 0.1) for n in REJECTED_FOR} == REJECTED_FOR
    assert rejection_count(10, 0.0) == 0
    with pytest.raises(ValueError):
        rejection_count(10, 1.0)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 100), k=st.integers(2, 10), seed=st.integers(0, 2**31 - 1))
def test_margin_filter_removes_lowest_margins(n, k, seed):
    logits = torch.randn(n, k, generator=torch.Generator().manual_seed(seed)) * 3
    out = margin_filter(logits, 0.1)
    n_rej = math.ceil(0.1 * n)
    assert int((~out.kept).sum()) == n_rej
    assert bool(((out.margins >= 0) & (out.margins <= 1)).all())
    if n_rej and out.n_kept:
        assert out.margins[~out.kept].max() <= out.margins[out.kept].min()


def test_margin_filter_masks_the_minimal_margin_row():
    logits = torch.tensor([
        [4.0, 0.0, 0.0], [1.0, 0.9, 0.0], [0.0, 3.0, 0.0],
        [0.0, 0.0, 2.0], [2.0, 2.0, -1.0], [0.0, 5.0, 1.0],
        [3.0, 1.0, 0.0], [0.0, 0.5, 4.0], [6.0, 0.0, 1.0], [1.0, 4.0, 1.0],
    ])
    probs = torch.softmax(logits, 1).numpy()
    top = np.sort(probs, 1)
    oracle_margin = top[:, -1] - top[:, -2]
    out = margin_filter(logits, 0.1)
    assert int(np.argmin(oracle_margin)) == 4
    assert out.kept.tolist() == [True] * 4 + [False] + [True] * 5
    assert np.allclose(out.margins.numpy(), oracle_margin)


def test_margin_ties_resolved_by_position():
    out = margin_filter(torch.zeros(20, 4), 0.1)
    assert out.kept.tolist() == [False, False] + [True] * 18


def test_rate_zero_keeps_everything():
    out = margin_filter(torch.randn(13, 5), 0.0)
    assert bool(out.kept.all())


def test_pseudo_label_uses_argmax():
    g = torch.nn.Linear(2, 3)
    latent = torch.randn(11, 2)
    out = pseudo_label(g, latent, 0.1)
    assert torch.equal(out.labels, g(latent).argmax(1))
    assert out.latent is latent


def test_self_training_perfect_and_uniform():
    onehot = torch.eye(10) * 50
    assert self_training_loss(torch.nn.Identity(), onehot, torch.arange(10)).item() <= 1e-6
    uniform = torch.zeros(10, 10)
    assert self_training_loss(torch.nn.Identity(), uniform, torch.arange(10)).item() == pytest.approx(math.log(10))


def test_self_training_masked_mean():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(10, 4))
    labels = rng.integers(0, 4, 10)
    kept = np.ones(10, bool)
    kept[[2, 7]] = False
    batch_ = PseudoLabelBatch(None, torch.as_tensor(labels), torch.ones(10), torch.as_tensor(kept))
    got = self_training_loss(torch.nn.Identity(), torch.as_tensor(logits), batch_).item()
    assert got == pytest.approx(cross_entropy(logits[kept], labels[kept]), abs=1e-12)


def test_self_training_rejects_empty_kept_set():
    batch_ = PseudoLabelBatch(None, torch.zeros(3, dtype=torch.long), torch.ones(3), torch.zeros(3, dtype=torch.bool))
    with pytest.raises(ValueError):
        self_training_loss(torch.nn.Identity(), torch.zeros(3, 2), batch_)


# --- window mixture -------------------------------------------------------------

def test_total_loss_endpoints_and_midpoint():
    left, right = LossSide(1.0, 0.5, 0.5), LossSide(2.0, 1.0, 1.0)
    assert total_loss(left, right, 0.0).total == 2.0
    assert total_loss(left, right, 1.0).total == 4.0
    assert total_loss(left, right, 0.5).total == 3.0
    with pytest.raises(ValueError):
        total_loss(left, right, 1.5)


def test_endpoints_skip_the_other_side_even_if_non_finite():
    left, right = LossSide(1.0, 0.0, 0.0), LossSide(float("nan"), 0.0, 0.0)
    assert total_loss(left, right, 0.0).total == 1.0


@settings(max_examples=100, deadline=None)
@given(
    a=st.floats(-100, 100), b=st.floats(-100, 100),
    p1=st.floats(0, 1), p2=st.floats(0, 1), t=st.floats(0, 1),
)
def test_total_loss_is_affine_in_p(a, b, p1, p2, t):
    left, right = LossSide(a, 0.0, 0.0), LossSide(b, 0.0, 0.0)
    f = lambda p: total_loss(left, right, p).total
    mix = t * p1 + (1 - t) * p2
    assert f(mix) == pytest.approx(t * f(p1) + (1 - t) * f(p2), abs=1e-9 * (1 + abs(a) + abs(b)))
    assert f(0.0) == a and f(1.0) == b


def test_p_zero_gives_zero_gradient_to_right_side():
    x = torch.tensor(1.0, requires_grad=True)
    y = torch.tensor(2.0, requires_grad=True)
    out = total_loss(LossSide(x * 3, 0.0, 0.0), LossSide(y * 5, 0.0, 0.0), 0.0)
    out.total.backward()
    assert y.grad is None or y.grad.item() == 0.0
    assert x.grad.item() == 3.0
