"""Loss terms: WGAN-GP critic value, dual-path adversarial loss, cycle loss,
margin-filtered pseudo-labels, self-training loss and the window mixture."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import torch
import torch.nn.functional as F

Number = Union[float, torch.Tensor]
CriticFn = Callable[[torch.Tensor], torch.Tensor]

DEFAULT_GP_LAMBDA = 10.0
DEFAULT_REJECTION_RATE = 0.10


def _check_pair(real: torch.Tensor, fake: torch.Tensor) -> None:
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("empty batch")
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} batches differ in shape")


def gradient_penalty(
    critic: CriticFn,
    real: torch.Tensor,
    fake: torch.Tensor,
    lam: float = DEFAULT_GP_LAMBDA,
    generator: torch.Generator | None = None,
    u: torch.Tensor | None = None,
) -> torch.Tensor:
    """``lam * mean((||grad D(h~)||_2 - 1)^2)`` on random row-wise interpolates.

    One coefficient ``u ~ U(0, 1)`` per row is shared across coordinates;
    ``h~ = u * real + (1 - u) * fake``.  The graph is kept so the penalty can be
    back-propagated into the critic.
    """
    _check_pair(real, fake)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if u is None:
        u = torch.rand(real.shape[0], *([1] * (real.dim() - 1)), generator=generator, dtype=real.dtype)
    mixed = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)
    with torch.enable_grad():
        scores = critic(mixed)
        if not isinstance(scores, torch.Tensor):
            raise TypeError(f"critic must return a torch.Tensor, got {type(scores).__name__}")
        if not scores.requires_grad:
            # constant critic: zero gradient everywhere
            grad = torch.zeros_like(mixed)
        else:
            (grad,) = torch.autograd.grad(scores.sum(), mixed, create_graph=True, allow_unused=True)
            if grad is None:
                grad = torch.zeros_like(mixed)
    norms = grad.flatten(1).norm(2, dim=1)
    return lam * ((norms - 1) ** 2).mean()


@dataclass
class CriticValue:
    """``V = E[D(fake)] - E[D(real)] + R`` and its parts."""

    fake_score: torch.Tensor
    real_score: torch.Tensor
    penalty: torch.Tensor

    @property
    def wasserstein(self) -> torch.Tensor:
        return self.fake_score - self.real_score

    @property
    def value(self) -> torch.Tensor:
        return self.wasserstein + self.penalty

    @property
    def critic_loss(self) -> torch.Tensor:
        """Minimised over the critic."""
        return self.value

    @property
    def generator_loss(self) -> torch.Tensor:
        """Minimised over generator (and encoder): the negated, unpenalised value."""
        return -self.wasserstein


def wgan_value(
    critic: CriticFn,
    real: torch.Tensor,
    fake: torch.Tensor,
    lam: float = DEFAULT_GP_LAMBDA,
    generator: torch.Generator | None = None,
    penalty: bool = True,
) -> CriticValue:
    _check_pair(real, fake)
    fake_score = critic(fake).mean()
    real_score = critic(real).mean()
    if penalty and lam > 0:
        r = gradient_penalty(critic, real, fake, lam, generator=generator)
    else:
        r = torch.zeros((), dtype=real.dtype)
    return CriticValue(fake_score, real_score, r)


def dual_critic_values(G_m, G_s, D_side, D_s, h0, h_side, lam=DEFAULT_GP_LAMBDA, generator=None, penalty=True):
    """The two critic values of the dual mapping paths.

    ``G_m(h0)`` is judged against real ``h_side`` by ``D_side``; ``G_s(h_side)``
    against real ``h0`` by ``D_s``.
    """
    if h0.shape[1:] != h_side.shape[1:]:
        raise ValueError(f"latent widths differ: {tuple(h0.shape)} vs {tuple(h_side.shape)}")
    n = min(len(h0), len(h_side))
    h0, h_side = h0[:n], h_side[:n]
    forward = wgan_value(D_side, h_side, G_m(h0), lam, generator, penalty)
    backward = wgan_value(D_s, h0, G_s(h_side), lam, generator, penalty)
    return forward, backward


def adv_loss_dual(G_m, G_s, D_side, D_s, h0, h_side, lam=DEFAULT_GP_LAMBDA, generator=None) -> torch.Tensor:
    """``V(G_m(H_0), H_side) + V(G_s(H_side), H_0)``."""
    forward, backward = dual_critic_values(G_m, G_s, D_side, D_s, h0, h_side, lam, generator)
    return forward.value + backward.value


def cycle_loss(G_m, G_s, h0: torch.Tensor, h_side: torch.Tensor) -> torch.Tensor:
    """Mean unsquared L2 reconstruction error of both round trips."""
    if h0.shape[1:] != h_side.shape[1:]:
        raise ValueError(f"latent widths differ: {tuple(h0.shape)} vs {tuple(h_side.shape)}")
    there = torch.linalg.vector_norm(G_s(G_m(h0)) - h0, dim=1).mean()
    back = torch.linalg.vector_norm(G_m(G_s(h_side)) - h_side, dim=1).mean()
    return there + back


# ---------------------------------------------------------------------------
# pseudo-labels


def rejection_count(n: int, rate: float) -> int:
    """``ceil(rate * n)`` robust to binary round-off (0.1 * 30 -> 3, not 4)."""
    if not 0 <= rate < 1:
        raise ValueError(f"rejection rate must lie in [0, 1), got {rate}")
    return min(n, math.ceil(round(rate * n, 9)))


@dataclass
class PseudoLabelBatch:
    latent: torch.Tensor | None
    labels: torch.Tensor
    margins: torch.Tensor
    kept: torch.Tensor  # bool mask

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())


def margin_filter(logits: torch.Tensor, rate: float = DEFAULT_REJECTION_RATE) -> PseudoLabelBatch:
    """Argmax labels; mask the ``ceil(rate * N)`` rows with the smallest top-1/top-2
    softmax margin, ties resolved by input order."""
    n = logits.shape[0]
    n_reject = rejection_count(n, rate)
    probs = torch.softmax(logits.detach().double(), dim=1)
    if probs.shape[1] >= 2:
        top = probs.topk(2, dim=1).values
        margins = (top[:, 0] - top[:, 1]).clamp(0.0, 1.0)
    else:
        margins = torch.ones(n, dtype=probs.dtype)
    kept = torch.ones(n, dtype=torch.bool)
    if n_reject:
        order = torch.sort(margins, stable=True).indices
        kept[order[:n_reject]] = False
    return PseudoLabelBatch(None, logits.argmax(1), margins, kept)


def pseudo_label(g, latent: torch.Tensor, rejection_rate: float = DEFAULT_REJECTION_RATE) -> PseudoLabelBatch:
    with torch.no_grad():
        batch = margin_filter(g(latent), rejection_rate)
    batch.latent = latent
    return batch


def self_training_loss(g, latent: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy of ``g(latent)`` over the kept rows."""
    if isinstance(labels, PseudoLabelBatch):
        targets, kept = labels.labels, labels.kept
    else:
        targets, kept = torch.as_tensor(labels), None
    if kept is not None:
        if not bool(kept.any()):
            raise ValueError("every row was masked out")
        latent, targets = latent[kept], targets[kept]
    if latent.shape[0] == 0:
        raise ValueError("empty batch")
    return F.cross_entropy(g(latent), targets)


# ---------------------------------------------------------------------------
# window mixture


def _scalar(v: Number) -> float:
    return v.item() if isinstance(v, torch.Tensor) else float(v)


@dataclass
class LossWeights:
    adv: float = 1.0
    cycle: float = 1.0
    st: float = 1.0


@dataclass
class LossSide:
    adv: Number = 0.0
    cycle: Number = 0.0
    st: Number = 0.0

    def total(self, weights: LossWeights | None = None) -> Number:
        if weights is None:
            return self.adv + self.cycle + self.st
        return weights.adv * self.adv + weights.cycle * self.cycle + weights.st * self.st

    def as_floats(self) -> dict[str, float]:
        return {k: _scalar(v) for k, v in (("adv", self.adv), ("cycle", self.cycle), ("st", self.st))}


@dataclass
class LossBreakdown:
    left: LossSide
    right: LossSide
    p: float
    total: Number

    def as_floats(self) -> dict[str, float]:
        out = {f"left_{k}": v for k, v in self.left.as_floats().items()}
        out.update({f"right_{k}": v for k, v in self.right.as_floats().items()})
        out["p"] = float(self.p)
        out["total"] = _scalar(self.total)
        return out


def total_loss(left: LossSide, right: LossSide, p: float, weights: LossWeights | None = None) -> LossBreakdown:
    """``(1 - p) * L_left + p * L_right``; at p=0 / p=1 the other side is skipped
    entirely so the endpoints are exact."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if p == 0.0:
        total = left.total(weights)
    elif p == 1.0:
        total = right.total(weights)
    else:
        total = (1.0 - p) * left.total(weights) + p * right.total(weights)
    return LossBreakdown(left, right, p, total)
