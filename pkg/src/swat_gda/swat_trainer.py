"""Sliding-window adversarial training over a domain stream."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data_streams import DomainDataset, DomainStream, label_access
from .nets import ModelBundle, accuracy, derive_seed, hand_off
from .objectives import (
    LossSide,
    LossWeights,
    margin_filter,
    total_loss,
    wgan_value,
    cycle_loss,
)
from .window_scheduler import SCHEDULE_KINDS, WindowState, make_schedule, traverse

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs_per_phase: int = 5
    batch_size: int = 128
    critic_steps: int = 5
    gp_lambda: float = 10.0
    rejection_rate: float = 0.10
    lr_model: float = 1e-4
    lr_encoder: float | None = None  # None: same as lr_model
    lr_adv: float = 1e-3
    lr_critic: float | None = None  # None: same as lr_adv
    adv_betas: tuple[float, float] = (0.5, 0.9)
    inter_steps: int = 4
    schedule: str = "ours"
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    # normalise each domain's batch with its own statistics, in training and inference
    domain_norm: bool = True
    max_steps_per_epoch: int | None = None
    eval_each_phase: bool = True
    device: str = "cpu"

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.adv_betas = tuple(self.adv_betas)
        self.validate()

    def validate(self) -> None:
        if self.epochs_per_phase < 0:
            raise ValueError("epochs_per_phase must be >= 0")
        for name in ("batch_size", "critic_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr_model", "lr_encoder", "lr_adv", "lr_critic"):
            if getattr(self, name) is not None and getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gp_lambda < 0:
            raise ValueError("gp_lambda must be >= 0")
        if not 0 <= self.rejection_rate < 1:
            raise ValueError("rejection_rate must lie in [0, 1)")
        if self.inter_steps < 0:
            raise ValueError("inter_steps must be >= 0")
        if self.schedule not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PhaseReport:
    phase_index: int
    l: int
    r: int
    p: float
    hand_off: bool = False
    losses: dict[str, float] = field(default_factory=dict)
    critic: dict[str, float] = field(default_factory=dict)
    critic_updates: int = 0
    generator_updates: int = 0
    kept_fraction: dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0
    target_accuracy: float | None = None
    checksums: dict[str, str] = field(default_factory=dict)

    def to_record(self) -> dict[str, Any]:
        return asdict(self)


def reports_checksum(reports: list[PhaseReport]) -> str:
    """Digest of everything in the reports except wall-clock time."""
    rows = []
    for rep in reports:
        row = rep.to_record()
        row.pop("wall_time")
        rows.append(row)
    return hashlib.sha256(json.dumps(rows, sort_keys=True, default=float).encode()).hexdigest()


def evaluate(bundle: ModelBundle, domain: DomainDataset) -> float:
    """Fraction of argmax-correct predictions of ``g o f`` (evaluation-side label read)."""
    with label_access():
        y = domain.Y
    if bundle.norm_stats == "running":
        return accuracy(bundle.f, bundle.g, domain.X, y)
    if len(y) == 0:
        return float("nan")
    return float((bundle.logits(domain.X).argmax(1).numpy() == y).mean())


class _Optimizers:
    def __init__(self, bundle: ModelBundle, cfg: TrainConfig):
        self.cfg = cfg
        self.model = torch.optim.Adam([
            {"params": list(bundle.f.parameters()),
             "lr": cfg.lr_encoder if cfg.lr_encoder is not None else cfg.lr_model},
            {"params": list(bundle.g.parameters()), "lr": cfg.lr_model},
            {"params": list(bundle.G_m.parameters()) + list(bundle.G_s.parameters()),
             "lr": cfg.lr_adv, "betas": cfg.adv_betas},
        ])
        self.critics = {name: self._critic_opt(getattr(bundle, name)) for name in ("D_s", "D_l", "D_r")}

    def _critic_opt(self, module):
        lr = self.cfg.lr_critic if self.cfg.lr_critic is not None else self.cfg.lr_adv
        return torch.optim.Adam(module.parameters(), lr=lr, betas=self.cfg.adv_betas)

    def hand_off(self, bundle: ModelBundle) -> None:
        self.critics["D_l"] = self.critics["D_r"]
        self.critics["D_r"] = self._critic_opt(bundle.D_r)


@dataclass
class _WindowLabels:
    labels: torch.Tensor
    kept: torch.Tensor
    pseudo: bool


def _window_labels(bundle: ModelBundle, domain: DomainDataset, rate: float) -> _WindowLabels:
    if domain.labeled:
        y = torch.as_tensor(domain.Y)
        return _WindowLabels(y, torch.ones(len(y), dtype=torch.bool), pseudo=False)
    batch = margin_filter(bundle.logits(domain.X), rate)
    return _WindowLabels(batch.labels, batch.kept, pseudo=True)


def _batch_orders(n: int, n_rows: int, rng: np.random.Generator) -> np.ndarray:
    reps = math.ceil(n_rows / n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:n_rows]


def _side_losses(bundle, D_side, h0, gm0, y0, h_side, side_labels, kept, lam, weights) -> tuple[LossSide, dict]:
    forward = wgan_value(D_side, h_side, gm0, lam, penalty=False)
    gs_side = bundle.G_s(h_side)
    backward = wgan_value(bundle.D_s, h0, gs_side, lam, penalty=False)
    adv = forward.generator_loss + backward.generator_loss
    cyc = cycle_loss(bundle.G_m, bundle.G_s, h0, h_side)
    # generated features carry the source labels; real ones carry (filtered) window labels
    logits = torch.cat([bundle.g(gm0), bundle.g(h_side[kept])])
    targets = torch.cat([y0, side_labels[kept]])
    st = F.cross_entropy(logits, targets)
    stats = {"w_forward": forward.wasserstein.item(), "w_backward": backward.wasserstein.item()}
    return LossSide(adv, cyc, st), stats


def run_phase(
    bundle: ModelBundle,
    source: DomainDataset,
    left: DomainDataset,
    right: DomainDataset,
    state: WindowState | float,
    config: TrainConfig,
    optimizers: _Optimizers | None = None,
    rng: np.random.Generator | None = None,
    gp_generator: torch.Generator | None = None,
) -> PhaseReport:
    """Train one (window, p) phase for ``config.epochs_per_phase`` epochs.

    Per batch step the three critics take ``critic_steps`` updates on detached
    features, then one joint step moves ``f, g, G_m, G_s`` on
    ``(1 - p) * L_left + p * L_right``.  Window labels are refreshed at the
    start of every epoch from the current model.
    """
    cfg = config
    if isinstance(state, WindowState):
        p, l, r, phase_index = state.p, state.l, state.r, state.phase_index
    else:
        p, l, r, phase_index = float(state), left.index, right.index, 0
    opts = optimizers or _Optimizers(bundle, cfg)
    rng = rng or np.random.default_rng(derive_seed(cfg.seed, f"phase-{phase_index}"))
    if gp_generator is None:
        gp_generator = torch.Generator().manual_seed(derive_seed(cfg.seed, f"gp-{phase_index}"))
    weights = cfg.loss_weights
    lam = cfg.gp_lambda
    use_left, use_right = p < 1.0, p > 0.0

    report = PhaseReport(phase_index, l, r, p)
    sums: dict[str, float] = {}
    n_sum = 0
    restore = bundle.state_dict()
    if cfg.domain_norm:
        bundle.norm_stats = "domain"
    start = time.perf_counter()
    X0 = source.X
    y0_all = torch.as_tensor(source.Y)

    for epoch in range(cfg.epochs_per_phase):
        lab_l = _window_labels(bundle, left, cfg.rejection_rate) if use_left else None
        lab_r = _window_labels(bundle, right, cfg.rejection_rate) if use_right else None
        for name, lab in (("left", lab_l), ("right", lab_r)):
            if lab is not None:
                report.kept_fraction[name] = float(lab.kept.float().mean())
        B = cfg.batch_size
        n_steps = math.ceil(max(len(source), len(left), len(right)) / B)
        if cfg.max_steps_per_epoch:
            n_steps = min(n_steps, cfg.max_steps_per_epoch)
        o0 = _batch_orders(len(source), n_steps * B, rng)
        ol = _batch_orders(len(left), n_steps * B, rng)
        orr = _batch_orders(len(right), n_steps * B, rng)
        bundle.train()
        for step in range(n_steps):
            s = slice(step * B, (step + 1) * B)
            b0, bl, br = o0[s], ol[s], orr[s]
            if cfg.domain_norm:
                h0, hl, hr = (bundle.f(torch.as_tensor(X[b])) for X, b in ((X0, b0), (left.X, bl), (right.X, br)))
            else:
                h = bundle.f(torch.as_tensor(np.concatenate([X0[b0], left.X[bl], right.X[br]])))
                h0, hl, hr = h[:B], h[B:2 * B], h[2 * B:]
            y0 = y0_all[b0]

            # critic updates on detached features
            h0d, hld, hrd = h0.detach(), hl.detach(), hr.detach()
            with torch.no_grad():
                fake_m = bundle.G_m(h0d)
                fake_sl = bundle.G_s(hld)
                fake_sr = bundle.G_s(hrd)
            active = ["D_s"] + (["D_l"] if use_left else []) + (["D_r"] if use_right else [])
            for _ in range(cfg.critic_steps):
                loss_c = 0.0
                if use_left:
                    v = (wgan_value(bundle.D_l, hld, fake_m, lam, gp_generator).value
                         + wgan_value(bundle.D_s, h0d, fake_sl, lam, gp_generator).value)
                    loss_c = loss_c + (1.0 - p) * v if p > 0 else v
                if use_right:
                    v = (wgan_value(bundle.D_r, hrd, fake_m, lam, gp_generator).value
                         + wgan_value(bundle.D_s, h0d, fake_sr, lam, gp_generator).value)
                    loss_c = loss_c + p * v if p < 1 else v
                for name in active:
                    opts.critics[name].zero_grad(set_to_none=True)
                loss_c.backward()
                for name in active:
                    opts.critics[name].step()
                report.critic_updates += 1

            # joint update of f, g, G_m, G_s
            gm0 = bundle.G_m(h0)
            left_side, right_side = LossSide(), LossSide()
            stats = {}
            if use_left:
                left_side, st_l = _side_losses(bundle, bundle.D_l, h0, gm0, y0, hl, lab_l.labels[bl],
                                               lab_l.kept[bl], lam, weights)
                stats.update({f"left_{k}": v for k, v in st_l.items()})
            if use_right:
                right_side, st_r = _side_losses(bundle, bundle.D_r, h0, gm0, y0, hr, lab_r.labels[br],
                                                lab_r.kept[br], lam, weights)
                stats.update({f"right_{k}": v for k, v in st_r.items()})
            breakdown = total_loss(left_side, right_side, p, weights)
            if not torch.isfinite(torch.as_tensor(breakdown.total)):
                bundle.load_state_dict(restore)
                raise TrainingDiverged(
                    f"non-finite loss in phase {phase_index} (epoch {epoch}, step {step}): {breakdown.as_floats()}"
                )
            opts.model.zero_grad(set_to_none=True)
            breakdown.total.backward()
            opts.model.step()
            report.generator_updates += 1

            for k, v in {**breakdown.as_floats(), **stats}.items():
                sums[k] = sums.get(k, 0.0) + v
            n_sum += 1

    bundle.eval()
    report.losses = {k: v / n_sum for k, v in sums.items() if not k.startswith(("left_w", "right_w"))}
    report.critic = {k: v / n_sum for k, v in sums.items() if k.startswith(("left_w", "right_w"))}
    report.wall_time = time.perf_counter() - start
    return report


def run_swat(
    stream: DomainStream,
    bundle: ModelBundle,
    config: TrainConfig,
    on_phase: Callable[[PhaseReport, ModelBundle], None] | None = None,
) -> tuple[ModelBundle, list[PhaseReport]]:
    """Run the whole sliding-window schedule over ``stream``; mutates ``bundle``."""
    if stream.given_count < 2:
        raise ValueError("stream needs at least two domains")
    cfg = config
    schedule = make_schedule(stream.given_count, cfg.inter_steps, cfg.schedule, cfg.seed)
    if schedule[-1].r != stream.given_count - 1:
        raise ValueError("schedule does not end on the stream's target")
    rng = np.random.default_rng(derive_seed(cfg.seed, "swat-batches"))
    gp_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "swat-gp"))
    opts = _Optimizers(bundle, cfg)
    reports: list[PhaseReport] = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, "swat-dropout"))
        for state, slid in traverse(schedule):
            if slid:
                hand_off(bundle, derive_seed(cfg.seed, f"window-{state.l}"))
                opts.hand_off(bundle)
            rep = run_phase(
                bundle, stream.source, stream.domains[state.l], stream.domains[state.r],
                state, cfg, opts, rng, gp_gen,
            )
            rep.hand_off = slid
            if cfg.eval_each_phase:
                rep.target_accuracy = evaluate(bundle, stream.target)
            rep.checksums = bundle.checksums()
            log.info("phase %d/%d l=%d p=%.3f acc=%s losses=%s", state.phase_index + 1, state.total_phases,
                     state.l, state.p, rep.target_accuracy, {k: round(v, 4) for k, v in rep.losses.items()})
            reports.append(rep)
            if on_phase is not None:
                on_phase(rep, bundle)
    return bundle, reports
