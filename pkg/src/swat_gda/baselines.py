"""Reference methods: source-only transfer and gradual self-training (GST)."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from .data_streams import DomainStream
from .nets import ModelBundle, derive_seed
from .objectives import margin_filter
from .swat_trainer import evaluate

log = logging.getLogger(__name__)

BASELINE_KINDS = ("source_only", "gst")


@dataclass
class GSTConfig:
    epochs_per_domain: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    rejection_rate: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.epochs_per_domain < 0:
            raise ValueError("epochs_per_domain must be >= 0")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")
        if not 0 <= self.rejection_rate < 1:
            raise ValueError("rejection_rate must lie in [0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def run_source_only(bundle: ModelBundle, stream: DomainStream) -> list[float]:
    """Accuracy of the pretrained model on every domain, without adaptation."""
    return [evaluate(bundle, d) for d in stream.domains]


def self_train(bundle: ModelBundle, X: np.ndarray, labels: torch.Tensor, kept: torch.Tensor,
               config: GSTConfig, rng: np.random.Generator) -> None:
    """Fit ``g o f`` to fixed (filtered) labels, warm-started from the current weights."""
    idx = np.flatnonzero(kept.numpy())
    if len(idx) == 0:
        raise ValueError("every pseudo-label was rejected")
    opt = torch.optim.Adam(list(bundle.f.parameters()) + list(bundle.g.parameters()), lr=config.lr)
    bundle.f.train()
    bundle.g.train()
    for _ in range(config.epochs_per_domain):
        order = idx[rng.permutation(len(idx))]
        for i in range(0, len(order), config.batch_size):
            b = order[i:i + config.batch_size]
            if len(b) < 2:
                continue
            loss = F.cross_entropy(bundle.g(bundle.f(torch.as_tensor(X[b]))), labels[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
    bundle.eval()


def run_gst(bundle: ModelBundle, stream: DomainStream, config: GSTConfig) -> tuple[ModelBundle, list[float]]:
    """Pseudo-label each unlabeled domain in turn with the current model and
    self-train on the confident rows.  Mutates and returns ``bundle``."""
    rng = np.random.default_rng(derive_seed(config.seed, "gst-batches"))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "gst-dropout"))
        for dom in stream.domains[1:]:
            teacher = margin_filter(bundle.logits(dom.X), config.rejection_rate)
            self_train(bundle, dom.X, teacher.labels, teacher.kept, config, rng)
            log.info("gst domain %d done", dom.index)
    return bundle, [evaluate(bundle, d) for d in stream.domains]
