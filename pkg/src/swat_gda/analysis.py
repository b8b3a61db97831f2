"""Representation probes: proxy A-distance, energy-distance ratio, embedding export."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from .data_streams import DomainStream, label_access
from .nets import Critic, ModelBundle, derive_seed


@dataclass
class ProbeConfig:
    hidden: int = 128
    max_epochs: int = 30
    patience: int = 5
    lr: float = 1e-3
    batch_size: int = 256
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    max_samples: int | None = 5000

    def __post_init__(self):
        if not (0 < self.train_fraction and 0 < self.val_fraction and self.train_fraction + self.val_fraction < 1):
            raise ValueError("train/val fractions must be positive and leave room for a test split")


@dataclass
class ADistanceReport:
    pair: tuple[str, str]
    error: float
    a_distance: float
    seed: int
    n_test: int

    def to_record(self) -> dict[str, Any]:
        return asdict(self)


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x)
    x = x.astype(np.float64 if x.dtype == np.float64 else np.float32, copy=False)
    return x.reshape(len(x), -1)


def _probe_error(probe: torch.nn.Module, X: torch.Tensor, y: torch.Tensor) -> float:
    probe.eval()
    with torch.no_grad():
        pred = (probe(X) > 0).long()
    return float((pred != y).float().mean())


def a_distance(
    A,
    B,
    config: ProbeConfig | None = None,
    seed: int = 0,
    pair: tuple[str, str] = ("A", "B"),
) -> ADistanceReport:
    """Proxy A-distance ``2 (1 - 2 err)`` from a held-out binary probe.

    Both sets are subsampled to the same size, split into train/val/test,
    standardised with train statistics; the probe (critic architecture, logit
    output) is early-stopped on the validation error and scored on test.
    """
    cfg = config or ProbeConfig()
    A, B = _as_array(A).astype(np.float32), _as_array(B).astype(np.float32)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("both latent sets must be non-empty")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"width mismatch {A.shape[1]} vs {B.shape[1]}")
    rng = np.random.default_rng(derive_seed(seed, "a-distance"))
    n = min(len(A), len(B))
    if cfg.max_samples:
        n = min(n, cfg.max_samples)
    A = A[rng.choice(len(A), n, replace=False)]
    B = B[rng.choice(len(B), n, replace=False)]

    n_train = int(cfg.train_fraction * n)
    n_val = int(cfg.val_fraction * n)
    if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
        raise ValueError(f"too few rows ({n} per set) to form train/val/test splits")

    def split(M):
        return M[:n_train], M[n_train:n_train + n_val], M[n_train + n_val:]

    parts = []
    for a, b in zip(split(A), split(B)):
        X = np.concatenate([a, b])
        y = np.concatenate([np.zeros(len(a), np.int64), np.ones(len(b), np.int64)])
        parts.append((X, y))
    mu = parts[0][0].mean(0)
    sd = parts[0][0].std(0) + 1e-6
    (Xtr, ytr), (Xva, yva), (Xte, yte) = [
        (torch.as_tensor((X - mu) / sd), torch.as_tensor(y)) for X, y in parts
    ]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "a-distance-probe"))
        probe = Critic(A.shape[1], cfg.hidden)
        opt = torch.optim.Adam(probe.parameters(), lr=cfg.lr)
        best_err, best_state, stale = math.inf, None, 0
        for _ in range(cfg.max_epochs):
            probe.train()
            order = torch.as_tensor(rng.permutation(len(Xtr)))
            for i in range(0, len(order), cfg.batch_size):
                b = order[i:i + cfg.batch_size]
                loss = F.binary_cross_entropy_with_logits(probe(Xtr[b]), ytr[b].float())
                opt.zero_grad()
                loss.backward()
                opt.step()
            err = _probe_error(probe, Xva, yva)
            if err < best_err:
                best_err, stale = err, 0
                best_state = {k: v.clone() for k, v in probe.state_dict().items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        probe.load_state_dict(best_state)
        test_err = _probe_error(probe, Xte, yte)
    dist = float(np.clip(2.0 * (1.0 - 2.0 * test_err), 0.0, 2.0))
    return ADistanceReport(tuple(pair), test_err, dist, seed, len(yte))


def _mean_pairwise(X: torch.Tensor, Y: torch.Tensor, chunk: int = 2048) -> float:
    total = 0.0
    for i in range(0, len(X), chunk):
        total += torch.cdist(X[i:i + chunk], Y, compute_mode="donot_use_mm_for_euclid_dist").sum().item()
    return total / (len(X) * len(Y))


def energy_distance(X, Y, max_samples: int | None = 4000, seed: int = 0) -> float:
    """Square root of the (V-statistic) energy distance; a metric on distributions."""
    X, Y = _as_array(X), _as_array(Y)
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("empty sample set")
    rng = np.random.default_rng(derive_seed(seed, "energy"))
    if max_samples:
        if len(X) > max_samples:
            X = X[rng.choice(len(X), max_samples, replace=False)]
        if len(Y) > max_samples:
            Y = Y[rng.choice(len(Y), max_samples, replace=False)]
    Xt, Yt = torch.as_tensor(X, dtype=torch.float64), torch.as_tensor(Y, dtype=torch.float64)
    sq = 2 * _mean_pairwise(Xt, Yt) - _mean_pairwise(Xt, Xt) - _mean_pairwise(Yt, Yt)
    return math.sqrt(max(sq, 0.0))


def distance_ratio_probe(H_l, H_r, H_mid, metric: str = "energy_distance", seed: int = 0) -> float:
    """``dist(H_l, H_mid) / dist(H_r, H_mid)``; ``inf`` when the denominator vanishes.

    For a mixture putting weight ``p`` on ``H_r`` the energy metric gives
    exactly ``p / (1 - p)`` in expectation, which is the target relation of the
    sliding window.
    """
    if metric != "energy_distance":
        raise ValueError(f"unsupported metric {metric!r}")
    num = energy_distance(H_l, H_mid, seed=seed)
    den = energy_distance(H_r, H_mid, seed=seed)
    if den == 0.0:
        return math.inf if num > 0 else math.nan
    return num / den


@dataclass
class EmbeddingDump:
    domain: int
    latents: np.ndarray
    labels: np.ndarray
    snapshot: str

    def record(self) -> dict[str, Any]:
        return {
            "domain": self.domain,
            "rows": int(self.latents.shape[0]),
            "z_dim": int(self.latents.shape[1]) if self.latents.ndim == 2 else 0,
            "snapshot": self.snapshot,
        }


def export_embeddings(
    bundle: ModelBundle,
    stream: DomainStream,
    out: str | Path | None = None,
    snapshot: str | None = None,
) -> list[EmbeddingDump]:
    """Encoder outputs (eval mode) and labels for every domain of ``stream``.

    With ``out`` set, writes ``latents_<t>.npy``, ``labels_<t>.npy`` and an
    ``embeddings.json`` index.
    """
    snapshot = snapshot or bundle.checksum("f")[:16]
    dumps = []
    for dom in stream.domains:
        Z = bundle.latents(dom.X).numpy() if len(dom) else np.zeros((0, bundle.spec.classifier.z_dim), np.float32)
        with label_access():
            y = np.asarray(dom.Y) if dom.has_labels else np.full(len(dom), -1, np.int64)
        dumps.append(EmbeddingDump(dom.index, Z, y, snapshot))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for d in dumps:
            np.save(out / f"latents_{d.domain}.npy", d.latents)
            np.save(out / f"labels_{d.domain}.npy", d.labels)
        (out / "embeddings.json").write_text(json.dumps([d.record() for d in dumps], indent=2))
    return dumps
