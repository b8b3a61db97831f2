"""Encoder, classifier, residual generators and Wasserstein critics."""
from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CRITICS = {"source": "D_s", "left": "D_l", "right": "D_r"}
COMPONENTS = ("f", "g", "G_m", "G_s", "D_s", "D_l", "D_r")
NORM_STATS = ("running", "domain")
SNAPSHOT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


def derive_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# architectures


class ConvEncoder(nn.Module):
    def __init__(self, in_channels: int, spatial: int, channels: int, z_dim: int):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(3):
            layers += [nn.Conv2d(c, channels, 3, stride=2, padding=1), nn.BatchNorm2d(channels), nn.ReLU()]
            c = channels
            spatial = (spatial + 1) // 2
        self.conv = nn.Sequential(*layers)
        self.proj = nn.Linear(channels * spatial * spatial, z_dim)

    def forward(self, x):
        return F.relu(self.proj(self.conv(x).flatten(1)))


class MLPEncoder(nn.Module):
    def __init__(self, in_features: int, hidden: tuple[int, ...], z_dim: int, batch_norm: bool = False):
        super().__init__()
        dims = [in_features, *hidden, z_dim]
        layers = []
        for a, b in zip(dims, dims[1:]):
            layers += [nn.Linear(a, b), *([nn.BatchNorm1d(b)] if batch_norm else []), nn.ReLU()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Classifier(nn.Module):
    def __init__(self, z_dim: int, num_classes: int, hidden: int, depth: int, dropout: float):
        super().__init__()
        layers: list[nn.Module] = []
        d = z_dim
        for _ in range(depth):
            layers += [nn.Linear(d, hidden), nn.ReLU(), nn.Dropout(dropout)]
            d = hidden
        layers.append(nn.Linear(d, num_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, h):
        return self.net(h)


class ResidualGenerator(nn.Module):
    """``h + W3 relu(W2 relu(W1 h))``; the last layer starts at zero so G = id."""

    def __init__(self, z_dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(z_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, z_dim)
        nn.init.zeros_(self.fc3.weight)
        nn.init.zeros_(self.fc3.bias)

    def forward(self, h):
        return h + self.fc3(F.relu(self.fc2(F.relu(self.fc1(h)))))


class Critic(nn.Module):
    """Scalar Wasserstein critic; no output squashing and no batch statistics."""

    def __init__(self, z_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(z_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, h):
        return self.net(h).squeeze(-1)


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class EncoderSpec:
    input_shape: tuple[int, ...]
    z_dim: int = 128
    channels: int = 32
    hidden: tuple[int, ...] = (128, 256)
    mlp_batch_norm: bool = False

    @property
    def is_image(self) -> bool:
        return len(self.input_shape) == 3

    def build(self) -> nn.Module:
        if self.is_image:
            c, h, w = self.input_shape
            if h != w:
                raise ShapeMismatch(f"square images expected, got {self.input_shape}")
            return ConvEncoder(c, h, self.channels, self.z_dim)
        if len(self.input_shape) != 1:
            raise ShapeMismatch(f"unsupported input shape {self.input_shape}")
        return MLPEncoder(self.input_shape[0], tuple(self.hidden), self.z_dim, self.mlp_batch_norm)


@dataclass(frozen=True)
class ClassifierSpec:
    z_dim: int
    num_classes: int
    hidden: int = 256
    depth: int = 2
    dropout: float = 0.2

    def build(self) -> nn.Module:
        return Classifier(self.z_dim, self.num_classes, self.hidden, self.depth, self.dropout)


@dataclass(frozen=True)
class GeneratorSpec:
    z_dim: int
    hidden: int | None = None

    def build(self) -> nn.Module:
        return ResidualGenerator(self.z_dim, self.hidden or self.z_dim)


@dataclass(frozen=True)
class CriticSpec:
    z_dim: int
    hidden: int = 128

    def build(self) -> nn.Module:
        return Critic(self.z_dim, self.hidden)


@dataclass(frozen=True)
class BundleSpec:
    encoder: EncoderSpec
    classifier: ClassifierSpec
    generator: GeneratorSpec
    critic: CriticSpec

    @classmethod
    def for_input(cls, input_shape, num_classes: int, z_dim: int | None = None, **classifier_kw) -> "BundleSpec":
        """Default architecture for images (conv, z=128) or tabular rows (MLP 128-256-512)."""
        input_shape = tuple(input_shape)
        if z_dim is None:
            z_dim = 128 if len(input_shape) == 3 else 512
        return cls(
            EncoderSpec(input_shape, z_dim),
            ClassifierSpec(z_dim, num_classes, **classifier_kw),
            GeneratorSpec(z_dim),
            CriticSpec(z_dim),
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BundleSpec":
        enc = dict(d["encoder"])
        enc["input_shape"] = tuple(enc["input_shape"])
        enc["hidden"] = tuple(enc["hidden"])
        return cls(EncoderSpec(**enc), ClassifierSpec(**d["classifier"]),
                   GeneratorSpec(**d["generator"]), CriticSpec(**d["critic"]))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _build_seeded(spec, seed: int, name: str) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, name))
        return spec.build()


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for key, value in module.state_dict().items():
        h.update(key.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _batch_norms(module: nn.Module) -> list[nn.modules.batchnorm._BatchNorm]:
    return [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


@contextlib.contextmanager
def domain_statistics(encoder: nn.Module, X: np.ndarray, batch_size: int = 1024):
    """Temporarily replace the encoder's batch-norm statistics by those of ``X``.

    The running buffers are re-estimated as the cumulative average over
    chunks of at most ``batch_size`` rows of ``X`` and restored on exit.
    Encoders without batch norm, and inputs of fewer than two rows, pass
    through unchanged.
    """
    norms = _batch_norms(encoder)
    if not norms or len(X) < 2:
        yield
        return
    saved = [(copy.deepcopy(m.state_dict()), m.momentum, m.training) for m in norms]
    try:
        with torch.no_grad():
            for m in norms:
                m.reset_running_stats()
                m.momentum = None
                m.train()
            # near-equal chunks, so no chunk is a lone row when len(X) > 1
            for chunk in np.array_split(np.arange(len(X)), -(-len(X) // batch_size)):
                encoder(torch.as_tensor(X[chunk]))
            for m in norms:
                m.eval()
        yield
    finally:
        for m, (state, momentum, training) in zip(norms, saved):
            m.load_state_dict(state)
            m.momentum = momentum
            m.train(training)


@dataclass(eq=False)
class ModelBundle:
    spec: BundleSpec
    f: nn.Module
    g: nn.Module
    G_m: nn.Module
    G_s: nn.Module
    D_s: nn.Module
    D_l: nn.Module
    D_r: nn.Module
    seed: int = 0
    snapshots: dict[str, dict[str, Any]] = field(default_factory=dict)
    # "domain": inference normalises every input set with its own batch statistics
    norm_stats: str = "running"

    def components(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in COMPONENTS}

    def checksum(self, name: str) -> str:
        return module_checksum(getattr(self, name))

    def checksums(self) -> dict[str, str]:
        return {name: module_checksum(m) for name, m in self.components().items()}

    def _statistics(self, X: np.ndarray, batch_size: int):
        if self.norm_stats == "domain":
            return domain_statistics(self.f, X, batch_size)
        return contextlib.nullcontext()

    def train(self, mode: bool = True) -> "ModelBundle":
        for m in self.components().values():
            m.train(mode)
        return self

    def eval(self) -> "ModelBundle":
        return self.train(False)

    @torch.no_grad()
    def latents(self, X: np.ndarray, batch_size: int = 1024) -> torch.Tensor:
        was_training = self.f.training
        self.f.eval()
        with self._statistics(X, batch_size):
            out = [self.f(torch.as_tensor(X[i:i + batch_size])) for i in range(0, len(X), batch_size)]
        self.f.train(was_training)
        if not out:
            return torch.empty(0, self.spec.encoder.z_dim)
        return torch.cat(out)

    @torch.no_grad()
    def logits(self, X: np.ndarray, batch_size: int = 1024) -> torch.Tensor:
        modes = self.f.training, self.g.training
        self.f.eval()
        self.g.eval()
        with self._statistics(X, batch_size):
            out = [self.g(self.f(torch.as_tensor(X[i:i + batch_size]))) for i in range(0, len(X), batch_size)]
        self.f.train(modes[0])
        self.g.train(modes[1])
        return torch.cat(out) if out else torch.empty(0, self.spec.classifier.num_classes)

    def state_dict(self) -> dict[str, dict[str, torch.Tensor]]:
        return {name: copy.deepcopy(m.state_dict()) for name, m in self.components().items()}

    def load_state_dict(self, state: dict[str, dict[str, torch.Tensor]]) -> None:
        for name, m in self.components().items():
            m.load_state_dict(state[name])

    def snapshot(self, key: str) -> None:
        self.snapshots[key] = self.state_dict()

    def clone(self) -> "ModelBundle":
        return copy.deepcopy(self)

    def save(self, path: str | Path, **meta) -> None:
        payload = {"version": SNAPSHOT_VERSION, "spec": self.spec.to_dict(), "seed": self.seed,
                   "norm_stats": self.norm_stats, "state": self.state_dict(), "meta": meta}
        torch.save(payload, path)

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        payload = torch.load(path, weights_only=False)
        if payload.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {payload.get('version')}")
        bundle = init_bundle(BundleSpec.from_dict(payload["spec"]), payload["seed"])
        bundle.load_state_dict(payload["state"])
        bundle.norm_stats = payload.get("norm_stats", "running")
        if bundle.norm_stats not in NORM_STATS:
            raise ValueError(f"unknown norm_stats {bundle.norm_stats!r} in {path}")
        return bundle


def _probe_encoder_dim(f: nn.Module, input_shape: tuple[int, ...]) -> int:
    was_training = f.training
    f.eval()
    with torch.no_grad():
        out = f(torch.zeros(2, *input_shape))
    f.train(was_training)
    if out.dim() != 2:
        raise ShapeMismatch(f"encoder must emit flat vectors, got shape {tuple(out.shape)}")
    return out.shape[1]


def init_bundle(spec: BundleSpec, seed: int) -> ModelBundle:
    """Build every component deterministically from ``seed``."""
    dims = {
        "classifier": spec.classifier.z_dim,
        "generator": spec.generator.z_dim,
        "critic": spec.critic.z_dim,
    }
    f = _build_seeded(spec.encoder, seed, "f")
    z = _probe_encoder_dim(f, spec.encoder.input_shape)
    bad = {k: v for k, v in dims.items() if v != z}
    if bad:
        raise ShapeMismatch(f"encoder emits z_dim={z} but {bad} disagree")
    return ModelBundle(
        spec=spec,
        f=f,
        g=_build_seeded(spec.classifier, seed, "g"),
        G_m=_build_seeded(spec.generator, seed, "G_m"),
        G_s=_build_seeded(spec.generator, seed, "G_s"),
        D_s=_build_seeded(spec.critic, seed, "critic-source"),
        D_l=_build_seeded(spec.critic, seed, "critic-left"),
        D_r=_build_seeded(spec.critic, seed, "critic-right"),
        seed=seed,
    )


def reinit_discriminator(bundle: ModelBundle, which: str, seed: int) -> ModelBundle:
    """Replace one critic with a fresh draw; every other module is left untouched."""
    if which not in CRITICS:
        raise ValueError(f"unknown critic {which!r}; expected one of {sorted(CRITICS)}")
    setattr(bundle, CRITICS[which], _build_seeded(bundle.spec.critic, seed, f"critic-{which}"))
    return bundle


def hand_off(bundle: ModelBundle, seed: int) -> ModelBundle:
    """Window slide: the right critic becomes the left one, then a fresh right critic."""
    bundle.D_l = bundle.D_r
    return reinit_discriminator(bundle, "right", seed)


# ---------------------------------------------------------------------------
# source pretraining


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    holdout_fraction: float = 0.1
    seed: int = 0


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(derive_seed(seed, "holdout")).permutation(n)
    n_hold = int(round(fraction * n))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


@torch.no_grad()
def accuracy(f: nn.Module, g: nn.Module, X: np.ndarray, y: np.ndarray, batch_size: int = 1024) -> float:
    if len(X) == 0:
        return float("nan")
    modes = f.training, g.training
    f.eval()
    g.eval()
    correct = 0
    for i in range(0, len(X), batch_size):
        pred = g(f(torch.as_tensor(X[i:i + batch_size]))).argmax(1).numpy()
        correct += int((pred == y[i:i + batch_size]).sum())
    f.train(modes[0])
    g.train(modes[1])
    return correct / len(X)


def pretrain_source(f: nn.Module, g: nn.Module, source, config: PretrainConfig) -> tuple[nn.Module, nn.Module, float]:
    """Cross-entropy training of ``g o f`` on the labeled source.

    Returns the trained modules and the accuracy on a held-out slice of the
    source (``holdout_split``) that is never used for gradient steps.
    """
    if not source.labeled or not source.has_labels:
        raise ValueError("pretraining needs the labeled source domain")
    X, y = source.X, source.Y
    train_idx, hold_idx = holdout_split(len(X), config.holdout_fraction, config.seed)
    params = list(f.parameters()) + list(g.parameters())
    opt = torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(derive_seed(config.seed, "pretrain-batches"))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "pretrain-dropout"))
        f.train()
        g.train()
        for _ in range(config.epochs):
            order = train_idx[rng.permutation(len(train_idx))]
            for i in range(0, len(order), config.batch_size):
                b = order[i:i + config.batch_size]
                if len(b) < 2:
                    continue
                loss = F.cross_entropy(g(f(torch.as_tensor(X[b]))), torch.as_tensor(y[b]))
                opt.zero_grad()
                loss.backward()
                opt.step()
    eval_idx = hold_idx if len(hold_idx) else train_idx
    return f, g, accuracy(f, g, X[eval_idx], y[eval_idx])
