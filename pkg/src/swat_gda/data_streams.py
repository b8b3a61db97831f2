"""Gradually shifting domain sequences: builders, persistence and the label guard.

A stream is an ordered list of domains ``D_0 .. D_n``.  ``D_0`` is the labeled
source; every later domain keeps its labels behind :func:`label_access`, which
only evaluation code opens.
"""
from __future__ import annotations

import contextlib
import contextvars
import gzip
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
from filelock import FileLock

log = logging.getLogger(__name__)

CACHE_ENV = "SWAT_GDA_CACHE"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
COVTYPE_FILES = ("covtype.csv", "covtype.data", "covtype.data.gz")
# column index of Horizontal_Distance_To_Hydrology in the UCI table
COVTYPE_WATER_COLUMN = 3
COVTYPE_CLASSES = (1, 2)  # spruce/fir, lodgepole pine


def cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "swat_gda"))


class MissingCorpusError(FileNotFoundError):
    pass


class LabelAccessError(PermissionError):
    """Raised when code outside evaluation asks for labels of a domain t > 0."""


_LABEL_ACCESS = contextvars.ContextVar("swat_gda_label_access", default=False)


@contextlib.contextmanager
def label_access() -> Iterator[None]:
    """Open the label guard for evaluation-side code."""
    token = _LABEL_ACCESS.set(True)
    try:
        yield
    finally:
        _LABEL_ACCESS.reset(token)


class DomainDataset:
    """One domain of a stream.

    ``X`` is always readable.  ``Y`` is readable for the source (index 0) and
    for any domain inside a :func:`label_access` block; otherwise reading it
    raises :class:`LabelAccessError`.
    """

    def __init__(self, index: int, X: np.ndarray, labels: np.ndarray | None, shift: Any = None):
        if labels is not None and len(labels) != len(X):
            raise ValueError(f"{len(X)} rows but {len(labels)} labels")
        self.index = int(index)
        self.X = X
        self._labels = labels
        self.shift = shift

    @property
    def labeled(self) -> bool:
        return self.index == 0

    @property
    def Y(self) -> np.ndarray:
        if self._labels is None:
            raise LabelAccessError(f"domain {self.index} carries no labels")
        if not self.labeled and not _LABEL_ACCESS.get():
            raise LabelAccessError(
                f"labels of domain {self.index} are evaluation-only; wrap the read in label_access()"
            )
        return self._labels

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    def __len__(self) -> int:
        return len(self.X)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        if self._labels is not None:
            h.update(np.ascontiguousarray(self._labels).tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        return f"DomainDataset(index={self.index}, n={len(self)}, shape={self.X.shape[1:]}, shift={self.shift})"


@dataclass
class DomainEntry:
    index: int
    shift: Any
    n: int
    x_dtype: str
    x_shape: list[int]
    y_dtype: str | None
    checksum: str


@dataclass
class StreamManifest:
    dataset: str
    name: str
    params: dict[str, Any]
    declared_drift: float | None
    domains: list[DomainEntry] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StreamManifest":
        raw = json.loads(text)
        raw["domains"] = [DomainEntry(**d) for d in raw["domains"]]
        return cls(**raw)

    def checksums(self) -> list[str]:
        return [d.checksum for d in self.domains]


@dataclass
class DomainStream:
    name: str
    domains: list[DomainDataset]
    dataset: str = "custom"
    declared_drift: float | None = None  # metadata only, never computed
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.domains) < 2:
            raise ValueError("a stream needs a source and a target domain")
        idx = [d.index for d in self.domains]
        if idx[0] != 0 or any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"domain indices must start at 0 and increase strictly, got {idx}")
        shapes = {d.X.shape[1:] for d in self.domains}
        if len(shapes) != 1:
            raise ValueError(f"all domains must share a feature shape, got {shapes}")

    @property
    def given_count(self) -> int:
        return len(self.domains)

    @property
    def source(self) -> DomainDataset:
        return self.domains[0]

    @property
    def target(self) -> DomainDataset:
        return self.domains[-1]

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.domains[0].X.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.params.get("num_classes", int(self.source.Y.max()) + 1))

    @property
    def shifts(self) -> list[Any]:
        return [d.shift for d in self.domains]

    def manifest(self) -> StreamManifest:
        entries = [
            DomainEntry(
                index=d.index,
                shift=d.shift,
                n=len(d),
                x_dtype=str(d.X.dtype),
                x_shape=list(d.X.shape),
                y_dtype=None if d._labels is None else str(d._labels.dtype),
                checksum=d.checksum(),
            )
            for d in self.domains
        ]
        return StreamManifest(self.dataset, self.name, dict(self.params), self.declared_drift, entries)


# ---------------------------------------------------------------------------
# corpora


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    magic = int.from_bytes(data[:4], "big")
    ndim = magic & 0xFF
    dims = [int.from_bytes(data[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _find(directory: Path, stem: str) -> Path | None:
    for cand in (directory / stem, directory / f"{stem}.gz"):
        if cand.exists():
            return cand
    return None


def load_mnist(root: str | Path | None = None) -> tuple[np.ndarray, np.ndarray]:
    """All 70,000 MNIST digits (train then test) as uint8 images and int64 labels."""
    directory = Path(root) if root is not None else cache_root() / "mnist"
    paths = {k: _find(directory, v) for k, v in MNIST_FILES.items()}
    missing = [MNIST_FILES[k] for k, p in paths.items() if p is None]
    if missing:
        raise MissingCorpusError(
            f"MNIST corpus not found in {directory} (missing {', '.join(missing)}). "
            f"Place the four IDX files (optionally .gz) there, or point ${CACHE_ENV} at a "
            "cache containing mnist/. The npm package 'mnist-data' ships them under data/."
        )
    images = np.concatenate([_read_idx(paths["train_images"]), _read_idx(paths["test_images"])])
    labels = np.concatenate([_read_idx(paths["train_labels"]), _read_idx(paths["test_labels"])])
    return images, labels.astype(np.int64)


def load_covtype_table(root: str | Path | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw UCI Cover Type table: 54 float32 features and the 1..7 class column."""
    import pandas as pd

    directory = Path(root) if root is not None else cache_root() / "covtype"
    for fname in COVTYPE_FILES:
        path = directory / fname
        if path.exists():
            header = "infer" if fname.endswith(".csv") else None
            df = pd.read_csv(path, header=header)
            table = df.to_numpy()
            return table[:, :-1].astype(np.float32), table[:, -1].astype(np.int64)
    raise MissingCorpusError(
        f"Cover Type table not found in {directory}; expected one of {', '.join(COVTYPE_FILES)}. "
        "The UCI covtype.data(.gz) or a headered covtype.csv with the class in the last column both work."
    )


# ---------------------------------------------------------------------------
# builders


def linear_schedule(n_domains: int, total: float) -> list[float]:
    """Shift parameter of domain t, spaced uniformly from 0 to ``total``."""
    if n_domains < 2:
        raise ValueError("n_domains must be >= 2")
    return [total * t / (n_domains - 1) for t in range(n_domains)]


def _draw_slices(corpus_size: int, n_domains: int, samples: int, rng: np.random.Generator) -> list[np.ndarray]:
    if samples < 1:
        raise ValueError("samples_per_domain must be positive")
    if samples > corpus_size:
        raise ValueError(f"samples_per_domain={samples} exceeds the corpus size {corpus_size}")
    if samples * n_domains <= corpus_size:
        perm = rng.permutation(corpus_size)
        return [perm[t * samples:(t + 1) * samples] for t in range(n_domains)]
    log.warning(
        "%d x %d samples exceed the corpus of %d; drawing each domain independently",
        n_domains, samples, corpus_size,
    )
    return [rng.choice(corpus_size, size=samples, replace=False) for _ in range(n_domains)]


def rotate_images(images: np.ndarray, angle: float) -> np.ndarray:
    from scipy import ndimage

    if angle == 0:
        return images.astype(np.float32)
    out = ndimage.rotate(images.astype(np.float32), angle, axes=(1, 2), reshape=False, order=1, mode="constant")
    return np.clip(out, 0.0, 255.0)


def build_rotated_mnist(
    n_domains: int,
    samples_per_domain: int,
    seed: int,
    max_angle: float = 45.0,
    corpus: tuple[np.ndarray, np.ndarray] | None = None,
) -> DomainStream:
    images, labels = corpus if corpus is not None else load_mnist()
    rng = np.random.default_rng(seed)
    angles = linear_schedule(n_domains, max_angle)
    slices = _draw_slices(len(images), n_domains, samples_per_domain, rng)
    domains = []
    for t, (angle, idx) in enumerate(zip(angles, slices)):
        X = rotate_images(images[idx], angle) / 255.0
        domains.append(DomainDataset(t, X[:, None].astype(np.float32), labels[idx].copy(), shift=float(angle)))
    return DomainStream(
        name=f"rmnist-n{n_domains}-s{samples_per_domain}-seed{seed}",
        domains=domains,
        dataset="rmnist",
        declared_drift=max_angle / (n_domains - 1),
        params={"n_domains": n_domains, "samples_per_domain": samples_per_domain, "seed": seed,
                "max_angle": max_angle, "num_classes": 10},
    )


def build_colorshift_mnist(
    n_domains: int,
    samples_per_domain: int,
    seed: int,
    corpus: tuple[np.ndarray, np.ndarray] | None = None,
) -> DomainStream:
    images, labels = corpus if corpus is not None else load_mnist()
    rng = np.random.default_rng(seed)
    offsets = linear_schedule(n_domains, 1.0)
    slices = _draw_slices(len(images), n_domains, samples_per_domain, rng)
    domains = []
    for t, (offset, idx) in enumerate(zip(offsets, slices)):
        X = images[idx].astype(np.float32) / 255.0 + np.float32(offset)
        domains.append(DomainDataset(t, X[:, None], labels[idx].copy(), shift=float(offset)))
    return DomainStream(
        name=f"csmnist-n{n_domains}-s{samples_per_domain}-seed{seed}",
        domains=domains,
        dataset="csmnist",
        declared_drift=1.0 / (n_domains - 1),
        params={"n_domains": n_domains, "samples_per_domain": samples_per_domain, "seed": seed,
                "num_classes": 10},
    )


def build_covertype(
    n_intermediate: int,
    seed: int,
    source_size: int = 50_000,
    block_size: int = 40_000,
    target_size: int = 50_000,
    table: tuple[np.ndarray, np.ndarray] | None = None,
    standardize: str = "pooled",
) -> DomainStream:
    """Binary spruce/fir vs lodgepole pine stream ordered by distance to water.

    The target block takes whatever rows remain when the table is shorter than
    the nominal layout, as long as at least half of ``target_size`` is left.
    ``standardize="pooled"`` scales features by the mean/std of every row in the
    stream (features only, no labels); ``"source"`` uses the source block alone,
    which leaves the sort-key columns tens of deviations out in the target.
    """
    if n_intermediate < 0:
        raise ValueError("n_intermediate must be >= 0")
    if standardize not in ("pooled", "source"):
        raise ValueError(f"unknown standardize mode {standardize!r}")
    features, classes = table if table is not None else load_covtype_table()
    keep = np.isin(classes, COVTYPE_CLASSES)
    features, classes = features[keep], classes[keep]
    order = np.argsort(features[:, COVTYPE_WATER_COLUMN], kind="stable")
    features, classes = features[order], classes[order]
    labels = (classes == COVTYPE_CLASSES[1]).astype(np.int64)

    sizes = [source_size] + [block_size] * n_intermediate
    used = sum(sizes)
    remaining = len(features) - used
    if remaining < max(1, target_size // 2):
        raise ValueError(
            f"n_intermediate={n_intermediate} needs {used + target_size} rows; the table has {len(features)}"
        )
    sizes.append(min(target_size, remaining))
    bounds = np.cumsum([0] + sizes)

    fit_rows = features[: bounds[1] if standardize == "source" else bounds[-1]]
    mean = fit_rows.mean(axis=0)
    std = fit_rows.std(axis=0)
    std[std == 0] = 1.0

    rng = np.random.default_rng(seed)
    domains = []
    for t in range(len(sizes)):
        lo, hi = bounds[t], bounds[t + 1]
        perm = rng.permutation(hi - lo)
        X = ((features[lo:hi] - mean) / std).astype(np.float32)[perm]
        key = features[lo:hi, COVTYPE_WATER_COLUMN]
        domains.append(DomainDataset(t, X, labels[lo:hi][perm], shift=[float(key.min()), float(key.max())]))
    return DomainStream(
        name=f"covertype-i{n_intermediate}-seed{seed}",
        domains=domains,
        dataset="covertype",
        params={"n_intermediate": n_intermediate, "seed": seed, "source_size": source_size,
                "block_size": block_size, "target_size": target_size, "standardize": standardize,
                "num_classes": 2},
    )


SYNTHETIC_KINDS = ("two_moons_rotation", "gaussian_drift")


def build_synthetic_stream(
    kind: str,
    n_domains: int,
    samples_per_domain: int,
    total_shift: float,
    seed: int,
    noise: float = 0.1,
) -> DomainStream:
    """Two-dimensional toy streams.

    ``two_moons_rotation`` rotates centred moons from 0 to ``total_shift``
    degrees; ``gaussian_drift`` translates two unit Gaussians (means at x=-2
    and x=+2) along x by up to ``total_shift``.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if not np.isfinite(total_shift):
        raise ValueError("total_shift must be finite")
    from sklearn.datasets import make_moons

    shifts = linear_schedule(n_domains, float(total_shift))
    seeds = np.random.SeedSequence(seed).generate_state(n_domains)
    domains = []
    for t, s in enumerate(shifts):
        rng = np.random.default_rng(seeds[t])
        if kind == "two_moons_rotation":
            X, y = make_moons(samples_per_domain, noise=noise, random_state=int(seeds[t]))
            X = X - np.array([0.5, 0.25])
            theta = np.deg2rad(s)
            rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
            X = X @ rot.T
        else:
            y = rng.integers(0, 2, samples_per_domain)
            means = np.where(y[:, None] == 1, [2.0, 0.0], [-2.0, 0.0]) + [s, 0.0]
            X = means + rng.standard_normal((samples_per_domain, 2))
        domains.append(DomainDataset(t, X.astype(np.float32), y.astype(np.int64), shift=float(s)))
    return DomainStream(
        name=f"synthetic-{kind}-n{n_domains}-s{samples_per_domain}-shift{total_shift:g}-seed{seed}",
        domains=domains,
        dataset="synthetic",
        declared_drift=abs(total_shift) / (n_domains - 1),
        params={"kind": kind, "n_domains": n_domains, "samples_per_domain": samples_per_domain,
                "total_shift": total_shift, "seed": seed, "noise": noise, "num_classes": 2},
    )


def subsample_stream(stream: DomainStream, keep_indices: Sequence[int]) -> DomainStream:
    """Restrict a stream to the domains at the given positions.

    Positions must be sorted, unique, and include the source (0) and the target
    (last). Domains keep their original index and shift parameter.
    """
    keep = [int(i) for i in keep_indices]
    last = len(stream.domains) - 1
    if not keep or keep[0] != 0 or keep[-1] != last:
        raise ValueError(f"keep_indices must include the endpoints 0 and {last}, got {keep}")
    if any(b <= a for a, b in zip(keep, keep[1:])):
        raise ValueError(f"keep_indices must be strictly ascending, got {keep}")
    if len(keep) == len(stream.domains):
        return stream
    params = dict(stream.params, kept=keep)
    return DomainStream(
        name=f"{stream.name}-keep{'_'.join(map(str, keep))}",
        domains=[stream.domains[i] for i in keep],
        dataset=stream.dataset,
        declared_drift=stream.declared_drift,
        params=params,
    )


def evenly_spaced(n_domains: int, given: int) -> list[int]:
    """Positions of ``given`` roughly equally spaced domains including both endpoints."""
    if not 2 <= given <= n_domains:
        raise ValueError(f"given must lie in [2, {n_domains}], got {given}")
    return sorted({int(round(x)) for x in np.linspace(0, n_domains - 1, given)})


# ---------------------------------------------------------------------------
# persistence


def save_stream(stream: DomainStream, root: str | Path) -> Path:
    """Write ``<root>/<name>/manifest.json`` and one ``domain_<t>.bin`` per domain.

    Each ``.bin`` holds the C-ordered feature array followed by the int64 labels;
    the manifest records dtypes, shapes and checksums.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = root / stream.name
    with FileLock(str(root / f"{stream.name}.lock")):
        out.mkdir(exist_ok=True)
        for d in stream.domains:
            with open(out / f"domain_{d.index}.bin", "wb") as fh:
                fh.write(np.ascontiguousarray(d.X).tobytes())
                if d._labels is not None:
                    fh.write(np.ascontiguousarray(d._labels).tobytes())
        (out / "manifest.json").write_text(stream.manifest().to_json())
    return out


def load_stream(path: str | Path, verify: bool = True) -> DomainStream:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no stream manifest at {manifest_path}")
    manifest = StreamManifest.from_json(manifest_path.read_text())
    domains = []
    for entry in manifest.domains:
        raw = (path / f"domain_{entry.index}.bin").read_bytes()
        x_dtype = np.dtype(entry.x_dtype)
        n_x = int(np.prod(entry.x_shape)) * x_dtype.itemsize
        X = np.frombuffer(raw[:n_x], dtype=x_dtype).reshape(entry.x_shape).copy()
        labels = None
        if entry.y_dtype is not None:
            labels = np.frombuffer(raw[n_x:], dtype=np.dtype(entry.y_dtype)).copy()
        d = DomainDataset(entry.index, X, labels, shift=entry.shift)
        if verify and d.checksum() != entry.checksum:
            raise ValueError(f"checksum mismatch for domain {entry.index} in {path}")
        domains.append(d)
    return DomainStream(manifest.name, domains, manifest.dataset, manifest.declared_drift, manifest.params)


BUILDERS = {
    "rmnist": build_rotated_mnist,
    "csmnist": build_colorshift_mnist,
    "covertype": build_covertype,
    "synthetic": build_synthetic_stream,
}
