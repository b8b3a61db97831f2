"""Experiment grids: stream/pretrain caches, resumable runs, records and tables."""
from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import logging
import os
import platform
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np
import torch
from filelock import FileLock

from . import data_streams as ds
from .baselines import GSTConfig, run_gst, run_source_only
from .nets import BundleSpec, ModelBundle, PretrainConfig, init_bundle, pretrain_source
from .swat_trainer import TrainConfig, evaluate, reports_checksum, run_swat
from .window_scheduler import make_schedule, schedule_table

log = logging.getLogger(__name__)

METHODS = ("swat", "gst", "source_only")
RECORDS_FILE = "records.jsonl"

PROFILES: dict[str, dict[str, Any]] = {
    "desk": {"samples_per_domain": 10_000, "epochs": 5, "seeds": (0, 1, 2)},
    "full": {"samples_per_domain": None, "epochs": 5, "seeds": (0, 1, 2, 3, 4)},
}


def _digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def code_digest() -> str:
    """Hash of the package sources; part of every run key so stale results are never reused."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@functools.lru_cache(maxsize=1)
def recipe_digest() -> str:
    return hashlib.sha256(Path(ds.__file__).read_bytes()).hexdigest()[:16]


def environment_fingerprint() -> dict[str, str]:
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "threads": str(torch.get_num_threads()),
    }


# ---------------------------------------------------------------------------
# streams and pretraining

SYNTHETIC_SHIFTS = {"two_moons_rotation": 60.0, "gaussian_drift": 4.0}
DATASETS = ("rmnist", "csmnist", "covertype") + tuple(SYNTHETIC_SHIFTS)


@dataclass(frozen=True)
class StreamRef:
    """A reproducible recipe for a stream: build ``n_domains`` and keep ``given`` evenly spaced."""

    dataset: str
    n_domains: int
    given: int
    samples_per_domain: int | None = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; known: {DATASETS}")
        if not 2 <= self.given <= self.n_domains:
            raise ValueError("need 2 <= given <= n_domains")

    def key(self) -> str:
        # the recipe digest keeps cached streams from outliving a change to how they are built
        return _digest({**asdict(self), "recipe": recipe_digest()})[:16]

    def build(self) -> ds.DomainStream:
        full = build_full_stream(self.dataset, self.n_domains, self.samples_per_domain, self.seed)
        return ds.subsample_stream(full, ds.evenly_spaced(self.n_domains, self.given))


def build_full_stream(dataset: str, n_domains: int, samples: int | None, seed: int) -> ds.DomainStream:
    if dataset in ("rmnist", "csmnist"):
        # no size given: split the whole 70k-image corpus evenly
        builder = ds.build_rotated_mnist if dataset == "rmnist" else ds.build_colorshift_mnist
        return builder(n_domains, samples or 70_000 // n_domains, seed)
    if dataset == "covertype":
        return ds.build_covertype(n_domains - 2, seed)
    return ds.build_synthetic_stream(dataset, n_domains, samples or 1000, SYNTHETIC_SHIFTS[dataset], seed)


_STREAM_MEMO: dict[tuple[str, str], ds.DomainStream] = {}


def materialize(ref: StreamRef, root: str | Path | None = None) -> ds.DomainStream:
    """Build (or load from ``root/streams``) the stream behind ``ref``."""
    memo_key = (ref.key(), str(root))
    if memo_key in _STREAM_MEMO:
        return _STREAM_MEMO[memo_key]
    if root is None:
        stream = ref.build()
    else:
        base = Path(root) / "streams"
        target = base / ref.key()
        base.mkdir(parents=True, exist_ok=True)
        with FileLock(str(target) + ".lock"):
            if (target / "manifest.json").exists():
                stream = ds.load_stream(target)
            else:
                stream = ref.build()
                tmp = Path(tempfile.mkdtemp(dir=base))
                written = ds.save_stream(stream, tmp)
                os.replace(written, target)
                shutil.rmtree(tmp, ignore_errors=True)
                stream = ds.load_stream(target)
    _STREAM_MEMO[memo_key] = stream
    return stream


def pretrained_bundle(
    stream: ds.DomainStream,
    stream_key: str,
    seed: int,
    pretrain: PretrainConfig,
    root: str | Path | None = None,
) -> tuple[ModelBundle, float]:
    """Source-pretrained bundle, cached per (stream, seed, pretrain config, code)."""
    spec = BundleSpec.for_input(stream.feature_shape, stream.num_classes)
    key = _digest({"stream": stream_key, "seed": seed, "pretrain": asdict(pretrain),
                   "spec": spec.to_dict(), "code": code_digest()})[:16]
    path = None if root is None else Path(root) / "pretrain" / f"{key}.pt"
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(path) + ".lock"):
            if path.exists():
                bundle = ModelBundle.load(path)
                return bundle, float(torch.load(path, weights_only=False)["meta"]["holdout_accuracy"])
            bundle, acc = _pretrain(spec, stream, seed, pretrain)
            tmp = path.with_suffix(".tmp")
            bundle.save(tmp, holdout_accuracy=acc)
            os.replace(tmp, path)
            return bundle, acc
    return _pretrain(spec, stream, seed, pretrain)


def _pretrain(spec, stream, seed, pretrain):
    bundle = init_bundle(spec, seed)
    cfg = PretrainConfig(**{**asdict(pretrain), "seed": seed})
    _, _, acc = pretrain_source(bundle.f, bundle.g, stream.source, cfg)
    bundle.eval()
    return bundle, acc


# ---------------------------------------------------------------------------
# experiment specs and runs


@dataclass
class ExperimentSpec:
    stream: StreamRef
    method: str = "swat"
    train: dict[str, Any] = field(default_factory=dict)
    pretrain: dict[str, Any] = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)
    label: str = ""

    def __post_init__(self):
        if isinstance(self.stream, dict):
            self.stream = StreamRef(**self.stream)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be a non-empty list of distinct integers")
        self.train_config(self.seeds[0])  # validate eagerly
        PretrainConfig(**self.pretrain)

    @property
    def repeat(self) -> int:
        return len(self.seeds)

    @property
    def inter_steps(self) -> int | None:
        return self.train_config(self.seeds[0]).inter_steps if self.method == "swat" else None

    def train_config(self, seed: int) -> TrainConfig | GSTConfig | None:
        if self.method == "swat":
            return TrainConfig.from_dict({**self.train, "seed": seed})
        if self.method == "gst":
            return GSTConfig(**{**self.train, "seed": seed})
        if self.train:
            raise ValueError("source_only takes no training config")
        return None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentSpec":
        d = dict(d)
        d["stream"] = StreamRef(**d["stream"])
        d["seeds"] = tuple(d.get("seeds", (0,)))
        return cls(**d)

    def cell_key(self) -> dict[str, Any]:
        d = self.to_dict()
        d.pop("seeds")
        d.pop("label")
        return d

    def experiment_id(self) -> str:
        return _digest({"cell": self.cell_key(), "seeds": list(self.seeds), "code": code_digest()})[:16]

    def run_hash(self, seed: int) -> str:
        return _digest({"cell": self.cell_key(), "seed": seed, "code": code_digest()})[:16]


@dataclass
class RunRecord:
    experiment_id: str
    spec: dict[str, Any]
    seeds: list[int]
    accuracies: list[float]
    mean: float
    band: float
    run_dirs: list[str]
    environment: dict[str, str]
    extras: dict[str, list[float]] = field(default_factory=dict)

    @staticmethod
    def summarize(values: Sequence[float]) -> tuple[float, float]:
        """Mean and half-width of the 68% band (sample standard deviation)."""
        arr = np.asarray(values, dtype=float)
        band = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        return float(arr.mean()), band

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))

    @property
    def experiment(self) -> ExperimentSpec:
        return ExperimentSpec.from_dict(self.spec)


def _json_dump(path: Path, obj: Any) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))
    os.replace(tmp, path)


def execute_method(
    stream: ds.DomainStream,
    stream_key: str,
    method: str,
    train_cfg: TrainConfig | GSTConfig | None,
    pretrain: PretrainConfig,
    seed: int,
    run_dir: str | Path,
    root: str | Path | None = None,
) -> dict[str, Any]:
    """Pretrain (cached), adapt with ``method`` and write the run directory.

    Artifacts: ``pretrained.pt``, ``final.pt``, for SWAT ``schedule.csv`` and
    ``phases.jsonl``; ``final.json`` is written last and marks completion.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    bundle, holdout = pretrained_bundle(stream, stream_key, seed, pretrain, root)
    bundle.save(run_dir / "pretrained.pt", seed=seed, holdout_accuracy=holdout)
    start = time.perf_counter()
    result: dict[str, Any] = {"seed": seed, "method": method, "pretrain_holdout_accuracy": holdout}

    if method == "source_only":
        per_domain = run_source_only(bundle, stream)
        result["checksum"] = _digest({"acc": per_domain, "params": bundle.checksums()})
    elif method == "gst":
        bundle, per_domain = run_gst(bundle, stream, train_cfg)
        result["checksum"] = _digest({"acc": per_domain, "params": bundle.checksums()})
    else:
        cfg = train_cfg
        (run_dir / "schedule.csv").write_text(
            schedule_table(make_schedule(stream.given_count, cfg.inter_steps, cfg.schedule, cfg.seed)))
        phases = run_dir / "phases.jsonl"
        phases.write_text("")

        def log_phase(rep, _bundle):
            with phases.open("a") as fh:
                fh.write(json.dumps(rep.to_record(), default=float) + "\n")

        bundle, reports = run_swat(stream, bundle, cfg, on_phase=log_phase)
        per_domain = [evaluate(bundle, d) for d in stream.domains]
        result["checksum"] = _digest({"reports": reports_checksum(reports), "params": bundle.checksums()})
        result["phases"] = len(reports)
        result["hand_offs"] = sum(r.hand_off for r in reports)

    result.update(
        final_accuracy=per_domain[-1],
        per_domain_accuracy=per_domain,
        wall_time=time.perf_counter() - start,
    )
    bundle.save(run_dir / "final.pt", seed=seed, method=method)
    _json_dump(run_dir / "final.json", result)
    return result


def run_cell(spec: ExperimentSpec, seed: int, run_dir: str | Path, root: str | Path | None = None) -> dict[str, Any]:
    """Execute one (cell, seed) run into ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _json_dump(run_dir / "config.json", {"spec": spec.to_dict(), "seed": seed, "code": code_digest()})
    stream = materialize(spec.stream, root)
    return execute_method(stream, spec.stream.key(), spec.method, spec.train_config(seed),
                          PretrainConfig(**spec.pretrain), seed, run_dir, root)


def stream_for_run(run_dir: str | Path, root: str | Path | None = None) -> ds.DomainStream:
    """Rebuild the stream a run directory was trained on."""
    cfg = json.loads((Path(run_dir) / "config.json").read_text())
    if "spec" in cfg:
        return materialize(StreamRef(**cfg["spec"]["stream"]), root)
    return ds.load_stream(cfg["stream_path"])


def load_result(run_dir: str | Path) -> dict[str, Any] | None:
    path = Path(run_dir) / "final.json"
    return json.loads(path.read_text()) if path.exists() else None


def _quarantine(run_dir: Path, root: Path) -> None:
    dest = root / "quarantine" / f"{run_dir.name}-{int(time.time() * 1000)}"
    dest.parent.mkdir(parents=True, exist_ok=True)
    log.warning("quarantining incomplete run %s -> %s", run_dir, dest)
    shutil.move(str(run_dir), str(dest))


def read_records(root: str | Path) -> list[RunRecord]:
    path = Path(root) / RECORDS_FILE
    if not path.exists():
        return []
    return [RunRecord.from_json(line) for line in path.read_text().splitlines() if line.strip()]


def _append_record(root: Path, record: RunRecord) -> None:
    path = root / RECORDS_FILE
    with FileLock(str(path) + ".lock"):
        known = {r.experiment_id for r in read_records(root)}
        if record.experiment_id not in known:
            with path.open("a") as fh:
                fh.write(record.to_json() + "\n")


@dataclass
class GridResult:
    records: list[RunRecord]
    executed: int

    def __iter__(self) -> Iterator[RunRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


def run_grid(specs: Iterable[ExperimentSpec], root: str | Path) -> GridResult:
    """Run every (spec, seed) cell not already completed under ``root``.

    Run directories are keyed by ``run_hash``; a directory without
    ``final.json`` is a partial run and is quarantined before re-running.
    One record per spec is appended to ``records.jsonl``.
    """
    root = Path(root)
    (root / "runs").mkdir(parents=True, exist_ok=True)
    records, executed = [], 0
    for spec in specs:
        results, dirs = [], []
        for seed in spec.seeds:
            run_dir = root / "runs" / spec.run_hash(seed)
            with FileLock(str(run_dir) + ".lock"):
                result = load_result(run_dir)
                if result is None:
                    if run_dir.exists():
                        _quarantine(run_dir, root)
                    log.info("running %s %s seed=%d", spec.method, spec.label or spec.stream, seed)
                    result = run_cell(spec, seed, run_dir, root)
                    executed += 1
            results.append(result)
            dirs.append(str(run_dir))
        accs = [r["final_accuracy"] for r in results]
        mean, band = RunRecord.summarize(accs)
        record = RunRecord(
            experiment_id=spec.experiment_id(),
            spec=spec.to_dict(),
            seeds=list(spec.seeds),
            accuracies=accs,
            mean=mean,
            band=band,
            run_dirs=dirs,
            environment=environment_fingerprint(),
            extras={"source_accuracy": [r["per_domain_accuracy"][0] for r in results]},
        )
        _append_record(root, record)
        records.append(record)
    return GridResult(records, executed)


def verify_determinism(spec: ExperimentSpec, seed: int, root: str | Path | None = None) -> bool:
    """Run one cell twice from scratch (shared stream cache only) and compare checksums."""
    checks = []
    for _ in range(2):
        with tempfile.TemporaryDirectory() as tmp:
            # pretraining is redone in the scratch dir; only the stream cache is shared
            stream_root = root if root is not None else tmp
            materialize(spec.stream, stream_root)
            checks.append(run_cell(spec, seed, Path(tmp) / "run", root=None)["checksum"])
    return checks[0] == checks[1]


# ---------------------------------------------------------------------------
# tables


LAYOUTS = ("given_by_K", "method_comparison")


@dataclass
class Table:
    layout: str
    rows: list[str]
    cols: list[str]
    cells: dict[tuple[str, str], tuple[float, float]]
    title: str = ""

    def to_text(self, scale: float = 100.0) -> str:
        head = [self.layout] + self.cols
        lines = [head]
        for r in self.rows:
            line = [r]
            for c in self.cols:
                cell = self.cells.get((r, c))
                line.append("" if cell is None else f"{cell[0] * scale:.1f} ± {cell[1] * scale:.1f}")
            lines.append(line)
        widths = [max(len(line[i]) for line in lines) for i in range(len(head))]
        out = [self.title] if self.title else []
        out += ["  ".join(v.ljust(w) for v, w in zip(line, widths)).rstrip() for line in lines]
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["layout", "row", "col", "mean", "band"])
        for r in self.rows:
            for c in self.cols:
                cell = self.cells.get((r, c))
                writer.writerow([self.layout, r, c] + (["", ""] if cell is None else [repr(cell[0]), repr(cell[1])]))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Table":
        reader = csv.DictReader(io.StringIO(text))
        rows, cols, cells, layout = [], [], {}, ""
        for rec in reader:
            layout = rec["layout"]
            if rec["row"] not in rows:
                rows.append(rec["row"])
            if rec["col"] not in cols:
                cols.append(rec["col"])
            if rec["mean"] != "":
                cells[(rec["row"], rec["col"])] = (float(rec["mean"]), float(rec["band"]))
        return cls(layout, rows, cols, cells)


def _sort_labels(labels: Iterable[str]) -> list[str]:
    def key(s):
        return (0, int(s), s) if s.lstrip("-").isdigit() else (1, 0, s)
    return sorted(set(labels), key=key)


def report_tables(records: Sequence[RunRecord], layout: str = "given_by_K") -> Table:
    """Mean ± band grids.

    ``given_by_K``: rows are given-domain counts, columns are inter-domain steps
    (SWAT records only).  ``method_comparison``: rows are methods (SWAT labelled
    with its K), columns are given-domain counts.  Missing cells stay blank.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; choose from {LAYOUTS}")
    cells: dict[tuple[str, str], tuple[float, float]] = {}
    for rec in records:
        exp = rec.experiment
        given = str(exp.stream.given)
        if layout == "given_by_K":
            if exp.method != "swat":
                continue
            key = (given, str(exp.inter_steps))
        else:
            name = exp.method if exp.method != "swat" else f"swat_K{exp.inter_steps}"
            key = (name, given)
        cells[key] = (rec.mean, rec.band)
    rows = _sort_labels(k[0] for k in cells)
    cols = _sort_labels(k[1] for k in cells)
    datasets = sorted({rec.experiment.stream.dataset for rec in records})
    return Table(layout, rows, cols, cells, title=", ".join(datasets))
