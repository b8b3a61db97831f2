"""Shared desk-scale setup for the slow suites: seeds, cached run root, stream recipes."""
import os
from pathlib import Path

from swat_gda.harness import ExperimentSpec, StreamRef, run_grid

SEEDS = (0, 1, 2)


def acceptance_root() -> Path:
    default = Path.home() / ".cache" / "swat_gda" / "acceptance"
    return Path(os.environ.get("SWAT_GDA_ACCEPTANCE_ROOT", default))


def rmnist(given: int = 2) -> StreamRef:
    return StreamRef("rmnist", n_domains=6, given=given, samples_per_domain=10_000)


def swat_spec(ref: StreamRef, K: int) -> ExperimentSpec:
    return ExperimentSpec(ref, "swat", {"inter_steps": K}, {}, SEEDS)


def baseline_spec(ref: StreamRef, method: str) -> ExperimentSpec:
    return ExperimentSpec(ref, method, {}, {}, SEEDS)


def grid(*specs):
    return run_grid(specs, acceptance_root()).records


def pct(x: float) -> str:
    return f"{100 * x:.1f}"
