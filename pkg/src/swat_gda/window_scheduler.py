"""Sliding-window cursor: phase enumeration, p-schedules and hand-off points.

Within window ``l`` the phases sit at ``p_j = j / (K + 1)`` for ``j = 0..K``;
``p = 1`` of a window coincides with ``p = 0`` of the next one, so it is only
trained once, as a terminal phase on the last window.  The schedule length is
therefore ``(given - 1) * (K + 1) + 1``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

SCHEDULE_KINDS = ("ours", "fixed", "rand", "sorted")


class ScheduleExhausted(IndexError):
    pass


@dataclass(frozen=True)
class WindowState:
    l: int
    p: float
    dp: float
    phase_index: int
    total_phases: int
    n_windows: int
    kind: str = "ours"

    @property
    def r(self) -> int:
        return self.l + 1

    @property
    def is_final(self) -> bool:
        return self.phase_index == self.total_phases - 1


def phase_count(given_count: int, K: int) -> int:
    return (given_count - 1) * (K + 1) + 1


def make_schedule(given_count: int, K: int, kind: str = "ours", seed: int = 0) -> list[WindowState]:
    if given_count < 2:
        raise ValueError("given_count must be >= 2")
    if K < 0:
        raise ValueError("K must be >= 0")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; choose from {SCHEDULE_KINDS}")
    n_windows = given_count - 1
    total = phase_count(given_count, K)
    dp = 1.0 / (K + 1)
    rng = np.random.default_rng(seed)

    ps: list[tuple[int, float]] = []
    for l in range(n_windows):
        if kind == "ours":
            values = [j / (K + 1) for j in range(K + 1)]
        elif kind == "fixed":
            values = [0.5] * (K + 1)
        else:
            values = rng.uniform(0.0, 1.0, K + 1).tolist()
            if kind == "sorted":
                values.sort()
        ps.extend((l, v) for v in values)
    ps.append((n_windows - 1, 0.5 if kind == "fixed" else 1.0))

    return [WindowState(l, float(p), dp, i, total, n_windows, kind) for i, (l, p) in enumerate(ps)]


def advance(state: WindowState, schedule: Sequence[WindowState] | None = None) -> tuple[WindowState, bool]:
    """Next phase and whether the window slid (``D_l <- D_r``, fresh ``D_r``).

    Without an explicit ``schedule`` the uniform grid is assumed.
    """
    if state.is_final:
        raise ScheduleExhausted(f"phase {state.phase_index} is the last of {state.total_phases}")
    if schedule is not None:
        nxt = schedule[state.phase_index + 1]
    else:
        j = int(round(state.p / state.dp))
        K = int(round(1.0 / state.dp)) - 1
        last_window = state.l == state.n_windows - 1
        if j < K:
            l, p = state.l, (j + 1) * state.dp
        elif last_window:
            l, p = state.l, 1.0
        else:
            l, p = state.l + 1, 0.0
        nxt = WindowState(l, p, state.dp, state.phase_index + 1, state.total_phases, state.n_windows, state.kind)
    return nxt, nxt.l != state.l


def traverse(schedule: Sequence[WindowState]) -> Iterator[tuple[WindowState, bool]]:
    """Yield ``(state, hand_off)`` over a whole schedule.

    Every window opens with a hand-off, including the first one, where it
    amounts to initialising ``D_r`` before any training; a stream with
    ``given`` domains therefore sees ``given - 1`` hand-offs.
    """
    if not schedule:
        return
    state = schedule[0]
    yield state, True
    while not state.is_final:
        state, slid = advance(state, schedule)
        yield state, slid


def interpolation_weights(state: WindowState) -> tuple[float, float]:
    return 1.0 - state.p, state.p


def schedule_table(schedule: Sequence[WindowState]) -> str:
    """CSV dump of a schedule for the run directory."""
    buf = io.StringIO()
    fields = ["phase_index", "l", "r", "p", "dp", "kind", "hand_off"]
    writer = csv.DictWriter(buf, fieldnames=fields)
    writer.writeheader()
    for state, hand in traverse(schedule):
        row = {k: v for k, v in asdict(state).items() if k in fields}
        row.update(r=state.r, hand_off=int(hand))
        writer.writerow(row)
    return buf.getvalue()
