"""Mode labelling (mean / annual / long-term decay) and sliding-window sweeps."""

from __future__ import annotations

import enum
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kmdtool.engine import Algorithm, KoopmanDecomposition, decompose
from kmdtool.errors import DataError
from kmdtool.grid_data import (
    Month,
    SnapshotMatrix,
    month_from_index,
    format_window,
    month_index,
)

EPS_EIG = 1e-3
DECAY_FLOOR_MONTHS = 12.0
TOP_DECAY = 2
ANNUAL_MONTHS = 12.0


class ModeKind(str, enum.Enum):
    MEAN = "Mean"
    ANNUAL = "Annual"
    LONG_TERM_DECAY = "LongTermDecay"
    OTHER = "Other"


@dataclass(frozen=True)
class ModeLabel:
    kind: ModeKind
    mode_index: int
    l2_norm: float
    tau_osc: float
    tau_decay: float
    omega: float
    lambda_discrete: complex

    def to_dict(self, window: str | None = None) -> dict:
        def finite(x):
            return None if math.isinf(x) else x

        return {
            "window": window,
            "kind": self.kind.value,
            "mode_index": self.mode_index,
            "l2_norm": self.l2_norm,
            "tau_osc_months": finite(self.tau_osc),
            "tau_decay_months": finite(self.tau_decay),
            "omega_cycles_per_month": self.omega,
        }


def classify_modes(
    decomp: KoopmanDecomposition,
    eps_eig: float = EPS_EIG,
    decay_floor_months: float = DECAY_FLOOR_MONTHS,
    top_decay: int = TOP_DECAY,
) -> list[ModeLabel]:
    """Label the non-negative-frequency member of every mode.

    Mean: largest-norm mode with ``|lambda_continuous| <= eps_eig``.
    Annual: oscillatory mode with period closest to 12 months, ties going to
    the larger norm. LongTermDecay: the ``top_decay`` largest-norm modes that
    are non-oscillatory within the window (``omega < eps_eig`` or period longer
    than the window), decaying, with ``|tau_decay| > decay_floor_months``.
    Everything else is Other. Labels are returned in mode-index order.
    """
    if decomp.n_modes == 0:
        raise DataError("cannot classify an empty decomposition")
    infos = decomp.eigen_info
    norms = decomp.norms
    candidates = [j for j, info in enumerate(infos) if info.lambda_continuous.imag >= 0]

    def by_norm(j):
        # deterministic under reordering: norm, then eigenvalue
        return (-norms[j], -infos[j].lambda_discrete.real, -infos[j].lambda_discrete.imag)

    kinds: dict[int, ModeKind] = {}
    mean = [j for j in candidates if abs(infos[j].lambda_continuous) <= eps_eig]
    if mean:
        kinds[min(mean, key=by_norm)] = ModeKind.MEAN

    osc = [j for j in candidates if j not in kinds and infos[j].omega > 0]
    if osc:
        best = min(osc, key=lambda j: (abs(infos[j].tau_osc - ANNUAL_MONTHS), by_norm(j)))
        kinds[best] = ModeKind.ANNUAL

    decay = [
        j
        for j in candidates
        if j not in kinds
        and (infos[j].omega < eps_eig or infos[j].tau_osc > decomp.n_steps)
        and infos[j].lambda_continuous.real < 0
        and abs(infos[j].tau_decay) > decay_floor_months
    ]
    for j in sorted(decay, key=by_norm)[: max(0, top_decay)]:
        kinds[j] = ModeKind.LONG_TERM_DECAY

    labels = []
    for j in candidates:
        info = infos[j]
        labels.append(
            ModeLabel(
                kinds.get(j, ModeKind.OTHER), j, float(norms[j]), info.tau_osc,
                info.tau_decay, info.omega, info.lambda_discrete,
            )
        )
    return labels


def find_label(labels: list[ModeLabel], kind: ModeKind) -> list[ModeLabel]:
    """Labels of ``kind``; LongTermDecay ones come out ranked by norm."""
    out = [lab for lab in labels if lab.kind is kind]
    return sorted(out, key=lambda lab: -lab.l2_norm)


@dataclass(frozen=True)
class WindowSpec:
    """Windows of ``length_years`` stepping by ``stride_years``.

    ``start``/``end`` bound the sweep (inclusive months); by default the whole
    data range is used and windows are anchored at its first month.
    """

    length_years: int
    stride_years: int = 1
    start: Month | None = None
    end: Month | None = None

    def windows(self, data: SnapshotMatrix) -> list[tuple[Month, Month]]:
        if not 5 <= self.length_years <= 40:
            raise DataError("window length must be between 5 and 40 years")
        if self.stride_years < 1:
            raise DataError("window stride must be at least one year")
        lo = month_index(self.start or data.start)
        hi = month_index(self.end or data.end)
        if lo < month_index(data.start) or hi > month_index(data.end):
            raise DataError("sweep bounds lie outside the data")
        length, stride = 12 * self.length_years, 12 * self.stride_years
        out = []
        first = lo
        while first + length - 1 <= hi:
            out.append((month_from_index(first), month_from_index(first + length - 1)))
            first += stride
        if not out:
            raise DataError("no window fits inside the data")
        return out


@dataclass(frozen=True, eq=False)
class SweepEntry:
    window: tuple[Month, Month]
    decomposition: KoopmanDecomposition
    labels: list


def default_workers() -> int:
    env = os.environ.get("KMDTOOL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DataError(f"KMDTOOL_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def window_sweep(
    data: SnapshotMatrix,
    spec: WindowSpec,
    algorithm: Algorithm | str = Algorithm.COMPANION,
    workers: int | None = None,
    eps_eig: float = EPS_EIG,
    decay_floor_months: float = DECAY_FLOOR_MONTHS,
    top_decay: int = TOP_DECAY,
    **engine_kwargs,
) -> list[SweepEntry]:
    """Decompose and classify every window; results ordered by window start."""
    windows = spec.windows(data)

    def run(window):
        d = decompose(data.window(*window), algorithm, **engine_kwargs)
        return SweepEntry(window, d, classify_modes(d, eps_eig, decay_floor_months, top_decay))

    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(windows) == 1:
        return [run(w) for w in windows]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, windows))


def write_labels(path: str | Path, entries: list[tuple[tuple[Month, Month], list[ModeLabel]]]) -> Path:
    rows = [lab.to_dict(format_window(w)) for w, labels in entries for lab in labels]
    path = Path(path)
    path.write_text(json.dumps(rows, indent=1))
    return path


def label_summary(labels: list[ModeLabel]) -> dict:
    out: dict = {}
    for kind in ModeKind:
        hits = find_label(labels, kind)
        if kind is ModeKind.OTHER:
            out[kind.value] = len(hits)
        else:
            out[kind.value] = [lab.mode_index for lab in hits]
    return out


def norms_by_kind(entries: list[SweepEntry], kind: ModeKind) -> np.ndarray:
    """Largest labelled norm of ``kind`` per window (NaN where absent)."""
    out = np.full(len(entries), np.nan)
    for i, e in enumerate(entries):
        hits = find_label(e.labels, kind)
        if hits:
            out[i] = hits[0].l2_norm
    return out
