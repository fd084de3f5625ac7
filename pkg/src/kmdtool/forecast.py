"""Reconstruction and prediction from the discrete modal sum, and scoring."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kmdtool.engine import Algorithm, KoopmanDecomposition, _powers, decompose
from kmdtool.errors import DataError, NumericalError
from kmdtool.grid_data import (
    CONCENTRATION_RANGE,
    Month,
    SnapshotMatrix,
    add_months,
    format_month,
    month_from_index,
    month_index,
    read_matrix,
    read_matrix_header,
    write_matrix,
)

REALNESS_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class ForecastResult:
    """Modal-sum fields ``C_k`` for ``k`` in ``k_range`` (1-based, inclusive).

    ``fields`` is ``Np x K`` and clamped to [0, 100] when ``clamped`` is set;
    ``raw`` always holds the unclamped real part.
    """

    fields: np.ndarray
    raw: np.ndarray
    k_range: tuple[int, int]
    n_steps: int
    start: Month
    clamp_applied: np.ndarray
    clamped: bool
    imag_ratio: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def ks(self) -> np.ndarray:
        return np.arange(self.k_range[0], self.k_range[1] + 1)

    @property
    def is_prediction(self) -> np.ndarray:
        return self.ks > self.n_steps

    @property
    def timestamps(self) -> list[Month]:
        return [add_months(self.start, int(k) - 1) for k in self.ks]

    def as_matrix(self, raw: bool = False) -> SnapshotMatrix:
        """The fields as a snapshot matrix starting at the first forecast month."""
        return SnapshotMatrix(
            self.raw if raw else self.fields, self.timestamps[0], metadata=dict(self.metadata)
        )


def reconstruct(
    decomp: KoopmanDecomposition,
    k_range: tuple[int, int],
    clamp: bool = True,
    top_k: int | None = None,
) -> ForecastResult:
    """Evaluate ``C_k = sum_j lam_j**(k-1) v_j`` for each ``k`` in ``k_range``.

    Steps ``k <= n_steps`` reproduce the decomposed window; later steps are
    predictions. ``top_k`` keeps only the ``top_k`` largest-norm modes (pairs
    are kept whole).
    """
    if decomp.n_modes == 0:
        raise DataError("decomposition has no modes")
    k0, k1 = int(k_range[0]), int(k_range[1])
    if k0 < 1 or k1 < k0:
        raise DataError(f"invalid k range {k_range}")
    lam, modes = decomp.eigenvalues, decomp.modes
    if top_k is not None:
        keep = _top_modes(decomp, top_k)
        lam, modes = lam[keep], modes[keep]
    total = modes.T @ _powers(lam, k0, k1).T
    if not np.all(np.isfinite(total)):
        raise NumericalError("modal sum overflowed")
    raw = np.ascontiguousarray(total.real)
    re_norm = float(np.linalg.norm(raw))
    imag_ratio = float(np.linalg.norm(total.imag) / re_norm) if re_norm else 0.0
    if imag_ratio > REALNESS_TOL:
        raise NumericalError(
            f"modal sum is not real (imag/real norm {imag_ratio:.2e}); unpaired conjugate modes?"
        )
    if clamp:
        lo, hi = CONCENTRATION_RANGE
        out = np.clip(raw, lo, hi)
        counts = np.count_nonzero((raw < lo) | (raw > hi), axis=0)
    else:
        out, counts = raw, np.zeros(raw.shape[1], dtype=int)
    meta = {"algorithm": decomp.algorithm.value, "n_modes_used": int(lam.size)}
    return ForecastResult(
        out, raw, (k0, k1), decomp.n_steps, decomp.window[0], counts, clamp, imag_ratio, meta
    )


def _top_modes(decomp: KoopmanDecomposition, top_k: int) -> np.ndarray:
    if top_k < 1:
        raise DataError("top_k must be >= 1")
    lam = decomp.eigenvalues
    keep: list[int] = []
    # modes are stored norm-descending with conjugate partners adjacent
    j = 0
    while j < lam.size and len(keep) < top_k:
        keep.append(j)
        if lam[j].imag > 0 and j + 1 < lam.size and lam[j + 1] == lam[j].conjugate():
            keep.append(j + 1)
            j += 1
        j += 1
    return np.array(keep)


def predict_horizon(
    data: SnapshotMatrix,
    window: tuple[Month, Month],
    algorithm: Algorithm | str,
    horizon_months: int,
    clamp: bool = True,
    top_k: int | None = None,
    **engine_kwargs,
) -> ForecastResult:
    """Decompose ``window`` of ``data`` and predict the following months."""
    if horizon_months < 1:
        raise DataError("horizon must be at least one month")
    sub = data.window(*window)
    decomp = decompose(sub, algorithm, **engine_kwargs)
    n = decomp.n_steps
    return reconstruct(decomp, (n + 1, n + horizon_months), clamp=clamp, top_k=top_k)


@dataclass(frozen=True, eq=False)
class ErrorReport:
    months: list
    per_pixel_abs_diff: np.ndarray
    rmse: np.ndarray
    mean_abs_error: np.ndarray

    def rows(self):
        for m, r, a in zip(self.months, self.rmse, self.mean_abs_error):
            yield format_month(m), float(r), float(a)


def score(
    predicted: ForecastResult | SnapshotMatrix,
    actual: SnapshotMatrix,
    months: list[Month] | None = None,
) -> ErrorReport:
    """Per-pixel absolute differences and per-month RMSE / MAE over sea pixels.

    ``months`` defaults to every month covered by both inputs.
    """
    if isinstance(predicted, ForecastResult):
        pred_values, pred_start = predicted.fields, predicted.timestamps[0]
    else:
        pred_values, pred_start = predicted.values, predicted.start
    if pred_values.shape[0] != actual.n_pixels:
        raise DataError(
            f"pixel count mismatch: predicted {pred_values.shape[0]}, actual {actual.n_pixels}"
        )
    p0, a0 = month_index(pred_start), month_index(actual.start)
    if months is None:
        lo = max(p0, a0)
        hi = min(p0 + pred_values.shape[1], a0 + actual.n_steps) - 1
        if hi < lo:
            raise DataError("predicted and actual months do not overlap")
        idx = list(range(lo, hi + 1))
    else:
        idx = [month_index(m) for m in months]
    pcols = [i - p0 for i in idx]
    acols = [i - a0 for i in idx]
    if any(not 0 <= c < pred_values.shape[1] for c in pcols) or any(
        not 0 <= c < actual.n_steps for c in acols
    ):
        raise DataError("requested months are not covered by both predicted and actual data")
    if any(c in actual.missing_columns for c in acols):
        raise DataError("actual data is missing some compared months")
    diff = np.abs(pred_values[:, pcols] - actual.values[:, acols])
    rmse = np.sqrt(np.mean(diff**2, axis=0))
    mae = np.mean(diff, axis=0)
    months_out = [month_from_index(i) for i in idx]
    return ErrorReport(months_out, diff, rmse, mae)


# ---------------------------------------------------------------------------
# files

def write_forecast(path: str | Path, result: ForecastResult, mask_file: str | None = None) -> Path:
    """Snapshot-matrix layout plus ``is_prediction`` flags; raw values go to ``<path>_raw``."""
    path = Path(path).with_suffix("")
    extra = {
        "is_prediction": result.is_prediction.tolist(),
        "k_range": list(result.k_range),
        "window_steps": result.n_steps,
        "window_start": format_month(result.start),
        "clamped": result.clamped,
        "clamp_applied": result.clamp_applied.tolist(),
        "imag_ratio": result.imag_ratio,
        "raw_file": path.name + "_raw",
    }
    write_matrix(path, result.as_matrix(), mask_file=mask_file, extra=extra)
    write_matrix(path.parent / (path.name + "_raw"), result.as_matrix(raw=True), mask_file=mask_file)
    return path.with_suffix(".json")


def read_forecast(path: str | Path) -> ForecastResult:
    path = Path(path).with_suffix("")
    header = read_matrix_header(path)
    fields = read_matrix(path).values
    raw_name = header.get("raw_file")
    raw = read_matrix(path.parent / raw_name).values if raw_name else fields
    try:
        k0, k1 = header["k_range"]
        wy, wm = header["window_start"].split("-")
        return ForecastResult(
            np.array(fields), np.array(raw), (int(k0), int(k1)), int(header["window_steps"]),
            (int(wy), int(wm)), np.array(header["clamp_applied"]), bool(header["clamped"]),
            float(header.get("imag_ratio", 0.0)), header.get("metadata") or {},
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: not a forecast file ({exc})") from exc


def write_pgm(path: str | Path, image: np.ndarray, fill: int = 0) -> Path:
    """8-bit binary PGM; values 0..100 map to 0..255, NaN to ``fill``."""
    image = np.asarray(image, dtype=float)
    scaled = np.clip(np.nan_to_num(image, nan=-1.0), 0, 100) * 255 / 100
    out = np.rint(scaled).astype(np.uint8)
    out[np.isnan(image)] = fill
    h, w = out.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + out.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise DataError(f"{path}: not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data[m.end():], dtype=np.uint8, count=w * h).reshape(h, w)
