"""Masked raster time series: masks, flattening to snapshot matrices, gap repair.

A raster is one monthly image. A :class:`GridMask` classes every cell as sea,
land, polar gap or off-grid, and its row-major list of sea cells fixes the row
order of every :class:`SnapshotMatrix` flattened against it.
"""

from __future__ import annotations

import enum
import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from kmdtool.errors import DataError

Month = tuple[int, int]

CONCENTRATION_RANGE = (0.0, 100.0)


class GapWarning(UserWarning):
    """Raised (as a warning) when consecutive months had to be interpolated."""


class CellClass(enum.IntEnum):
    SEA = 0
    LAND = 1
    POLAR_GAP = 2
    OFF_GRID = 3


# ---------------------------------------------------------------------------
# calendar months

def month_index(month: Month) -> int:
    year, mon = month
    if not 1 <= mon <= 12:
        raise DataError(f"month out of range: {month}")
    return year * 12 + mon - 1


def month_from_index(index: int) -> Month:
    return (index // 12, index % 12 + 1)


def add_months(month: Month, n: int) -> Month:
    return month_from_index(month_index(month) + n)


def parse_month(text: str) -> Month:
    """Parse ``YYYY-MM``."""
    try:
        year, mon = text.strip().split("-")
        month = (int(year), int(mon))
    except ValueError:
        raise DataError(f"bad month {text!r}, expected YYYY-MM") from None
    month_index(month)
    return month


def format_month(month: Month) -> str:
    return f"{month[0]:04d}-{month[1]:02d}"


def parse_window(text: str) -> tuple[Month, Month]:
    """Parse an inclusive ``YYYY-MM:YYYY-MM`` window."""
    try:
        a, b = text.split(":")
    except ValueError:
        raise DataError(f"bad window {text!r}, expected YYYY-MM:YYYY-MM") from None
    start, end = parse_month(a), parse_month(b)
    if month_index(end) < month_index(start):
        raise DataError(f"window {text!r} ends before it starts")
    return start, end


def format_window(window: tuple[Month, Month]) -> str:
    return f"{format_month(window[0])}:{format_month(window[1])}"


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class GapSpec:
    """Circular excluded region; cells within ``radius`` (Euclidean, in cells)
    of ``(center_row, center_col)`` are polar gap."""

    center_row: float
    center_col: float
    radius: float

    def cells(self, height: int, width: int) -> np.ndarray:
        rows, cols = np.mgrid[0:height, 0:width]
        dist2 = (rows - self.center_row) ** 2 + (cols - self.center_col) ** 2
        return dist2 <= self.radius**2


@dataclass(frozen=True, eq=False)
class GridMask:
    width: int
    height: int
    cells: np.ndarray

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int8)
        if cells.shape != (self.height, self.width):
            raise DataError(
                f"mask cells have shape {cells.shape}, expected {(self.height, self.width)}"
            )
        if cells.size and (cells.min() < 0 or cells.max() > max(CellClass)):
            raise DataError("mask contains unknown cell classes")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @cached_property
    def flat_sea_index(self) -> np.ndarray:
        """Flat (row-major) raster index of every sea pixel, in pixel order."""
        idx = np.flatnonzero(self.cells.ravel() == CellClass.SEA)
        idx.setflags(write=False)
        return idx

    @property
    def sea_index(self) -> np.ndarray:
        """``(Np, 2)`` array of ``(row, col)`` for each sea pixel."""
        return np.column_stack(np.unravel_index(self.flat_sea_index, (self.height, self.width)))

    @property
    def n_sea(self) -> int:
        return int(self.flat_sea_index.size)

    def count(self, kind: CellClass) -> int:
        return int(np.count_nonzero(self.cells == kind))

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.width}x{self.height}".encode())
        h.update(self.cells.tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, GridMask):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(
            self.cells, other.cells
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class RasterSnapshot:
    """One monthly image. ``missing`` flags cells without an observation."""

    width: int
    height: int
    values: np.ndarray
    timestamp: Month | None = None
    missing: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.height, self.width):
            raise DataError(
                f"raster values have shape {values.shape}, expected {(self.height, self.width)}"
            )
        missing = (
            np.zeros(values.shape, dtype=bool)
            if self.missing is None
            else np.array(self.missing, dtype=bool)
        )
        if missing.shape != values.shape:
            raise DataError("missing flags do not match raster shape")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing", missing)

    @property
    def is_empty(self) -> bool:
        """True when no cell carries an observation (a missing month)."""
        return bool(self.missing.all())


@dataclass(frozen=True, eq=False)
class SnapshotMatrix:
    """Sea pixels (rows) by consecutive months (columns).

    Columns listed in ``missing_columns`` are unobserved and hold NaN until
    :func:`fill_missing_months` repairs them; repaired columns move to
    ``filled_columns``.
    """

    values: np.ndarray
    start: Month
    mask_ref: str | None = None
    filled_columns: frozenset = frozenset()
    missing_columns: frozenset = frozenset()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DataError(f"snapshot values must be 2-D, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "start", (int(self.start[0]), int(self.start[1])))
        month_index(self.start)
        object.__setattr__(self, "filled_columns", frozenset(int(c) for c in self.filled_columns))
        object.__setattr__(self, "missing_columns", frozenset(int(c) for c in self.missing_columns))
        n = values.shape[1]
        for c in self.filled_columns | self.missing_columns:
            if not 0 <= c < n:
                raise DataError(f"column index {c} out of range for {n} steps")
        observed = np.ones(n, dtype=bool)
        observed[list(self.missing_columns)] = False
        if not np.isfinite(values[:, observed]).all():
            raise DataError("snapshot matrix contains non-finite observed values")

    @property
    def n_pixels(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def end(self) -> Month:
        return add_months(self.start, self.n_steps - 1)

    @property
    def timestamps(self) -> list[Month]:
        first = month_index(self.start)
        return [month_from_index(first + k) for k in range(self.n_steps)]

    def column_of(self, month: Month) -> int:
        col = month_index(month) - month_index(self.start)
        if not 0 <= col < self.n_steps:
            raise DataError(
                f"{format_month(month)} outside data range "
                f"{format_month(self.start)}..{format_month(self.end)}"
            )
        return col

    def window(self, start: Month, end: Month) -> "SnapshotMatrix":
        """Inclusive month sub-range as a new matrix."""
        if month_index(end) < month_index(start):
            raise DataError("window ends before it starts")
        lo, hi = self.column_of(start), self.column_of(end)
        shift = lambda cols: frozenset(c - lo for c in cols if lo <= c <= hi)  # noqa: E731
        return SnapshotMatrix(
            self.values[:, lo : hi + 1],
            start,
            mask_ref=self.mask_ref,
            filled_columns=shift(self.filled_columns),
            missing_columns=shift(self.missing_columns),
            metadata=dict(self.metadata),
        )

    def scaled(self, factor: float) -> "SnapshotMatrix":
        return replace(self, values=self.values * factor)


# ---------------------------------------------------------------------------
# operations

def build_mask(
    rasters: Sequence[RasterSnapshot],
    land_codes: Iterable[float],
    gap_spec: GapSpec | None = None,
    gap_cells: Iterable[int] | None = None,
) -> GridMask:
    """Classify every cell of a raster stack.

    A cell is land if it matches one of ``land_codes`` in any raster. Cells
    inside ``gap_spec`` (or listed by flat index in ``gap_cells``) are polar
    gap. Cells lacking an observation in some non-empty raster are off-grid.
    Everything else is sea.
    """
    if not rasters:
        raise DataError("build_mask needs at least one raster")
    codes = np.array(sorted(set(float(c) for c in land_codes)))
    if codes.size == 0:
        raise DataError("land_codes must be non-empty")
    height, width = rasters[0].height, rasters[0].width
    land = np.zeros((height, width), dtype=bool)
    off = np.zeros((height, width), dtype=bool)
    for r in rasters:
        if (r.height, r.width) != (height, width):
            raise DataError(
                f"raster {r.timestamp} is {r.height}x{r.width}, expected {height}x{width}"
            )
        if r.is_empty:
            continue
        land |= ~r.missing & np.isin(r.values, codes)
        off |= r.missing
    gap = np.zeros((height, width), dtype=bool)
    if gap_spec is not None:
        gap |= gap_spec.cells(height, width)
    if gap_cells is not None:
        flat = np.asarray(list(gap_cells), dtype=int)
        if flat.size and (flat.min() < 0 or flat.max() >= height * width):
            raise DataError("gap cell index out of range")
        gap.ravel()[flat] = True

    cells = np.full((height, width), CellClass.SEA, dtype=np.int8)
    cells[off] = CellClass.OFF_GRID
    cells[gap] = CellClass.POLAR_GAP
    cells[land] = CellClass.LAND
    if not np.any(cells == CellClass.SEA):
        raise DataError("mask leaves no sea cells")
    return GridMask(width, height, cells)


def flatten(rasters: Sequence[RasterSnapshot], mask: GridMask) -> SnapshotMatrix:
    """Stack rasters into a pixels-by-months matrix in sea-index order.

    Months absent from the sequence, or present but entirely unobserved, become
    ``missing_columns`` (NaN) to be repaired by :func:`fill_missing_months`.
    """
    if not rasters:
        raise DataError("flatten needs at least one raster")
    for r in rasters:
        if r.timestamp is None:
            raise DataError("raster has no timestamp")
        if (r.height, r.width) != (mask.height, mask.width):
            raise DataError(
                f"raster {format_month(r.timestamp)} is {r.height}x{r.width}, "
                f"mask is {mask.height}x{mask.width}"
            )
    idx = [month_index(r.timestamp) for r in rasters]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise DataError("raster timestamps are not strictly increasing")

    first = idx[0]
    n_steps = idx[-1] - first + 1
    values = np.full((mask.n_sea, n_steps), np.nan)
    missing = set(range(n_steps)) - {i - first for i in idx}
    sea = mask.flat_sea_index
    lo, hi = CONCENTRATION_RANGE
    for r, i in zip(rasters, idx):
        col = i - first
        if r.is_empty:
            missing.add(col)
            continue
        if r.missing.ravel()[sea].any():
            raise DataError(
                f"raster {format_month(r.timestamp)} lacks observations at sea cells"
            )
        column = r.values.ravel()[sea]
        if column.min() < lo or column.max() > hi:
            raise DataError(
                f"raster {format_month(r.timestamp)} has sea values outside [{lo}, {hi}]"
            )
        values[:, col] = column
    return SnapshotMatrix(
        values,
        month_from_index(first),
        mask_ref=mask.digest,
        missing_columns=frozenset(missing),
    )


def fill_missing_months(matrix: SnapshotMatrix, clamp: bool = True) -> SnapshotMatrix:
    """Linearly interpolate each pixel across missing months.

    Every gap needs an observed month on both sides. Runs of two or more
    consecutive missing months are filled but raise a :class:`GapWarning`.
    """
    missing = sorted(matrix.missing_columns)
    if not missing:
        return matrix
    n = matrix.n_steps
    values = np.array(matrix.values)
    runs: list[list[int]] = []
    for c in missing:
        if runs and runs[-1][-1] == c - 1:
            runs[-1].append(c)
        else:
            runs.append([c])
    for run in runs:
        left, right = run[0] - 1, run[-1] + 1
        if left < 0 or right >= n:
            raise DataError(
                f"missing month {format_month(add_months(matrix.start, run[0]))} "
                "has no observed neighbour on one side"
            )
        if len(run) > 1:
            warnings.warn(
                f"interpolating {len(run)} consecutive missing months from "
                f"{format_month(add_months(matrix.start, run[0]))}",
                GapWarning,
                stacklevel=2,
            )
        span = right - left
        for c in run:
            w = (c - left) / span
            values[:, c] = (1.0 - w) * values[:, left] + w * values[:, right]
    cols = np.array(missing)
    if clamp:
        values[:, cols] = np.clip(values[:, cols], *CONCENTRATION_RANGE)
    meta = dict(matrix.metadata, interpolation="linear")
    return replace(
        matrix,
        values=values,
        filled_columns=matrix.filled_columns | frozenset(missing),
        missing_columns=frozenset(),
        metadata=meta,
    )


def unflatten(
    field: np.ndarray, mask: GridMask, fill_value: float = np.nan, timestamp: Month | None = None
) -> RasterSnapshot:
    """Scatter a sea-pixel vector back onto the raster grid."""
    field = np.asarray(field, dtype=float)
    if field.shape != (mask.n_sea,):
        raise DataError(f"field has shape {field.shape}, mask has {mask.n_sea} sea pixels")
    values = np.full(mask.height * mask.width, float(fill_value))
    values[mask.flat_sea_index] = field
    return RasterSnapshot(mask.width, mask.height, values.reshape(mask.height, mask.width), timestamp)


# ---------------------------------------------------------------------------
# file formats

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _f32_bits(x) -> np.ndarray:
    return np.asarray(x, dtype="<f4").view("<u4")


def write_raster(path: str | Path, raster: RasterSnapshot, missing_value: float = -999.0) -> Path:
    path = Path(path)
    values = raster.values.astype("<f4")
    values[raster.missing] = np.float32(missing_value)
    path.write_bytes(values.tobytes(order="C"))
    year, month = raster.timestamp
    meta = {
        "width": raster.width,
        "height": raster.height,
        "year": year,
        "month": month,
        "missing_value": missing_value,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=1))
    return path


def read_raster(path: str | Path) -> RasterSnapshot:
    """Read a little-endian float32 raster and its JSON sidecar."""
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
        width, height = int(meta["width"]), int(meta["height"])
        stamp = (int(meta["year"]), int(meta["month"]))
        missing_value = meta.get("missing_value")
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read raster sidecar for {path}: {exc}") from exc
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != width * height:
        raise DataError(f"{path}: {raw.size} values, sidecar says {width}x{height}")
    raw = raw.reshape(height, width)
    if missing_value is None:
        missing = np.zeros(raw.shape, dtype=bool)
    else:
        missing = raw.view("<u4") == _f32_bits(missing_value)
    return RasterSnapshot(width, height, raw.astype(float), stamp, missing)


def read_raster_dir(directory: str | Path) -> list[RasterSnapshot]:
    """All ``*.bin`` rasters with sidecars in ``directory``, ordered by month."""
    directory = Path(directory)
    paths = sorted(p for p in directory.glob("*.bin") if _sidecar(p).exists())
    if not paths:
        raise DataError(f"no rasters (*.bin + *.json) found in {directory}")
    rasters = [read_raster(p) for p in paths]
    rasters.sort(key=lambda r: month_index(r.timestamp))
    return rasters


def write_mask(path: str | Path, mask: GridMask) -> Path:
    flat = mask.cells.ravel()
    doc = {
        "width": mask.width,
        "height": mask.height,
        "land_cells": np.flatnonzero(flat == CellClass.LAND).tolist(),
        "gap_cells": np.flatnonzero(flat == CellClass.POLAR_GAP).tolist(),
        "offgrid_cells": np.flatnonzero(flat == CellClass.OFF_GRID).tolist(),
    }
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path


def read_mask(path: str | Path) -> GridMask:
    try:
        doc = json.loads(Path(path).read_text())
        width, height = int(doc["width"]), int(doc["height"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read mask file {path}: {exc}") from exc
    cells = np.full(width * height, CellClass.SEA, dtype=np.int8)
    for key, kind in (
        ("offgrid_cells", CellClass.OFF_GRID),
        ("gap_cells", CellClass.POLAR_GAP),
        ("land_cells", CellClass.LAND),
    ):
        flat = np.asarray(doc.get(key, []), dtype=int)
        if flat.size and (flat.min() < 0 or flat.max() >= cells.size):
            raise DataError(f"{path}: {key} index out of range")
        cells[flat] = kind
    return GridMask(width, height, cells.reshape(height, width))


def _matrix_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".bin")


def write_matrix(
    path: str | Path, matrix: SnapshotMatrix, mask_file: str | None = None, extra: dict | None = None
) -> Path:
    """Write ``<path>.bin`` (float64 LE, column-major) and ``<path>.json`` header."""
    header_path, bin_path = _matrix_paths(path)
    bin_path.write_bytes(np.asarray(matrix.values, dtype="<f8").tobytes(order="F"))
    header = {
        "n_pixels": matrix.n_pixels,
        "n_steps": matrix.n_steps,
        "start_year": matrix.start[0],
        "start_month": matrix.start[1],
        "mask_file": mask_file,
        "mask_ref": matrix.mask_ref,
        "filled_columns": sorted(matrix.filled_columns),
        "missing_columns": sorted(matrix.missing_columns),
        "metadata": matrix.metadata,
    }
    if extra:
        header.update(extra)
    header_path.write_text(json.dumps(header, indent=1, sort_keys=True))
    return header_path


def read_matrix_header(path: str | Path) -> dict:
    header_path, _ = _matrix_paths(path)
    try:
        return json.loads(header_path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read matrix header {header_path}: {exc}") from exc


def read_matrix(path: str | Path) -> SnapshotMatrix:
    header = read_matrix_header(path)
    _, bin_path = _matrix_paths(path)
    try:
        n_pixels, n_steps = int(header["n_pixels"]), int(header["n_steps"])
        start = (int(header["start_year"]), int(header["start_month"]))
        raw = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read matrix {bin_path}: {exc}") from exc
    if raw.size != n_pixels * n_steps:
        raise DataError(f"{bin_path}: {raw.size} values, header says {n_pixels}x{n_steps}")
    return SnapshotMatrix(
        raw.reshape((n_pixels, n_steps), order="F"),
        start,
        mask_ref=header.get("mask_ref"),
        filled_columns=frozenset(header.get("filled_columns", ())),
        missing_columns=frozenset(header.get("missing_columns", ())),
        metadata=header.get("metadata") or {},
    )
