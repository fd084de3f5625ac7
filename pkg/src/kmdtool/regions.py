"""Named sea-pixel regions and actual-vs-predicted regional mean series."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kmdtool.errors import DataError
from kmdtool.forecast import ForecastResult
from kmdtool.grid_data import GridMask, Month, SnapshotMatrix


@dataclass(frozen=True, eq=False)
class RegionMap:
    names: tuple
    pixels: tuple
    n_pixels: int
    hemisphere: str | None = None

    def __post_init__(self):
        if len(self.names) != len(self.pixels):
            raise DataError("region names and pixel lists differ in length")
        if len(set(self.names)) != len(self.names):
            raise DataError("duplicate region names")
        seen: dict[int, str] = {}
        clean = []
        for name, pix in zip(self.names, self.pixels):
            arr = np.unique(np.asarray(pix, dtype=np.int64))
            if arr.size and (arr[0] < 0 or arr[-1] >= self.n_pixels):
                raise DataError(f"region {name!r} has pixel indices outside 0..{self.n_pixels - 1}")
            for p in arr.tolist():
                if p in seen:
                    raise DataError(f"pixel {p} belongs to both {seen[p]!r} and {name!r}")
                seen[p] = name
            arr.setflags(write=False)
            clean.append(arr)
        object.__setattr__(self, "pixels", tuple(clean))
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self):
        return len(self.names)

    def sizes(self) -> np.ndarray:
        return np.array([p.size for p in self.pixels])


def regions_from_json(doc: dict, n_pixels: int) -> RegionMap:
    try:
        entries = doc.get("regions", [])
        names = [str(e["name"]) for e in entries]
        pixels = [list(e["pixels"]) for e in entries]
    except (AttributeError, KeyError, TypeError) as exc:
        raise DataError(f"bad region file: {exc}") from exc
    return RegionMap(tuple(names), tuple(pixels), n_pixels, doc.get("hemisphere"))


def load_regions(path: str | Path, mask: GridMask | int) -> RegionMap:
    """Read a region file; ``mask`` may be a GridMask or a sea-pixel count."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read region file {path}: {exc}") from exc
    n = mask.n_sea if isinstance(mask, GridMask) else int(mask)
    return regions_from_json(doc, n)


def write_regions(path: str | Path, regions: RegionMap) -> Path:
    doc = {
        "hemisphere": regions.hemisphere,
        "regions": [
            {"name": n, "pixels": p.tolist()} for n, p in zip(regions.names, regions.pixels)
        ],
    }
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path


@dataclass(frozen=True, eq=False)
class RegionalSeries:
    """``means[i, t]`` is the mean of region ``names[i]`` in month ``months[t]``."""

    names: tuple
    months: list
    means: np.ndarray

    def series(self, name: str) -> np.ndarray:
        return self.means[self.names.index(name)]


def regional_means(fields: SnapshotMatrix | ForecastResult, regions: RegionMap) -> RegionalSeries:
    """Arithmetic mean over each region's pixels per month; empty regions give NaN."""
    if isinstance(fields, ForecastResult):
        values, months = fields.fields, fields.timestamps
    else:
        values, months = fields.values, fields.timestamps
    if values.shape[0] != regions.n_pixels:
        raise DataError(
            f"fields have {values.shape[0]} pixels, regions expect {regions.n_pixels}"
        )
    means = np.full((len(regions), values.shape[1]), np.nan)
    for i, pix in enumerate(regions.pixels):
        if pix.size:
            means[i] = values[pix].mean(axis=0)
    return RegionalSeries(regions.names, list(months), means)


@dataclass(frozen=True, eq=False)
class RegionalComparison:
    names: tuple
    months: list
    actual: np.ndarray
    predicted: np.ndarray
    mae: np.ndarray
    rmse: np.ndarray

    def rows(self):
        for i, name in enumerate(self.names):
            for t, (year, month) in enumerate(self.months):
                yield name, year, month, self.actual[i, t], self.predicted[i, t]

    def summary(self) -> list[dict]:
        return [
            {"region": n, "mae": float(a), "rmse": float(r)}
            for n, a, r in zip(self.names, self.mae, self.rmse)
        ]


def compare_regional(actual: RegionalSeries, predicted: RegionalSeries) -> RegionalComparison:
    if actual.names != predicted.names:
        raise DataError("actual and predicted series cover different regions")
    if list(actual.months) != list(predicted.months):
        raise DataError("actual and predicted series are not aligned month by month")
    diff = np.abs(predicted.means - actual.means)
    with np.errstate(invalid="ignore"):
        mae = diff.mean(axis=1)
        rmse = np.sqrt((diff**2).mean(axis=1))
    return RegionalComparison(
        actual.names, list(actual.months), actual.means, predicted.means, mae, rmse
    )


def align(series: RegionalSeries, months: list[Month]) -> RegionalSeries:
    """Restrict ``series`` to ``months`` (all of which must be present)."""
    index = {m: t for t, m in enumerate(series.months)}
    try:
        cols = [index[tuple(m)] for m in months]
    except KeyError as exc:
        raise DataError(f"month {exc.args[0]} missing from regional series") from None
    return RegionalSeries(series.names, list(months), series.means[:, cols])


def write_comparison_csv(path: str | Path, comparison: RegionalComparison) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "year", "month", "actual_mean", "predicted_mean"])
        for name, year, month, a, p in comparison.rows():
            w.writerow([name, year, month, repr(float(a)), repr(float(p))])
    return path
