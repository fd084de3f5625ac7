"""Synthetic snapshot matrices from planted eigenvalues and modes.

Column ``k`` (1-based) of a generated matrix is
``Re(sum_j lam_j**(k-1) v_j)`` plus i.i.d. Gaussian noise. The noise for
column ``k`` is drawn from a PCG64 stream seeded with ``(seed, k)`` so any
subset of columns can be regenerated independently.
"""

from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kmdtool.errors import DataError
from kmdtool.grid_data import (
    CONCENTRATION_RANGE,
    CellClass,
    GapSpec,
    GridMask,
    Month,
    SnapshotMatrix,
)

GENERATOR = "numpy.random.PCG64"
CONJ_TOL = 1e-12

ANNUAL = cmath.exp(2j * math.pi / 12)
DECAY_131 = math.exp(-1 / 131)


@dataclass(frozen=True, eq=False)
class PlantedMode:
    lam: complex
    shape: np.ndarray


@dataclass(frozen=True, eq=False)
class PlantedSpec:
    modes: tuple
    n_steps: int
    noise_sigma: float = 0.0
    seed: int = 0
    start: Month = (1979, 1)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Effective planted decomposition of the noiseless real signal.

    For a conjugate pair planted with shapes ``v1`` and ``v2`` the real part of
    the sum equals a pair with shapes ``(v1 + conj(v2)) / 2`` and its conjugate;
    those effective shapes are what a decomposition should recover.
    """

    eigenvalues: np.ndarray
    modes: np.ndarray
    noise_sigma: float
    seed: int
    generator: str = GENERATOR
    metadata: dict = field(default_factory=dict)

    def signal(self, k0: int, k1: int) -> np.ndarray:
        """Noiseless field for steps ``k0..k1`` (1-based, inclusive), ``Np x K``."""
        exps = np.arange(k0 - 1, k1)[None, :]
        return (self.modes.T @ np.power(self.eigenvalues[:, None], exps)).real


def _effective(modes: tuple) -> tuple[np.ndarray, np.ndarray]:
    lam = np.array([complex(m.lam) for m in modes])
    shapes = np.array([np.asarray(m.shape, dtype=complex) for m in modes])
    if shapes.ndim != 2:
        raise DataError("planted shapes must all have the same length")
    out_lam, out_modes, used = [], [], set()
    for i in range(lam.size):
        if i in used:
            continue
        used.add(i)
        if lam[i].imag == 0:
            out_lam.append(lam[i])
            out_modes.append(shapes[i].real.astype(complex))
            continue
        partner = [
            j
            for j in range(lam.size)
            if j not in used and abs(lam[j] - lam[i].conjugate()) <= CONJ_TOL * max(1, abs(lam[i]))
        ]
        if not partner:
            raise DataError(f"planted eigenvalue {lam[i]} lacks its complex conjugate")
        j = partner[0]
        used.add(j)
        v = 0.5 * (shapes[i] + shapes[j].conjugate())
        out_lam += [lam[i], lam[i].conjugate()]
        out_modes += [v, v.conjugate()]
    return np.array(out_lam), np.array(out_modes)


def generate(spec: PlantedSpec, clamp: bool = False) -> tuple[SnapshotMatrix, GroundTruth]:
    if spec.n_steps < 2:
        raise DataError("n_steps must be >= 2")
    if not spec.modes:
        raise DataError("planted spec has no modes")
    if spec.noise_sigma < 0:
        raise DataError("noise_sigma must be >= 0")
    lam, modes = _effective(spec.modes)
    if modes.shape[1] < 1:
        raise DataError("planted shapes are empty")
    truth = GroundTruth(lam, modes, float(spec.noise_sigma), int(spec.seed))
    values = truth.signal(1, spec.n_steps)
    if spec.noise_sigma > 0:
        for k in range(spec.n_steps):
            rng = np.random.Generator(np.random.PCG64([spec.seed, k]))
            values[:, k] += rng.normal(0.0, spec.noise_sigma, size=values.shape[0])
    if clamp:
        values = np.clip(values, *CONCENTRATION_RANGE)
    meta = {
        "source": "synthetic",
        "generator": GENERATOR,
        "seed": int(spec.seed),
        "noise_sigma": float(spec.noise_sigma),
    }
    return SnapshotMatrix(values, spec.start, metadata=meta), truth


# ---------------------------------------------------------------------------
# canned specs

def random_shape(rng: np.random.Generator, n_pixels: int, complex_valued: bool, scale: float = 10.0):
    v = rng.normal(size=n_pixels)
    if complex_valued:
        v = v + 1j * rng.normal(size=n_pixels)
    return scale * v / np.linalg.norm(v) * math.sqrt(n_pixels) / 4


def random_eigenvalues(
    rng: np.random.Generator, n_eigs: int, r_min: float = 0.5, r_max: float = 0.99,
    min_sep: float = 0.05,
) -> list[complex]:
    """Conjugate-closed set of ``n_eigs`` distinct eigenvalues in the unit disk."""
    n_pairs = int(rng.integers(0, n_eigs // 2 + 1))
    n_real = n_eigs - 2 * n_pairs
    out: list[complex] = []

    def far(z):
        return all(abs(z - w) >= min_sep for w in out) and all(
            abs(z.conjugate() - w) >= min_sep for w in out
        )

    while sum(1 for z in out if z.imag > 0) < n_pairs:
        z = cmath.rect(rng.uniform(r_min, r_max), rng.uniform(0.15, math.pi - 0.15))
        if far(z) and abs(z - z.conjugate()) >= min_sep:
            out += [z, z.conjugate()]
    while len(out) < n_eigs:
        z = complex(rng.choice([-1, 1]) * rng.uniform(r_min, r_max))
        if far(z):
            out.append(z)
    return out


def random_planted_spec(
    seed: int, n_pixels: int = 200, n_steps: int = 60, n_eigs: int | None = None,
    noise_sigma: float = 0.0,
) -> PlantedSpec:
    rng = np.random.Generator(np.random.PCG64(seed))
    if n_eigs is None:
        n_eigs = int(rng.integers(3, 10))
    modes = []
    for lam in random_eigenvalues(rng, n_eigs):
        if lam.imag < 0:
            continue
        v = random_shape(rng, n_pixels, lam.imag != 0)
        modes.append(PlantedMode(lam, v))
        if lam.imag > 0:
            modes.append(PlantedMode(lam.conjugate(), v.conjugate()))
    return PlantedSpec(tuple(modes), n_steps, noise_sigma, seed)


def three_mode_spec(
    n_pixels: int = 200, n_steps: int = 60, noise_sigma: float = 0.0, seed: int = 0,
    shape_seed: int = 12345,
) -> PlantedSpec:
    """A slow real mode at 0.98 plus a damped annual pair ``0.9 e^{+-i 2pi/12}``."""
    rng = np.random.Generator(np.random.PCG64(shape_seed))
    pair = 0.9 * ANNUAL
    v0 = random_shape(rng, n_pixels, False)
    v1 = random_shape(rng, n_pixels, True)
    modes = (
        PlantedMode(0.98, v0),
        PlantedMode(pair, v1),
        PlantedMode(pair.conjugate(), v1.conjugate()),
    )
    return PlantedSpec(modes, n_steps, noise_sigma, seed)


# ---------------------------------------------------------------------------
# sea-ice-like preset

@dataclass(frozen=True)
class SeaIcePreset:
    width: int = 48
    height: int = 48
    n_steps: int = 480
    noise_sigma: float = 0.0
    seed: int = 0
    start: Month = (1979, 1)
    mean_level: float = 40.0
    annual_amplitude: float = 15.0
    decay_amplitude: float = 30.0
    decay_width: float = 0.25
    decay_lambda: float = DECAY_131
    gap_radius: float = 4.0


def preset_mask(preset: SeaIcePreset) -> GridMask:
    """Square grid with a land block in one corner and a central polar gap."""
    h, w = preset.height, preset.width
    cells = np.full((h, w), CellClass.SEA, dtype=np.int8)
    cells[: h // 4, : w // 3] = CellClass.LAND
    cells[-2:, -w // 4 :] = CellClass.LAND
    gap = GapSpec((h - 1) / 2, (w - 1) / 2, preset.gap_radius).cells(h, w)
    cells[gap & (cells == CellClass.SEA)] = CellClass.POLAR_GAP
    return GridMask(w, h, cells)


def sea_ice_like(preset: SeaIcePreset = SeaIcePreset()) -> tuple[SnapshotMatrix, GroundTruth, GridMask]:
    """Mean + annual pair + slow decay field on a masked grid, clamped to [0, 100].

    Mode shapes are fixed smooth patterns (independent of the seed); only the
    noise depends on ``preset.seed``.
    """
    mask = preset_mask(preset)
    rc = mask.sea_index.astype(float)
    y = rc[:, 0] / max(1, preset.height - 1)
    x = rc[:, 1] / max(1, preset.width - 1)
    mean = preset.mean_level + 15.0 * (y - 0.5) + 5.0 * np.cos(2 * math.pi * x)
    annual = preset.annual_amplitude * (0.6 + 0.4 * y) * np.exp(1j * math.pi * (x - 0.5) / 3)
    decay = preset.decay_amplitude * np.exp(-((x - 0.7) ** 2 + (y - 0.3) ** 2) / preset.decay_width)
    # a planted pair with shape a contributes a*lam^k + conj; the annual field
    # amplitude is therefore 2|a|, so halve it
    modes = (
        PlantedMode(1.0, mean),
        PlantedMode(ANNUAL, annual / 2),
        PlantedMode(ANNUAL.conjugate(), np.conj(annual) / 2),
        PlantedMode(preset.decay_lambda, decay),
    )
    spec = PlantedSpec(modes, preset.n_steps, preset.noise_sigma, preset.seed, preset.start)
    matrix, truth = generate(spec, clamp=True)
    meta = dict(matrix.metadata, preset="sea-ice-like")
    matrix = SnapshotMatrix(matrix.values, matrix.start, mask_ref=mask.digest, metadata=meta)
    return matrix, truth, mask


# ---------------------------------------------------------------------------
# files

def _shape_from_json(doc: dict, n_pixels: int | None) -> np.ndarray:
    if "shape" in doc:
        return np.asarray(doc["shape"], dtype=float)
    if "shape_re" in doc:
        re = np.asarray(doc["shape_re"], dtype=float)
        im = np.asarray(doc.get("shape_im", np.zeros_like(re)), dtype=float)
        return re + 1j * im
    if "shape_random" in doc:
        if n_pixels is None:
            raise DataError("shape_random needs a top-level n_pixels")
        r = doc["shape_random"]
        rng = np.random.Generator(np.random.PCG64(int(r.get("seed", 0))))
        lam = complex(doc.get("lambda_re", 0.0), doc.get("lambda_im", 0.0))
        return random_shape(rng, n_pixels, lam.imag != 0, float(r.get("scale", 10.0)))
    if "shape_const" in doc:
        if n_pixels is None:
            raise DataError("shape_const needs a top-level n_pixels")
        return np.full(n_pixels, float(doc["shape_const"]))
    raise DataError("planted mode needs one of shape, shape_re/shape_im, shape_random, shape_const")


def spec_from_json(doc: dict) -> PlantedSpec:
    """Build a :class:`PlantedSpec` from its JSON form.

    A mode given with ``shape_random`` and a non-real eigenvalue whose
    conjugate is not listed gets the conjugate added automatically.
    """
    try:
        n_pixels = doc.get("n_pixels")
        modes = []
        for m in doc["modes"]:
            lam = complex(m["lambda_re"], m.get("lambda_im", 0.0))
            modes.append(PlantedMode(lam, _shape_from_json(m, n_pixels)))
        lams = [m.lam for m in modes]
        for m in list(modes):
            if m.lam.imag != 0 and not any(abs(z - m.lam.conjugate()) <= CONJ_TOL for z in lams):
                modes.append(PlantedMode(m.lam.conjugate(), np.conj(m.shape)))
        start = (int(doc.get("start_year", 1979)), int(doc.get("start_month", 1)))
        return PlantedSpec(
            tuple(modes), int(doc["n_steps"]), float(doc.get("noise_sigma", 0.0)),
            int(doc.get("seed", 0)), start,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad planted spec: {exc}") from exc


def write_truth(path: str | Path, truth: GroundTruth) -> Path:
    """Ground truth in the decomposition file layout (JSON header + mode payload)."""
    path = Path(path).with_suffix("")
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(truth.modes, dtype="<c16").tobytes())
    header = {
        "algorithm": "planted",
        "n_modes": int(truth.eigenvalues.size),
        "n_pixels": int(truth.modes.shape[1]),
        "noise_sigma": truth.noise_sigma,
        "seed": truth.seed,
        "generator": truth.generator,
        "eigenvalues": [{"re_disc": z.real, "im_disc": z.imag} for z in truth.eigenvalues.tolist()],
    }
    out = path.with_suffix(".json")
    out.write_text(json.dumps(header, indent=1))
    return out


def read_truth(path: str | Path) -> GroundTruth:
    path = Path(path).with_suffix("")
    h = json.loads(path.with_suffix(".json").read_text())
    lam = np.array([complex(e["re_disc"], e["im_disc"]) for e in h["eigenvalues"]])
    modes = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<c16")
    return GroundTruth(
        lam, modes.reshape(lam.size, int(h["n_pixels"])), h["noise_sigma"], h["seed"], h["generator"]
    )
