"""Koopman eigenvalues and modes from a snapshot matrix.

Two independent algorithm families are provided:

* :func:`decompose_companion` -- the Krylov/companion-matrix construction. The
  last snapshot is regressed on the earlier ones, the companion matrix of the
  regression coefficients yields the eigenvalues, and the modes come from a
  Vandermonde fit of the snapshots.
* :func:`decompose_exact_dmd` -- SVD-based exact dynamic mode decomposition.

Both return a :class:`KoopmanDecomposition` whose modes are pre-multiplied by
their amplitudes, so snapshot ``k`` (1-based) is ``sum_j lam_j**(k-1) v_j``.

From ``N`` snapshots a one-step method yields at most ``N - 1`` eigenvalues.
"""

from __future__ import annotations

import cmath
import enum
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from kmdtool.errors import DataError, IncomparableError, NumericalError
from kmdtool.grid_data import Month, SnapshotMatrix, format_window, parse_window

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps
REPEATED_TOL = 1e-10
CONJUGATE_TOL = 1e-9


class Algorithm(str, enum.Enum):
    COMPANION = "companion"
    EXACT_DMD = "exact-dmd"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class EigenvalueInfo:
    """Continuous-time reading of one discrete eigenvalue (time unit: months).

    ``omega`` is in cycles per month so ``tau_osc = 1 / omega`` is a period in
    months; ``tau_decay`` is signed (negative for decaying modes).
    """

    lambda_discrete: complex
    lambda_continuous: complex
    omega: float
    tau_osc: float
    tau_decay: float


def derive_eigen_info(lambda_discrete: complex, dt: float = 1.0) -> EigenvalueInfo:
    lam = complex(lambda_discrete)
    if lam == 0:
        raise NumericalError("zero eigenvalue has no continuous-time counterpart")
    lam_c = cmath.log(lam) / dt
    omega = abs(lam_c.imag) / (2 * math.pi)
    tau_osc = math.inf if omega == 0 else 1.0 / omega
    tau_decay = math.inf if lam_c.real == 0 else 1.0 / lam_c.real
    return EigenvalueInfo(lam, lam_c, omega, tau_osc, tau_decay)


@dataclass(frozen=True, eq=False)
class KoopmanMode:
    shape: np.ndarray

    @property
    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.shape))


@dataclass(frozen=True, eq=False)
class KoopmanDecomposition:
    """Eigenvalues with index-paired, amplitude-folded modes.

    ``modes`` is mode-major: ``modes[j]`` is the length-``n_pixels`` vector
    paired with ``eigenvalues[j]``. Modes are ordered by decreasing norm with
    conjugate pairs adjacent (positive imaginary part first).
    """

    eigenvalues: np.ndarray
    modes: np.ndarray
    algorithm: Algorithm
    window: tuple[Month, Month]
    n_steps: int
    residual_norm: float
    rank: int
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=complex).ravel()
        modes = np.asarray(self.modes, dtype=complex)
        if modes.ndim != 2 or modes.shape[0] != lam.size:
            raise DataError(
                f"{lam.size} eigenvalues but modes have shape {modes.shape}"
            )
        for arr in (lam, modes):
            arr.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    @property
    def n_pixels(self) -> int:
        return self.modes.shape[1]

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.modes, axis=1)

    @property
    def eigen_info(self) -> list[EigenvalueInfo]:
        return [derive_eigen_info(lam) for lam in self.eigenvalues]

    def mode(self, j: int) -> KoopmanMode:
        return KoopmanMode(self.modes[j])

    def __len__(self):
        return self.n_modes


# ---------------------------------------------------------------------------
# shared helpers

def _check_data(data: SnapshotMatrix) -> np.ndarray:
    if data.missing_columns:
        raise DataError("snapshot matrix still has missing months; fill them first")
    if data.n_steps < 2:
        raise DataError(f"need at least 2 snapshots, got {data.n_steps}")
    return np.asarray(data.values, dtype=float)


def _pair_conjugates(lam: np.ndarray) -> tuple[list[tuple[int, int]], list[int]]:
    """Split indices into conjugate pairs ``(pos, neg)`` and real singletons."""
    scale = max(1.0, float(np.abs(lam).max(initial=0.0)))
    real = [i for i in range(lam.size) if lam[i].imag == 0]
    pos = [i for i in range(lam.size) if lam[i].imag > 0]
    neg = set(i for i in range(lam.size) if lam[i].imag < 0)
    pairs = []
    for i in pos:
        if not neg:
            break
        j = min(neg, key=lambda n: abs(lam[n] - lam[i].conjugate()))
        if abs(lam[j] - lam[i].conjugate()) <= CONJUGATE_TOL * scale:
            pairs.append((i, j))
            neg.discard(j)
    paired = {i for p in pairs for i in p}
    real.extend(i for i in range(lam.size) if lam[i].imag != 0 and i not in paired)
    return pairs, real


def _canonicalize(lam: np.ndarray, modes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Enforce exact conjugate symmetry of pairs and sort by decreasing norm."""
    lam = np.array(lam, dtype=complex)
    modes = np.array(modes, dtype=complex)
    pairs, singles = _pair_conjugates(lam)
    groups = []
    for i, j in pairs:
        lam[j] = lam[i].conjugate()
        v = 0.5 * (modes[i] + modes[j].conjugate())
        modes[i], modes[j] = v, v.conjugate()
        groups.append((i, j))
    for i in singles:
        if lam[i].imag == 0:
            modes[i] = modes[i].real
        groups.append((i,))
    norms = np.linalg.norm(modes, axis=1)
    groups.sort(key=lambda g: (-norms[g[0]], -lam[g[0]].real, -abs(lam[g[0]].imag)))
    order = [i for g in groups for i in g]
    return lam[order], modes[order]


def _powers(lam: np.ndarray, k0: int, k1: int) -> np.ndarray:
    """``(k1 - k0 + 1, M)`` matrix of ``lam**(k-1)`` for ``k`` in ``[k0, k1]``."""
    exps = np.arange(k0 - 1, k1)[:, None]
    with np.errstate(over="ignore", invalid="ignore"):
        return np.power(lam[None, :], exps)


def _min_separation(lam: np.ndarray) -> float:
    if lam.size < 2:
        return math.inf
    d = np.abs(lam[:, None] - lam[None, :])
    d[np.diag_indices_from(d)] = np.inf
    return float(d.min())


# ---------------------------------------------------------------------------
# companion / Arnoldi-type backend

def decompose_companion(
    data: SnapshotMatrix, rank_tol: float | None = None
) -> KoopmanDecomposition:
    """Companion-matrix Koopman decomposition.

    Parameters
    ----------
    data : SnapshotMatrix
        ``Np x N`` snapshots, ``Np >= N``.
    rank_tol : float, optional
        Relative threshold on the diagonal of the QR factor of the Krylov
        sequence ``x_1 .. x_{N-1}``; the sequence is truncated at the first
        column whose new direction falls below it. Defaults to
        ``max(Np, N) * eps``.

    Returns
    -------
    KoopmanDecomposition
        ``r`` eigenvalues, where ``r <= N - 1`` is the effective Krylov rank.
    """
    X = _check_data(data)
    n_pixels, n_steps = X.shape
    if n_pixels < n_steps:
        raise DataError(
            f"companion method needs tall data (Np >= N), got {n_pixels} x {n_steps}"
        )
    K = X[:, :-1]
    Q, R = sla.qr(K, mode="economic")
    diag = np.abs(np.diag(R))
    if diag.max(initial=0.0) == 0:
        raise NumericalError("snapshot matrix is identically zero")
    rel = max(n_pixels, n_steps) * EPS if rank_tol is None else rank_tol
    small = np.flatnonzero(diag <= rel * diag.max())
    rank = int(small[0]) if small.size else K.shape[1]
    notes: dict = {"krylov_rank": rank, "companion_dim": rank}
    if rank < K.shape[1]:
        log.info("Krylov sequence truncated to effective rank %d of %d", rank, K.shape[1])

    target = X[:, rank]
    coef = sla.solve_triangular(R[:rank, :rank], Q[:, :rank].T @ target)
    companion = np.zeros((rank, rank))
    companion[1:, :-1] = np.eye(rank - 1)
    companion[:, -1] = coef
    lam = sla.eigvals(companion)

    vander = _powers(lam, 1, n_steps - 1)
    if rank == K.shape[1] and _min_separation(lam) > REPEATED_TOL:
        try:
            modes = sla.solve(vander, K.T)
            notes["mode_fit"] = "vandermonde"
        except (sla.LinAlgError, ValueError):
            modes = None
    else:
        modes = None
    if modes is None:
        modes = sla.lstsq(vander, K.T.astype(complex), cond=REPEATED_TOL)[0]
        notes["mode_fit"] = "least-squares"
    if not np.all(np.isfinite(modes)):
        raise NumericalError("Vandermonde mode fit produced non-finite values")

    lam, modes = _canonicalize(lam, modes)
    last = (_powers(lam, n_steps, n_steps) @ modes).ravel()
    residual = float(np.linalg.norm(X[:, -1] - last.real))
    return KoopmanDecomposition(
        lam, modes, Algorithm.COMPANION, (data.start, data.end), n_steps, residual, rank, notes
    )


# ---------------------------------------------------------------------------
# exact DMD backend

def svht_rank(s: np.ndarray, shape: tuple[int, int]) -> int:
    """Optimal hard-threshold rank for white noise of unknown level.

    Gavish & Donoho (2014): keep singular values above
    ``omega(beta) * median(s)`` with the cubic approximation of ``omega``.
    """
    m, n = sorted(shape)
    beta = m / n
    omega = 0.56 * beta**3 - 0.95 * beta**2 + 1.82 * beta + 1.43
    return max(1, int(np.count_nonzero(s > omega * np.median(s))))


def decompose_exact_dmd(
    data: SnapshotMatrix, rank_truncation: int | float | str | None = None
) -> KoopmanDecomposition:
    """Exact DMD with amplitudes folded into the modes.

    Parameters
    ----------
    data : SnapshotMatrix
    rank_truncation : int, float or "svht", optional
        An integer keeps at most that many singular values; a float in
        ``(0, 1]`` keeps the fewest singular values reaching that fraction of
        the total energy; ``"svht"`` picks the rank by optimal hard
        thresholding (:func:`svht_rank`), for noisy data. Singular values below
        ``max(Np, N) * eps * s_max`` are always dropped.
    """
    X_all = _check_data(data)
    n_pixels, n_steps = X_all.shape
    X, Y = X_all[:, :-1], X_all[:, 1:]
    U, s, Vh = sla.svd(X, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise NumericalError("snapshot matrix is identically zero")
    numeric_rank = int(np.count_nonzero(s > max(n_pixels, n_steps) * EPS * s[0]))
    rank = numeric_rank
    notes: dict = {"numeric_rank": numeric_rank}
    if isinstance(rank_truncation, str):
        if rank_truncation != "svht":
            raise DataError(f"unknown rank truncation {rank_truncation!r}")
        rank = min(rank, svht_rank(s, X.shape))
        notes["svht_rank"] = rank
    elif rank_truncation is not None:
        if isinstance(rank_truncation, (int, np.integer)) and not isinstance(rank_truncation, bool):
            if rank_truncation < 1:
                raise DataError("rank truncation must be >= 1")
            rank = min(rank, int(rank_truncation))
        else:
            frac = float(rank_truncation)
            if not 0 < frac <= 1:
                raise DataError("energy threshold must lie in (0, 1]")
            energy = np.cumsum(s**2) / np.sum(s**2)
            rank = min(rank, int(np.searchsorted(energy, frac - 1e-15)) + 1)
    notes["svd_truncated"] = int(s.size - rank)
    if rank < s.size:
        log.info("SVD truncated to rank %d of %d", rank, s.size)

    U, s, V = U[:, :rank], s[:rank], Vh[:rank].conj().T
    B = (Y @ V) / s
    atilde = U.conj().T @ B
    mu, W = sla.eig(atilde)
    keep = np.abs(mu) > rank * EPS * max(1.0, float(np.abs(mu).max()))
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} zero-eigenvalue DMD modes", RuntimeWarning)
        notes["zero_modes_dropped"] = int((~keep).sum())
        mu, W = mu[keep], W[:, keep]
    if mu.size == 0:
        raise NumericalError("all DMD eigenvalues are zero")
    phi = (B @ W) / mu
    amplitude = sla.lstsq(phi, X[:, 0].astype(complex))[0]
    modes = (phi * amplitude).T

    lam, modes = _canonicalize(mu, modes)
    fit = U @ (atilde @ (U.conj().T @ X))
    residual = float(np.linalg.norm(Y - fit.real))
    return KoopmanDecomposition(
        lam, modes, Algorithm.EXACT_DMD, (data.start, data.end), n_steps, residual, rank, notes
    )


def decompose(
    data: SnapshotMatrix, algorithm: Algorithm | str = Algorithm.COMPANION, **kwargs
) -> KoopmanDecomposition:
    algorithm = Algorithm(algorithm)
    if algorithm is Algorithm.COMPANION:
        return decompose_companion(data, **kwargs)
    return decompose_exact_dmd(data, **kwargs)


# ---------------------------------------------------------------------------
# agreement between backends

@dataclass
class AgreementReport:
    tol: float
    max_distance: float
    max_angle: float
    n_matched: int
    unmatched_a: int
    unmatched_b: int
    pairs: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_distance <= self.tol

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "passed": self.passed,
            "max_distance": self.max_distance,
            "max_angle_rad": self.max_angle,
            "n_matched": self.n_matched,
            "unmatched_a": self.unmatched_a,
            "unmatched_b": self.unmatched_b,
            "pairs": [
                {"a": i, "b": j, "distance": d, "angle_rad": ang} for i, j, d, ang in self.pairs
            ],
        }


def match_eigenvalues(a: np.ndarray, b: np.ndarray) -> list[tuple[int, int, float]]:
    """Greedy nearest-first matching of two eigenvalue sets."""
    a, b = np.asarray(a, dtype=complex), np.asarray(b, dtype=complex)
    if a.size == 0 or b.size == 0:
        return []
    dist = np.abs(a[:, None] - b[None, :])
    order = np.argsort(dist, axis=None, kind="stable")
    used_a, used_b, pairs = set(), set(), []
    for flat in order:
        i, j = divmod(int(flat), b.size)
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j, float(dist[i, j])))
        if len(pairs) == min(a.size, b.size):
            break
    return pairs


def _significant(d: KoopmanDecomposition, floor: float) -> np.ndarray:
    norms = d.norms
    return np.flatnonzero(norms > floor * norms.max(initial=0.0))


def cross_validate(
    a: KoopmanDecomposition,
    b: KoopmanDecomposition,
    tol: float = 1e-6,
    amplitude_floor: float = 1e-8,
) -> AgreementReport:
    """Compare two decompositions of the same window.

    Only modes whose norm exceeds ``amplitude_floor`` times the largest mode
    norm of their decomposition take part; modes below the floor carry no
    data and their eigenvalues are arbitrary.
    """
    if a.window != b.window or (a.n_pixels, a.n_steps) != (b.n_pixels, b.n_steps):
        raise IncomparableError(
            f"decompositions are incomparable: {format_window(a.window)} "
            f"{a.n_pixels}x{a.n_steps} vs {format_window(b.window)} {b.n_pixels}x{b.n_steps}"
        )
    ia, ib = _significant(a, amplitude_floor), _significant(b, amplitude_floor)
    matches = match_eigenvalues(a.eigenvalues[ia], b.eigenvalues[ib])
    pairs = []
    for i, j, d in matches:
        va, vb = a.modes[ia[i]], b.modes[ib[j]]
        cos = abs(np.vdot(va, vb)) / (np.linalg.norm(va) * np.linalg.norm(vb))
        pairs.append((int(ia[i]), int(ib[j]), d, float(np.arccos(min(1.0, cos)))))
    return AgreementReport(
        tol=tol,
        max_distance=max((p[2] for p in pairs), default=0.0),
        max_angle=max((p[3] for p in pairs), default=0.0),
        n_matched=len(pairs),
        unmatched_a=ia.size - len(pairs),
        unmatched_b=ib.size - len(pairs),
        pairs=pairs,
    )


# ---------------------------------------------------------------------------
# file format

def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".bin")


def write_decomposition(path: str | Path, d: KoopmanDecomposition, extra: dict | None = None) -> Path:
    """JSON header plus interleaved re/im float64 LE mode payload, mode-major."""
    header_path, bin_path = _paths(path)
    bin_path.write_bytes(np.ascontiguousarray(d.modes, dtype="<c16").tobytes())
    header = {
        "algorithm": d.algorithm.value,
        "window": format_window(d.window),
        "n_steps": d.n_steps,
        "n_pixels": d.n_pixels,
        "n_modes": d.n_modes,
        "rank": d.rank,
        "residual_norm": d.residual_norm,
        "notes": d.notes,
        "eigenvalues": [{"re_disc": lam.real, "im_disc": lam.imag} for lam in d.eigenvalues.tolist()],
    }
    if extra:
        header.update(extra)
    header_path.write_text(json.dumps(header, indent=1))
    return header_path


def read_decomposition(path: str | Path) -> KoopmanDecomposition:
    header_path, bin_path = _paths(path)
    try:
        h = json.loads(header_path.read_text())
        lam = np.array([complex(e["re_disc"], e["im_disc"]) for e in h["eigenvalues"]])
        n_modes, n_pixels = int(h["n_modes"]), int(h["n_pixels"])
        raw = np.frombuffer(bin_path.read_bytes(), dtype="<c16")
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read decomposition {header_path}: {exc}") from exc
    if raw.size != n_modes * n_pixels or lam.size != n_modes:
        raise DataError(f"{bin_path}: payload does not match header dimensions")
    return KoopmanDecomposition(
        lam,
        raw.reshape(n_modes, n_pixels),
        Algorithm(h["algorithm"]),
        parse_window(h["window"]),
        int(h["n_steps"]),
        float(h["residual_norm"]),
        int(h.get("rank", n_modes)),
        h.get("notes", {}),
    )
