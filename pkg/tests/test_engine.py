import cmath
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmdtool import engine, synth
from kmdtool.engine import (
    Algorithm,
    cross_validate,
    decompose,
    decompose_companion,
    decompose_exact_dmd,
    derive_eigen_info,
    match_eigenvalues,
    read_decomposition,
    write_decomposition,
)
from kmdtool.errors import DataError, IncomparableError, NumericalError
from kmdtool.grid_data import SnapshotMatrix

BACKENDS = [decompose_companion, decompose_exact_dmd]


def matched_error(found, planted):
    pairs = match_eigenvalues(np.asarray(planted), np.asarray(found))
    assert len(pairs) == len(planted)
    return max(d for _, _, d in pairs)


def significant(d, floor=1e-8):
    keep = d.norms > floor * d.norms.max()
    return d.eigenvalues[keep], d.modes[keep]


# eigenvalue info ----------------------------------------------------------

def test_eigen_info_identity():
    info = derive_eigen_info(1.0)
    assert info.lambda_continuous == 0
    assert math.isinf(info.tau_osc) and math.isinf(info.tau_decay)


def test_eigen_info_north_decay():
    info = derive_eigen_info(math.exp(-1 / 131))
    assert abs(info.lambda_discrete - 0.992395) < 1e-6
    assert info.tau_decay == pytest.approx(-131, abs=1e-9)
    assert info.omega == 0


def test_eigen_info_south_decay():
    info = derive_eigen_info(math.exp(-1 / 234) * cmath.exp(2j * math.pi / 238))
    assert abs(info.tau_decay) == pytest.approx(234, abs=1e-9)
    assert info.tau_osc == pytest.approx(238, abs=1e-9)


def test_eigen_info_zero():
    with pytest.raises(NumericalError):
        derive_eigen_info(0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-2, 2), st.floats(-3.1, 3.1))
def test_eigen_info_inverts_exp(re, im):
    lam_c = complex(re, im)
    info = derive_eigen_info(cmath.exp(lam_c))
    assert abs(info.lambda_continuous - lam_c) <= 1e-12 * max(1, abs(lam_c))
    assert abs(cmath.exp(info.lambda_continuous) - info.lambda_discrete) <= 1e-12 * abs(info.lambda_discrete)
    if info.omega > 1e-300:  # 1/omega overflows for subnormal frequencies
        assert info.tau_osc * info.omega == pytest.approx(1, rel=1e-14)


# companion backend ----------------------------------------------------------

@pytest.mark.parametrize("backend", BACKENDS)
def test_constant_field(backend):
    m = SnapshotMatrix(np.full((30, 12), 5.0), (2000, 1))
    d = backend(m)
    big = d.norms > 1e-10
    assert big.sum() == 1
    j = int(np.argmax(d.norms))
    assert abs(d.eigenvalues[j] - 1) < 1e-10
    np.testing.assert_allclose(d.modes[j], 5.0, atol=1e-10)


@pytest.mark.parametrize("backend", BACKENDS)
def test_planted_three_mode(backend, three_mode):
    data, truth = three_mode
    d = backend(data)
    lam, modes = significant(d)
    assert matched_error(lam, truth.eigenvalues) <= 1e-8
    for i, j, _ in match_eigenvalues(truth.eigenvalues, lam):
        v = truth.modes[i]
        assert np.linalg.norm(modes[j] - v) <= 1e-6 * np.linalg.norm(v)


def test_companion_mode_count_is_n_minus_one(rng):
    data = SnapshotMatrix(rng.uniform(0, 100, (400, 360)), (1984, 1))
    d = decompose_companion(data)
    assert d.n_modes == 359
    assert d.notes["companion_dim"] == 359
    assert d.n_steps == 360


def test_companion_needs_tall_data(rng):
    with pytest.raises(DataError):
        decompose_companion(SnapshotMatrix(rng.normal(size=(5, 10)), (2000, 1)))


def test_too_few_steps():
    for backend in BACKENDS:
        with pytest.raises(DataError):
            backend(SnapshotMatrix(np.ones((4, 1)), (2000, 1)))


def test_missing_columns_rejected():
    v = np.ones((4, 5))
    v[:, 2] = np.nan
    with pytest.raises(DataError):
        decompose_companion(SnapshotMatrix(v, (2000, 1), missing_columns={2}))


def test_repeated_eigenvalues_fall_back(three_mode, monkeypatch):
    data, truth = three_mode
    monkeypatch.setattr(engine, "REPEATED_TOL", 10.0)
    d = decompose_companion(data)
    assert d.notes["mode_fit"] != "vandermonde"
    lam, _ = significant(d)
    assert matched_error(lam, truth.eigenvalues) <= 1e-8


# exact DMD ------------------------------------------------------------------

def test_rank_one_geometric(rng):
    u = rng.normal(size=20)
    data = SnapshotMatrix(np.outer(u, 0.5 ** np.arange(10)), (2000, 1))
    d = decompose_exact_dmd(data)
    assert d.n_modes == 1
    assert abs(d.eigenvalues[0] - 0.5) < 1e-12
    np.testing.assert_allclose(d.modes[0].real, u, atol=1e-12)


def test_annual_cosine_period():
    x = np.linspace(0, 1, 40)
    k = np.arange(48)
    values = np.outer(np.cos(2 * np.pi * x), np.cos(2 * np.pi * k / 12)) + np.outer(
        np.sin(2 * np.pi * x), np.sin(2 * np.pi * k / 12)
    )
    d = decompose_exact_dmd(SnapshotMatrix(values, (2000, 1)))
    assert d.n_modes == 2
    assert d.eigenvalues[0] == np.conj(d.eigenvalues[1])
    for info in d.eigen_info:
        assert info.tau_osc == pytest.approx(12, abs=1e-6)


def test_rank_truncation_options(three_mode):
    data, _ = three_mode
    assert decompose_exact_dmd(data, rank_truncation=2).rank == 2
    assert decompose_exact_dmd(data, rank_truncation="svht").rank == 3
    assert decompose_exact_dmd(data, rank_truncation=0.999999).rank <= 3
    with pytest.raises(DataError):
        decompose_exact_dmd(data, rank_truncation="bogus")


def test_svht_rank_on_noise(rng):
    sig = np.outer(rng.normal(size=300), rng.normal(size=80)) * 5
    s = np.linalg.svd(sig + rng.normal(size=sig.shape), compute_uv=False)
    assert engine.svht_rank(s, sig.shape) == 1


def test_decompose_dispatch(three_mode):
    data, _ = three_mode
    assert decompose(data, "exact-dmd").algorithm is Algorithm.EXACT_DMD
    assert decompose(data, Algorithm.COMPANION).algorithm is Algorithm.COMPANION
    with pytest.raises(ValueError):
        decompose(data, "fft")


# properties -----------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_recovery_on_random_planted(seed):
    data, truth = synth.generate(synth.random_planted_spec(seed))
    for backend in BACKENDS:
        lam, modes = significant(backend(data))
        assert matched_error(lam, truth.eigenvalues) <= 1e-8
        for i, j, _ in match_eigenvalues(truth.eigenvalues, lam):
            v = truth.modes[i]
            assert np.linalg.norm(modes[j] - v) <= 1e-6 * np.linalg.norm(v)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(BACKENDS))
def test_conjugate_symmetry_on_real_data(seed, backend):
    rng = np.random.default_rng(seed)
    data = SnapshotMatrix(rng.normal(size=(60, 20)), (2000, 1))
    d = backend(data)
    lam = d.eigenvalues
    for j, z in enumerate(lam):
        assert np.min(np.abs(lam - np.conj(z))) <= 1e-9
        if z.imag > 0:
            k = int(np.argmin(np.abs(lam - np.conj(z))))
            np.testing.assert_array_equal(d.modes[k], np.conj(d.modes[j]))


@settings(max_examples=10, deadline=None)
@given(st.floats(0.01, 100), st.sampled_from(BACKENDS))
def test_scaling_moves_modes_not_eigenvalues(s, backend):
    data, _ = synth.generate(synth.three_mode_spec())
    a = backend(data)
    b = backend(data.scaled(s))
    la, ma = significant(a)
    lb, mb = significant(b)
    assert la.size == lb.size
    for i, j, dist in match_eigenvalues(la, lb):
        assert dist <= 1e-10
        assert np.linalg.norm(mb[j] - s * ma[i]) <= 1e-10 * s * np.linalg.norm(ma[i])


def test_modes_in_canonical_order(three_mode):
    data, _ = three_mode
    for backend in BACKENDS:
        d = backend(data)
        norms = d.norms
        j = 0
        while j < d.n_modes:
            if d.eigenvalues[j].imag != 0:
                assert d.eigenvalues[j].imag > 0
                assert d.eigenvalues[j + 1] == np.conj(d.eigenvalues[j])
                j += 2
            else:
                j += 1
        assert np.all(np.diff(norms) <= 1e-9 * norms[0])


def test_bitwise_determinism(rng):
    data = SnapshotMatrix(rng.uniform(0, 100, (300, 60)), (2000, 1))
    for backend in BACKENDS:
        a, b = backend(data), backend(data)
        assert a.eigenvalues.tobytes() == b.eigenvalues.tobytes()
        assert a.modes.tobytes() == b.modes.tobytes()


# cross validation -------------------------------------------------------------

def test_cross_validate_self(three_mode):
    d = decompose_companion(three_mode[0])
    rep = cross_validate(d, d)
    assert rep.max_distance == 0 and rep.passed


def test_cross_validate_backends(three_mode):
    data, _ = three_mode
    rep = cross_validate(decompose_companion(data), decompose_exact_dmd(data), tol=1e-6)
    assert rep.passed
    assert rep.n_matched == 3
    assert rep.max_angle < 1e-6
    assert set(rep.to_dict()) >= {"tol", "max_distance", "passed"}


def test_cross_validate_incomparable(three_mode):
    data, _ = three_mode
    a = decompose_companion(data)
    b = decompose_companion(data.window((1979, 1), (1982, 12)))
    with pytest.raises(IncomparableError):
        cross_validate(a, b)


def test_cross_validate_reports_mismatch(three_mode):
    data, _ = three_mode
    a = decompose_companion(data)
    shifted = engine.KoopmanDecomposition(
        a.eigenvalues * 0.99, a.modes, a.algorithm, a.window, a.n_steps, 0.0, a.rank
    )
    rep = cross_validate(a, shifted, tol=1e-6)
    assert not rep.passed and rep.max_distance > 1e-3


# files ---------------------------------------------------------------------

def test_decomposition_file_round_trip(tmp_path, three_mode):
    d = decompose_companion(three_mode[0])
    write_decomposition(tmp_path / "d.json", d)
    back = read_decomposition(tmp_path / "d.json")
    np.testing.assert_array_equal(back.eigenvalues, d.eigenvalues)
    np.testing.assert_array_equal(back.modes, d.modes)
    assert back.window == d.window and back.algorithm is d.algorithm
    raw = np.fromfile(tmp_path / "d.bin", dtype="<f8")
    assert raw.size == 2 * d.n_modes * d.n_pixels
    assert raw[0] == d.modes[0, 0].real and raw[1] == d.modes[0, 0].imag
