import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmdtool import synth
from kmdtool.engine import KoopmanDecomposition, decompose_companion, decompose_exact_dmd
from kmdtool.errors import DataError, NumericalError
from kmdtool.forecast import (
    ForecastResult,
    predict_horizon,
    read_forecast,
    read_pgm,
    reconstruct,
    score,
    write_forecast,
    write_pgm,
)
from kmdtool.grid_data import SnapshotMatrix


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_constant_field_any_k():
    d = decompose_companion(SnapshotMatrix(np.full((10, 8), 42.0), (2000, 1)))
    f = reconstruct(d, (1, 100))
    np.testing.assert_allclose(f.fields, 42.0, atol=1e-9)


@pytest.mark.parametrize("backend", [decompose_companion, decompose_exact_dmd])
def test_in_window_reconstruction(backend, three_mode):
    data, _ = three_mode
    f = reconstruct(backend(data), (1, data.n_steps), clamp=False)
    assert rel(f.fields, data.values) <= 1e-8
    assert not f.is_prediction.any()


def test_extrapolation_matches_closed_form(three_mode):
    data, truth = three_mode
    n = data.n_steps
    for backend in (decompose_companion, decompose_exact_dmd):
        f = reconstruct(backend(data), (n + 1, n + 48), clamp=False)
        assert rel(f.raw, truth.signal(n + 1, n + 48)) <= 1e-6
        assert f.is_prediction.all()
        assert f.timestamps[0] == (1984, 1)


def test_predict_horizon_shapes(three_mode):
    data, truth = three_mode
    f = predict_horizon(data, ((1979, 1), (1982, 12)), "companion", 1, clamp=False)
    assert f.fields.shape == (200, 1)
    assert rel(f.raw[:, 0], truth.signal(49, 49)[:, 0]) <= 1e-8
    with pytest.raises(DataError):
        predict_horizon(data, (data.start, data.end), "companion", 0)


def test_horizon_48_on_360_month_window():
    data, _ = synth.generate(synth.three_mode_spec(n_pixels=400, n_steps=408))
    f = predict_horizon(data, ((1979, 1), (2008, 12)), "companion", 48)
    assert f.fields.shape[1] == 48
    assert f.k_range == (361, 408)


def test_clamping_keeps_raw():
    lam = np.array([1.0])
    d = KoopmanDecomposition(lam, np.array([[-5.0, 50.0, 150.0]]), "companion",
                             ((2000, 1), (2000, 12)), 12, 0.0, 1)
    f = reconstruct(d, (1, 3))
    np.testing.assert_array_equal(f.fields[:, 0], [0, 50, 100])
    np.testing.assert_array_equal(f.raw[:, 0], [-5, 50, 150])
    assert list(f.clamp_applied) == [2, 2, 2]
    assert reconstruct(d, (1, 3), clamp=False).fields.min() == -5


def test_unpaired_complex_mode_is_rejected():
    lam = np.array([0.9 * np.exp(0.5j)])
    d = KoopmanDecomposition(lam, np.ones((1, 4)), "companion", ((2000, 1), (2000, 12)), 12, 0.0, 1)
    with pytest.raises(NumericalError):
        reconstruct(d, (1, 5))


def test_bad_k_range(three_mode):
    d = decompose_companion(three_mode[0])
    for bad in ((0, 3), (5, 4)):
        with pytest.raises(DataError):
            reconstruct(d, bad)


def test_top_k_keeps_pairs(preset_clean):
    d = decompose_companion(preset_clean[0])
    f = reconstruct(d, (1, 2), top_k=3)
    assert f.metadata["n_modes_used"] == 4
    assert reconstruct(d, (1, 2), top_k=1).metadata["n_modes_used"] == 1


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 50))
def test_linearity(s):
    data, _ = synth.generate(synth.three_mode_spec())
    a = reconstruct(decompose_companion(data), (1, 80), clamp=False).raw
    b = reconstruct(decompose_companion(data.scaled(s)), (1, 80), clamp=False).raw
    assert rel(b, s * a) <= 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_realness_of_predictions(seed):
    rng = np.random.default_rng(seed)
    data = SnapshotMatrix(rng.uniform(0, 100, (50, 30)), (2000, 1))
    f = reconstruct(decompose_exact_dmd(data), (1, 60), clamp=False)
    assert f.imag_ratio <= 1e-8


# scoring ---------------------------------------------------------------------

def test_score_identity_and_offset(rng):
    actual = SnapshotMatrix(rng.uniform(0, 100, (20, 6)), (2000, 1))
    rep = score(actual, actual)
    assert np.all(rep.per_pixel_abs_diff == 0) and np.all(rep.rmse == 0)
    off = score(actual.scaled(1.0).__class__(actual.values + 1.0, actual.start), actual)
    np.testing.assert_allclose(off.mean_abs_error, 1.0)
    np.testing.assert_allclose(off.rmse, 1.0)


def test_score_alignment(rng):
    actual = SnapshotMatrix(rng.uniform(0, 100, (5, 12)), (2000, 1))
    pred = SnapshotMatrix(actual.values[:, 6:], (2000, 7))
    rep = score(pred, actual)
    assert rep.months[0] == (2000, 7) and len(rep.months) == 6
    assert np.all(rep.rmse == 0)
    with pytest.raises(DataError):
        score(pred, actual, months=[(2001, 1)])
    with pytest.raises(DataError):
        score(SnapshotMatrix(np.zeros((5, 2)), (1990, 1)), actual)


def test_rmse_degrades_with_horizon():
    horizons = [1, 24, 48, 96, 192]
    errors = []
    for seed in range(20):
        base = synth.three_mode_spec(noise_sigma=2.0, seed=seed)
        modes = (
            synth.PlantedMode(1.0, np.real(base.modes[0].shape) + 50),
            synth.PlantedMode(synth.ANNUAL, base.modes[1].shape),
            synth.PlantedMode(synth.ANNUAL.conjugate(), base.modes[2].shape),
        )
        data, truth = synth.generate(synth.PlantedSpec(modes, 72, 2.0, seed))
        f = predict_horizon(data, (data.start, data.end), "exact-dmd", 192, clamp=False,
                            rank_truncation="svht")
        err = np.sqrt(np.mean((f.raw - truth.signal(73, 264)) ** 2, axis=0))
        errors.append([err[h - 1] for h in horizons])
    medians = np.median(errors, axis=0)
    assert np.all(np.diff(medians) >= 0)


# files ---------------------------------------------------------------------

def test_forecast_file_round_trip(tmp_path, three_mode):
    data, _ = three_mode
    f = predict_horizon(data, ((1979, 1), (1982, 12)), "companion", 6)
    path = write_forecast(tmp_path / "forecast", f)
    back = read_forecast(path)
    np.testing.assert_array_equal(back.fields, f.fields)
    np.testing.assert_array_equal(back.raw, f.raw)
    assert back.k_range == f.k_range and back.timestamps == f.timestamps
    assert isinstance(back, ForecastResult)


def test_pgm_round_trip(tmp_path):
    img = np.array([[0.0, 50.0], [100.0, np.nan]])
    write_pgm(tmp_path / "a.pgm", img, fill=7)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[0, 128], [255, 7]])
