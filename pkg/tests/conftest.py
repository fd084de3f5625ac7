import numpy as np
import pytest

from kmdtool import synth
from kmdtool.cli import main
from kmdtool.grid_data import RasterSnapshot, add_months, read_matrix, write_raster
from kmdtool.regions import RegionMap, write_regions

LAND = 254.0

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def three_mode():
    """Noiseless 3-mode planted system, 200 pixels x 60 months."""
    return synth.generate(synth.three_mode_spec())


@pytest.fixture(scope="session")
def preset_clean():
    return synth.sea_ice_like(synth.SeaIcePreset())


def run(*argv):
    """Run the CLI in-process and return its exit code."""
    return main([str(a) for a in argv])


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Every command run once on a small noisy preset; returns the output dirs."""
    root = tmp_path_factory.mktemp("cli")
    d = {name: root / name for name in
         ("synth", "decompose", "classify", "sweep", "predict", "score", "regions", "ingest")}
    assert run("synth", "--out", d["synth"], "--width", 16, "--height", 16, "--n-steps", 96,
               "--sigma", 0.5, "--seed", 2) == 0
    matrix = d["synth"] / "matrix.json"
    assert run("decompose", "--out", d["decompose"], "--matrix", matrix, "--algo", "both",
               "--window", "1979-01:1983-12", "--rank", "svht", "--figures") == 0
    assert run("classify", "--out", d["classify"],
               "--decomposition", d["decompose"] / "decomposition_exact-dmd.json") == 0
    assert run("sweep", "--out", d["sweep"], "--matrix", matrix, "--length-years", 5,
               "--threads", 2) == 0
    assert run("predict", "--out", d["predict"], "--matrix", matrix, "--window",
               "1979-01:1983-12", "--horizon-months", 12, "--pgm") == 0
    forecast = d["predict"] / "forecast.json"
    assert run("score", "--out", d["score"], "--forecast", forecast, "--matrix", matrix) == 0
    n_sea = read_matrix(matrix).n_pixels
    write_regions(root / "regions.json",
                  RegionMap(("west", "east"), (range(0, 40), range(40, 90)), n_sea, "north"))
    assert run("regions", "--out", d["regions"], "--forecast", forecast, "--matrix", matrix,
               "--regions", root / "regions.json") == 0

    rasters = root / "rasters"
    rasters.mkdir()
    for t in range(6):
        if t == 3:
            continue  # missing month
        v = np.full((5, 5), 10.0 + 4 * t)
        v[4] = LAND
        write_raster(rasters / f"r{t}.bin", RasterSnapshot(5, 5, v, add_months((2000, 1), t)))
    assert run("ingest", "--out", d["ingest"], "--rasters", rasters, "--land-codes", LAND,
               "--gap-center", 0, 0, "--gap-radius", 1) == 0
    return root, d
