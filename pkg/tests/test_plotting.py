import numpy as np

from kmdtool import plotting
from kmdtool.catalog import WindowSpec, classify_modes, window_sweep
from kmdtool.engine import decompose_companion
from kmdtool.regions import RegionMap, compare_regional, regional_means


def is_png(path):
    return path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_all_figures_render(tmp_path, preset_clean):
    data, _, mask = preset_clean
    d = decompose_companion(data)
    labels = classify_modes(d)
    paths = [
        plotting.plot_eigenvalues(tmp_path / "eig.png", d, labels),
        plotting.plot_mode_maps(tmp_path / "modes.png", d, mask, [0, 1]),
        plotting.plot_comparison_maps(tmp_path / "cmp.png", data.values[:, 0], data.values[:, 1],
                                      mask, (1979, 1)),
    ]
    regions = RegionMap(("a", "b"), (range(10), range(10, 30)), data.n_pixels)
    series = regional_means(data.window((1979, 1), (1980, 12)), regions)
    paths.append(plotting.plot_regional_series(tmp_path / "reg.png", compare_regional(series, series)))
    small = data.window((1979, 1), (1988, 12))
    entries = window_sweep(small, WindowSpec(5, 1), workers=1)
    paths.append(plotting.plot_sweep(tmp_path / "sweep.png", entries))
    assert all(is_png(p) for p in paths)
    assert np.isfinite(d.norms).all()
