"""Batch command-line front end.

Every command writes its outputs plus one ``manifest.json`` into ``--out``.
``kmdtool replay manifest.json --out DIR`` reruns a command from its manifest.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from kmdtool import __version__
from kmdtool import catalog, engine, forecast, grid_data, regions, synth
from kmdtool.errors import DataError, KmdError, NumericalError

log = logging.getLogger("kmdtool")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"

# parameters that name input files, digested into the manifest
INPUT_PARAMS = ("matrix", "mask", "decomposition", "forecast", "regions", "spec", "rasters")


class UsageError(KmdError):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_files(value) -> list[Path]:
    path = Path(value)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.is_file())
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    pair = [p for p in (stem.with_suffix(".json"), stem.with_suffix(".bin")) if p.exists()]
    if pair:
        return pair
    return [path] if path.exists() else []


def _digest_inputs(params: dict) -> dict:
    out = {}
    for key in INPUT_PARAMS:
        value = params.get(key)
        if value:
            for p in _input_files(value):
                out[str(p)] = _sha256(p)
    return out


def _digest_outputs(out_dir: Path) -> dict:
    return {
        str(p.relative_to(out_dir)): _sha256(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != MANIFEST
    }


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    return catalog.default_workers()


def _blas_threads(requested: int) -> int:
    # OpenBLAS sizes its buffers at load time; raising the pool past that size
    # crashes some builds, so only ever lower it
    loaded = [p["num_threads"] for p in threadpool_info() if p.get("user_api") == "blas"]
    return min([requested, *loaded]) if loaded else requested


def _parse_rank(text):
    if text is None or isinstance(text, (int, float)):
        return text
    if text == "svht":
        return text
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise DataError(f"--rank must be an integer, an energy fraction or 'svht', got {text!r}") from None


def _resolve_mask(matrix_path: str | Path, override: str | None) -> grid_data.GridMask | None:
    if override:
        return grid_data.read_mask(override)
    header = grid_data.read_matrix_header(matrix_path)
    name = header.get("mask_file")
    if not name:
        return None
    candidate = Path(matrix_path).parent / name
    return grid_data.read_mask(candidate) if candidate.exists() else None


def _window(args, data: grid_data.SnapshotMatrix):
    if getattr(args, "window", None):
        win = grid_data.parse_window(args.window)
        data.column_of(win[0])
        data.column_of(win[1])
        return win
    return data.start, data.end


def _engine_kwargs(args, algo: engine.Algorithm) -> dict:
    if algo is engine.Algorithm.COMPANION:
        return {"rank_tol": args.rank_tol} if getattr(args, "rank_tol", None) else {}
    rank = _parse_rank(getattr(args, "rank", None))
    return {"rank_truncation": rank} if rank is not None else {}


def _algorithms(name: str) -> list[engine.Algorithm]:
    if name == "both":
        return [engine.Algorithm.COMPANION, engine.Algorithm.EXACT_DMD]
    return [engine.Algorithm(name)]


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default))
    return path


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# commands; each returns a dict of extra manifest fields

def cmd_ingest(args, out: Path) -> dict:
    rasters = grid_data.read_raster_dir(args.rasters)
    if args.mask:
        mask = grid_data.read_mask(args.mask)
    else:
        if not args.land_codes:
            raise DataError("--land-codes is required unless --mask is given")
        gap = None
        if args.gap_radius is not None:
            if args.gap_center is None:
                raise DataError("--gap-radius needs --gap-center ROW COL")
            gap = grid_data.GapSpec(args.gap_center[0], args.gap_center[1], args.gap_radius)
        mask = grid_data.build_mask(rasters, args.land_codes, gap)
    matrix = grid_data.flatten(rasters, mask)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", grid_data.GapWarning)
        filled = grid_data.fill_missing_months(matrix)
    grid_data.write_mask(out / "mask.json", mask)
    grid_data.write_matrix(out / "matrix", filled, mask_file="mask.json")
    return {
        "summary": {
            "n_pixels": filled.n_pixels,
            "n_steps": filled.n_steps,
            "start": grid_data.format_month(filled.start),
            "filled_columns": sorted(filled.filled_columns),
            "cells": {k.name: mask.count(k) for k in grid_data.CellClass},
        },
        "warnings": [str(w.message) for w in caught],
    }


def cmd_decompose(args, out: Path) -> dict:
    data = grid_data.read_matrix(args.matrix)
    window = _window(args, data)
    sub = data.window(*window)
    mask = _resolve_mask(args.matrix, args.mask)
    decomps = {}
    for algo in _algorithms(args.algo):
        d = engine.decompose(sub, algo, **_engine_kwargs(args, algo))
        decomps[algo] = d
        engine.write_decomposition(out / f"decomposition_{algo.value}", d)
        if args.figures:
            from kmdtool import plotting

            labels = catalog.classify_modes(d)
            plotting.plot_eigenvalues(out / f"eigenvalues_{algo.value}.png", d, labels)
            if mask is not None and mask.n_sea == d.n_pixels:
                top = [lab for lab in labels if lab.kind is not catalog.ModeKind.OTHER][:4]
                if top:
                    plotting.plot_mode_maps(
                        out / f"modes_{algo.value}.png", d, mask,
                        [lab.mode_index for lab in top],
                        [f"{lab.kind.value} (mode {lab.mode_index})" for lab in top],
                    )
    summary = {
        algo.value: {"n_modes": d.n_modes, "rank": d.rank, "residual_norm": d.residual_norm}
        for algo, d in decomps.items()
    }
    extra = {"summary": summary}
    if len(decomps) == 2:
        report = engine.cross_validate(*decomps.values(), tol=args.agreement_tol,
                                       amplitude_floor=args.amplitude_floor)
        _write_json(out / "agreement.json", report.to_dict())
        extra["agreement_passed"] = report.passed
        if not report.passed and args.strict:
            raise NumericalError(
                f"backends disagree: max eigenvalue distance {report.max_distance:.3e} "
                f"> {args.agreement_tol:g}"
            )
    return extra


def _classify_args(args):
    return dict(eps_eig=args.eps_eig, decay_floor_months=args.decay_floor, top_decay=args.top_decay)


def cmd_classify(args, out: Path) -> dict:
    if args.decomposition:
        d = engine.read_decomposition(args.decomposition)
    elif args.matrix:
        data = grid_data.read_matrix(args.matrix)
        sub = data.window(*_window(args, data))
        algo = engine.Algorithm(args.algo)
        d = engine.decompose(sub, algo, **_engine_kwargs(args, algo))
    else:
        raise DataError("classify needs --decomposition or --matrix")
    labels = catalog.classify_modes(d, **_classify_args(args))
    catalog.write_labels(out / "labels.json", [(d.window, labels)])
    return {"summary": catalog.label_summary(labels)}


def cmd_sweep(args, out: Path) -> dict:
    data = grid_data.read_matrix(args.matrix)
    start = grid_data.parse_month(args.start) if args.start else None
    end = grid_data.parse_month(args.end) if args.end else None
    spec = catalog.WindowSpec(args.length_years, args.stride_years, start, end)
    algo = engine.Algorithm(args.algo)
    entries = catalog.window_sweep(
        data, spec, algo, workers=_threads(args), **_classify_args(args),
        **_engine_kwargs(args, algo),
    )
    catalog.write_labels(out / "labels.json", [(e.window, e.labels) for e in entries])
    rows = [
        {
            "window": grid_data.format_window(e.window),
            "n_modes": e.decomposition.n_modes,
            "residual_norm": e.decomposition.residual_norm,
            **catalog.label_summary(e.labels),
        }
        for e in entries
    ]
    _write_json(out / "sweep.json", rows)
    if args.figures:
        from kmdtool import plotting

        plotting.plot_sweep(out / "sweep.png", entries)
    return {"summary": {"n_windows": len(entries)}}


def cmd_predict(args, out: Path) -> dict:
    data = grid_data.read_matrix(args.matrix)
    window = _window(args, data)
    algo = engine.Algorithm(args.algo)
    result = forecast.predict_horizon(
        data, window, algo, args.horizon_months, clamp=args.clamp, top_k=args.top_k,
        **_engine_kwargs(args, algo),
    )
    mask = _resolve_mask(args.matrix, args.mask)
    mask_name = None
    if mask is not None:
        grid_data.write_mask(out / "mask.json", mask)
        mask_name = "mask.json"
    forecast.write_forecast(out / "forecast", result, mask_file=mask_name)
    if args.pgm:
        if mask is None:
            raise DataError("--pgm needs a mask (matrix header mask_file or --mask)")
        pgm_dir = out / "pgm"
        pgm_dir.mkdir(exist_ok=True)
        for t, month in enumerate(result.timestamps):
            img = grid_data.unflatten(result.fields[:, t], mask, np.nan).values
            forecast.write_pgm(pgm_dir / f"pred_{grid_data.format_month(month)}.pgm", img)
    return {
        "summary": {
            "window": grid_data.format_window(window),
            "first_month": grid_data.format_month(result.timestamps[0]),
            "horizon_months": args.horizon_months,
            "n_modes_used": result.metadata["n_modes_used"],
            "clamped_pixels": int(result.clamp_applied.sum()),
        }
    }


def cmd_score(args, out: Path) -> dict:
    result = forecast.read_forecast(args.forecast)
    actual = grid_data.read_matrix(args.matrix)
    months = [grid_data.parse_month(m) for m in args.months] if args.months else None
    report = forecast.score(result, actual, months)
    with (out / "scores.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "month", "rmse", "mae"])
        for (year, month), r, a in zip(report.months, report.rmse, report.mean_abs_error):
            w.writerow([year, month, repr(float(r)), repr(float(a))])
    mask = _resolve_mask(args.forecast, args.mask) or _resolve_mask(args.matrix, None)
    if mask is not None and mask.n_sea == actual.n_pixels:
        diff_dir = out / "diffs"
        diff_dir.mkdir(exist_ok=True)
        pred_cols = {m: t for t, m in enumerate(result.timestamps)}
        for t, month in enumerate(report.months):
            raster = grid_data.unflatten(report.per_pixel_abs_diff[:, t], mask, -1.0, month)
            grid_data.write_raster(diff_dir / f"diff_{grid_data.format_month(month)}.bin",
                                   raster, missing_value=-1.0)
            if args.figures:
                from kmdtool import plotting

                plotting.plot_comparison_maps(
                    out / f"compare_{grid_data.format_month(month)}.png",
                    actual.values[:, actual.column_of(month)],
                    result.fields[:, pred_cols[month]], mask, month,
                )
    return {
        "summary": {
            "n_months": len(report.months),
            "mean_rmse": float(np.mean(report.rmse)),
            "mean_mae": float(np.mean(report.mean_abs_error)),
        }
    }


def cmd_regions(args, out: Path) -> dict:
    result = forecast.read_forecast(args.forecast)
    actual = grid_data.read_matrix(args.matrix)
    rmap = regions.load_regions(args.regions, actual.n_pixels)
    predicted = regions.regional_means(result, rmap)
    observed = regions.align(regions.regional_means(actual, rmap), predicted.months)
    comparison = regions.compare_regional(observed, predicted)
    regions.write_comparison_csv(out / "regional.csv", comparison)
    _write_json(out / "regional_summary.json", comparison.summary())
    if args.figures:
        from kmdtool import plotting

        plotting.plot_regional_series(out / "regional.png", comparison)
    return {"summary": {"n_regions": len(rmap), "n_months": len(comparison.months)}}


def cmd_synth(args, out: Path) -> dict:
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read spec file {args.spec}: {exc}") from exc
        spec = synth.spec_from_json(doc)
        matrix, truth = synth.generate(spec)
        grid_data.write_matrix(out / "matrix", matrix)
    else:
        preset = synth.SeaIcePreset(
            width=args.width, height=args.height, n_steps=args.n_steps,
            noise_sigma=args.sigma, seed=args.seed,
            start=grid_data.parse_month(args.start),
        )
        matrix, truth, mask = synth.sea_ice_like(preset)
        grid_data.write_mask(out / "mask.json", mask)
        grid_data.write_matrix(out / "matrix", matrix, mask_file="mask.json")
    synth.write_truth(out / "truth", truth)
    return {
        "summary": {
            "n_pixels": matrix.n_pixels,
            "n_steps": matrix.n_steps,
            "generator": truth.generator,
            "n_planted": int(truth.eigenvalues.size),
        }
    }


COMMANDS = {
    "ingest": cmd_ingest,
    "decompose": cmd_decompose,
    "classify": cmd_classify,
    "sweep": cmd_sweep,
    "predict": cmd_predict,
    "score": cmd_score,
    "regions": cmd_regions,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------------------
# parser

def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file supplying any flag of this command")
    p.add_argument("--json", action="store_true", help="machine-readable errors on stderr")
    p.add_argument("--threads", type=int, help="thread cap (default: $KMDTOOL_THREADS or all cores)")
    p.add_argument("--figures", action="store_true", help="also render PNG figures")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _engine_opts(p, default_algo="companion", both=False):
    choices = ["companion", "exact-dmd"] + (["both"] if both else [])
    p.add_argument("--algo", choices=choices, default=default_algo)
    p.add_argument("--rank", help="exact-dmd truncation: integer rank, energy fraction or 'svht'")
    p.add_argument("--rank-tol", type=float, help="companion Krylov rank threshold (relative)")


def _classify_opts(p):
    p.add_argument("--eps-eig", type=float, default=catalog.EPS_EIG)
    p.add_argument("--decay-floor", type=float, default=catalog.DECAY_FLOOR_MONTHS)
    p.add_argument("--top-decay", type=int, default=catalog.TOP_DECAY)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="kmdtool", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kmdtool {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()
    subs = {}

    p = subs["ingest"] = sub.add_parser("ingest", parents=[common], help="rasters -> snapshot matrix")
    p.add_argument("--rasters", required=True, help="directory of *.bin rasters with JSON sidecars")
    p.add_argument("--land-codes", type=float, nargs="+")
    p.add_argument("--gap-center", type=float, nargs=2, metavar=("ROW", "COL"))
    p.add_argument("--gap-radius", type=float)
    p.add_argument("--mask", help="use this mask file instead of building one")

    p = subs["decompose"] = sub.add_parser("decompose", parents=[common], help="Koopman decomposition")
    p.add_argument("--matrix", required=True)
    p.add_argument("--window", help="YYYY-MM:YYYY-MM, inclusive (default: all data)")
    p.add_argument("--mask")
    _engine_opts(p, both=True)
    p.add_argument("--agreement-tol", type=float, default=1e-6)
    p.add_argument("--amplitude-floor", type=float, default=1e-8)
    p.add_argument("--strict", action="store_true", help="exit 4 when the backends disagree")

    p = subs["classify"] = sub.add_parser("classify", parents=[common], help="label modes")
    p.add_argument("--decomposition")
    p.add_argument("--matrix")
    p.add_argument("--window")
    _engine_opts(p)
    _classify_opts(p)

    p = subs["sweep"] = sub.add_parser("sweep", parents=[common], help="sliding-window sweep")
    p.add_argument("--matrix", required=True)
    p.add_argument("--length-years", type=int, required=True)
    p.add_argument("--stride-years", type=int, default=1)
    p.add_argument("--start")
    p.add_argument("--end")
    _engine_opts(p)
    _classify_opts(p)

    p = subs["predict"] = sub.add_parser("predict", parents=[common], help="forecast past a window")
    p.add_argument("--matrix", required=True)
    p.add_argument("--window")
    p.add_argument("--horizon-months", type=int, required=True)
    p.add_argument("--clamp", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--top-k", type=int)
    p.add_argument("--pgm", action="store_true", help="write 8-bit PGM maps per month")
    p.add_argument("--mask")
    _engine_opts(p)

    p = subs["score"] = sub.add_parser("score", parents=[common], help="forecast vs actual")
    p.add_argument("--forecast", required=True)
    p.add_argument("--matrix", required=True, help="actual data")
    p.add_argument("--months", nargs="+", help="YYYY-MM months to compare (default: overlap)")
    p.add_argument("--mask")

    p = subs["regions"] = sub.add_parser("regions", parents=[common], help="regional mean series")
    p.add_argument("--forecast", required=True)
    p.add_argument("--matrix", required=True, help="actual data")
    p.add_argument("--regions", required=True)

    p = subs["synth"] = sub.add_parser("synth", parents=[common], help="synthetic data")
    p.add_argument("--spec", help="planted spec JSON; without it the sea-ice-like preset is used")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=synth.SeaIcePreset.width)
    p.add_argument("--height", type=int, default=synth.SeaIcePreset.height)
    p.add_argument("--n-steps", type=int, default=synth.SeaIcePreset.n_steps)
    p.add_argument("--start", default="1979-01")

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true", help="fail unless outputs match the manifest")
    p.add_argument("--json", action="store_true")
    return parser, subs


def _config_path(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _apply_config(parser, subs, argv):
    """Parse ``argv``; a ``--config`` JSON file supplies defaults for any flag."""
    path = _config_path(argv)
    command = next((a for a in argv if a in subs), None)
    if path and command:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        actions = {a.dest: a for a in subs[command]._actions}
        unknown = set(cfg) - set(actions)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for dest in cfg:
            actions[dest].required = False
        subs[command].set_defaults(**cfg)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# running

def run_command(command: str, params: dict, out: Path) -> dict:
    """Run ``command`` with resolved ``params`` and write its manifest."""
    out.mkdir(parents=True, exist_ok=True)
    args = argparse.Namespace(**params)
    threads = _threads(args)
    t0 = time.perf_counter()
    with threadpool_limits(limits=_blas_threads(threads), user_api="blas"):
        extra = COMMANDS[command](args, out)
    wall = time.perf_counter() - t0
    manifest = {
        "command": command,
        "parameters": params,
        "inputs": _digest_inputs(params),
        "outputs": _digest_outputs(out),
        "tool_version": __version__,
        "threads": threads,
        "wall_time_s": wall,
        **extra,
    }
    _write_json(out / MANIFEST, manifest)
    return manifest


def replay(manifest_path: str | Path, out: Path, check: bool = False) -> dict:
    try:
        manifest = json.loads(Path(manifest_path).read_text())
        command, params = manifest["command"], dict(manifest["parameters"])
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if command not in COMMANDS:
        raise DataError(f"manifest names unknown command {command!r}")
    changed = {
        p: d for p, d in _digest_inputs(params).items() if manifest.get("inputs", {}).get(p) != d
    }
    if changed and check:
        raise DataError(f"inputs changed since the manifest was written: {sorted(changed)}")
    params["out"] = str(out)
    new = run_command(command, params, out)
    if check:
        before, after = manifest.get("outputs", {}), new["outputs"]
        diff = sorted(k for k in set(before) | set(after) if before.get(k) != after.get(k))
        if diff:
            raise NumericalError(f"replayed outputs differ: {diff}")
    return new


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    want_json = "--json" in argv
    try:
        parser, subs = build_parser()
        args = _apply_config(parser, subs, argv)
        logging.basicConfig(
            level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        if args.command == "replay":
            replay(args.manifest, Path(args.out), args.check)
            return EXIT_OK
        params = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        run_command(args.command, params, Path(args.out))
        return EXIT_OK
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (KmdError, OSError) as exc:
        code = exc.exit_code if isinstance(exc, KmdError) else EXIT_DATA
        if want_json:
            doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
            print(json.dumps(doc), file=sys.stderr)
        else:
            print(f"kmdtool: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
