"""Command-line entry point: ``slimtrace <subcommand> [options]``.

Every option can also come from ``--config file.yaml``. The file holds a flat
mapping of option names (dashes or underscores) and may contain one nested
mapping per subcommand; explicit flags override file values, and subcommand
sections override the top level.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, bundled_manifest
from .preprocess import DetrendConfig
from .slim import DEFAULT_Q_GRID, SlimConfig
from .speclib import LibraryManifest, LibraryMatrix, WavelengthGrid

logger = logging.getLogger("slimtrace")

DEFAULT_BAND = (312.0, 326.0)


def _pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in str(text).split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    return lo, hi


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    try:
        return tuple(float(v) for v in str(text).replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a list of numbers, got {text!r}") from None


def _solver_options(p: argparse.ArgumentParser, default_init: str) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--q", type=float, help="fixed sparsity exponent in (0, 1]; omit for BIC selection")
    g.add_argument("--q-grid", type=_floats, default=DEFAULT_Q_GRID, help="q candidates for BIC (comma separated)")
    g.add_argument("--delta", type=float, default=1e-4, help="relative-change convergence threshold")
    g.add_argument("--max-iter", type=int, default=500)
    g.add_argument("--support-epsilon", type=float, default=1e-3)
    g.add_argument("--init-weights", choices=("clipped", "magnitude"), default=default_init,
                   help="first SLIM weights from the clipped ML estimate or its magnitude")
    g.add_argument("--workers", type=int, default=1)


def _detrend_options(p: argparse.ArgumentParser, enabled: bool | None) -> None:
    g = p.add_argument_group("detrending")
    g.add_argument("--detrend-window", type=int, default=DetrendConfig.window)
    g.add_argument("--detrend-order", type=int, default=DetrendConfig.order)
    g.add_argument("--detrend", dest="detrend_enabled", action="store_true", default=enabled)
    g.add_argument("--no-detrend", dest="detrend_enabled", action="store_false")


def _slim_config(args) -> SlimConfig:
    return SlimConfig(
        q=args.q,
        delta=args.delta,
        max_iter=args.max_iter,
        q_grid=_floats(args.q_grid),
        support_epsilon=args.support_epsilon,
        init_weights=args.init_weights,
    )


def _detrend_config(args, fallback: DetrendConfig | None = None) -> DetrendConfig:
    enabled = args.detrend_enabled
    if enabled is None:
        return fallback if fallback is not None else DetrendConfig()
    return DetrendConfig(args.detrend_window, args.detrend_order, enabled)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slimtrace", description="Sparse unmixing of trace-gas spectra.")
    parser.add_argument("--config", type=Path, help="YAML file with option values")
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-library", help="cross-section manifest -> library archive")
    p.add_argument("--manifest", type=Path, default=bundled_manifest())
    p.add_argument("--grid", type=str, help="start:stop:count (overrides the manifest grid)")
    p.add_argument("--out", type=Path, default=Path("library.npz"))
    _detrend_options(p, None)
    p.set_defaults(func=cmd_build_library)

    p = sub.add_parser("simulate", help="planted truth + SNR -> single pixel or scene")
    p.add_argument("--kind", choices=("pixel", "scene"), default="pixel")
    p.add_argument("--manifest", type=Path, default=bundled_manifest())
    p.add_argument("--snr-db", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr-convention", choices=("norm", "energy"), default="norm")
    p.add_argument("--rows", type=int, default=47)
    p.add_argument("--cols", type=int, default=41)
    p.add_argument("--masked", type=int, default=0, help="number of pixels given a negative radiance sample")
    p.add_argument("--out", type=Path, default=Path("sim"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mc", help="Monte-Carlo trials of the planted three-gas pixel")
    p.add_argument("--manifest", type=Path, default=bundled_manifest())
    p.add_argument("--snr-db", type=_floats, default=(20.0, 40.0, 60.0))
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr-convention", choices=("norm", "energy"), default="norm")
    p.add_argument("--out", type=Path, help="JSON report path")
    _solver_options(p, "clipped")
    _detrend_options(p, None)
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("retrieve", help="scene + library -> per-species column maps")
    p.add_argument("scene", type=Path, help="scene manifest (YAML)")
    p.add_argument("--library", type=Path, default=bundled_manifest(),
                   help="cross-section manifest (built on the clipped scene grid) or a built .npz archive")
    p.add_argument("--band", type=_pair, default=DEFAULT_BAND, help="lo:hi in nm")
    p.add_argument("--per-pixel-q", action="store_true", default=False)
    p.add_argument("--noise-variance", type=float, help="fixed optical-depth noise variance (default: estimated per pixel)")
    p.add_argument("--species", nargs="*", help="species to write (default: all)")
    p.add_argument("--csv", action="store_true", default=False, help="also write CSV maps")
    p.add_argument("--out", type=Path, default=Path("maps"))
    _solver_options(p, "magnitude")
    _detrend_options(p, True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("compare", help="two maps -> RMSE report")
    p.add_argument("candidate", type=Path)
    p.add_argument("reference", type=Path)
    p.add_argument("--out", type=Path, help="JSON report path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("render", help="map -> PNG heatmap")
    p.add_argument("map", type=Path)
    p.add_argument("--scale", type=_pair, help="lo:hi color bounds in molecules/cm^2 (default: auto)")
    p.add_argument("--out", type=Path, help="PNG path (default: next to the map)")
    p.set_defaults(func=cmd_render)
    return parser


def _load_config(path: Path | None, command: str) -> tuple[dict, dict]:
    """(top-level values, values of the ``command`` section)."""
    if path is None:
        return {}, {}
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise SystemExit(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise SystemExit(f"config {path} must be a mapping")

    def norm(d):
        return {str(k).replace("-", "_"): v for k, v in d.items()}

    top = norm({k: v for k, v in doc.items() if not isinstance(v, dict)})
    section = doc.get(command) or {}
    if not isinstance(section, dict):
        raise SystemExit(f"config section '{command}' must be a mapping")
    return top, norm(section)


def _coerce(action: argparse.Action, val):
    if val is None:
        return None
    if action.type is _floats:
        return _floats(val)
    if isinstance(val, str) and action.type is not None:
        return action.type(val)
    if action.type is _pair and isinstance(val, (list, tuple)):
        return tuple(float(v) for v in val)
    if action.type is Path:
        return Path(val)
    return val


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    top, section = _load_config(args.config, args.command)
    if top or section:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions if a.dest != "help"}
        unknown = sorted(set(section) - set(known))
        if unknown:
            parser.error(f"unknown option(s) in section '{args.command}' of {args.config}: {', '.join(unknown)}")
        # top-level keys apply to every subcommand that has them
        values = {k: v for k, v in top.items() if k in known}
        values.update(section)
        sub.set_defaults(**{k: _coerce(known[k], v) for k, v in values.items()})
        args = parser.parse_args(argv)
    return args


def _echo(args: argparse.Namespace, extra: dict | None = None) -> dict:
    """Print and return the effective parameters of this run."""
    params = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, tuple):
            v = list(v)
        params[k] = v
    meta = {"slimtrace_version": __version__, "parameters": params}
    if extra:
        meta.update(extra)
    print("# run metadata")
    print(yaml.safe_dump(meta, sort_keys=False).rstrip())
    print("# ---")
    return meta


def _grid_arg(text: str | None) -> WavelengthGrid | None:
    if not text:
        return None
    try:
        start, stop, count = str(text).split(":")
        return WavelengthGrid.linspace(float(start), float(stop), int(count))
    except ValueError:
        raise SystemExit(f"--grid expects start:stop:count, got {text!r}") from None


def cmd_build_library(args) -> int:
    man = LibraryManifest.load(args.manifest)
    detrend = _detrend_config(args, man.detrend)
    lib = man.build(grid=_grid_arg(args.grid), detrend=detrend)
    _echo(args, {"detrend": detrend.to_dict(), "manifest_hash": lib.manifest_hash,
                 "shape": list(lib.shape)})
    lib.save(args.out)
    print(f"library {lib.shape[0]} bands x {lib.shape[1]} endmembers -> {args.out}")
    return 0


def _raw_library(manifest: Path, grid: WavelengthGrid | None = None) -> LibraryMatrix:
    man = LibraryManifest.load(manifest)
    return man.build(grid=grid, detrend=DetrendConfig(enabled=False))


def cmd_simulate(args) -> int:
    from .pipeline import ConcentrationMap, save_scene
    from .simkit import THREE_GAS_TRUTH, SyntheticTruth, add_noise, generate_clean, simulate_scene, uv2_grid

    args.out.mkdir(parents=True, exist_ok=True)
    if args.kind == "pixel":
        lib, _ = LibraryManifest.load(args.manifest).build().normalized()
        truth = SyntheticTruth.from_labels(lib, THREE_GAS_TRUTH, seed=args.seed)
        _echo(args, {"library_detrend": lib.detrend.to_dict(), "truth": [list(t) for t in THREE_GAS_TRUTH]})
        z, var = add_noise(generate_clean(lib, truth), args.snr_db, args.seed, args.snr_convention)
        np.savez(args.out / "pixel.npz", z=z, alpha_true=truth.alpha_true, noise_variance=var,
                 wavelengths=lib.grid.values)
        print(f"pixel ({z.size} bands, noise variance {var:.4g}) -> {args.out / 'pixel.npz'}")
        return 0

    raw = _raw_library(args.manifest, uv2_grid())
    scene, truth = simulate_scene(raw, rows=args.rows, cols=args.cols, snr_db=args.snr_db, seed=args.seed,
                                  convention=args.snr_convention, n_masked=args.masked)
    meta = _echo(args, {"peak_pixel": list(truth.peak_pixel), "bands": scene.grid.count})
    manifest = save_scene(scene, args.out)
    full = np.ones(scene.shape, dtype=bool)
    for species, values in truth.species_maps.items():
        if np.any(values):
            ConcentrationMap(species, values, full, {"kind": "planted truth", **meta}).save(
                args.out / f"truth_{species}.yaml")
    print(f"scene {scene.rows}x{scene.cols}x{scene.grid.count} -> {manifest}")
    return 0


def cmd_mc(args) -> int:
    from .simkit import THREE_GAS_TRUTH, SyntheticTruth, format_mc_table, run_monte_carlo, write_mc_report

    man = LibraryManifest.load(args.manifest)
    # planted amounts are fractions of unit-norm signatures
    lib, _ = man.build(detrend=_detrend_config(args, man.detrend)).normalized()
    cfg = _slim_config(args)
    truth = SyntheticTruth.from_labels(lib, THREE_GAS_TRUTH, seed=args.seed)
    meta = _echo(args, {"solver": cfg.to_dict(), "library_detrend": lib.detrend.to_dict(),
                        "library_columns": "unit-norm",
                        "manifest_hash": lib.manifest_hash})
    summaries = [run_monte_carlo(lib, truth, snr, args.trials, cfg, args.snr_convention, args.workers)
                 for snr in _floats(args.snr_db)]
    print(format_mc_table(summaries, lib.labels, truth.alpha_true))
    if args.out:
        write_mc_report(args.out, summaries, lib.labels, meta)
        print(f"report -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    from .pipeline import RetrievalConfig, all_species_totals, clip_band, load_scene, retrieve_map

    scene = clip_band(load_scene(args.scene), *args.band)
    detrend = _detrend_config(args)
    if args.library.suffix == ".npz":
        library = LibraryMatrix.load(args.library)
    else:
        library = LibraryManifest.load(args.library).build(grid=scene.grid, detrend=detrend)
    cfg = RetrievalConfig(slim=_slim_config(args), detrend=detrend, per_pixel_q=args.per_pixel_q,
                          workers=args.workers, noise_variance=args.noise_variance)
    unknown = sorted(set(args.species or ()) - set(library.species))
    if unknown:
        raise SystemExit(f"unknown species {unknown}; library has {sorted(set(library.species))}")
    _echo(args, {"retrieval": cfg.to_dict(), "bands": scene.grid.count, "manifest_hash": library.manifest_hash})
    report = retrieve_map(scene, library, cfg)

    args.out.mkdir(parents=True, exist_ok=True)
    maps = all_species_totals(report)
    wanted = args.species or list(maps)
    for species in wanted:
        m = maps[species]
        m.save(args.out / f"{species}.yaml")
        if args.csv:
            m.save_csv(args.out / f"{species}.csv")
    report.save(args.out / "report.npz")
    summary = {
        "valid_pixels": report.n_entries,
        "converged_pixels": int(report.converged[report.valid].sum()),
        "failed_pixels": len(report.errors),
        "q_mode": report.metadata["q_mode"],
        "q_global": report.metadata["q_global"],
        "elapsed_s": round(report.elapsed_s, 3),
    }
    (args.out / "metadata.json").write_text(json.dumps({**report.metadata, **summary}, indent=2, default=str))
    print(yaml.safe_dump(summary, sort_keys=False).rstrip())
    print(f"maps for {', '.join(wanted)} -> {args.out}")
    return 0


def cmd_compare(args) -> int:
    from .pipeline import ConcentrationMap, compare_maps

    _echo(args)
    res = compare_maps(ConcentrationMap.load(args.candidate), ConcentrationMap.load(args.reference))
    text = json.dumps(res.to_dict(), indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_render(args) -> int:
    from .pipeline import ConcentrationMap, render_heatmap

    _echo(args)
    m = ConcentrationMap.load(args.map)
    out = args.out or Path(args.map).with_suffix(".png")
    render_heatmap(m, out, args.scale)
    print(f"heatmap -> {out}")
    return 0


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
