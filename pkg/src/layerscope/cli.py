"""Command-line front end: ``layerscope <command> [options]``.

Exit codes: 0 success, 1 usage or invalid options, 2 pipeline failure,
3 file I/O problems.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import GraphError, SpectralConvergenceError
from .segmentation import PipelineConfig, SegmentationError, run_summary, segment
from .stats import (FIXTURES, NormativeTable, StatsError, comparison_table, comparison_to_dict,
                    compare_to_normative, fixture_path, population_aggregate, slope_test,
                    ttest_unpaired)
from .thickness import (TOTAL, find_fovea, layer_thickness,
                        render_pseudocolor, sector_grid, sector_stats, stats_to_json,
                        total_thickness, write_map_grid, write_ppm)
from .volume import (PhantomSpec, VolumeFormatError, generate_phantom, read_surfaces_csv,
                     read_volume, write_surfaces_csv, write_volume)

logger = logging.getLogger("layerscope")

EXIT_OK, EXIT_USAGE, EXIT_PIPELINE, EXIT_IO = 0, 1, 2, 3
TIME_BUDGET_S = 260.0
FOVEA_SMOOTH = (2, 0)


class UsageError(Exception):
    pass


class InputError(Exception):
    """Unreadable or malformed input file."""


def load_normdb(value) -> NormativeTable:
    try:
        return NormativeTable.load(resolve_normdb(value))
    except StatsError as exc:
        raise InputError(f"{value}: {exc}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- config handling -------------------------------------------------------


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, keys use underscores."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value.strip('"').strip("'")
    return out


def _settings(args, defaults: dict) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        cfg = read_config(args.config)
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged.update(cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _triple(text, name, cast=int, sep="x"):
    if isinstance(text, (tuple, list)):
        return tuple(cast(v) for v in text)
    parts = str(text).replace(",", sep).split(sep)
    try:
        vals = tuple(cast(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"bad {name}: {text!r}") from exc
    return vals


def _int(v, name):
    try:
        return int(v)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{name} must be an integer, got {v!r}") from exc


def _float(v, name):
    try:
        return float(v)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{name} must be a number, got {v!r}") from exc


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n",
                          encoding="ascii")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not serialisable: {type(o)}")


# -- phantom ---------------------------------------------------------------

PHANTOM_DEFAULTS = {
    "dims": "128x128x16", "seed": 0, "noise": 0.0, "pit_depth": 50.0,
    "pit_radius": 600.0, "undulation": 6.0, "axial_um": 3.87,
}


def cmd_phantom(args) -> int:
    s = _settings(args, PHANTOM_DEFAULTS)
    noise = _float(s["noise"], "noise")
    if noise < 0:
        raise UsageError("--noise must be >= 0")
    try:
        spec = PhantomSpec(dims=_triple(s["dims"], "dims"), axial_scale=_float(s["axial_um"], "axial_um"),
                           pit_depth=_float(s["pit_depth"], "pit_depth"),
                           pit_radius=_float(s["pit_radius"], "pit_radius"),
                           undulation=_float(s["undulation"], "undulation"),
                           rng_seed=_int(s["seed"], "seed"))
        spec = replace(spec, noise_sd=noise * spec.contrast)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vol, surfaces = generate_phantom(spec)
    write_volume(vol, out / "volume.lsv")
    write_surfaces_csv(surfaces, out / "reference_surfaces.csv")
    _dump_json({"command": "phantom", "settings": s, "noise_sd": spec.noise_sd,
                "pit_center": spec.center()}, out / "phantom.json")
    print(f"wrote {out / 'volume.lsv'} and {out / 'reference_surfaces.csv'}")
    return EXIT_OK


# -- segment ---------------------------------------------------------------

SEGMENT_DEFAULTS = {
    "seed": 0, "threads": None, "eye": "right", "stage2_mode": "tiles", "tile": "8x4",
    "restarts": 8, "diameters": "1000,3000,6000",
}


def _pipeline_config(s) -> PipelineConfig:
    threads = s["threads"]
    try:
        return PipelineConfig(seed=_int(s["seed"], "seed"),
                              threads=None if threads in (None, "") else _int(threads, "threads"),
                              stage2_mode=str(s["stage2_mode"]),
                              tile=_triple(s["tile"], "tile"),
                              kmeans_restarts=_int(s["restarts"], "restarts"))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _eye(value) -> str:
    eye = str(value).lower()
    if eye not in ("right", "left"):
        raise UsageError(f"--eye must be right or left, got {value!r}")
    return eye


def _diameters(value):
    d = _triple(value, "diameters", float, sep=",")
    if len(d) != 3 or not 0 < d[0] < d[1] < d[2]:
        raise UsageError("--diameters needs three increasing positive values")
    return d


def _maps(surfaces, vol_scales):
    axial, sx, sz = vol_scales
    maps = layer_thickness(surfaces, axial, (sx, sz))
    maps.append(total_thickness(maps))
    return maps


def cmd_segment(args) -> int:
    s = _settings(args, SEGMENT_DEFAULTS)
    cfg = _pipeline_config(s)
    eye = _eye(s["eye"])
    diam = _diameters(s["diameters"])
    vol = read_volume(args.volume)
    t0 = time.perf_counter()
    surfaces, mask = segment(vol, cfg)
    wall = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_surfaces_csv(surfaces.surfaces, out / "surfaces.csv")
    scales = (vol.axial_scale, vol.lateral_scale_x, vol.lateral_scale_z)
    maps = _maps(surfaces.surfaces, scales)
    for m in maps:
        name = "total" if m.layer == TOTAL else f"layer{m.layer:02d}"
        write_map_grid(m, out / f"thickness_{name}.lsv", vol.axial_scale)
    fovea = find_fovea(maps[0], FOVEA_SMOOTH)
    grid = sector_grid(fovea, maps[0].shape, diam, scales[1:], eye)
    _write_sector_csv(grid.labels, out / "sectors.csv")
    report = {
        "command": "segment",
        "version": __version__,
        "input": str(args.volume),
        "settings": s,
        "pipeline": run_summary(cfg),
        "seed": cfg.seed,
        "eye": eye,
        "fovea": list(fovea),
        "wall_time_s": round(wall, 3),
        "time_budget_s": TIME_BUDGET_S,
        "within_budget": wall <= TIME_BUDGET_S,
        "filled_columns": mask.filled_columns + surfaces.filled_columns,
        "collapsed_layers": surfaces.collapsed_layers,
        "flagged": surfaces.flagged,
    }
    _dump_json(report, out / "run_report.json")
    print(f"segmented {args.volume} in {wall:.1f} s; outputs in {out}")
    return EXIT_OK


def _write_sector_csv(labels, path):
    nx, nz = labels.shape
    lines = ["x,z,sector"]
    lines += [f"{x},{z},{int(labels[x, z])}" for z in range(nz) for x in range(nx)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


# -- report ----------------------------------------------------------------

REPORT_DEFAULTS = {"eye": "right", "diameters": "1000,3000,6000", "normdb": None,
                   "z_threshold": 2.0, "borderline_z": 1.5, "fovea": None}


def resolve_normdb(value) -> Path:
    """A path, or a shipped fixture given by name with or without ``.json``."""
    p = Path(value)
    if p.exists():
        return p
    name = p.name[:-5] if p.name.endswith(".json") else p.name
    if name in FIXTURES:
        return fixture_path(name)
    raise FileNotFoundError(f"normative table not found: {value}")


def subject_sector_stats(surfaces, scales, eye, diameters, fovea=None):
    maps = _maps(surfaces, scales)
    if fovea is None:
        fovea = find_fovea(maps[0], FOVEA_SMOOTH)
    grid = sector_grid(fovea, maps[0].shape, diameters, scales[1:], eye)
    stats = {m.layer: sector_stats(m, grid) for m in maps}
    return maps, grid, stats


def cmd_report(args) -> int:
    s = _settings(args, REPORT_DEFAULTS)
    eye = _eye(s["eye"])
    diam = _diameters(s["diameters"])
    surfaces = read_surfaces_csv(args.surfaces)
    n, nx, nz = surfaces.shape
    if args.volume:
        v = read_volume(args.volume)
        scales = (v.axial_scale, v.lateral_scale_x, v.lateral_scale_z)
    else:
        scales = (args.axial_um, 6000.0 / nx, 6000.0 / nz)
    fovea = _triple(s["fovea"], "fovea", int, sep=",") if s["fovea"] else None
    maps, grid, stats = subject_sector_stats(surfaces, scales, eye, diam, fovea)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sector_stats.json").write_text(stats_to_json(stats), encoding="ascii")
    for m in maps:
        name = "total" if m.layer == TOTAL else f"layer{m.layer:02d}"
        lo, hi = float(m.values.min()), float(m.values.max())
        if hi <= lo:
            hi = lo + 1.0
        write_ppm(render_pseudocolor(m, value_range=(lo, hi)), out / f"thickness_{name}.ppm")
    if s["normdb"]:
        norm = load_normdb(s["normdb"])
        flat = {(layer, sec): st for layer, per in stats.items() for sec, st in per.items()
                if st.count > 0}
        comp = compare_to_normative(flat, norm, _float(s["z_threshold"], "z_threshold"),
                                    _float(s["borderline_z"], "borderline_z"))
        _dump_json(comparison_to_dict(comp), out / "comparison.json")
        (out / "comparison.txt").write_text(comparison_table(comp), encoding="ascii")
    print(f"report written to {out}")
    return EXIT_OK


# -- population ------------------------------------------------------------

POPULATION_DEFAULTS = {"seed": 0, "threads": None, "diameters": "1000,3000,6000"}


def read_manifest(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"path", "age", "sex", "eye"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise UsageError(f"manifest needs columns {sorted(need)}")
        base = Path(path).parent
        for n, r in enumerate(reader, 2):
            try:
                sex = r["sex"].strip().upper()
                if sex not in ("M", "F", "0", "1"):
                    raise ValueError(f"sex must be M/F/0/1, got {r['sex']!r}")
                rows.append({
                    "path": str((base / r["path"].strip()) if not Path(r["path"].strip()).is_absolute()
                                else Path(r["path"].strip())),
                    "age": float(r["age"]),
                    "sex": 1 if sex in ("M", "1") else 0,
                    "eye": _eye(r["eye"].strip()),
                })
            except (ValueError, AttributeError) as exc:
                raise UsageError(f"{path}:{n}: malformed manifest row ({exc})") from exc
    return rows


def cmd_population(args) -> int:
    s = _settings(args, POPULATION_DEFAULTS)
    cfg = _pipeline_config({**SEGMENT_DEFAULTS, "seed": s["seed"], "threads": 1})
    diam = _diameters(s["diameters"])
    rows = sorted(read_manifest(args.manifest), key=lambda r: (r["path"], r["age"], r["sex"], r["eye"]))
    if len(rows) < 2:
        raise StatsError(f"population needs at least 2 subjects, got {len(rows)}")

    def one(r):
        vol = read_volume(r["path"])
        surfaces, _ = segment(vol, cfg)
        scales = (vol.axial_scale, vol.lateral_scale_x, vol.lateral_scale_z)
        _, _, stats = subject_sector_stats(surfaces.surfaces, scales, r["eye"], diam)
        return {(layer, sec): st for layer, per in stats.items() for sec, st in per.items()}

    threads = s["threads"]
    workers = _int(threads, "threads") if threads not in (None, "") else int(
        os.environ.get("LAYERSCOPE_THREADS", 0) or min(4, os.cpu_count() or 1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_subject = list(pool.map(one, rows))
    else:
        per_subject = [one(r) for r in rows]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(per_subject[0], key=lambda k: (12 if k[0] == TOTAL else k[0], k[1]))
    with open(out / "subjects.csv", "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "age", "sex", "eye", "layer", "sector", "mean", "sd", "count"])
        for r, st in zip(rows, per_subject):
            for k in keys:
                w.writerow([r["path"], repr(r["age"]), r["sex"], r["eye"], k[0], k[1],
                            repr(st[k].mean), repr(st[k].sd), st[k].count])
    population_aggregate(per_subject, "mean", source=str(args.manifest)).dump(out / "norm_mean.json")
    population_aggregate(per_subject, "sd", source=str(args.manifest)).dump(out / "norm_sd.json")

    ages = np.array([r["age"] for r in rows])
    sexes = np.array([r["sex"] for r in rows])
    with open(out / "tests.csv", "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "sector", "slope_um_per_year", "slope_t", "slope_p",
                    "sex_t", "sex_p", "age_flag"])
        for k in keys:
            y = np.array([st[k].mean for st in per_subject], dtype=float)
            sl = slope_test(ages, y)
            if sexes.min() != sexes.max() and min((sexes == 0).sum(), (sexes == 1).sum()) >= 2:
                tt = ttest_unpaired(y[sexes == 1], y[sexes == 0])
                sex_t, sex_p = repr(tt.statistic), repr(tt.p_value)
            else:
                sex_t = sex_p = ""
            w.writerow([k[0], k[1], repr(sl.estimate), repr(sl.statistic), repr(sl.p_value),
                        sex_t, sex_p, int(sl.p_value < 0.005)])
    print(f"population of {len(rows)} subjects written to {out}")
    return EXIT_OK


# -- normdb ----------------------------------------------------------------


def cmd_normdb(args) -> int:
    if args.action == "validate":
        t = load_normdb(args.path)
        print(f"ok: {len(t.cells)} cells, layers {t.layers}, kind {t.kind}")
        return EXIT_OK
    if args.action == "list":
        for name in sorted(FIXTURES):
            print(name)
        return EXIT_OK
    src = Path(args.path)
    if src.suffix.lower() == ".csv":
        with open(src, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        cells = {}
        for r in rows:
            layer = r["layer"] if r["layer"] == TOTAL else int(r["layer"])
            cells[(layer, int(r["sector"]))] = (float(r["mean"]), float(r["sd"]))
        NormativeTable(cells, source=args.source or src.name, instrument=args.instrument or "").dump(args.dest)
    else:
        t = load_normdb(src)
        with open(args.dest, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "sector", "mean", "sd"])
            for layer in t.layers:
                for sec in range(1, 10):
                    m, sd = t.cells[(layer, sec)]
                    w.writerow([layer, sec, repr(m), repr(sd)])
    print(f"wrote {args.dest}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="layerscope", description="Diffusion-map OCT layer segmentation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="generate a synthetic layered volume")
    ph.add_argument("--out", required=True, help="output directory")
    ph.add_argument("--config")
    ph.add_argument("--dims", help="NXxNYxNZ (default 128x128x16)")
    ph.add_argument("--seed", type=int)
    ph.add_argument("--noise", type=float, help="noise SD as a fraction of the intensity range")
    ph.add_argument("--pit-depth", dest="pit_depth", type=float)
    ph.add_argument("--pit-radius", dest="pit_radius", type=float)
    ph.add_argument("--undulation", type=float)
    ph.add_argument("--axial-um", dest="axial_um", type=float)
    ph.set_defaults(func=cmd_phantom)

    sg = sub.add_parser("segment", help="segment a volume into 11 layers")
    sg.add_argument("volume")
    sg.add_argument("--out", required=True)
    sg.add_argument("--config")
    sg.add_argument("--seed", type=int)
    sg.add_argument("--threads", type=int)
    sg.add_argument("--eye", choices=["right", "left"])
    sg.add_argument("--stage2-mode", dest="stage2_mode", choices=["tiles", "slice", "band"])
    sg.add_argument("--tile", help="lateral tile size NXxNZ for stage 2")
    sg.add_argument("--restarts", type=int, help="k-means restarts")
    sg.add_argument("--diameters", help="ETDRS circle diameters in um, e.g. 1000,3000,6000")
    sg.set_defaults(func=cmd_segment)

    rp = sub.add_parser("report", help="sector statistics, images and normative comparison")
    rp.add_argument("surfaces")
    rp.add_argument("--out", required=True)
    rp.add_argument("--config")
    rp.add_argument("--volume", help="volume file supplying voxel scales")
    rp.add_argument("--axial-um", dest="axial_um", type=float, default=3.87)
    rp.add_argument("--eye", choices=["right", "left"])
    rp.add_argument("--fovea", help="x,z override for the fovea position")
    rp.add_argument("--diameters")
    rp.add_argument("--normdb", help="normative JSON path or fixture name")
    rp.add_argument("--z-threshold", dest="z_threshold", type=float)
    rp.add_argument("--borderline-z", dest="borderline_z", type=float)
    rp.set_defaults(func=cmd_report)

    po = sub.add_parser("population", help="batch-segment a manifest and run the statistics")
    po.add_argument("manifest", help="CSV with columns path,age,sex,eye")
    po.add_argument("--out", required=True)
    po.add_argument("--config")
    po.add_argument("--seed", type=int)
    po.add_argument("--threads", type=int)
    po.add_argument("--diameters")
    po.set_defaults(func=cmd_population)

    nd = sub.add_parser("normdb", help="validate or convert normative tables")
    nsub = nd.add_subparsers(dest="action", required=True, parser_class=_Parser)
    v = nsub.add_parser("validate")
    v.add_argument("path")
    nsub.add_parser("list")
    c = nsub.add_parser("convert", help="JSON to CSV or CSV to JSON by extension")
    c.add_argument("path")
    c.add_argument("dest")
    c.add_argument("--source")
    c.add_argument("--instrument")
    nd.set_defaults(func=cmd_normdb)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"layerscope: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"layerscope: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError, VolumeFormatError,
            InputError) as exc:
        print(f"layerscope: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SegmentationError, GraphError, SpectralConvergenceError, StatsError) as exc:
        print(f"layerscope: pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except OSError as exc:
        print(f"layerscope: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
