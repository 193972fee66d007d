"""Command-line scenario runner.

Usage::

    photonstore list-scenarios
    photonstore validate CONFIG
    photonstore run CONFIG [--out DIR] [--seed N] [--grid-scale F] [--jobs N]
    photonstore compare CONFIG CONFIG... [--out DIR] ...

``CONFIG`` is a JSON file or the name of a built-in scenario. The output
root is ``--out``, else ``$PHOTONSTORE_OUT``, else the config's
``output_dir``, else ``./runs``; each scenario writes into its own
subdirectory.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__
from ..core_numerics import NumericalError, UsageError
from . import config as config_mod
from .config import REGISTRY, ScenarioConfig
from .scenarios import PointResult, PointTask, evaluate_point

log = logging.getLogger("photonstore")

OUT_ENV = "PHOTONSTORE_OUT"

UNITS = {
    "C": "cooperativity",
    "d": "optical depth",
    "x": "T*coupling*gamma",
    "T": "1/gamma",
    "t": "1/gamma",
    "crib_width": "gamma",
    "crib_ascent_width": "gamma",
    "constant_amplitude": "gamma",
    "iterations": "count",
    "converged": "flag",
}


def format_value(v) -> str:
    """17 significant digits for floats; refuses NaN and infinities."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    v = float(v)
    if not math.isfinite(v):
        raise NumericalError("refusing to serialize a non-finite value")
    return format(v, ".17g")


def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: Path, columns: list, rows: list, units: dict | None = None):
    """Comma-delimited table with a ``#`` units line above the header."""
    units = units or {}
    lines = ["# units: " + ", ".join(f"{c} [{units.get(c, 'dimensionless')}]" for c in columns),
             ",".join(columns)]
    for r in rows:
        lines.append(",".join(format_value(r.get(c)) for c in columns))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_waveforms(path: Path, waves: dict):
    columns = list(waves)
    n = len(waves["t"])
    rows = [{c: waves[c][k] for c in columns} for k in range(n)]
    write_csv(path, columns, rows, {c: ("gamma" if c.startswith("omega") else
                                        "sqrt(gamma)" if c == "e_in" else UNITS.get(c, "dimensionless"))
                                    for c in columns})


def gnuplot_script(csv_name: str, columns: list, value_columns: list, x_label: str, title: str,
                   logx: bool = True) -> str:
    lines = [
        f"# {title}",
        "set datafile separator ','",
        "set datafile commentschars '#'",
        "set key autotitle columnhead",
        f"set xlabel '{x_label}'",
        "set ylabel 'efficiency'",
        "set yrange [0:1]",
    ]
    if logx:
        lines.append("set logscale x")
    xi = columns.index("x") + 1
    plots = [f"'{csv_name}' every ::1 using {xi}:{columns.index(c) + 1} with linespoints" for c in value_columns]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def waveform_script(csv_name: str, columns: list) -> str:
    lines = [
        "set datafile separator ','",
        "set datafile commentschars '#'",
        "set key autotitle columnhead",
        "set xlabel 't [1/gamma]'",
    ]
    plots = [f"'{csv_name}' every ::1 using 1:{k + 1} with lines" for k, c in enumerate(columns) if c != "t"]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def output_root(cli_out: str | None, cfg: ScenarioConfig | None = None) -> Path:
    if cli_out:
        return Path(cli_out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path("runs")


def _prepare_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = tempfile.NamedTemporaryFile(dir=path, prefix=".probe", delete=True)
        probe.close()
    except OSError as exc:
        raise UsageError(f"output directory {path} is not writable: {exc}") from None
    return path


def _tasks(cfg: ScenarioConfig, seed: int, grid_scale: float) -> list:
    data = cfg.to_dict()
    tasks, k = [], 0
    for c in cfg.couplings:
        for x in cfg.sweep:
            tasks.append(PointTask(data, k, float(c), float(x), grid_scale, seed))
            k += 1
    return tasks


def _run_task(task: PointTask) -> PointResult:
    try:
        return evaluate_point(task)
    except NumericalError as exc:
        # keep the point: an empty value column and an explicit error beat a silent gap
        message = " ".join(str(exc).replace(",", ";").split())
        return PointResult({"converged": False, "error": message}, {}, {})


def _evaluate(tasks: list, jobs: int) -> list:
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_task, tasks))
    return [_run_task(t) for t in tasks]


def run_scenario(cfg: ScenarioConfig, out_root=None, seed: int | None = None, grid_scale: float = 1.0,
                 jobs: int = 1) -> Path:
    """Evaluate every sweep point and write tables, waveforms, plot scripts and the manifest.

    Returns the scenario output directory. The manifest is written last.
    """
    if not grid_scale > 0:
        raise UsageError("grid scale must be positive")
    if jobs < 1:
        raise UsageError("jobs must be at least 1")
    seed = cfg.seed if seed is None else int(seed)
    outdir = _prepare_dir(output_root(out_root, cfg) / cfg.name)
    t0 = time.perf_counter()
    tasks = _tasks(cfg, seed, grid_scale)
    results = _evaluate(tasks, jobs)

    cname = cfg.coupling_name
    rows, value_cols, extra_cols = [], [], []
    for task, res in zip(tasks, results):
        row = {cname: task.coupling, "x": task.x, "T": task.x / task.coupling, **res.row}
        rows.append(row)
        for key in res.row:
            if key in ("converged", "error"):
                continue
            target = value_cols if key.split("_")[0] in ("storage", "total", "complete") else extra_cols
            if key not in target:
                target.append(key)
    has_error = any("error" in r for r in rows)
    columns = [cname, "x", "T", *value_cols, *extra_cols, "converged"] + (["error"] if has_error else [])
    units = dict(UNITS, x=f"T*{cname}*gamma")
    write_csv(outdir / "points.csv", columns, rows, units)
    plot_cols = [c for c in value_cols if c.startswith(("total", "complete", "storage_optimal"))] or value_cols
    (outdir / "points.gp").write_text(gnuplot_script("points.csv", columns, plot_cols,
                                                     f"T {cname} gamma", cfg.description or cfg.name,
                                                     logx=len(cfg.sweep) > 1))
    waveform_files = []
    for task, res in zip(tasks, results):
        if res.waveforms:
            stem = f"waveform_{cname}{format_value(task.coupling)}_x{format_value(task.x)}"
            write_waveforms(outdir / f"{stem}.csv", res.waveforms)
            (outdir / f"{stem}.gp").write_text(waveform_script(f"{stem}.csv", list(res.waveforms)))
            waveform_files.append(f"{stem}.csv")

    manifest = {
        "toolkit": "photonstore",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        "seed": seed,
        "grid_scale": grid_scale,
        "jobs": jobs,
        "wall_time_s": time.perf_counter() - t0,
        "points": [
            {"coupling": t.coupling, "x": t.x, "converged": bool(r.row.get("converged", False)),
             "grid": r.grid, **({"error": r.row["error"]} if "error" in r.row else {})}
            for t, r in zip(tasks, results)
        ],
        "files": ["points.csv", "points.gp", *waveform_files],
    }
    _atomic_write(outdir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    n_bad = sum(not p["converged"] for p in manifest["points"])
    if n_bad:
        log.warning("%s: %d of %d points did not converge (flagged in points.csv)", cfg.name, n_bad, len(tasks))
    return outdir


def read_points(path) -> tuple:
    """Header and rows of a ``points.csv`` as ``(columns, list of dicts of strings)``."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    columns = lines[0].split(",")
    return columns, [dict(zip(columns, ln.split(","))) for ln in lines[1:]]


def sweep_compare(cfgs, out_root=None, seed: int | None = None, grid_scale: float = 1.0, jobs: int = 1,
                  name: str | None = None) -> Path:
    """Run scenarios that share input and sweep axis; tabulate every method per point.

    Columns are ``<scenario>:<method column>`` after the shared axis, with
    one ``converged`` column per scenario.
    """
    cfgs = list(cfgs)
    if not cfgs:
        raise UsageError("nothing to compare")
    ref = cfgs[0]
    for c in cfgs[1:]:
        if (c.coupling_name, sorted(c.couplings), sorted(c.sweep)) != (
                ref.coupling_name, sorted(ref.couplings), sorted(ref.sweep)):
            raise UsageError(f"sweep axes of {ref.name!r} and {c.name!r} differ")
        if c.input_shape != ref.input_shape:
            raise UsageError(f"input shapes of {ref.name!r} and {c.name!r} differ")
    name = name or "compare_" + "_".join(c.name for c in cfgs)
    root = output_root(out_root, ref)
    tables = []
    for c in cfgs:
        d = run_scenario(c, root, seed, grid_scale, jobs)
        tables.append((c, *read_points(d / "points.csv")))
    cname = ref.coupling_name
    columns = [cname, "x", "T"]
    merged = {}
    for c, cols, rows in tables:
        value_cols = [k for k in cols if k not in (cname, "x", "T", "error")]
        prefix = f"{c.name}:" if len(cfgs) > 1 else ""
        columns += [prefix + k for k in value_cols]
        for r in rows:
            key = (float(r[cname]), float(r["x"]))
            entry = merged.setdefault(key, {cname: r[cname], "x": r["x"], "T": r["T"]})
            entry.update({prefix + k: r[k] for k in value_cols})
    rows = [merged[k] for k in sorted(merged)]
    outdir = _prepare_dir(root)
    write_csv(outdir / f"{name}.csv", columns, rows, dict(UNITS, x=f"T*{cname}*gamma"))
    value_cols = [c for c in columns if c.split(":")[-1].startswith(("total", "complete"))]
    (outdir / f"{name}.gp").write_text(gnuplot_script(f"{name}.csv", columns, value_cols,
                                                      f"T {cname} gamma", name, logx=len(ref.sweep) > 1))
    return outdir / f"{name}.csv"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="photonstore", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("list-scenarios", help="list built-in scenarios")
    p_val = sub.add_parser("validate", help="check a configuration without running it")
    p_val.add_argument("config")
    for cmd, nargs, text in (("run", None, "run one scenario"), ("compare", "+", "run and tabulate scenarios")):
        p = sub.add_parser(cmd, help=text)
        p.add_argument("config", nargs=nargs)
        p.add_argument("--out", help=f"output root (overrides ${OUT_ENV})")
        p.add_argument("--seed", type=int, help="seed for initial-guess jitter")
        p.add_argument("--grid-scale", type=float, default=1.0, help="multiplies default grid densities")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweep points")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "list-scenarios":
            for name, spec in REGISTRY.items():
                print(f"{name:8s} {spec['model']:12s} {spec['description']}")
            return 0
        if args.command == "validate":
            cfg = config_mod.load(args.config)
            print(f"{cfg.name}: valid ({cfg.model}, {len(cfg.couplings) * len(cfg.sweep)} points)")
            return 0
        if args.command == "run":
            outdir = run_scenario(config_mod.load(args.config), args.out, args.seed, args.grid_scale, args.jobs)
            print(outdir)
            return 0
        path = sweep_compare([config_mod.load(c) for c in args.config], args.out, args.seed,
                             args.grid_scale, args.jobs)
        print(path)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
