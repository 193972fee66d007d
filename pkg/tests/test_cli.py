import json
import os
import stat

import pytest

from photonstore.cli import config as cfgmod
from photonstore.cli.runner import (
    OUT_ENV,
    _evaluate,
    _tasks,
    format_value,
    main,
    output_root,
    read_points,
    run_scenario,
    sweep_compare,
)
from photonstore.core_numerics import NumericalError, UsageError

SMALL = {"schema_version": 1, "name": "small", "model": "cavity", "couplings": [1.0], "sweep": [2.0, 5.0],
         "methods": ["optimal", "constant"], "optimizer": {"max_iters": 30}, "waveforms": True}


def small(**changes):
    return cfgmod.from_dict({**SMALL, **changes})


@pytest.mark.parametrize("changes, message", [
    ({"sweep": []}, "non-empty"),
    ({"couplings": [0.0]}, "positive"),
    ({"model": "ring"}, "model"),
    ({"model": "free_space", "couplings": [150.0], "methods": None}, "optical depth"),
    ({"methods": ["crib"]}, "methods"),
    ({"input_shape": "/nonexistent/mode.txt"}, "input shape"),
    ({"schema_version": 2}, "schema_version"),
    ({"optimizer": {"momentum": 0.9}}, "optimizer"),
    ({"width_scan": [1.0, 0.5, 3]}, "width_scan"),
    ({"name": "a/b"}, "name"),
])
def test_invalid_configurations(changes, message):
    with pytest.raises(UsageError, match=message):
        small(**changes)


def test_from_dict_and_load_errors(tmp_path):
    with pytest.raises(UsageError, match="unknown configuration keys"):
        cfgmod.from_dict({**SMALL, "colour": "red"})
    with pytest.raises(UsageError, match="schema_version"):
        cfgmod.from_dict({k: v for k, v in SMALL.items() if k != "schema_version"})
    with pytest.raises(UsageError, match="does not exist"):
        cfgmod.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(UsageError, match="not valid JSON"):
        cfgmod.load(bad)
    assert cfgmod.load("fig3a").model == "cavity"


def test_registry_is_valid():
    for name in cfgmod.REGISTRY:
        cfg = cfgmod.registry_config(name)
        assert cfg.name == name and cfg.method_list
    sweep = cfgmod.log_sweep(0.1, 1000.0)
    assert len(sweep) == 49 and sweep[0] == pytest.approx(0.1) and sweep[-1] == pytest.approx(1000.0)


def test_format_value():
    assert format_value(0.1) == "0.10000000000000001"
    assert format_value(True) == "1" and format_value(3) == "3" and format_value(None) == ""
    for bad in (float("nan"), float("inf")):
        with pytest.raises(NumericalError):
            format_value(bad)


def test_output_root_precedence(monkeypatch, tmp_path):
    cfg = small(output_dir=str(tmp_path / "cfg"))
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert output_root(None, cfg) == tmp_path / "cfg"
    assert str(output_root(None, small())) == "runs"
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert output_root(None, cfg) == tmp_path / "env"
    assert output_root(str(tmp_path / "cli"), cfg) == tmp_path / "cli"


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    return run_scenario(small(), root / "a"), run_scenario(small(), root / "b", jobs=2)


def test_run_writes_tables_and_manifest(small_run):
    outdir, _ = small_run
    cols, rows = read_points(outdir / "points.csv")
    assert cols[:3] == ["C", "x", "T"] and "total_optimal" in cols and "converged" in cols
    assert (outdir / "points.csv").read_text().startswith("# units:")
    assert len(rows) == 2
    for r in rows:
        assert float(r["total_optimal"]) >= float(r["total_constant"]) - 1e-9
        assert float(r["T"]) == pytest.approx(float(r["x"]) / float(r["C"]))
    manifest = json.loads((outdir / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["name"] == "small"
    for f in manifest["files"]:
        assert (outdir / f).exists()
    # the recorded grid is the one the waveforms were written on
    wf = [f for f in manifest["files"] if f.startswith("waveform")][0]
    n_rows = len((outdir / wf).read_text().splitlines()) - 2
    assert n_rows in [p["grid"]["n_t"] for p in manifest["points"]]
    assert not list(outdir.glob(".*.tmp"))


def test_runs_are_deterministic_and_parallel_safe(small_run):
    a, b = small_run
    assert (a / "points.csv").read_bytes() == (b / "points.csv").read_bytes()
    for f in a.glob("waveform_*.csv"):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_seeded_jitter_is_reproducible(tmp_path):
    cfg = small(jitter=0.2, sweep=[2.0], waveforms=False)
    one = (run_scenario(cfg, tmp_path / "x", seed=7) / "points.csv").read_bytes()
    two = (run_scenario(cfg, tmp_path / "y", seed=7) / "points.csv").read_bytes()
    assert one == two


def test_env_var_sets_output_root(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "envroot"))
    outdir = run_scenario(small(sweep=[2.0], methods=["constant"], waveforms=False))
    assert outdir == tmp_path / "envroot" / "small"
    assert (outdir / "manifest.json").exists()


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_directory(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(stat.S_IRUSR | stat.S_IXUSR)
    try:
        with pytest.raises(UsageError, match="not writable"):
            run_scenario(small(), locked)
    finally:
        locked.chmod(stat.S_IRWXU)


def test_output_path_that_is_a_file(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(UsageError, match="not writable"):
        run_scenario(small(), blocker)


def test_run_argument_guards(tmp_path):
    with pytest.raises(UsageError):
        run_scenario(small(), tmp_path, grid_scale=0.0)
    with pytest.raises(UsageError):
        run_scenario(small(), tmp_path, jobs=0)


def test_compare_single_point_and_mismatch(tmp_path):
    one = small(name="one", sweep=[2.0], methods=["constant"], waveforms=False)
    two = small(name="two", sweep=[2.0], methods=["optimal"], waveforms=False)
    path = sweep_compare([one, two], tmp_path)
    cols, rows = read_points(path)
    assert "one:total_constant" in cols and "two:total_optimal" in cols and len(rows) == 1
    single = sweep_compare([one], tmp_path, name="solo")
    assert "total_constant" in read_points(single)[0]
    with pytest.raises(UsageError, match="sweep axes"):
        sweep_compare([one, small(name="three", sweep=[3.0])], tmp_path)
    with pytest.raises(UsageError, match="input shapes"):
        sweep_compare([one, small(name="four", sweep=[2.0], input_shape="square")], tmp_path)
    with pytest.raises(UsageError):
        sweep_compare([], tmp_path)


def test_main_exit_codes(tmp_path, capsys):
    assert main(["list-scenarios"]) == 0
    assert "fig7" in capsys.readouterr().out
    good = tmp_path / "good.json"
    good.write_text(json.dumps({**SMALL, "sweep": [2.0], "methods": ["constant"], "waveforms": False}))
    assert main(["validate", str(good)]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**SMALL, "sweep": []}))
    assert main(["validate", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err
    assert main(["run", str(good), "--out", str(tmp_path / "out"), "--seed", "3"]) == 0
    assert json.loads((tmp_path / "out" / "small" / "manifest.json").read_text())["seed"] == 3
    assert main(["run", str(tmp_path / "nope.json")]) == 2


def test_cavity_asymptote_at_large_tc():
    # at T C gamma = 200 the total efficiency approaches (C / (1 + C))^2
    cfg = cfgmod.from_dict({"schema_version": 1, "name": "asym", "model": "cavity", "couplings": [1, 10, 100],
                            "sweep": [200.0], "methods": ["optimal", "adiabatic"]})
    for task, res in zip(_tasks(cfg, 0, 1.0), _evaluate(_tasks(cfg, 0, 1.0), 1)):
        C = task.coupling
        assert abs(res.row["total_optimal"] - (C / (1 + C)) ** 2) < 0.01
        assert res.row["total_optimal"] >= res.row["total_adiabatic"] - 1e-9


def test_crib_cavity_point_orders_methods(tmp_path):
    cfg = cfgmod.from_dict({"schema_version": 1, "name": "cc", "model": "crib_cavity", "couplings": [50],
                            "sweep": [2.0], "width_scan": [0.5, 8.0, 6], "optimizer": {"max_iters": 60}})
    cols, rows = read_points(run_scenario(cfg, tmp_path) / "points.csv")
    r = {k: float(v) for k, v in rows[0].items()}
    assert r["total_optimal"] >= r["total_crib"] - 1e-3
    assert r["total_crib"] >= max(r["total_fast_homogeneous"], r["total_crib_ascent"]) - 1e-9
    assert r["crib_ascent_width"] > 0
