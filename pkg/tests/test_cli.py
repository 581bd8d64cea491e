import csv
import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from conftest import TRUE_LIN, TRUE_NL
from zipflppl.calibration import FitConfig, load_config
from zipflppl.cli import CONFIG_ENV, main
from zipflppl.inference import aggregate_stats
from zipflppl.market_data import build_factor_series, index_price, load_factor_csv, load_panel
from zipflppl.synth import SynthSpec

LIGHT_CFG = "n_starts = 20\nn_refine = 10\nlm_max_iter = 60\n"


@pytest.fixture
def light_config(tmp_path):
    p = tmp_path / "light.cfg"
    p.write_text(LIGHT_CFG)
    return str(p)


def _spec(tmp_path, sigma=0.0, tc=220.0, t2=200, panel=None, seed=0):
    nl = replace(TRUE_NL, tc=tc)
    d = {"series": SynthSpec(nl, TRUE_LIN, 1, t2, sigma, "linear-drift", 0.002, (), seed).to_dict()}
    if panel:
        d["panel"] = panel
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(d))
    return str(p)


def _read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_synth_then_fit_recovers_truth(tmp_path, light_config):
    out = tmp_path / "syn"
    assert main(["synth", _spec(tmp_path), "--out", str(out)]) == 0
    assert main(["fit", str(out / "factor.csv"), "--model", "zipf", "--config", light_config,
                 "--out", str(tmp_path / "fit"), "--no-plot"]) == 0
    best = json.loads((tmp_path / "fit" / "best_params.json").read_text())["zipf"]
    assert abs(best["tc"] - 220.0) <= 0.5 and abs(best["m"] - 0.5) <= 0.01
    assert abs(best["omega"] - 8.0) <= 0.05 and abs(best["gamma"] - 0.4) <= 1e-3
    assert best["rss"] < 1e-18
    assert not (tmp_path / "fit" / "wilks.json").exists()


def test_fit_both_emits_wilks_and_plot_data(tmp_path, light_config):
    out = tmp_path / "syn"
    main(["synth", _spec(tmp_path, sigma=1e-3, tc=170.0, t2=150, seed=4), "--out", str(out)])
    fit = tmp_path / "fit"
    assert main(["fit", str(out / "factor.csv"), "--config", light_config, "--out", str(fit)]) == 0
    w = json.loads((fit / "wilks.json").read_text())
    assert w["pooled"]["reject_at_5pct"] and w["pooled"]["T"] == 1500 and w["single"]["T"] == 150
    rows = _read(fit / "plot_data.csv")
    assert len(rows) == 150
    assert [c for c in rows[0] if c.startswith("jls_")] == [f"jls_{k}" for k in range(1, 11)]
    assert [c for c in rows[0] if c.startswith("zipf_")] == [f"zipf_{k}" for k in range(1, 11)]
    assert (fit / "fit.svg").read_text().startswith("<?xml")
    manifest = json.loads((fit / "manifest.json").read_text())
    assert manifest["command"] == "fit" and manifest["config"]["n_starts"] == 20


def test_synth_is_reproducible_and_validates(tmp_path):
    spec = _spec(tmp_path, sigma=0.01)
    main(["synth", spec, "--out", str(tmp_path / "a")])
    main(["synth", spec, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "factor.csv").read_bytes() == (tmp_path / "b" / "factor.csv").read_bytes()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"series": dict(json.loads(open(spec).read())["series"], t2=300)}))
    assert main(["synth", str(bad), "--out", str(tmp_path / "c")]) == 2
    bad.write_text("{not json")
    assert main(["synth", str(bad), "--out", str(tmp_path / "c")]) == 2
    bad.write_text("{}")
    assert main(["synth", str(bad), "--out", str(tmp_path / "c")]) == 2


def test_panel_round_trip_through_zipf(tmp_path):
    panel = {"n_firms": 30, "t0": 0, "t2": 80, "tail_exponent": 1.2, "seed": 3,
             "delistings": [[4, 50]], "suspensions": [[2, 10, 12]]}
    out = tmp_path / "syn"
    assert main(["synth", _spec(tmp_path, panel=panel), "--out", str(out)]) == 0
    assert main(["zipf", str(out / "panel.csv"), "--t1", "5", "--t2", "80", "--out", str(tmp_path / "z.csv")]) == 0
    got = load_factor_csv(tmp_path / "z.csv")
    p = load_panel(out / "panel.csv")
    want = build_factor_series(p, index_price(p, base_day=4), 5, 80)
    assert np.array_equal(got.zeta, want.zeta) and np.array_equal(got.ln_p, want.ln_p)
    assert got.dates == want.dates
    assert (tmp_path / "z.csv.manifest.json").exists()


def test_zipf_symmetric_panel_gives_zero_factor(tmp_path):
    panel = {"n_firms": 2, "t0": 0, "t2": 40, "equal_caps": True, "common_returns": True, "seed": 1}
    out = tmp_path / "syn"
    main(["synth", _spec(tmp_path, panel=panel), "--out", str(out)])
    main(["zipf", str(out / "panel.csv"), "--out", str(tmp_path / "z.csv")])
    zeta = [float(r["zeta"]) for r in _read(tmp_path / "z.csv")]
    assert max(abs(z) for z in zeta) < 1e-13


def test_zipf_date_arguments(tmp_path):
    panel = {"n_firms": 5, "t0": 0, "t2": 40, "seed": 1}
    out = tmp_path / "syn"
    main(["synth", _spec(tmp_path, panel=panel), "--out", str(out)])
    dates = load_panel(out / "panel.csv").dates
    main(["zipf", str(out / "panel.csv"), "--t1", dates[3], "--t2", dates[30], "--out", str(tmp_path / "z.csv")])
    rows = _read(tmp_path / "z.csv")
    assert rows[0]["date"] == dates[3] and rows[-1]["date"] == dates[30] and int(rows[0]["t"]) == 3
    assert main(["zipf", str(out / "panel.csv"), "--t1", "1999-01-01", "--out", str(tmp_path / "y.csv")]) == 2


def test_malformed_panel_names_line(tmp_path, capsys):
    p = tmp_path / "panel.csv"
    p.write_text("date,firm,cap,status\n2006-01-02,F1,100,A\n2006-01-02,F2,oops,A\n")
    assert main(["zipf", str(p), "--out", str(tmp_path / "z.csv")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_short_window_refused(tmp_path, light_config):
    out = tmp_path / "syn"
    main(["synth", _spec(tmp_path), "--out", str(out)])
    code = main(["fit", str(out / "factor.csv"), "--t1", "1", "--t2", "20", "--config", light_config,
                 "--out", str(tmp_path / "fit")])
    assert code == 2


def test_unknown_config_key(tmp_path):
    out = tmp_path / "syn"
    main(["synth", _spec(tmp_path), "--out", str(out)])
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("n_startz = 3\n")
    assert main(["fit", str(out / "factor.csv"), "--config", str(cfg), "--out", str(tmp_path / "f")]) == 2


def test_config_from_environment(tmp_path, light_config, monkeypatch):
    out = tmp_path / "syn"
    main(["synth", _spec(tmp_path), "--out", str(out)])
    monkeypatch.setenv(CONFIG_ENV, light_config)
    main(["fit", str(out / "factor.csv"), "--model", "jls", "--seed", "9", "--keep-best", "4",
          "--out", str(tmp_path / "f"), "--no-plot"])
    m = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert m["config"]["n_starts"] == 20 and m["config"]["seed"] == 9 and m["config"]["keep_best"] == 4
    assert len(json.loads((tmp_path / "f" / "fits_jls.json").read_text())) == 4


def test_strict_mode_escalates_warnings(tmp_path, light_config):
    # clean data has far fewer than 40 distinct basins, which strict mode escalates
    out = tmp_path / "syn"
    main(["synth", _spec(tmp_path), "--out", str(out)])
    args = ["fit", str(out / "factor.csv"), "--model", "zipf", "--config", light_config, "--keep-best", "40",
            "--out", str(tmp_path / "f"), "--no-plot"]
    assert main(args) == 0
    assert main(args + ["--strict"]) == 4


def _scan(tmp_path, name, light_config, extra=()):
    out = tmp_path / name
    code = main(["scan", str(tmp_path / "syn" / "factor.csv"), "--t1", "1", "--t2", "140", "--n-t1", "2",
                 "--n-t2", "2", "--config", light_config, "--out", str(out), *extra])
    return code, out


def test_scan_counts_summary_and_determinism(tmp_path, light_config):
    main(["synth", _spec(tmp_path, sigma=0.005, tc=170.0, t2=150, seed=2), "--out", str(tmp_path / "syn")])
    code, a = _scan(tmp_path, "a", light_config)
    assert code == 0
    rows = _read(a / "scan_fits.csv")
    for model in ("jls", "zipf"):
        sub = [r for r in rows if r["model"] == model]
        assert len(sub) == 40
        assert len({(r["t1"], r["t2"]) for r in sub}) == 4
    summary = {(r["quantity"], r["model"]): r for r in _read(a / "scan_summary.csv")}
    for model in ("jls", "zipf"):
        want = aggregate_stats([float(r["tc"]) for r in rows if r["model"] == model])
        got = summary[("tc", model)]
        assert (float(got["mean"]), float(got["median"]), float(got["std"])) == want
    want = aggregate_stats([float(r["gamma"]) for r in rows if r["model"] == "zipf"])
    got = summary[("gamma", "zipf")]
    assert (float(got["mean"]), float(got["median"]), float(got["std"])) == want
    assert summary[("tc", "jls")]["mean_date"] != ""

    _, b = _scan(tmp_path, "b", light_config, ["--jobs", "2"])
    for name in ("scan_fits.csv", "scan_summary.csv", "scan.svg", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_fit_outputs_byte_identical(tmp_path, light_config):
    main(["synth", _spec(tmp_path, sigma=0.005, seed=6), "--out", str(tmp_path / "syn")])
    for name in ("a", "b"):
        main(["fit", str(tmp_path / "syn" / "factor.csv"), "--t1", "20", "--t2", "180",
              "--config", light_config, "--out", str(tmp_path / name)])
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "zipflppl", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
    r = subprocess.run([sys.executable, "-m", "zipflppl", "fit", str(tmp_path / "missing.csv"), "--out",
                        str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == 2 and "error" in r.stderr


def test_light_config_parses(light_config):
    assert load_config(light_config) == FitConfig(n_starts=20, n_refine=10, lm_max_iter=60)
