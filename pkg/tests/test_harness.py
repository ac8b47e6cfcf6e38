import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from brwsel.harness import ConfigError, load_config, parse_config, read_records, run_experiment
from brwsel.harness.cli import main
from brwsel.harness.config import KINDS, PARAMS
from brwsel.harness.experiments import DESCRIPTIONS, cells, run_cell
from brwsel.harness.plotdata import plot_rows
from brwsel.harness.records import OUT_ENV, metrics_hash

SKEWED = {"kind": "binary_pm1", "p_up": 0.25}


def _cfg(**kw):
    raw = {"schema_version": 1, "kind": "consistent_displacement", "law": SKEWED, "n": [8, 27],
           "reps": 3, "seeds": [1, 2]}
    raw.update(kw)
    return raw


def _write(tmp_path, raw, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


class TestConfig:
    def test_every_kind_described(self):
        assert set(DESCRIPTIONS) == set(KINDS) == set(PARAMS)

    @pytest.mark.parametrize("patch, match", [
        ({"n": []}, "must not be empty"),
        ({"schema_version": 2}, "schema_version"),
        ({"kind": "nope"}, "unknown experiment kind"),
        ({"colour": 1}, "unknown top-level"),
        ({"params": {"bogus": 1}}, "unknown params"),
        ({"reps": 0}, "reps"),
        ({"seeds": []}, "seeds"),
        ({"n": [4, -1]}, "non-negative"),
        ({"law": {"kind": "nope"}}, "law"),
    ])
    def test_rejections(self, patch, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(_cfg(**patch))

    def test_required_param(self):
        with pytest.raises(ConfigError, match="params.pmf"):
            parse_config({"schema_version": 1, "kind": "gw_tail", "n": [4]})

    def test_round_trip(self):
        cfg = parse_config(_cfg(params={"bar_step": 0.25}, name="x", out="o"))
        again = parse_config(yaml.safe_load(cfg.dump()))
        assert again == cfg and again.hash() == cfg.hash()

    def test_hash_ignores_output_location(self):
        a = parse_config(_cfg(out="a", name="one"))
        b = parse_config(_cfg(out="b", name="two"))
        assert a.hash() == b.hash()
        assert a.hash() != parse_config(_cfg(reps=4)).hash()

    def test_bad_yaml(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("kind: [unclosed")
        with pytest.raises(ConfigError, match="YAML"):
            load_config(p)

    def test_empty_n_writes_nothing(self, tmp_path):
        p = _write(tmp_path, _cfg(n=[], out=str(tmp_path / "res")))
        assert main(["run", "--config", str(p)]) == 2
        assert not (tmp_path / "res").exists()


class TestCells:
    def test_cell_order_and_count(self):
        cfg = parse_config(_cfg())
        cs = cells(cfg)
        assert [(c["seed"], c["n"]) for c in cs] == [(1, 8), (1, 27), (2, 8), (2, 27)]
        lam = parse_config({"schema_version": 1, "kind": "lambda",
                            "params": {"c": [-1, -2], "sigma2": [0.5, 1, 2]}})
        assert len(cells(lam)) == 6

    def test_boundary_check_symmetric_law(self):
        cfg = parse_config({"schema_version": 1, "kind": "boundary_check",
                            "law": {"kind": "binary_pm1"}})
        m = run_cell(cfg, cells(cfg)[0])
        assert m["normalizable"] is False and "W" in m["diagnostic"]

    def test_boundary_check_skewed_law(self):
        cfg = parse_config({"schema_version": 1, "kind": "boundary_check", "law": SKEWED})
        m = run_cell(cfg, cells(cfg)[0])
        np.testing.assert_allclose(m["theta_star"], 1.27662245, atol=1e-8)
        assert m["residual_max"] < 1e-9

    def test_selection_profile_reference(self):
        cfg = parse_config({"schema_version": 1, "kind": "selection_profile", "law": SKEWED,
                            "n": [8], "reps": 2, "params": {"h": 1.5}})
        m = run_cell(cfg, cells(cfg)[0])
        s2 = 1.0004087714748
        np.testing.assert_allclose(m["reference_max"], 1.5 - math.pi**2 * s2 / (2 * 1.5**2),
                                   rtol=1e-9)
        assert m["founders"] == math.floor(math.exp(1.5 * 2))

    def test_more_reps_keep_earlier_replicas(self):
        small = run_cell(parse_config(_cfg(reps=3)), {"seed": 1, "n": 27})
        big = run_cell(parse_config(_cfg(reps=5)), {"seed": 1, "n": 27})
        assert big["values_scaled"][:3] == small["values_scaled"]

    def test_gw_tail_cell(self):
        cfg = parse_config({"schema_version": 1, "kind": "gw_tail", "n": [6], "reps": 500,
                            "params": {"pmf": {1: 0.5, 3: 0.5}}})
        m = run_cell(cfg, cells(cfg)[0])
        assert m["case"] == "b1" and m["exponent"] == 1.0 and len(m["rows"]) == 2


class TestRunAndRecords:
    def test_reproducible_and_worker_independent(self, tmp_path):
        cfg = parse_config(_cfg())
        one = read_records(run_experiment(cfg, str(tmp_path / "a"), echo=None)["records"])
        two = read_records(run_experiment(cfg, str(tmp_path / "b"), echo=None)["records"])
        par = read_records(run_experiment(cfg, str(tmp_path / "c"), workers=2,
                                          echo=None)["records"])
        strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_time"} for r in rs]
        assert strip(one) == strip(two) == strip(par)
        assert all(r["metrics_hash"] == metrics_hash(r["metrics"]) for r in one)

    def test_files(self, tmp_path):
        cfg = parse_config(_cfg())
        paths = run_experiment(cfg, str(tmp_path), echo=None)
        assert Path(paths["records"]).name.startswith("consistent_displacement-" + cfg.hash()[:12])
        assert not list(tmp_path.glob("*.incomplete"))
        with open(paths["summary"]) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4 and "median_scaled" in rows[0]

    def test_env_out(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
        p = _write(tmp_path, _cfg(n=[4], seeds=[0], reps=1))
        assert main(["run", "--config", str(p)]) == 0
        assert list((tmp_path / "env").glob("*.jsonl"))

    def test_seed_override(self, tmp_path):
        p = _write(tmp_path, _cfg(n=[4], reps=1))
        assert main(["run", "--config", str(p), "--seed", "9", "--out", str(tmp_path)]) == 0
        recs = read_records(next(tmp_path.glob("*.jsonl")))
        assert {r["seed"] for r in recs} == {9}

    def test_failure_marks_incomplete(self, tmp_path):
        cfg = parse_config({"schema_version": 1, "kind": "many_to_one", "law": SKEWED,
                            "n": [1, 9], "params": {"max_depth": 3}})
        with pytest.raises(Exception):
            run_experiment(cfg, str(tmp_path), echo=None)
        part = list(tmp_path.glob("*.jsonl.incomplete"))
        assert len(part) == 1
        lines = part[0].read_text().splitlines()
        assert json.loads(lines[-1])["incomplete"] is True
        with pytest.raises(ValueError, match="incomplete"):
            read_records(part[0])

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "r.jsonl"
        good = json.dumps({"kind": "x", "metrics": {}})
        p.write_text(good + "\n" + good + "\n{truncated\n")
        with pytest.raises(ValueError, match="line 3"):
            read_records(p)


class TestPlotData:
    def test_survival_scaling_series(self, tmp_path):
        cfg = parse_config({"schema_version": 1, "kind": "survival_scaling", "law": SKEWED,
                            "n": [27, 64], "reps": 300})
        rec = run_experiment(cfg, str(tmp_path), echo=None)["records"]
        rows = plot_rows([rec])
        series = {r["series"] for r in rows}
        assert series == {"eps_half_log_rho", "reference"}
        ref = [r for r in rows if r["series"] == "reference"]
        assert len(ref) == 2
        np.testing.assert_allclose(ref[0]["y"], -math.pi * math.sqrt(1.0004087714748) / math.sqrt(2),
                                   rtol=1e-9)

    def test_single_run_single_series(self, tmp_path):
        cfg = parse_config({"schema_version": 1, "kind": "killed_brw", "law": SKEWED, "n": [8],
                            "reps": 50})
        rec = run_experiment(cfg, str(tmp_path), echo=None)["records"]
        out = tmp_path / "plot.csv"
        assert main(["plot-data", str(rec), "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1 and rows[0]["series"] == "survival"
        assert list(rows[0]) == ["x", "y", "series", "ci_lo", "ci_hi"]

    def test_mixed_configs_rejected(self, tmp_path, capsys):
        a = run_experiment(parse_config(_cfg(n=[4], reps=1)), str(tmp_path), echo=None)
        b = run_experiment(parse_config(_cfg(n=[4], reps=2)), str(tmp_path), echo=None)
        code = main(["plot-data", str(a["records"]), str(b["records"]), "--out",
                     str(tmp_path / "p.csv")])
        assert code == 2 and "different configs" in capsys.readouterr().err

    def test_kind_mismatch(self, tmp_path):
        a = run_experiment(parse_config(_cfg(n=[4], reps=1)), str(tmp_path), echo=None)
        with pytest.raises(ValueError, match="not 'gw_tail'"):
            plot_rows([a["records"]], kind="gw_tail")


class TestCli:
    def test_list(self, capsys):
        assert main(["list-experiments"]) == 0
        out = capsys.readouterr().out
        assert all(k in out for k in KINDS)

    def test_validate(self, tmp_path, capsys):
        p = _write(tmp_path, _cfg())
        assert main(["validate-config", "--config", str(p)]) == 0
        assert "ok: consistent_displacement" in capsys.readouterr().out
        bad = _write(tmp_path, _cfg(kind="nope"), "bad.yaml")
        assert main(["validate-config", "--config", str(bad)]) == 2

    def test_missing_file(self, tmp_path, capsys):
        assert main(["validate-config", "--config", str(tmp_path / "none.yaml")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_workers_validated(self, tmp_path):
        p = _write(tmp_path, _cfg())
        assert main(["run", "--config", str(p), "--workers", "0"]) == 2
