import json

import pytest

from cloudauction import cli, sim

FAST1 = ["--set", "lams=10", "--set", "deltas=0,1"]


def test_presets():
    t2 = cli.build_config({}, "table2").stage2
    assert (t2.u, t2.mu_active, t2.lambdaA, t2.lambdaCCN, t2.lambdaCP, t2.z, t2.a) == (
        5, 0.6, 0.2, 0.5, 0.75, 104, 0.01
    )
    lap = cli.build_config({}, "table1-laplace")
    assert (lap.bids, lap.laplace_mu, lap.laplace_w, lap.delta, lap.v_min, lap.v_max, lap.pB) == (
        "laplace", 70, 50, 1, 48, 312, 0.5
    )


def test_empty_file_lists_all_missing_keys(tmp_path):
    f = tmp_path / "empty.cfg"
    f.write_text("")
    with pytest.raises(cli.ConfigError) as err:
        cli.parse_config(f)
    for key in cli.REQUIRED:
        assert key in str(err.value)


def test_unknown_and_bad_keys(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("preset = table1-uniform\nbogus = 3\n")
    with pytest.raises(cli.ConfigError, match="bogus"):
        cli.parse_config(f)
    f.write_text("preset = table1-uniform\nreps = many\n")
    with pytest.raises(cli.ConfigError, match="reps"):
        cli.parse_config(f)
    f.write_text("preset = table1-uniform\npB = 2\n")
    with pytest.raises(cli.ConfigError, match="pB"):
        cli.parse_config(f)
    f.write_text("preset = nope\n")
    with pytest.raises(cli.ConfigError, match="nope"):
        cli.parse_config(f)
    f.write_text("preset = table1-uniform\nreps 3\n")
    with pytest.raises(cli.ConfigError, match="line 2"):
        cli.parse_config(f)


def test_config_file_round_trip(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\npreset = table2\ngamma = 0.2  # steeper\nlams = 5, 10\nq = none\n")
    cfg = cli.parse_config(f)
    assert cfg.stage2.gamma == 0.2 and cfg.lams == (5.0, 10.0) and cfg.stage2.q is None
    echo = tmp_path / "echo.cfg"
    echo.write_text("\n".join(cli.config_lines(cfg)))
    assert cli.parse_config(echo) == cfg


def test_scenario1_output(tmp_path):
    out = tmp_path / "s1"
    assert cli.main(["scenario1", "--preset", "table1-uniform", "--reps", "100", "--out", str(out)] + FAST1) == 0
    for mech in ("first", "second"):
        lines = (out / f"scenario1_{mech}.csv").read_text().splitlines()
        assert lines[0] == "N,Delta,analytic_income,simulated_income,stderr"
        assert len(lines) == 3
    assert (out / "scenario1.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert "seed = 12345" in (out / "manifest.txt").read_text()


def test_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["scenario1", "--reps", "30", "--seed", "9", "--json"] + FAST1
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(["scenario1", "--config", str(a / "config.txt"), "--json", "--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    recs = json.loads((a / "scenario1_first.json").read_text())
    assert recs[0]["N"] == 10.0


def test_chain_query_prints_one_number(capsys):
    assert cli.main(["chain", "--lam", "10", "--delta", "3", "--mechanism", "second"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    assert float(out[0]) == pytest.approx(242.2744191926839, rel=1e-12)


def test_invalid_scenario_is_usage_error(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        cli.main(["scenario9", "--out", "x"])
    assert exc.value.code == 2
    assert list(tmp_path.iterdir()) == []


def test_failure_writes_only_diagnostic(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(sim, "run_scenario1", boom)
    out = tmp_path / "fail"
    assert cli.main(["scenario1", "--reps", "5", "--out", str(out)]) == 1
    assert [p.name for p in out.iterdir()] == ["diagnostic.txt"]
    assert "solver exploded" in (out / "diagnostic.txt").read_text()


def test_curve_and_scenario4_outputs(tmp_path):
    c = tmp_path / "curve"
    assert cli.main(["curve", "--preset", "table2", "--set", "steps=100", "--out", str(c)]) == 0
    lines = (c / "curve.csv").read_text().splitlines()
    assert lines[0] == "r,b" and len(lines) == 102
    s4 = tmp_path / "s4"
    args = ["scenario4", "--set", "variance_seeds=1", "--set", "variance_instants=200", "--set", "lams=10"]
    assert cli.main(args + ["--set", "deltas=1", "--out", str(s4)]) == 0
    assert (s4 / "scenario4.csv").read_text().startswith("instant,obsa_participants,baseline_participants,low_price")
    assert len((s4 / "scenario4_variance.csv").read_text().splitlines()) == 2


def test_missing_config_file_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["scenario1", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "o")])
    assert exc.value.code == 2
    assert not (tmp_path / "o").exists()
