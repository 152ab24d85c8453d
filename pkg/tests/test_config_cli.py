import csv
import json
import subprocess
import sys

import pytest

from glucocast import cli
from glucocast.config import ConfigError, DEFAULTS, env_overrides, parse_config_text, resolve
from glucocast.models import RFSpec
from glucocast.series import Variable


# ---------------------------------------------------------------- configuration

def test_defaults_resolve():
    cfg = resolve(environ={})
    assert cfg.select_modes() == ("raw", "onboard")
    e = cfg.evaluation(seed=1, workers=1)
    assert [m.kind for m in e.models] == ["arima", "rf", "svr"] and e.history_options == (3, 6, 12)
    s = cfg.selection(seed=1)
    assert s.resamples == 100 and s.max_lag_steps[Variable.GLUCOSE] == 16 and s.max_lag_steps[Variable.SLEEP] == 4


def test_precedence(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nselect.resamples = 40\neval.models = rf:n_trees=5\n")
    cfg = resolve(p, environ={"GLUCOCAST_SELECT__RESAMPLES": "30"}, overrides={"eval.steps": "900"})
    assert cfg["select.resamples"] == "30"
    assert cfg.models("eval.models") == (RFSpec(n_trees=5),)
    assert cfg.evaluation(0, 1).step_s_options == (900,)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("seed = 1\nbogus = 2\n")
    with pytest.raises(ConfigError):
        env_overrides({"GLUCOCAST_NOPE": "1"})
    with pytest.raises(ConfigError):
        resolve(tmp_path / "missing.cfg", environ={})
    assert env_overrides({"HOME": "/root"}) == {}


def test_bad_values():
    cfg = resolve(environ={}, overrides={"select.modes": "raw,images"})
    with pytest.raises(ConfigError):
        cfg.select_modes()
    with pytest.raises(ConfigError):
        resolve(environ={}, overrides={"eval.models": "lstm"}).evaluation(0, 1)
    with pytest.raises(ConfigError):
        resolve(environ={}, overrides={"kernel.insulin.shape": "square"}).kernels()


def test_every_default_key_has_env_name():
    for k in DEFAULTS:
        name = "GLUCOCAST_" + k.upper().replace(".", "__")
        assert list(env_overrides({name: "x"})) == [k]


# ---------------------------------------------------------------- command line

def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--n-patients", 5, "--days", 14, "--seed", 3, "--out", d) == 0
    return d


def test_simulate_outputs(data_dir, tmp_path):
    files = sorted(p.name for p in data_dir.glob("P*.csv"))
    assert files == [f"P{i:03d}.csv" for i in range(5)]
    man = json.loads((data_dir / "manifest.json").read_text())
    assert man["seed"] == 3 and man["seed_source"] == "command line" and "numpy" in man["versions"]
    cohort = json.loads((data_dir / "cohort.json").read_text())
    assert all(3800 < p["glucose_samples"] <= 4032 for p in cohort["patients"])
    again = tmp_path / "again"
    assert run("simulate", "--n-patients", 1, "--days", 1, "--seed", 3, "--out", again) == 0
    rows = (again / "P000.csv").read_text().splitlines()
    assert 288 <= len(rows) < 2000


def test_simulate_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("simulate", "--n-patients", 2, "--days", 2, "--seed", 8, "--out", tmp_path / d) == 0
    for name in ("P000.csv", "P001.csv", "cohort.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_random_seed_recorded(tmp_path):
    assert run("simulate", "--n-patients", 1, "--days", 1, "--out", tmp_path / "r") == 0
    man = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert man["seed_source"] == "random"
    assert run("simulate", "--n-patients", 1, "--days", 1, "--seed", man["seed"], "--out", tmp_path / "s") == 0
    assert (tmp_path / "r" / "P000.csv").read_bytes() == (tmp_path / "s" / "P000.csv").read_bytes()


def test_unwritable_out(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("simulate", "--n-patients", 1, "--days", 1, "--seed", 1, "--out", blocker / "sub") == 2


def test_select(data_dir, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GLUCOCAST_SELECT__RESAMPLES", "10")
    out = tmp_path / "sel"
    assert run("select", "--data", data_dir, "--seed", 1, "--workers", 1, "--out", out) == 0
    printed = capsys.readouterr().out
    assert "pooled ranking (onboard inputs" in printed and "influence_minutes" in printed
    for mode in ("raw", "onboard"):
        with (out / mode / "pooled_summary.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["variable", "rank", "influence_minutes"]
        assert [int(r["rank"]) for r in rows] == list(range(1, 8))
        assert (out / mode / "P004.jsonl").is_file()


def test_select_missing_variable(tmp_path, capsys):
    d = tmp_path / "g"
    d.mkdir()
    (d / "P.csv").write_text("patient_id,timestamp,variable,value,unit\n" + "".join(
        f"P,2021-03-01T{h:02d}:{m:02d}:00Z,glucose,120,mg/dL\n" for h in range(24) for m in range(0, 60, 5)))
    assert run("select", "--data", d, "--seed", 1, "--out", tmp_path / "o") == 2
    assert "insulin_bolus" in capsys.readouterr().err


def test_empty_data_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("select", "--data", tmp_path / "empty", "--seed", 1, "--out", tmp_path / "o") == 2
    assert run("evaluate", "--data", tmp_path / "nope", "--seed", 1, "--out", tmp_path / "o") == 2


def test_evaluate_cardinality_and_report(data_dir, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GLUCOCAST_EVAL__MODELS", "persistence,ridge,arima:p=1;d=0;q=0")
    out = tmp_path / "ev"
    assert run("evaluate", "--data", data_dir, "--seed", 2, "--workers", 1, "--out", out) == 0
    lines = (out / "eval.csv").read_text().splitlines()
    assert len(lines) - 1 == 540
    assert len((out / "baseline.csv").read_text().splitlines()) - 1 == 180
    rep = tmp_path / "rep"
    assert run("report", out, "--out", rep, "--seed", 0) == 0
    assert "best cell:" in capsys.readouterr().out
    assert (rep / "summary.csv").read_text().startswith("model,step_s,history_h,horizon_min,n_patients")
    assert (rep / "long.csv").is_file()


def test_evaluate_restricted_and_repeatable(data_dir, tmp_path):
    for d in ("a", "b"):
        assert run("evaluate", "--data", data_dir, "--models", "persistence", "--seed", 5, "--out", tmp_path / d) == 0
        assert run("report", tmp_path / d, "--out", tmp_path / d / "rep", "--seed", 5) == 0
    rows = (tmp_path / "a" / "eval.csv").read_text().splitlines()
    assert len(rows) - 1 == 5 * 36 and all(",persistence," in r for r in rows[1:])
    for name in ("eval.csv", "eval.jsonl", "rep/summary.csv", "rep/summary.txt", "rep/long.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_evaluate_error_rows_exit_1(data_dir, tmp_path):
    assert run("evaluate", "--data", data_dir, "--models", "svr:max_iter=2", "--seed", 1, "--out", tmp_path / "e",
               "--config", _cfg(tmp_path, "eval.steps = 900\neval.histories = 3\neval.horizons = 15\n")) == 1
    body = (tmp_path / "e" / "eval.csv").read_text().splitlines()[1:]
    assert len(body) == 5 and all(r.endswith(",0,,") for r in body)
    errs = [json.loads(l)["error"] for l in (tmp_path / "e" / "eval.jsonl").read_text().splitlines()]
    assert all(e.startswith("ConvergenceError") for e in errs)


def _cfg(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return p


def test_fatal_config_error(data_dir, tmp_path):
    assert run("evaluate", "--data", data_dir, "--seed", 1, "--out", tmp_path / "x",
               "--config", _cfg(tmp_path, "eval.colour = red\n")) == 2
    assert run("evaluate", "--data", data_dir, "--models", "lstm", "--seed", 1, "--out", tmp_path / "x") == 2


def test_train_and_bench(data_dir, tmp_path, capsys):
    out = tmp_path / "tr"
    assert run("train", "--data", data_dir, "--models", "rf:n_trees=5", "--seed", 1, "--out", out) == 0
    assert sorted(p.name for p in out.glob("*_rf.json")) == [f"P{i:03d}_rf.json" for i in range(5)]
    cfg = _cfg(tmp_path, "bench.sizes = 200\nbench.repetitions = 3\nbench.warmup = 0\n")
    assert run("bench", "--data", data_dir, "--models", "ridge", "--seed", 1, "--out", tmp_path / "b",
               "--config", cfg) == 0
    rows = (tmp_path / "b" / "bench.csv").read_text().splitlines()
    assert rows[0].startswith("model,n,fit_ms_median") and rows[1].startswith("ridge,200,")


def test_help_and_invalid_flag():
    for cmd in ("simulate", "select", "train", "evaluate", "bench", "report"):
        with pytest.raises(SystemExit) as exc:
            cli.main([cmd, "--help"])
        assert exc.value.code == 0
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--no-such-flag"])
    assert exc.value.code == 2


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "glucocast.cli", "evaluate", "--bogus"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage:" in r.stderr
