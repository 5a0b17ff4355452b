import json
from importlib import resources

import numpy as np
import pytest
from click.testing import CliRunner

from tdlab import experiment as ex
from tdlab.cli import main
from tdlab.errors import ConfigError

MINIMAL = resources.files("tdlab") / "configs" / "minimal.toml"
PAPER = resources.files("tdlab") / "configs" / "paper_matrix.toml"

BASE = """schema_version = 1
name = "t"
seeds = [0]

[splits.s]
regime = "low_shot_A"
per_category_count = 2

[regimes.b]
kind = "baseline"
split = "s"
"""


def _err(text):
    with pytest.raises(ConfigError) as e:
        ex.parse_config(text, "cfg.toml")
    return str(e.value)


def test_shipped_configs_parse():
    for name in ("minimal.toml", "paper_matrix.toml", "ablations.toml"):
        cfg = ex.load_config(resources.files("tdlab") / "configs" / name)
        assert cfg.regimes and cfg.seeds


def test_type_error_is_line_anchored():
    msg = _err(BASE + 'epochs = "ten"\n')
    assert msg.startswith("cfg.toml:12:") and "regimes.b.epochs" in msg


def test_baseline_defaults_to_no_distillation():
    cfg = ex.parse_config(BASE, "cfg.toml")
    assert cfg.regimes["b"].distill.w == 0.0


def test_undefined_split_names_the_field():
    msg = _err(BASE.replace('split = "s"', 'split = "nope"'))
    assert "cfg.toml:11:" in msg and "regimes.b.split" in msg and "nope" in msg


def test_other_schema_errors():
    assert "schema_version" in _err(BASE.replace("schema_version = 1", "schema_version = 2"))
    assert "colour" in _err(BASE + "colour = 1\n")
    assert "bogus" in _err("bogus = 1\n" + BASE)
    assert "reserved" in _err(BASE + '\n[regimes.text_only]\nkind = "baseline"\nsplit = "s"\n')
    assert "analysis.trace_regimes" in _err(BASE + '\n[analysis]\ntrace_regimes = ["zz"]\n')
    assert "eval_modes" in _err(BASE.replace('seeds = [0]', 'seeds = [0]\neval_modes = ["xx"]'))
    assert ":" in _err("schema_version = = 1")
    assert "forbids" in _err(BASE + "\n[regimes.b.distill]\nw = 0.5\n")


def test_validate_reports_without_side_effects(tmp_path):
    lines = ex.validate(PAPER, tmp_path / "never")
    assert any("regimes:" in l for l in lines) and not (tmp_path / "never").exists()


def test_out_precedence(monkeypatch, tmp_path):
    cfg = ex.load_config(MINIMAL)
    monkeypatch.delenv("TDLAB_OUT", raising=False)
    assert str(ex.resolve_out(cfg)) == cfg.out
    monkeypatch.setenv("TDLAB_OUT", str(tmp_path / "env"))
    assert ex.resolve_out(cfg) == tmp_path / "env"
    assert ex.resolve_out(cfg, tmp_path / "flag") == tmp_path / "flag"


def test_empty_run_dir_reports_zero_runs(tmp_path):
    s = ex.report(tmp_path)
    assert s.runs == [] and s.missing == []
    assert "0 runs" in (tmp_path / "reports" / "results.md").read_text()


def _fake_metrics(root, regime, seed, acc):
    p = ex.RunDir(root).metrics(regime, seed)
    p.parent.mkdir(parents=True, exist_ok=True)
    modes = {m: {"mode": m, "n": 10, "accuracy": a, "per_category": {}, "extra": {}} for m, a in acc.items()}
    p.write_text(json.dumps({"regime": regime, "seed": seed, "split": "shot5", "modes": modes}))


def test_aggregation_and_missing_runs(tmp_path):
    (tmp_path / "config.toml").write_text(MINIMAL.read_text())
    accs = [0.31, 0.27]
    for s, a in enumerate(accs):
        _fake_metrics(tmp_path, "baseline", s, {"std": a, "sm": a / 2})
    fail = ex.RunDir(tmp_path).failure("clip_td", 1)
    fail.parent.mkdir(parents=True)
    fail.write_text("{}")
    s = ex.report(tmp_path)
    mean, sd, n = s.table["baseline"]["shot5/std"]
    assert abs(mean - np.mean(accs)) <= 1e-9 and abs(sd - np.std(accs)) <= 1e-9 and n == 2
    assert s.missing == ["clip_td seed0", "clip_td seed1"]
    assert s.failed == ["clip_td seed1"]
    md = (tmp_path / "reports" / "results.md").read_text()
    assert "Missing runs" in md and "FAILED" in md
    csv_line = (tmp_path / "reports" / "results.csv").read_text().splitlines()[1]
    assert csv_line.startswith("baseline,0.290000,0.020000,2")


@pytest.fixture(scope="module")
def minimal_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("min_a"), tmp_path_factory.mktemp("min_b")
    codes = (ex.run(MINIMAL, a), ex.run(MINIMAL, b))
    return a, b, codes


def test_minimal_run_completes_deterministically(minimal_runs):
    a, b, codes = minimal_runs
    assert codes == (0, 0)
    assert ex.results_digest(a) == ex.results_digest(b)
    for p in ("checkpoints/teacher/manifest.json", "logs/timings.json", "reports/ensemble.json",
              "reports/bias.json", "reports/mi/clip_td_seed0.csv", "traces/clip_td_seed0.jsonl"):
        assert (a / p).exists(), p


def test_minimal_run_is_chance_level(minimal_runs):
    a, _, _ = minimal_runs
    s = ex.collect(a)
    assert s.missing == [] and s.failed == []
    for row in ("baseline", "clip_td"):
        for col, (mean, _, n) in s.table[row].items():
            assert n == 2 and abs(mean - 0.25) <= 0.12, (row, col, mean)


def test_rerun_reuses_outputs(minimal_runs):
    a, _, _ = minimal_runs
    before = ex.results_digest(a)
    assert ex.run(MINIMAL, a) == 0 and ex.results_digest(a) == before


def test_cli_commands(minimal_runs, tmp_path, monkeypatch):
    a, _, _ = minimal_runs
    r = CliRunner()
    res = r.invoke(main, ["validate", "--config", str(MINIMAL), "--out", str(tmp_path / "v")])
    assert res.exit_code == 0 and "schema v1 ok" in res.output
    res = r.invoke(main, ["report", str(a)])
    assert res.exit_code == 0 and "| baseline |" in res.output
    res = r.invoke(main, ["evaluate", "--config", str(MINIMAL), "--out", str(a), "--regime", "baseline",
                          "--seed", "0", "--eval", "std", "--eval", "sm"])
    assert res.exit_code == 0 and "std=" in res.output and "sm=" in res.output
    res = r.invoke(main, ["train", "--config", str(MINIMAL), "--out", str(a), "--regime", "nope"])
    assert res.exit_code == 2
    bad = tmp_path / "bad.toml"
    bad.write_text(BASE + 'epochs = "ten"\n')
    res = r.invoke(main, ["validate", "--config", str(bad)])
    assert res.exit_code == 2 and "bad.toml:12:" in res.output
    monkeypatch.setenv("TDLAB_OUT", str(tmp_path / "env"))
    res = r.invoke(main, ["generate", "--config", str(MINIMAL)])
    assert res.exit_code == 0 and (tmp_path / "env" / "data").exists()
    res = r.invoke(main, ["report"])
    assert res.exit_code == 0 and "0 runs" in res.output
