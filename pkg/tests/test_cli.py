import csv
import json

import pytest

from headkv.harness.cli import main
from headkv.harness.config import default_config


@pytest.fixture
def cfg_path(tmp_path, small_oracle_cfg):
    d = small_oracle_cfg.to_dict()
    d["budgets"] = [16, "full"]
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return p


def run(*args):
    return main([str(a) for a in args])


def test_estimate_and_allocate(tmp_path, cfg_path):
    out = tmp_path / "o"
    assert run("estimate", "--config", cfg_path, "--out", out) == 0
    rows = list(csv.reader(open(out / "scores_heatmap.csv")))
    assert len(rows) == 4 and all(len(r) == 4 for r in rows)
    assert run("allocate", "--config", cfg_path, "--out", out, "--scores", out / "scores.json",
               "--budget", "10") == 0
    plan = json.loads((out / "plan.json").read_text())
    assert plan["total"] == 10 * 16
    for policy in ("uniform", "pyramid", "ada"):
        assert run("allocate", "--config", cfg_path, "--out", out / policy, "--policy", policy) == 0


def test_compress_outputs(tmp_path, cfg_path):
    out = tmp_path / "c"
    assert run("compress", "--config", cfg_path, "--out", out, "--policy", "uniform",
               "--budget", "20", "--alpha", "4") == 0
    lines = (out / "memory.csv").read_text().splitlines()
    assert lines[0] == "headId,entries" and lines[1] == "L0H0,24"
    assert set(json.loads((out / "retained.json").read_text())) == {f"L{l}H{h}" for l in range(4) for h in range(4)}


@pytest.mark.parametrize("cmd", ["eval-needle", "eval-reason"])
def test_eval_commands(tmp_path, cfg_path, cmd):
    out = tmp_path / cmd
    assert run(cmd, "--config", cfg_path, "--out", out, "--budget", "16") == 0
    raw = (out / "results.csv").read_bytes()
    assert raw.startswith(b"method,b,length,depth,accuracy,retained_fraction\n")
    assert b"\r" not in raw


def test_compare_and_report(tmp_path, cfg_path):
    out = tmp_path / "cmp"
    assert run("compare", "--config", cfg_path, "--out", out, "--seed", "7") == 0
    first = (out / "results.csv").read_bytes()
    assert run("compare", "--config", cfg_path, "--out", out, "--seed", "7") == 0
    assert (out / "results.csv").read_bytes() == first
    assert run("report", "--config", cfg_path, "--out", out) == 0
    assert (out / "needle_accuracy.png").exists() and (out / "summary.csv").exists()


def test_exit_codes(tmp_path, cfg_path, capsys):
    assert run("estimate", "--config", tmp_path / "nope.json") == 1
    assert run("estimate", "--config", cfg_path, "--beta", "0.5", "--out", tmp_path) == 1
    bad = tmp_path / "scores.json"
    bad.write_text("{}")
    assert run("allocate", "--config", cfg_path, "--scores", bad, "--out", tmp_path) == 1
    with pytest.raises(SystemExit) as e:
        run("estimate", "--bogus")
    assert e.value.code == 1
    # window wider than the shortest prompt: runtime failure, not a config error
    assert run("eval-needle", "--config", cfg_path, "--alpha", "200", "--policy", "uniform",
               "--out", tmp_path) == 2


def test_default_config_is_desk_scale():
    cfg = default_config()
    assert cfg.shape == (8, 8) and cfg.grid.lengths[-1] == 2048 and cfg.alpha == 8
