import json
import subprocess
import sys
from pathlib import Path

import pytest

from datamarket.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, EXIT_USAGE, main
from datamarket.trace import TradeTrace

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_run_demo_config(tmp_path, capsys):
    assert main(["run", "--config", str(CONFIGS / "demo.json"), "--out", str(tmp_path)]) == EXIT_OK
    for name in ("trace.jsonl", "cost_report.json", "reputation.json", "privacy_report.json"):
        assert (tmp_path / name).exists()
    trace = TradeTrace.read(tmp_path / "trace.jsonl")
    assert len(trace.settled_trades()) == 2
    cost = json.loads((tmp_path / "cost_report.json").read_text())
    assert cost["aggregate"]["trades"] == 2
    rep = json.loads((tmp_path / "reputation.json").read_text())
    (rows,) = rep.values()
    assert sorted(r["score_count"] for r in rows) == [1, 1]
    priv = json.loads((tmp_path / "privacy_report.json").read_text())
    assert [p["attack"] for p in priv] == ["timing", "size"]


def test_trace_lines_have_required_fields(tmp_path):
    main(["run", "--config", str(CONFIGS / "demo.json"), "--out", str(tmp_path)])
    for line in (tmp_path / "trace.jsonl").read_text().splitlines():
        ev = json.loads(line)
        assert {"epoch", "event_type", "chain", "l1_tx", "gas", "payload_len"} <= set(ev)


def test_seed_override_and_reproducibility(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    cfg = str(CONFIGS / "demo.json")
    main(["run", "--config", cfg, "--seed", "5", "--out", str(a)])
    main(["run", "--config", cfg, "--seed", "5", "--out", str(b)])
    main(["run", "--config", cfg, "--seed", "6", "--out", str(c)])
    assert (a / "trace.jsonl").read_bytes() == (b / "trace.jsonl").read_bytes()
    assert (a / "trace.jsonl").read_bytes() != (c / "trace.jsonl").read_bytes()


def test_replay_config(tmp_path):
    assert main(["run", "--config", str(CONFIGS / "replay.json"), "--out", str(tmp_path)]) == 0
    trace = TradeTrace.read(tmp_path / "trace.jsonl")
    errors = {e.detail["error"] for e in trace.rejections()}
    assert {"DuplicateOrder", "NonceMismatch"} <= errors
    assert "Expired" in trace.trade_states().values()


def test_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"prices": {"temperature": -1}}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_invariant_violation_exit(tmp_path, monkeypatch, capsys):
    import datamarket.cli as cli

    real = cli.run_scenario

    def broken(cfg):
        res = real(cfg)
        res.violations = ["token_conservation"]
        return res

    monkeypatch.setattr(cli, "run_scenario", broken)
    assert main(["run", "--out", str(tmp_path)]) == EXIT_INVARIANT
    assert "token_conservation" in capsys.readouterr().err


def test_attack_unknown(capsys):
    assert main(["attack", "--attack", "nope", "--runs", "1"]) == EXIT_USAGE
    assert "UnknownAttack" in capsys.readouterr().err


def test_attack_single_run_degenerate(capsys):
    assert main(["attack", "--attack", "timing", "--runs", "1",
                 "--config", str(CONFIGS / "demo.json")]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["n_runs"] == 1 and "warning" in rep


def test_attack_monte_carlo_and_trace(tmp_path, capsys):
    assert main(["attack", "--attack", "size", "--runs", "4", "--config",
                 str(CONFIGS / "demo.json"), "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "attack_size.json").read_text())
    assert rep["n_runs"] == 4 and rep["ci95_low"] <= rep["mean_accuracy"] <= rep["ci95_high"]
    capsys.readouterr()
    main(["run", "--config", str(CONFIGS / "demo.json"), "--out", str(tmp_path)])
    assert main(["attack", "--attack", "timing", "--trace",
                 str(tmp_path / "trace.jsonl")]) == EXIT_OK


def test_report(tmp_path, capsys):
    main(["run", "--config", str(CONFIGS / "demo.json"), "--out", str(tmp_path)])
    capsys.readouterr()
    assert main(["report", str(tmp_path / "trace.jsonl")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "2 settled trades" in out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "datamarket", "run", "--out", str(tmp_path)],
                          capture_output=True, text=True, env={"MARKET_LOG_LEVEL": "INFO",
                                                               "PATH": "/usr/bin:/bin"})
    assert proc.returncode == 0, proc.stderr
    assert "trades settled" in proc.stderr
