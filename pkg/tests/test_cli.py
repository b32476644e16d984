import csv
import json
import shutil
import subprocess
import sys

import pytest

from mevlens import fixtures, reports
from mevlens.cli import main
from mevlens.fixtures import BuilderSpec, ScenarioSpec


@pytest.fixture(scope="module")
def small_fixture(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_fixture")
    spec = ScenarioSpec(seed=5, n_blocks=60, txs_per_block=15,
                        builders=(BuilderSpec("alpha", 0.5, bids_per_slot=4, cancels_per_slot=1),
                                  BuilderSpec("bravo", 0.3), BuilderSpec("charlie", 0.2)),
                        exclusive_providers={"ep-alpha": "alpha"})
    fixtures.generate(spec, d)
    return d


def outputs(d):
    return sorted(p.name for p in d.iterdir())


def test_run_all_and_verify(small_fixture, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run-all", "--input-dir", str(small_fixture), "--out-dir", str(out)]) == 0
    assert outputs(out) == sorted(list(reports.COLUMNS) + [reports.SUMMARY_FILE])
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["results"]["label"]["blocks"]["rejected"] == 0
    capsys.readouterr()
    assert main(["verify", "--fixture", str(small_fixture), "--out-dir", str(out)]) == 0
    text = capsys.readouterr().out
    assert "labels: ok" in text and "economics: ok" in text and "verify: ok" in text


def test_verify_mismatch_exit_code(small_fixture, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run-all", "--input-dir", str(small_fixture), "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "labels.csv")))
    rows[3]["transparency"] = "exclusive_signal" if rows[3]["transparency"] != "exclusive_signal" else "public_signal"
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    capsys.readouterr()
    assert main(["verify", "--fixture", str(small_fixture), "--out-dir", str(out)]) == 2
    text = capsys.readouterr().out
    assert "labels: MISMATCH" in text and rows[3]["hash"] in text


def test_stats_without_profiles(tmp_path, capsys):
    assert main(["stats", "--out-dir", str(tmp_path)]) == 1
    assert "profiles.csv" in capsys.readouterr().err
    assert outputs(tmp_path) == []


def test_missing_input_named(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    regs = tmp_path / "registries"
    regs.mkdir()
    assert main(["label", "--blocks", str(missing), "--registries", str(regs), "--out-dir", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_invariant_violation_leaves_no_outputs(small_fixture, tmp_path, capsys):
    d = tmp_path / "in"
    shutil.copytree(small_fixture, d)
    lines = (d / "blocks.jsonl").read_text().splitlines()
    (d / "blocks.jsonl").write_text("\n".join(lines + [lines[-1]]) + "\n")  # duplicate slot
    out = tmp_path / "out"
    assert main(["run-all", "--input-dir", str(d), "--out-dir", str(out)]) == 2
    assert "duplicate slot" in capsys.readouterr().err
    assert not out.exists() or outputs(out) == []


def test_group_commit_is_atomic(tmp_path):
    files = {"a.csv": "x\n", "b.csv": None}
    with pytest.raises(TypeError):
        reports.commit_outputs(tmp_path, files)
    assert outputs(tmp_path) == []


def test_config_precedence(small_fixture, tmp_path, monkeypatch):
    cfg = tmp_path / "lens.toml"
    cfg.write_text("dust_wei = 5\nalpha = 0.01\ntop_k = 4\n")
    out = tmp_path / "out"
    monkeypatch.delenv("LENS_CONFIG", raising=False)
    assert main(["label", "--config", str(cfg), "--input-dir", str(small_fixture), "--out-dir", str(out),
                 "--alpha", "0.02"]) == 0
    echo = json.loads((out / "run_summary.json").read_text())["config"]
    assert (echo["dust_wei"], echo["alpha"], echo["top_k"], echo["folds"]) == (5, 0.02, 4, 5)
    # the environment variable supplies the same file
    monkeypatch.setenv("LENS_CONFIG", str(cfg))
    out2 = tmp_path / "out2"
    assert main(["label", "--input-dir", str(small_fixture), "--out-dir", str(out2)]) == 0
    echo = json.loads((out2 / "run_summary.json").read_text())["config"]
    assert (echo["dust_wei"], echo["alpha"]) == (5, 0.01)


def test_bad_config(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("LENS_CONFIG", raising=False)
    cfg = tmp_path / "lens.toml"
    cfg.write_text("colour = 1\n")
    assert main(["stats", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 1
    assert "colour" in capsys.readouterr().err
    cfg.write_text("alpha = 2.0\n")
    assert main(["stats", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 1
    cfg.write_text('folds = "many"\n')
    assert main(["stats", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 1


def test_stats_uses_hand_edited_profiles(default_run, tmp_path):
    src, _, _ = default_run
    d = tmp_path / "edited"
    d.mkdir()
    for name in ("profiles.csv", "block_eof.csv"):
        shutil.copy(src / name, d / name)
    rows = list(csv.DictReader(open(d / "profiles.csv")))
    # make entropy a strictly increasing function of market share
    order = sorted(rows, key=lambda r: float(r["market_share"]))
    for i, r in enumerate(order):
        r["entropy"] = repr(0.5 + i * 0.25)
    with open(d / "profiles.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    assert main(["stats", "--out-dir", str(d)]) == 0
    corr = {(r["analysis"], r["target"], r["feature"]): r for r in csv.DictReader(open(d / "correlations.csv"))}
    assert float(corr[("entropy", "market_share", "entropy")]["coefficient"]) == 1.0


def test_stage_by_stage_equals_run_all(small_fixture, default_run, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run-all", "--input-dir", str(small_fixture), "--out-dir", str(a)]) == 0
    for stage in ("label", "metrics", "analytics", "bids", "stats"):
        assert main([stage, "--input-dir", str(small_fixture), "--out-dir", str(b)]) == 0
    for name in reports.COLUMNS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_gen_fixture_command(tmp_path, capsys):
    scen = tmp_path / "s.toml"
    scen.write_text('n_blocks = 30\ntxs_per_block = 8\np_profitable.alpha = 0.9\n')
    out = tmp_path / "fx"
    assert main(["gen-fixture", "--scenario", str(scen), "--seed", "3", "--out", str(out)]) == 0
    spec = ScenarioSpec.load(out / "scenario.toml")
    assert (spec.seed, spec.n_blocks, spec.builders[0].p_profitable) == (3, 30, 0.9)
    assert main(["gen-fixture", "--n-blocks", "0", "--out", str(tmp_path / "bad")]) == 1


def test_console_script(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mevlens.cli", "stats", "--out-dir", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 1 and "profiles.csv" in r.stderr
