import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mevlens import fixtures  # noqa: E402
from mevlens.pipeline import STAGES, RunConfig, run  # noqa: E402


def _inputs(d: Path) -> dict:
    return {"blocks": str(d / "blocks.jsonl"), "mempool": str(d / "mempool.csv"),
            "registries": str(d / "registries"), "bids": str(d / "bids.csv"),
            "payloads": str(d / "payloads.csv")}


@pytest.fixture(scope="session")
def default_fixture(tmp_path_factory):
    d = tmp_path_factory.mktemp("fixture")
    fixtures.generate(fixtures.ScenarioSpec(seed=11), d)
    return d


@pytest.fixture(scope="session")
def default_run(default_fixture, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = RunConfig(**_inputs(default_fixture), out_dir=str(out))
    summary = run(cfg, STAGES)
    return out, summary, cfg


@pytest.fixture(scope="session")
def ep_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("ep_fixture")
    fixtures.generate(fixtures.ep_scenario(), d)
    out = tmp_path_factory.mktemp("ep_run")
    cfg = RunConfig(**_inputs(d), out_dir=str(out))
    summary = run(cfg, STAGES)
    return d, out, summary


inputs_of = _inputs


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, desc = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {desc}")
