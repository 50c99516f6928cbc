import json
import time
from pathlib import Path

import pytest

from hybridrl.orchestrator.config import load_config
from hybridrl.orchestrator.pipeline import run_pipeline

FIXTURES = Path(__file__).parent / "fixtures"

# a few-second pipeline for plumbing tests; behavior is checked on the default run
SMALL = [
    "task.n_train=32",
    "task.n_heldout=16",
    "base_prior.steps=150",
    "stage1.steps=4",
    "stage1.batch_prompts=4",
    "stage2.epochs=2",
    "stage2.sft_pairs=8",
    "stage3.steps=4",
    "stage3.batch_prompts=4",
    "eval.samples_per_prompt=1",
]


@pytest.fixture(scope="session")
def reference_responses():
    lines = (FIXTURES / "reference_responses.jsonl").read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


@pytest.fixture
def small_cfg():
    return load_config(overrides=SMALL)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The full default pipeline, run once per session."""
    root = tmp_path_factory.mktemp("default_run")
    cfg = load_config()
    t0 = time.perf_counter()
    manifest = run_pipeline(cfg, root)
    elapsed = time.perf_counter() - t0
    return {"root": root, "cfg": cfg, "manifest": manifest, "elapsed": elapsed}


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# acceptance results, one line per criterion in the terminal summary
_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
