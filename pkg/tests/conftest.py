"""Shared pipeline runs.

``smoke`` runs the whole CLI pipeline on the smoke profile twice into the same
directory (the first result is moved aside), which the determinism and harness
tests compare.

``desk`` trains full default-profile models once. Set ``DIFFICE_DESK_DIR`` to a
directory to keep them between sessions; stages whose manifest already exists
there are skipped, so clear it after changing model code.
"""

from __future__ import annotations

import os
import shutil
from pathlib import Path

import pytest

from diffice.harness import load_config
from diffice.harness.cli import main
from diffice.harness.pipeline import STAGES


_criteria: dict[str, str] = {}
_details: dict[str, str] = {}


@pytest.fixture
def measured(request):
    """Attach a one-line measurement summary to the test's acceptance criterion."""
    name = request.node.get_closest_marker("criterion").args[0]

    def note(text: str) -> None:
        _details[name] = text
        print(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if report.failed:
        _criteria[name] = "FAIL"
    elif report.when == "call" and report.passed:
        _criteria.setdefault(name, "PASS")
    elif report.skipped:
        _criteria.setdefault(name, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split()[0][1:])):
        detail = _details.get(name)
        terminalreporter.write_line(f"{_criteria[name]} {name}" + (f": {detail}" if detail else ""))


@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    out = root / "run"
    assert main(["all", "--profile", "smoke", "--out", str(out), "--seed", "7"]) == 0
    first = root / "first"
    out.rename(first)
    assert main(["all", "--profile", "smoke", "--out", str(out), "--seed", "7"]) == 0
    return {"out": out, "first": first, "config": load_config(profile="smoke", overrides={"out": str(out),
                                                                                         "seed": 7})}


DESK_TRAIN_STAGES = ("synth", "train-diffusion", "train-classifier", "train-oracle", "train-features")


def desk_config(out: Path):
    return load_config(overrides={"out": str(out)})


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    cached = os.environ.get("DIFFICE_DESK_DIR")
    out = Path(cached) if cached else tmp_path_factory.mktemp("desk")
    config = desk_config(out)
    for stage in DESK_TRAIN_STAGES:
        if cached and (out / "manifests" / f"{stage}.json").is_file():
            continue
        STAGES[stage](config)
    return config


@pytest.fixture
def scratch_copy(tmp_path):
    """Copy a run directory so a test can mutate it."""

    def copy(src: Path) -> Path:
        dst = tmp_path / src.name
        shutil.copytree(src, dst)
        return dst

    return copy
