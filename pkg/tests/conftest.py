import contextlib
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ecglab import cohort, ingest, split, synth  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Context manager recording a pass/fail line for an acceptance criterion."""

    @contextlib.contextmanager
    def record(label):
        try:
            yield
        except BaseException as exc:
            ACCEPTANCE_LINES.append(f"FAIL  {label}  ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})")
            raise
        ACCEPTANCE_LINES.append(f"PASS  {label}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth_cohort(tmp_path_factory):
    """Default 2000-subject synthetic cohort (seed 7), built once per session."""
    out = tmp_path_factory.mktemp("synth")
    generated = synth.generate(synth.SynthConfig(n_subjects=2000, seed=7), out)
    ecgs = ingest.load_ecg_table(generated.ecg_path)
    labs = ingest.load_lab_table(generated.lab_path)
    datasets = cohort.build_cohort(ecgs, labs)
    assignment = split.stratified_group_split(datasets, seed=7)
    return {
        "generated": generated,
        "ecgs": ecgs,
        "labs": labs,
        "datasets": {ds.task.key: ds for ds in datasets},
        "assignment": assignment,
    }
