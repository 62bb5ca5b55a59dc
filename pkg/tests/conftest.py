import numpy as np
import pytest
import torch

from qmckt.dataio import prepare
from qmckt.synth import SynthConfig, generate_dataset, write_dataset


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A 40-student synthetic set written to disk; returns (directory, dataset)."""
    out = tmp_path_factory.mktemp("synth")
    ds = generate_dataset(SynthConfig(students=40, questions=30, kcs=4, min_len=10, max_len=40, seed=3))
    write_dataset(ds, out)
    return out, ds


@pytest.fixture(scope="session")
def small_prepared(small_synth):
    out, _ = small_synth
    return prepare(out / "interactions.csv", max_len=30, seed=1)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def write_csv(path, rows, header="student_id,question_id,kc_ids,response,timestamp"):
    path.write_text(header + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    return path


@pytest.fixture(scope="session")
def small_fit(small_prepared):
    """A Q-MCKT model briefly trained on the small synthetic set."""
    from qmckt.trainer import TrainConfig, fit

    return fit(small_prepared, TrainConfig(d=16, epochs=40, patience=10, batch_size=8, seed=0))


# PASS/FAIL lines from the acceptance checks, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
