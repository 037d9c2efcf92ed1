import sys

import numpy as np
import pytest

from eitphys import sigproc
from eitphys.phantom import Dataset, PatientParams, simulate_record


@pytest.fixture(scope="session")
def small_dataset():
    """Four aligned 40 s records from two patients, every channel present."""
    recs = []
    for pid in range(2):
        for i in range(2):
            params = PatientParams(patient_id=pid, resp_rate=14.0 + 4 * i + pid, anatomy_seed=pid,
                                   peep=6.0 + 3 * pid)
            rec = simulate_record(params, 40.0, seed=10 * pid + i, record_id=f"p{pid:03d}_r{i:02d}",
                                  lags={"eit": 2, "monitor": -5})
            recs.append(sigproc.align_records(rec))
    return Dataset(recs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.LINES:
        terminalreporter.write_line(line)
