import numpy as np
import pytest

from faultflow.graph import BehavioralDataset, CodeElementRef, Role, ValueKind


def make_dataset(rows, executable_id="X.run", discrete=None, names=None):
    """Wrap a matrix as a dataset of parameter columns (continuous unless listed in ``discrete``)."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    discrete = discrete or {}
    names = names or [f"x{i}" for i in range(rows.shape[1])]
    cols = []
    for i, name in enumerate(names):
        if i in discrete:
            cols.append(CodeElementRef(executable_id, name, Role.PARAMETER, ValueKind.DISCRETE,
                                       cardinality=discrete[i]))
        else:
            cols.append(CodeElementRef(executable_id, name, Role.PARAMETER))
    return BehavioralDataset(executable_id, tuple(cols), rows)


@pytest.fixture
def gaussian_2d():
    rng = np.random.default_rng(7)
    return make_dataset(rng.standard_normal((4000, 2)))


# One pass/fail line per acceptance criterion, collected by test_acceptance.
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
