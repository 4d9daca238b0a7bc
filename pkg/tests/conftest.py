import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gensart.geometry import Geometry, VolumeGrid, reset_counters

settings.register_profile("gensart", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("gensart")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def exact_instance():
    """Axis-aligned toy problem where every voxel lies on exactly one ray.

    With this layout ``P P*`` is exactly multiplication by ``u = 2``, so the
    closed-form updates coincide with the dense minimizers.
    """
    grid = VolumeGrid((2, 6), 1.0, "box")
    geom = Geometry("parallel", 2, 0.0, (6,), (1.0,))
    return grid, geom


@pytest.fixture(autouse=True)
def _clean_counters():
    reset_counters()
    yield


def dense_matrix(op, shape_in, n_out):
    """Columns of a linear map applied to the unit vectors."""
    n = int(np.prod(shape_in))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(np.ravel(op(e.reshape(shape_in))))
    return np.array(cols).T.reshape(n_out, n)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion."""
    def record(k, ok, detail, seconds):
        status = "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append(f"ACCEPTANCE {k}: {status}  {detail}  [{seconds:.1f} s]")
        print(ACCEPTANCE_LINES[-1])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
