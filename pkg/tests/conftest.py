import numpy as np
import pytest

from popdynrec import numcore as nc
from popdynrec.ingest import build_split, from_interactions
from popdynrec.synth import SynthSpec, synth_generate

DAY = 86_400


@pytest.fixture(autouse=True)
def _float32_default():
    # tests that switch to float64 must not leak the setting
    nc.set_default_dtype(np.float32)
    yield
    nc.set_default_dtype(np.float32)


@pytest.fixture(scope="session")
def small_synth():
    spec = SynthSpec(n_users=120, n_items=60, horizon_days=240, events_per_user=15.0,
                     user_span_days=(60.0, 240.0))
    return build_split(synth_generate(spec, seed=11))


@pytest.fixture
def toy_dataset():
    """Three users over three weeks; u1 and u2 have validation and test events."""
    rows = [
        ("u1", "a", 0), ("u1", "b", 2 * DAY), ("u1", "c", 9 * DAY), ("u1", "d", 16 * DAY),
        ("u2", "b", 1 * DAY), ("u2", "a", 8 * DAY), ("u2", "c", 15 * DAY),
        ("u3", "c", 3 * DAY), ("u3", "b", 10 * DAY),
    ]
    return build_split(from_interactions((u, i, 1_600_000_000 + t) for u, i, t in rows))


ACCEPTANCE = []


@pytest.fixture
def record_criterion():
    """Collect one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def record(number, passed, detail):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"criterion {number:>2}: {status}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)
