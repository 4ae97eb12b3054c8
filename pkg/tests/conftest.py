import datetime as dt
import sys
from typing import Callable, Sequence

import pytest

from nephro.cohort import SynthConfig, make_cohort
from nephro.domain import ObservationPoint, PatientRecord
from nephro.gateway import BackendConfig, ModelReply

ORACLE = BackendConfig("oracle", "trend_oracle", "trend-oracle")


def make_patient(pid: str, values: Sequence[float], start: dt.date = dt.date(2020, 1, 1), gap: int = 30,
                 labs: bool = True, sex: str = "female", age: float = 60.0, diabetes: bool = True,
                 hypertension: bool = False) -> PatientRecord:
    obs = []
    for i, v in enumerate(values):
        obs.append(ObservationPoint(
            start + dt.timedelta(days=gap * i), float(v),
            creatinine=1.5 if labs else None, bun=25.0 if labs else None, uacr=40.0 if labs else None,
        ))
    return PatientRecord(pid, sex, age, diabetes, hypertension, tuple(obs))


def linear_config(**kw) -> SynthConfig:
    """Noiseless, inflection-free trajectories that never reach the trend floor."""
    base = dict(
        n_patients=20, obs_per_patient=(6, 10), noise_sigma=0.0, inflection_probability=0.0,
        baseline_egfr=((50.0, 89.0), (45.0, 59.0), (30.0, 44.0)), baseline_weights=(0.4, 0.3, 0.3),
        monthly_slope=(-0.4, 0.2), seed=7,
    )
    base.update(kw)
    return SynthConfig(**base)


class FakeGateway:
    """Answers every request with ``responder(request, call_index)``; records requests."""

    def __init__(self, responder: Callable):
        self.responder = responder
        self.requests = []
        self.transport_failures = 0

    def complete(self, backend, request):
        self.requests.append(request)
        out = self.responder(request, len(self.requests) - 1)
        if isinstance(out, Exception):
            raise out
        return out if isinstance(out, ModelReply) else ModelReply(out, "stop", 0.0, 1)

    def close(self):
        pass


@pytest.fixture
def patient12():
    return make_patient("P-12", [80 - 1.5 * i for i in range(12)])


@pytest.fixture
def small_cohort():
    patients = [
        make_patient("A", [70, 68, 67, 65, 63, 62, 60]),
        make_patient("B", [50, 49, 49.5, 47, 46, 44]),
        make_patient("C", [35, 34, 36, 33, 31, 30, 29, 28], labs=False),
    ]
    return make_cohort(patients)


def pytest_terminal_summary(terminalreporter):
    # one PASS/FAIL line per acceptance criterion, collected by test_acceptance
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
