import numpy as np
import pytest

from longimpute.dataset import LongitudinalDataset, VisitSchedule
from longimpute.simgen import TrialGeneratorConfig, generate


def random_dataset(rng, n_subjects, *, sigma_b2=2.0, sigma_e2=1.5, dropout=0.0, art=True):
    """Random-intercept data on the default schedule; monotone dropout after week 2."""
    sched = VisitSchedule()
    n = sched.n
    months = sched.as_array()
    arm = np.arange(n_subjects) % 2
    age = rng.standard_normal(n_subjects)
    art_m = (rng.random((n_subjects, n)) < 0.5).astype(float) if art else np.zeros((n_subjects, n))
    b = rng.standard_normal(n_subjects) * np.sqrt(sigma_b2)
    y = (10 + 0.5 * arm[:, None] + 0.4 * months + 2.0 * art_m - 1.0 * age[:, None]
         + b[:, None] + rng.standard_normal((n_subjects, n)) * np.sqrt(sigma_e2))
    if dropout > 0:
        for i in range(n_subjects):
            if rng.random() < dropout:
                y[i, rng.integers(2, n):] = np.nan
    art_m = np.where(np.isnan(y), np.nan, art_m)
    ids = [f"P{i:04d}" for i in range(n_subjects)]
    return LongitudinalDataset(sched, ids, arm, age, y, art_m)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def trial():
    return generate(TrialGeneratorConfig(n_per_arm=100, seed=5))


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
