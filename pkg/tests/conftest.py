import numpy as np
import pytest

from fieldrecon import tensor as T
from fieldrecon.data import Dataset, Snapshot


@pytest.fixture(autouse=True)
def _debug_checks():
    """Every primitive checks its output for NaN/Inf during the tests."""
    T.set_debug(True)
    yield
    T.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dataset(n_snapshots=6, n_points=60, d_x=2, d_v=3, seed=0, shared=True):
    """Small smooth random-phase fields, used where the vortex generator is overkill."""
    r = np.random.default_rng(seed)
    base = r.uniform(-1, 1, size=(n_points, d_x))
    snaps = []
    for i in range(n_snapshots):
        x = base if shared else r.uniform(-1, 1, size=(n_points, d_x))
        phase = 0.4 * i
        cols = [np.cos(2 * x[:, 0] + phase + c) * (1 + 0.3 * c) for c in range(d_v)]
        snaps.append(Snapshot(x, np.stack(cols, 1), i))
    return Dataset(snaps, d_x, d_v, ["u", "v", "p"][:d_v] if d_v <= 3 else [])


# --- acceptance summary ----------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def criterion(number: int, title: str):
    """Tag an acceptance test; its outcome is listed in the terminal summary."""
    def wrap(fn):
        fn.criterion, fn.title = number, title
        return fn
    return wrap


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    number = getattr(getattr(item, "function", None), "criterion", None)
    if number is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    ACCEPTANCE[number] = (status, item.function.title, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}  {status}  {title}" + (f"  [{detail}]" if detail else ""))
