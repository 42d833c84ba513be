import time

import numpy as np
import pytest

from nappure import _kernels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=_kernels.available_backends())
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Default desk benchmark at seed 1: data, prior and trained classifier."""
    from nappure import pipeline as P

    cfg = P.default_config()
    prior, data, clf, _ = P.prepare(cfg, tmp_path_factory.mktemp("desk"))
    return cfg, prior, data, clf


ACCEPTANCE = pytest.StashKey[dict]()


class _Recorder:
    """Context manager per criterion: records PASS or FAIL with a detail string."""

    def __init__(self, store):
        self.store = store

    def __call__(self, number, title):
        rec = self

        class _Ctx:
            detail = ""

            def __enter__(self):
                self.t0 = time.perf_counter()
                return self

            def __exit__(self, kind, exc, tb):
                took = time.perf_counter() - self.t0
                status = "PASS" if kind is None else "FAIL"
                why = self.detail if kind is None else f"{self.detail} {exc}".strip()
                rec.store[number] = f"criterion {number} {status}: {title} ({took:.1f} s) {why}".rstrip()
                return False

        return _Ctx()


@pytest.fixture
def criterion(request):
    return _Recorder(request.config.stash.setdefault(ACCEPTANCE, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n].splitlines()[0])
