import numpy as np
import pytest

from slimtrace import bundled_manifest
from slimtrace.preprocess import DetrendConfig
from slimtrace.speclib import LibraryManifest


@pytest.fixture(scope="session")
def manifest():
    return LibraryManifest.load(bundled_manifest())


@pytest.fixture(scope="session")
def records(manifest):
    return manifest.records()


@pytest.fixture(scope="session")
def sim_library(manifest):
    """The 10-band, 29-endmember single-pixel library."""
    return manifest.build()


@pytest.fixture(scope="session")
def unit_library(sim_library):
    lib, _ = sim_library.normalized()
    return lib


@pytest.fixture(scope="session")
def raw_uv2_library(manifest):
    from slimtrace.simkit import uv2_grid
    return manifest.build(grid=uv2_grid(), detrend=DetrendConfig(enabled=False))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_VERDICTS].append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
