import numpy as np
import pytest

from hybridnas.config import SupernetConfig
from hybridnas.data import InMemoryDataset, gen_toy_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Two layers at 16x16: cheap enough for exhaustive checks."""
    return SupernetConfig(layers=2, filter_multiplier=4, blocks=2, resolutions=(4, 8),
                          input_size=(16, 16), patch_size=4, embed_dim=8, heads=2, depth=1,
                          mlp_ratio=2)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    return gen_toy_dataset(7, 8, 16, 64, tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="session")
def toy_dataset(toy_manifest):
    return InMemoryDataset.load(toy_manifest)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """32x32 images for fast loop tests."""
    return gen_toy_dataset(3, 6, 4, 32, tmp_path_factory.mktemp("small"))


@pytest.fixture(scope="session")
def small_dataset(small_manifest):
    return InMemoryDataset.load(small_manifest)


# -- acceptance reporting: one PASS/FAIL line per criterion ---------------------------

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA.setdefault(mark.args[0], []).append((rep.passed, item.name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entries = _CRITERIA[n]
        ok = all(passed for passed, _, _ in entries)
        details = "; ".join(d for _, _, d in entries if d) or ", ".join(name for _, name, _ in entries)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {details}")
