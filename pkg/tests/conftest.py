import numpy as np
import pytest
import torch

from lavide.config import TrainConfig
from lavide.synthetic import Dataset, SceneConfig, default_vocabulary, generate_scenes

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {
    "lvm": {"embed_dim": 16},
    "map": {"d_obj": 8, "obj_hidden": 8},
    "vision": {"channels": [8, 8, 16, 16], "mlp_ratio": 2},
    "moe": {"num_experts": 3, "d_diff": 8, "hidden": 8},
    "fuse": {"d_fuse": 8},
}


def tiny_config(**overrides) -> TrainConfig:
    cfg = TrainConfig.from_dict({k: dict(v) for k, v in TINY.items()})
    return cfg.replace(**overrides) if overrides else cfg


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def make_dataset(n=4, size=(32, 32), k=4, change_rate=0.5, seed=0):
    quads = generate_scenes(SceneConfig(size=size, num_categories=k, change_rate=change_rate, seed=seed), n)
    return Dataset.from_quads(quads, default_vocabulary(k))


@pytest.fixture
def small_dataset():
    return make_dataset()


# ---- acceptance reporting: one PASS/FAIL line per criterion

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    if rep.failed or (rep.when == "call"):
        status = "PASS" if rep.passed else "FAIL"
        detail = getattr(item, "criterion_detail", "")
        _CRITERIA[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
