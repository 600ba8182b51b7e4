import numpy as np
import pytest
import torch

from voxformer.config import set_precision
from voxformer.voxel import SparseVolume


@pytest.fixture
def f64():
    set_precision("f64")
    yield
    set_precision("f32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def make_volume(rng, dims, count, channels=4, dtype=None):
    """Random distinct active voxels with normal features."""
    cells = int(np.prod(dims))
    keys = rng.choice(cells, size=min(count, cells), replace=False)
    coords = np.stack(np.unravel_index(keys, dims), axis=1)
    feats = torch.from_numpy(rng.normal(size=(len(keys), channels))).to(dtype or torch.get_default_dtype())
    return SparseVolume(torch.from_numpy(coords), feats, tuple(int(d) for d in dims))


def coord_set(vol):
    return {tuple(c) for c in vol.coords.tolist()}


_criteria: dict = {}


def pytest_runtest_logreport(report):
    number = dict(report.user_properties).get("criterion")
    if number is None or (report.when != "call" and report.passed):
        return
    entry = _criteria.setdefault(number, {"title": dict(report.user_properties)["title"], "ok": True, "details": []})
    entry["ok"] &= report.passed
    entry["details"] += [v for k, v in report.user_properties if k == "detail"]


@pytest.fixture(autouse=True)
def _criterion_marker(request, record_property):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        record_property("criterion", mark.args[0])
        record_property("title", mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {number:>2}  {'PASS' if e['ok'] else 'FAIL'}  {e['title']}  {detail}".rstrip())
