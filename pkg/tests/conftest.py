import numpy as np
import pytest
import torch

from cate import _pykernels, kernels

torch.set_num_threads(1)

BACKENDS = {"python": _pykernels}
if kernels.BACKEND == "cython":
    from cate import _ckernels

    BACKENDS["cython"] = _ckernels


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return BACKENDS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance verdicts ----------------------------------------------------------
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def verdict():
    """``verdict(n, title, ok, detail)`` records criterion n and returns ``ok``."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE[number] = (title, bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        line = f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
