import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nasadapt.search_space import backbone_from_dict, load_backbone  # noqa: E402

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def make_toy(name="toy", sites=((8, 2), (16, 2)), kernels=(1, 3, 5), expansions=("0.5", "1", "2"),
             activations=("relu",), depth=(1, 2), input_shape=(3, 16, 16), pool=1, classes=5, **extra):
    data = {
        "name": name,
        "input_shape": list(input_shape),
        "head": {"pool": pool, "classes": classes},
        "min_depth": depth[0],
        "max_depth": depth[1],
        "defaults": {
            "kernel_choices": list(kernels),
            "expansion_choices": list(expansions),
            "activation_choices": list(activations),
        },
        "layers": [{"base_channels": c, "stride": s} for c, s in sites],
    }
    data.update(extra)
    return backbone_from_dict(data)


@pytest.fixture(scope="session")
def vgg9():
    return load_backbone("vgg9")


@pytest.fixture(scope="session")
def vgg9_omniglot():
    return load_backbone("vgg9_omniglot")


@pytest.fixture(scope="session")
def resnet12():
    return load_backbone("resnet12")


@pytest.fixture
def acceptance():
    """Record one acceptance criterion's outcome for the terminal summary."""

    def record(number: int, ok: bool, detail: str):
        _ACCEPTANCE[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
