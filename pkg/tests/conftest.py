import numpy as np
import pytest

from promptmap.backbone import BackboneConfig, VisionTransformer
from promptmap.numerics import set_default_dtype


@pytest.fixture(autouse=True)
def _float64():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_cfg():
    return BackboneConfig()


@pytest.fixture
def tiny_cfg():
    """2 layers, 2x2 grid, d=16: small enough for full finite differences."""
    return BackboneConfig(image_size=8, patch_size=4, channels=3, embed_dim=16, num_layers=2, num_heads=2)


@pytest.fixture
def toy_backbone(toy_cfg):
    return VisionTransformer(toy_cfg, np.random.default_rng(0))


# acceptance criteria report one line each; echoed again after the run
_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    def report(number, name, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
        _CRITERIA.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
