import numpy as np
import pytest

from lesionseg.numerics import set_conv_backend
from lesionseg.synth import SynthSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numpy", "torch"])
def conv_backend(request):
    """Run a test once per available convolution backend."""
    if request.param == "torch":
        pytest.importorskip("torch")
    previous = set_conv_backend(request.param)
    yield request.param
    set_conv_backend(previous)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A 24/8-image synthetic dataset at 64x64, generated once per session."""
    root = tmp_path_factory.mktemp("tiny")
    generate(SynthSpec(n_train=24, n_val=8, image_size=64, seed=7), root)
    return root


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
