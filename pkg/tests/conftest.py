import numpy as np
import pytest

from sbirlab.synth import SynthSpec, generate_dataset, split


@pytest.fixture(scope="session")
def default_dataset():
    return generate_dataset(SynthSpec())


@pytest.fixture(scope="session")
def default_split(default_dataset):
    return split(default_dataset)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Three categories of four instances on 16×16 rasters."""
    return generate_dataset(SynthSpec(num_categories=3, instances_per_category=4,
                                      sketches_per_instance=2, image_size=(16, 16), seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
