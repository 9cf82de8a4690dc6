import tempfile

import pytest
from click.testing import CliRunner

from depdecode.oracle import VocabSpec, make_task_model


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing file operations."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield tmpdir


@pytest.fixture
def cli_runner():
    """Create a Click CLI runner for testing."""
    return CliRunner()


@pytest.fixture
def copy_model():
    """Y_1 uniform over {0, 1}, Y_2 = Y_1."""
    return make_task_model("copy", VocabSpec.with_size(2), 2, seed=0)


@pytest.fixture
def copy_chain():
    """Y_1 -> Y_2 -> Y_3, each position copying its predecessor."""
    return make_task_model("copy", VocabSpec.with_size(2), 3, seed=0)


@pytest.fixture
def arithmetic_model():
    """Uniform over (a, b, (a + b) mod 3)."""
    return make_task_model("arithmetic-mod", VocabSpec.with_size(3), 3, seed=0)


@pytest.fixture
def independent_model():
    return make_task_model("independent", VocabSpec.with_size(2), 3, seed=7)


@pytest.fixture
def dense_model():
    return make_task_model("dense-random", VocabSpec.with_size(3), 3, seed=1)
