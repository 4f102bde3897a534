import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import support  # noqa: E402


@pytest.fixture(scope="session")
def ref_decoder():
    exe = support.reference_decoder()
    if exe is None:
        pytest.skip("no C compiler / libjpeg for the reference decoder")
    return exe


@pytest.fixture(scope="session")
def corpus():
    return support.jpeg_corpus(60)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
