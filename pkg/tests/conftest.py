import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from imupen.ctc import Alphabet
from imupen.network import LayerSpec, ModelSpec, conv_block


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_spec(letters=4, filters=4, units=3):
    """1 conv block + 1 BLSTM + dense, for finite-difference checks."""
    layers = tuple(conv_block(filters, 5) + [
        LayerSpec("blstm", units=units),
        LayerSpec("dense", units=letters + 1),
        LayerSpec("softmax"),
    ])
    return ModelSpec("tiny", layers, 13, letters + 1)


TINY_ALPHABET = Alphabet("abcd")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
