import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wbmia.data import make_split, synth_purchase_like  # noqa: E402
from wbmia.nn import Network, mlp  # noqa: E402


def random_net(sizes, seed, std=1.0):
    """Network with N(0, std^2) weights and biases (larger than the training init)."""
    gen = np.random.default_rng(seed)
    net = Network.init(mlp(sizes), seed)
    for p in net.params:
        p[...] = gen.normal(0.0, std, size=p.shape)
    return net


@pytest.fixture(scope="session")
def small_data():
    return synth_purchase_like(600, 30, 4, 0.2, seed=11)


@pytest.fixture(scope="session")
def small_split(small_data):
    return make_split(len(small_data), 200, 200, 100, 100, 100, seed=11)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
