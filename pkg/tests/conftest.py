import json
from pathlib import Path

import numpy as np
import pytest
import torch

from voxlandmark.data import SyntheticSpec, generate_synthetic

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def frozen():
    return json.loads((FIXTURES / "oracle_values.json").read_text())


@pytest.fixture(scope="session")
def toy_samples():
    return generate_synthetic(SyntheticSpec(n_samples=8, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
