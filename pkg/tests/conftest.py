import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from promptmil.prompts import FixtureBackend, build_prompt_pack


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def nsclc_pack():
    return build_prompt_pack(["LUAD", "LUSC"], 4, FixtureBackend())


@pytest.fixture(scope="session")
def four_class_pack():
    return build_prompt_pack(["alpha", "beta", "gamma", "delta"], 3, FixtureBackend())
